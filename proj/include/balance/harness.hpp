#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <tuple>
#include <string>
#include <vector>

#include "balance/config.hpp"

namespace balance {

/// One (method, learner, estimator, estimand) combination evaluated per
/// replication. EB, KOM and TLF only carry a learner for AWA, where it
/// supplies the response surfaces.
struct Combination {
  Method method = Method::iptw;
  std::optional<LearnerKind> learner;
  EstimatorKind estimator = EstimatorKind::WA;
  Estimand estimand = Estimand::ATE;
};

std::vector<Combination> planned_combinations(const RunConfig& config);

struct ReplicationRecord {
  std::string scenario_id;
  ScenarioKey scenario;
  int replication = 0;
  Combination combo;
  double value = 0.0;  // NaN when no estimate could be formed
  std::optional<double> se;
  std::optional<std::pair<double, double>> ci95;
  bool valid = false;
  // Empty when valid. Otherwise one of: out_of_range, solver_max_iter,
  // solver_infeasible, empty_group, numeric, domain, generation, error.
  std::string reason;
  WeightDiagnostics diagnostics;
  double wall_ms = 0.0;
};

std::string learner_label(const std::optional<LearnerKind>& learner);

struct MetricsSummary {
  std::size_t count = 0;
  std::size_t valid_count = 0;
  std::size_t range_failures = 0;
  std::size_t solver_failures = 0;
  std::size_t other_failures = 0;
  double valid_pct = 0.0;  // percentage, 0..100
  std::optional<double> bias;
  std::optional<double> mae;
  std::optional<double> spread_rmse;  // standard deviation of valid estimates
  std::optional<double> var;          // population variance of valid estimates
  std::optional<double> rmse_truth;
  std::optional<double> coverage;     // fraction, 0..1
  std::size_t coverage_skipped = 0;   // valid records without an interval
};

/// Moments over the estimates inside [-bound, bound]; the rest only lower
/// valid_pct.
MetricsSummary summarize_values(const std::vector<double>& estimates, double truth = 0.0,
                                double bound = 1.0);

struct CoverageResult {
  std::optional<double> rate;
  std::size_t counted = 0;
  std::size_t skipped = 0;
};

/// Fraction of valid records whose interval contains `truth`.
CoverageResult coverage_rate(const std::vector<ReplicationRecord>& records, double truth = 0.0);

struct CellKey {
  ScenarioKey scenario;
  EstimatorKind estimator = EstimatorKind::WA;
  Method method = Method::iptw;
  std::string learner;
  Estimand estimand = Estimand::ATE;
  auto tie() const {
    return std::tuple(scenario.n, static_cast<int>(scenario.rarity),
                      static_cast<int>(scenario.confounding), static_cast<int>(estimand),
                      static_cast<int>(method), learner, static_cast<int>(estimator));
  }
  bool operator<(const CellKey& o) const { return tie() < o.tie(); }
  bool operator==(const CellKey& o) const { return tie() == o.tie(); }
};

struct CellSummary {
  CellKey key;
  MetricsSummary metrics;
};

/// Groups records by cell and summarizes each. Coverage is filled for OLS
/// cells only.
std::vector<CellSummary> summarize(const std::vector<ReplicationRecord>& records,
                                   double truth = 0.0);

/// Records of one replication, in planned_combinations order.
std::vector<ReplicationRecord> run_replication(const RunConfig& config, const ScenarioSpec& spec,
                                               int replication,
                                               const std::map<Estimand, TlfHyper>& tlf_hyper);

struct ScenarioResult {
  ScenarioKey key;
  std::vector<ReplicationRecord> records;  // ordered by replication
  double crude_bias = 0.0;                 // mean crude estimate over replications
  std::map<Estimand, TlfHyper> tlf_hyper;
  double seconds = 0.0;
};

/// Hyperparameters for one scenario and estimand, chosen by cross validation
/// on dedicated calibration datasets (mode over config.tlf_calibration).
TlfHyper calibrate_tlf(const RunConfig& config, const ScenarioSpec& spec, Estimand estimand);

ScenarioResult run_scenario(const RunConfig& config, const ScenarioKey& key,
                            TlfHyperCache& cache);

struct RunResult {
  std::vector<ScenarioResult> scenarios;
  std::vector<CellSummary> summaries;
  double seconds = 0.0;
};

/// Runs every scenario; one progress line per scenario goes to `progress`
/// when non-null.
RunResult run(const RunConfig& config, std::ostream* progress = nullptr);

/// Summary CSV text, 6 significant digits, absent values left empty.
std::string summary_csv(const std::vector<CellSummary>& summaries);
std::vector<CellSummary> parse_summary_csv(std::istream& in);

std::string record_json(const ReplicationRecord& record, bool include_timing = true);

/// Writes summary.csv, manifest.txt and, with emit_raw, records.ndjson into
/// config.output_path.
void emit_results(const RunResult& result, const RunConfig& config);

/// Worker count from the BALANCE_WORKERS environment variable, if set.
std::optional<int> workers_from_environment();

}  // namespace balance
