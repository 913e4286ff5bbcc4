#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "balance/balancers.hpp"
#include "balance/estimators.hpp"
#include "balance/learners.hpp"
#include "balance/scenario.hpp"

namespace balance {

struct ScenarioKey {
  int n = 500;
  Rarity rarity = Rarity::common;
  Confounding confounding = Confounding::low;
  bool operator==(const ScenarioKey&) const = default;
};

struct RunConfig {
  std::vector<int> sizes = {500};
  std::vector<Rarity> rarities = {Rarity::common};
  std::vector<Confounding> confoundings = {Confounding::low};
  bool grid = false;  // every grid sample size, rarity and confounding level
  int replications = 5000;
  std::vector<Method> methods = {Method::iptw, Method::eb, Method::kom, Method::tlf};
  std::vector<LearnerKind> learners = {LearnerKind::oracle, LearnerKind::logistic_well,
                                       LearnerKind::logistic_mis};
  std::vector<EstimatorKind> estimators = {EstimatorKind::WA, EstimatorKind::AWA,
                                           EstimatorKind::OLS};
  std::vector<Estimand> estimands = {Estimand::ATE, Estimand::ATT};
  PostProc iptw_postproc = PostProc::trim99;
  std::uint64_t master_seed = 20240101;
  int workers = 1;
  std::filesystem::path output_path;
  bool emit_raw = false;
  bool dump_weights = false;  // per-replication weight CSVs under <out>/weights
  // TLF hyperparameter search.
  std::vector<double> tlf_lambdas = TlfGrid{}.lambdas;
  std::vector<double> tlf_gammas = TlfGrid{}.gammas;
  int tlf_folds = 5;
  int tlf_calibration = 1;  // datasets whose selections are pooled by mode

  /// Scenario cells in run order (n-major, then rarity, then confounding).
  std::vector<ScenarioKey> scenarios() const;
  TlfGrid tlf_grid() const;
  /// Throws ConfigError on empty selections or out-of-range values.
  void validate() const;
};

/// Keys accepted in configuration files; each has a matching CLI flag.
const std::vector<std::string>& config_keys();

/// Sets one key from its textual value. Unknown keys and bad values throw
/// ConfigError.
void apply_config_value(RunConfig& config, const std::string& key, const std::string& value);

/// Parses `key = value` lines. Blank lines and lines starting with '#' are
/// skipped.
void load_config(RunConfig& config, std::istream& in);
void load_config_file(RunConfig& config, const std::filesystem::path& path);

/// Inverse of load_config: every key, one per line.
std::string to_config_text(const RunConfig& config);

}  // namespace balance
