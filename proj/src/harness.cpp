#include "balance/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "balance/errors.hpp"
#include "balance/rng.hpp"

namespace balance {

namespace {

using Clock = std::chrono::steady_clock;

constexpr std::uint64_t kTlfStream = 0x544C4643414C4942ull;

double elapsed_ms(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

std::string format6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

std::string format6(const std::optional<double>& v) { return v ? format6(*v) : std::string(); }

bool needs_surfaces(const RunConfig& config) {
  return std::find(config.estimators.begin(), config.estimators.end(), EstimatorKind::AWA) !=
         config.estimators.end();
}

bool has_method(const RunConfig& config, Method m) {
  return std::find(config.methods.begin(), config.methods.end(), m) != config.methods.end();
}

// Either a weighting or the reason it could not be produced.
struct WeightOutcome {
  std::optional<BalanceWeights> weights;
  std::string reason;
  double ms = 0.0;
};

template <typename F>
std::string classify_failure(F&& f) {
  try {
    f();
    return {};
  } catch (const EstimationError&) {
    return "empty_group";
  } catch (const NumericError&) {
    return "numeric";
  } catch (const DomainError&) {
    return "domain";
  } catch (const std::exception&) {
    return "error";
  }
}

template <typename F>
WeightOutcome compute_weights(F&& f) {
  WeightOutcome out;
  const auto start = Clock::now();
  out.reason = classify_failure([&] { out.weights = f(); });
  out.ms = elapsed_ms(start);
  if (out.weights && !out.weights->solver_ok()) {
    out.reason = "solver_" + out.weights->diagnostics.solver_status;
  }
  return out;
}

struct Nuisance {
  std::optional<Learner> propensity;
  std::optional<ResponseSurfaces> surfaces;
  std::string reason;
};

}  // namespace

std::string learner_label(const std::optional<LearnerKind>& learner) {
  return learner ? to_string(*learner) : std::string("none");
}

std::vector<Combination> planned_combinations(const RunConfig& config) {
  std::vector<Combination> out;
  for (Estimand estimand : config.estimands) {
    for (Method method : config.methods) {
      for (EstimatorKind estimator : config.estimators) {
        const bool crossed = method == Method::iptw || estimator == EstimatorKind::AWA;
        if (crossed) {
          for (LearnerKind learner : config.learners) {
            out.push_back({method, learner, estimator, estimand});
          }
        } else {
          out.push_back({method, std::nullopt, estimator, estimand});
        }
      }
    }
  }
  return out;
}

MetricsSummary summarize_values(const std::vector<double>& estimates, double truth, double bound) {
  MetricsSummary s;
  s.count = estimates.size();
  std::vector<double> valid;
  for (double v : estimates) {
    if (std::isfinite(v) && std::abs(v) <= bound) {
      valid.push_back(v);
    } else {
      ++s.range_failures;
    }
  }
  s.valid_count = valid.size();
  s.valid_pct = s.count ? 100.0 * static_cast<double>(s.valid_count) / static_cast<double>(s.count)
                        : 0.0;
  if (valid.empty()) return s;
  const double m = static_cast<double>(valid.size());
  double sum = 0.0, abs_err = 0.0, sq_err = 0.0;
  for (double v : valid) {
    sum += v;
    abs_err += std::abs(v - truth);
    sq_err += (v - truth) * (v - truth);
  }
  const double mean = sum / m;
  double var = 0.0;
  for (double v : valid) var += (v - mean) * (v - mean);
  var /= m;
  s.bias = mean - truth;
  s.mae = abs_err / m;
  s.var = var;
  s.spread_rmse = std::sqrt(var);
  s.rmse_truth = std::sqrt(sq_err / m);
  return s;
}

CoverageResult coverage_rate(const std::vector<ReplicationRecord>& records, double truth) {
  CoverageResult out;
  std::size_t hits = 0;
  for (const auto& r : records) {
    if (!r.valid) continue;
    if (!r.ci95) {
      ++out.skipped;
      continue;
    }
    ++out.counted;
    if (r.ci95->first <= truth && truth <= r.ci95->second) ++hits;
  }
  if (out.counted) out.rate = static_cast<double>(hits) / static_cast<double>(out.counted);
  return out;
}

std::vector<CellSummary> summarize(const std::vector<ReplicationRecord>& records, double truth) {
  std::map<CellKey, std::vector<const ReplicationRecord*>> cells;
  for (const auto& r : records) {
    CellKey key{r.scenario, r.combo.estimator, r.combo.method, learner_label(r.combo.learner),
                r.combo.estimand};
    cells[key].push_back(&r);
  }
  std::vector<CellSummary> out;
  for (const auto& [key, group] : cells) {
    std::vector<double> valid_values;
    std::vector<ReplicationRecord> valid_records;
    MetricsSummary extra;
    for (const auto* r : group) {
      if (r->valid) {
        valid_values.push_back(r->value);
        valid_records.push_back(*r);
      } else if (r->reason == "out_of_range") {
        ++extra.range_failures;
      } else if (r->reason.rfind("solver_", 0) == 0) {
        ++extra.solver_failures;
      } else {
        ++extra.other_failures;
      }
    }
    MetricsSummary m = summarize_values(valid_values, truth, std::numeric_limits<double>::max());
    m.count = group.size();
    m.valid_pct = 100.0 * static_cast<double>(m.valid_count) / static_cast<double>(m.count);
    m.range_failures = extra.range_failures;
    m.solver_failures = extra.solver_failures;
    m.other_failures = extra.other_failures;
    if (key.estimator == EstimatorKind::OLS) {
      const CoverageResult cov = coverage_rate(valid_records, truth);
      m.coverage = cov.rate;
      m.coverage_skipped = cov.skipped;
    }
    out.push_back({key, m});
  }
  return out;
}

std::vector<ReplicationRecord> run_replication(const RunConfig& config, const ScenarioSpec& spec,
                                               int replication,
                                               const std::map<Estimand, TlfHyper>& tlf_hyper) {
  const std::vector<Combination> combos = planned_combinations(config);
  const ScenarioKey key{spec.n, spec.rarity, spec.confounding};
  std::vector<ReplicationRecord> records;
  records.reserve(combos.size());
  for (const auto& c : combos) {
    ReplicationRecord r;
    r.scenario_id = spec.id();
    r.scenario = key;
    r.replication = replication;
    r.combo = c;
    r.value = std::numeric_limits<double>::quiet_NaN();
    records.push_back(std::move(r));
  }

  Rng rng(derive_seed(config.master_seed, spec.grid_index(), static_cast<std::uint64_t>(replication)));
  SimulatedDataset data;
  try {
    data = generate_dataset(spec, rng);
  } catch (const std::exception&) {
    for (auto& r : records) r.reason = "generation";
    return records;
  }

  // Nuisance models, fitted once per learner kind.
  std::map<LearnerKind, Nuisance> nuisance;
  const bool want_propensity = has_method(config, Method::iptw);
  const bool want_surfaces = needs_surfaces(config);
  for (LearnerKind kind : config.learners) {
    Nuisance nu;
    nu.reason = classify_failure([&] {
      if (want_propensity) {
        nu.propensity = fit_learner(kind, spec, Target::propensity, data.x, data.t);
      }
      if (want_surfaces) {
        std::vector<int> ctrl, trt;
        for (int i = 0; i < data.size(); ++i) (data.t(i) == 1.0 ? trt : ctrl).push_back(i);
        const Eigen::MatrixXd x0 = data.x(ctrl, Eigen::all);
        const Eigen::MatrixXd x1 = data.x(trt, Eigen::all);
        const Eigen::VectorXd y0 = data.y(ctrl);
        const Eigen::VectorXd y1 = data.y(trt);
        const Learner m0 = fit_learner(kind, spec, Target::outcome, x0, y0);
        const Learner m1 = fit_learner(kind, spec, Target::outcome, x1, y1);
        nu.surfaces = ResponseSurfaces{m0.predict(data.x), m1.predict(data.x)};
      }
    });
    nuisance.emplace(kind, std::move(nu));
  }

  // Weightings keyed by (method, estimand, learner for IPTW).
  std::map<std::tuple<int, int, int>, WeightOutcome> weights;
  auto weights_for = [&](const Combination& c) -> const WeightOutcome& {
    const int learner_slot =
        c.method == Method::iptw && c.learner ? static_cast<int>(*c.learner) : -1;
    const auto wkey = std::tuple(static_cast<int>(c.method), static_cast<int>(c.estimand),
                                 learner_slot);
    auto it = weights.find(wkey);
    if (it != weights.end()) return it->second;
    WeightOutcome out;
    switch (c.method) {
      case Method::iptw: {
        const Nuisance& nu = nuisance.at(*c.learner);
        if (!nu.propensity) {
          out.reason = nu.reason.empty() ? "error" : nu.reason;
          break;
        }
        out = compute_weights([&] {
          return iptw_weights(nu.propensity->predict(data.x), data.t, c.estimand,
                              config.iptw_postproc);
        });
        break;
      }
      case Method::eb:
        out = compute_weights([&] { return energy_balance(data.x, data.t, c.estimand); });
        break;
      case Method::kom:
        out = compute_weights([&] { return kom_weights(data.x, data.t, data.y, c.estimand); });
        break;
      case Method::tlf:
        out = compute_weights([&] {
          return tlf_weights(data.x, data.t, c.estimand, tlf_hyper.at(c.estimand));
        });
        break;
    }
    if (config.dump_weights && out.weights) {
      const std::filesystem::path dir = config.output_path / "weights";
      std::filesystem::create_directories(dir);
      std::string name = spec.id() + "_rep" + std::to_string(replication) + "_" +
                         to_string(c.method) + "_" + to_string(c.estimand);
      if (learner_slot >= 0) name += "_" + to_string(*c.learner);
      std::ofstream file(dir / (name + ".csv"));
      write_weights_csv(file, *out.weights);
    }
    return weights.emplace(wkey, std::move(out)).first->second;
  };

  for (auto& r : records) {
    const Combination& c = r.combo;
    const WeightOutcome& w = weights_for(c);
    r.wall_ms = w.ms;
    if (w.weights) r.diagnostics = w.weights->diagnostics;
    if (!w.weights) {
      r.reason = w.reason;
      continue;
    }
    const auto start = Clock::now();
    std::optional<EffectEstimate> est;
    std::string reason = classify_failure([&] {
      switch (c.estimator) {
        case EstimatorKind::WA:
          est = weighted_average(data.y, data.t, *w.weights);
          break;
        case EstimatorKind::OLS:
          est = weighted_ols(data.y, data.t, *w.weights);
          break;
        case EstimatorKind::AWA: {
          const Nuisance& nu = nuisance.at(*c.learner);
          if (!nu.surfaces) throw NumericError("response surfaces unavailable");
          est = augmented_weighted_average(data.y, data.t, *w.weights, *nu.surfaces);
          break;
        }
      }
    });
    r.wall_ms += elapsed_ms(start);
    if (est) {
      r.value = est->value;
      r.se = est->se;
      r.ci95 = est->ci95;
    }
    if (reason.empty()) reason = w.reason;  // solver status
    if (reason.empty() && !(est && est->valid)) reason = "out_of_range";
    r.reason = reason;
    r.valid = reason.empty();
  }
  return records;
}

TlfHyper calibrate_tlf(const RunConfig& config, const ScenarioSpec& spec, Estimand estimand) {
  const TlfGrid grid = config.tlf_grid();
  std::vector<int> votes(grid.lambdas.size() * grid.gammas.size(), 0);
  for (int k = 0; k < config.tlf_calibration; ++k) {
    const std::uint64_t seed =
        derive_seed(config.master_seed ^ kTlfStream, spec.grid_index(),
                    static_cast<std::uint64_t>(k) * 2 + (estimand == Estimand::ATT ? 1 : 0));
    Rng rng(seed);
    const SimulatedDataset data = generate_dataset(spec, rng);
    const TlfSelection sel = select_tlf_hyper(data.x, data.t, estimand, grid, splitmix64(seed));
    for (std::size_t a = 0; a < grid.lambdas.size(); ++a) {
      for (std::size_t b = 0; b < grid.gammas.size(); ++b) {
        if (grid.lambdas[a] == sel.best.lambda && grid.gammas[b] == sel.best.gamma) {
          ++votes[a * grid.gammas.size() + b];
        }
      }
    }
  }
  const auto best = static_cast<std::size_t>(
      std::max_element(votes.begin(), votes.end()) - votes.begin());
  return {grid.lambdas[best / grid.gammas.size()], grid.gammas[best % grid.gammas.size()]};
}

ScenarioResult run_scenario(const RunConfig& config, const ScenarioKey& key,
                            TlfHyperCache& cache) {
  const auto start = Clock::now();
  const ScenarioSpec spec = build_scenario(key.rarity, key.confounding, key.n, config.master_seed);
  ScenarioResult result;
  result.key = key;
  if (has_method(config, Method::tlf)) {
    for (Estimand e : config.estimands) {
      result.tlf_hyper[e] =
          cache.get_or_compute({spec.id(), e}, [&] { return calibrate_tlf(config, spec, e); });
    }
  }

  const int reps = config.replications;
  std::vector<std::vector<ReplicationRecord>> per_rep(static_cast<std::size_t>(reps));
  std::vector<double> crude(static_cast<std::size_t>(reps), 0.0);
  std::atomic<int> next{0};
  auto worker = [&] {
    for (int rep = next++; rep < reps; rep = next++) {
      per_rep[static_cast<std::size_t>(rep)] = run_replication(config, spec, rep, result.tlf_hyper);
      // Crude estimate on the same dataset, regenerated from its seed.
      Rng rng(derive_seed(config.master_seed, spec.grid_index(), static_cast<std::uint64_t>(rep)));
      try {
        crude[static_cast<std::size_t>(rep)] = crude_estimate(generate_dataset(spec, rng));
      } catch (const std::exception&) {
        crude[static_cast<std::size_t>(rep)] = std::numeric_limits<double>::quiet_NaN();
      }
    }
  };
  const int n_workers = std::max(1, std::min(config.workers, reps));
  if (n_workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int i = 0; i < n_workers; ++i) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  for (auto& recs : per_rep) {
    for (auto& r : recs) result.records.push_back(std::move(r));
  }
  double sum = 0.0;
  int count = 0;
  for (double c : crude) {
    if (std::isfinite(c)) {
      sum += c;
      ++count;
    }
  }
  result.crude_bias = count ? sum / count : std::numeric_limits<double>::quiet_NaN();
  result.seconds = elapsed_ms(start) / 1000.0;
  return result;
}

RunResult run(const RunConfig& config, std::ostream* progress) {
  config.validate();
  const auto start = Clock::now();
  RunResult result;
  TlfHyperCache cache;
  const auto scenarios = config.scenarios();
  std::vector<ReplicationRecord> all;
  for (std::size_t s = 0; s < scenarios.size(); ++s) {
    ScenarioResult sr = run_scenario(config, scenarios[s], cache);
    if (progress) {
      std::size_t valid = 0;
      for (const auto& r : sr.records) valid += r.valid ? 1 : 0;
      *progress << "[" << s + 1 << "/" << scenarios.size() << "] n=" << sr.key.n
                << " rarity=" << to_string(sr.key.rarity)
                << " confounding=" << to_string(sr.key.confounding)
                << " reps=" << config.replications << " records=" << sr.records.size()
                << " valid=" << valid << " crude_bias=" << format6(sr.crude_bias) << " ("
                << format6(sr.seconds) << " s)\n";
      progress->flush();
    }
    all.insert(all.end(), sr.records.begin(), sr.records.end());
    result.scenarios.push_back(std::move(sr));
  }
  result.summaries = summarize(all);
  result.seconds = elapsed_ms(start) / 1000.0;
  return result;
}

std::string summary_csv(const std::vector<CellSummary>& summaries) {
  std::ostringstream os;
  os << "scenario_n,rarity,confounding,estimator,method,learner,estimand,valid_pct,bias,mae,"
        "spread_rmse,var,rmse_truth,coverage\n";
  for (const auto& s : summaries) {
    const auto& k = s.key;
    const auto& m = s.metrics;
    os << k.scenario.n << ',' << to_string(k.scenario.rarity) << ','
       << to_string(k.scenario.confounding) << ',' << to_string(k.estimator) << ','
       << to_string(k.method) << ',' << k.learner << ',' << to_string(k.estimand) << ','
       << format6(m.valid_pct) << ',' << format6(m.bias) << ',' << format6(m.mae) << ','
       << format6(m.spread_rmse) << ',' << format6(m.var) << ',' << format6(m.rmse_truth) << ','
       << format6(m.coverage) << '\n';
  }
  return os.str();
}

std::vector<CellSummary> parse_summary_csv(std::istream& in) {
  std::vector<CellSummary> out;
  std::string line;
  if (!std::getline(in, line)) return out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string item;
    while (std::getline(ss, item, ',')) f.push_back(item);
    if (f.size() == 13) f.emplace_back();  // trailing empty coverage
    if (f.size() != 14) throw ConfigError("malformed summary row: " + line);
    auto opt = [](const std::string& s) -> std::optional<double> {
      if (s.empty()) return std::nullopt;
      return std::stod(s);
    };
    CellSummary c;
    c.key.scenario = {std::stoi(f[0]), parse_rarity(f[1]), parse_confounding(f[2])};
    c.key.estimator = parse_estimator(f[3]);
    c.key.method = parse_method(f[4]);
    c.key.learner = f[5];
    c.key.estimand = parse_estimand(f[6]);
    c.metrics.valid_pct = std::stod(f[7]);
    c.metrics.bias = opt(f[8]);
    c.metrics.mae = opt(f[9]);
    c.metrics.spread_rmse = opt(f[10]);
    c.metrics.var = opt(f[11]);
    c.metrics.rmse_truth = opt(f[12]);
    c.metrics.coverage = opt(f[13]);
    out.push_back(std::move(c));
  }
  return out;
}

std::string record_json(const ReplicationRecord& r, bool include_timing) {
  nlohmann::ordered_json j;
  j["scenario"] = r.scenario_id;
  j["replication"] = r.replication;
  j["method"] = to_string(r.combo.method);
  j["learner"] = learner_label(r.combo.learner);
  j["estimator"] = to_string(r.combo.estimator);
  j["estimand"] = to_string(r.combo.estimand);
  j["value"] = std::isfinite(r.value) ? nlohmann::ordered_json(r.value) : nlohmann::ordered_json();
  j["se"] = r.se ? nlohmann::ordered_json(*r.se) : nlohmann::ordered_json();
  if (r.ci95) {
    j["ci95"] = {r.ci95->first, r.ci95->second};
  } else {
    j["ci95"] = nullptr;
  }
  j["valid"] = r.valid;
  j["reason"] = r.reason;
  const auto& d = r.diagnostics;
  j["solver_status"] = d.solver_status;
  j["solver_iterations"] = d.solver_iterations;
  j["kkt_residual"] = d.kkt_residual;
  j["diagonal_shift"] = d.diagonal_shift;
  j["max_weight"] = d.max_weight;
  j["ess_treated"] = d.ess_treated;
  j["ess_control"] = d.ess_control;
  if (r.combo.method == Method::kom) {
    j["kernel_scale"] = d.kernel_scale;
    j["lambda0"] = d.lambda0;
    j["lambda1"] = d.lambda1;
    j["lambda_fallback"] = d.lambda_fallback;
  }
  if (include_timing) j["wall_ms"] = r.wall_ms;
  return j.dump();
}

void emit_results(const RunResult& result, const RunConfig& config) {
  namespace fs = std::filesystem;
  const fs::path dir = config.output_path;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create output directory " + dir.string() + ": " + ec.message());
  auto open = [](const fs::path& p) {
    std::ofstream out(p);
    if (!out) throw std::runtime_error("cannot write " + p.string());
    return out;
  };

  {
    auto out = open(dir / "summary.csv");
    out << summary_csv(result.summaries);
    if (!out) throw std::runtime_error("write failed: " + (dir / "summary.csv").string());
  }
  if (config.emit_raw) {
    auto out = open(dir / "records.ndjson");
    for (const auto& s : result.scenarios) {
      for (const auto& r : s.records) out << record_json(r) << '\n';
    }
    if (!out) throw std::runtime_error("write failed: " + (dir / "records.ndjson").string());
  }
  {
    auto out = open(dir / "manifest.txt");
    out << "# balance_bench run manifest\n"
        << "# version: " << BALANCE_VERSION << '\n'
        << "# compiler: " << __VERSION__ << '\n'
        << "# eigen: " << EIGEN_WORLD_VERSION << '.' << EIGEN_MAJOR_VERSION << '.'
        << EIGEN_MINOR_VERSION << '\n'
        << "# wall_time_s: " << format6(result.seconds) << '\n';
    for (const auto& s : result.scenarios) {
      out << "# scenario " << ScenarioSpec{s.key.n, s.key.rarity, s.key.confounding}.id()
          << ": crude_bias=" << format6(s.crude_bias) << " seconds=" << format6(s.seconds);
      for (const auto& [e, h] : s.tlf_hyper) {
        out << " tlf_" << to_string(e) << "=(" << format6(h.lambda) << ',' << format6(h.gamma)
            << ')';
      }
      out << '\n';
    }
    out << to_config_text(config);
    if (!out) throw std::runtime_error("write failed: " + (dir / "manifest.txt").string());
  }
}

std::optional<int> workers_from_environment() {
  const char* v = std::getenv("BALANCE_WORKERS");
  if (!v || !*v) return std::nullopt;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (*end != '\0' || n < 1) throw ConfigError("BALANCE_WORKERS must be a positive integer");
  return static_cast<int>(n);
}

}  // namespace balance
