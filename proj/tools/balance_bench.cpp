#include <CLI11.hpp>

#include <iostream>
#include <string>

#include "balance/config.hpp"
#include "balance/errors.hpp"
#include "balance/harness.hpp"

namespace {

constexpr int kConfigExit = 2;

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Monte Carlo benchmark of weighting estimators for binary outcomes"};
  std::string config_path;
  app.add_option("--config", config_path, "key=value configuration file");

  // Every flag is kept as text and applied through the same path as the
  // configuration file, so the file and the command line cannot diverge.
  struct Override {
    const char* flag;
    const char* key;
    const char* help;
    std::string value;
  };
  std::vector<Override> overrides = {
      {"--n", "n", "sample size(s), comma separated", {}},
      {"--rarity", "rarity", "common, rare, very_rare", {}},
      {"--confounding", "confounding", "low, moderate, high", {}},
      {"--reps", "reps", "replications per scenario", {}},
      {"--methods", "methods", "subset of iptw,eb,kom,tlf", {}},
      {"--learners", "learners", "subset of oracle,logistic_well,logistic_mis", {}},
      {"--estimators", "estimators", "subset of WA,AWA,OLS", {}},
      {"--estimands", "estimands", "subset of ATE,ATT", {}},
      {"--seed", "seed", "master seed", {}},
      {"--out", "out", "output directory", {}},
      {"--postproc", "postproc", "IPTW post-processing: trim99, hajek, none", {}},
      {"--workers", "workers", "worker threads (default: BALANCE_WORKERS or 1)", {}},
      {"--tlf-lambdas", "tlf_lambdas", "TLF penalty grid", {}},
      {"--tlf-gammas", "tlf_gammas", "TLF kernel rate grid", {}},
      {"--tlf-folds", "tlf_folds", "TLF cross-validation folds", {}},
      {"--tlf-calibration", "tlf_calibration", "TLF calibration datasets", {}},
  };
  for (auto& o : overrides) app.add_option(o.flag, o.value, o.help);
  bool emit_raw = false;
  bool grid = false;
  bool dump_weights = false;
  app.add_flag("--emit-raw", emit_raw, "write per-replication records (records.ndjson)");
  app.add_flag("--grid", grid, "run all 36 grid scenarios");
  app.add_flag("--dump-weights", dump_weights, "write per-replication weight CSVs");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kConfigExit;
  }

  balance::RunConfig config;
  try {
    if (!config_path.empty()) balance::load_config_file(config, config_path);
    if (const auto w = balance::workers_from_environment()) config.workers = *w;
    if (grid) {
      for (const auto& o : overrides) {
        const std::string key = o.key;
        if (!o.value.empty() && (key == "n" || key == "rarity" || key == "confounding")) {
          throw balance::ConfigError("--grid conflicts with " + std::string(o.flag));
        }
      }
      config.grid = true;
    }
    for (const auto& o : overrides) {
      if (!o.value.empty()) balance::apply_config_value(config, o.key, o.value);
    }
    if (emit_raw) config.emit_raw = true;
    if (dump_weights) config.dump_weights = true;
    config.validate();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kConfigExit;
  }

  try {
    const balance::RunResult result = balance::run(config, &std::cerr);
    balance::emit_results(result, config);
    std::cerr << "wrote " << result.summaries.size() << " summary rows to "
              << (config.output_path / "summary.csv").string() << '\n';
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
