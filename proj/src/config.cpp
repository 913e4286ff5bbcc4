#include "balance/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

#include "balance/errors.hpp"

namespace balance {

namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

std::vector<std::string> split_list(const std::string& value) {
  std::vector<std::string> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <typename T, typename Parse>
std::vector<T> parse_list(const std::string& key, const std::string& value, Parse parse) {
  std::vector<T> out;
  for (const auto& item : split_list(value)) {
    const T v = parse(item);
    if (std::find(out.begin(), out.end(), v) == out.end()) out.push_back(v);
  }
  if (out.empty()) throw ConfigError("'" + key + "' needs at least one value");
  return out;
}

long long parse_integer(const std::string& key, const std::string& text) {
  long long v = 0;
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end) {
    throw ConfigError("'" + key + "' expects an integer, got '" + text + "'");
  }
  return v;
}

std::uint64_t parse_unsigned(const std::string& key, const std::string& text) {
  std::uint64_t v = 0;
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end) {
    throw ConfigError("'" + key + "' expects a nonnegative integer, got '" + text + "'");
  }
  return v;
}

double parse_double(const std::string& key, const std::string& text) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(text, &pos);
    if (pos == text.size()) return v;
  } catch (const std::exception&) {
  }
  throw ConfigError("'" + key + "' expects a number, got '" + text + "'");
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "no") return false;
  throw ConfigError("'" + key + "' expects true or false, got '" + text + "'");
}

template <typename T, typename Fmt>
std::string join(const std::vector<T>& values, Fmt fmt) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += ',';
    out += fmt(values[i]);
  }
  return out;
}

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

std::vector<ScenarioKey> RunConfig::scenarios() const {
  std::vector<ScenarioKey> out;
  if (grid) {
    for (int n : kGridSampleSizes) {
      for (Rarity r : {Rarity::common, Rarity::rare, Rarity::very_rare}) {
        for (Confounding c : {Confounding::low, Confounding::moderate, Confounding::high}) {
          out.push_back({n, r, c});
        }
      }
    }
    return out;
  }
  for (int n : sizes) {
    for (Rarity r : rarities) {
      for (Confounding c : confoundings) out.push_back({n, r, c});
    }
  }
  return out;
}

TlfGrid RunConfig::tlf_grid() const {
  TlfGrid g;
  g.lambdas = tlf_lambdas;
  g.gammas = tlf_gammas;
  g.folds = tlf_folds;
  return g;
}

void RunConfig::validate() const {
  if (replications < 1) throw ConfigError("reps must be at least 1");
  if (workers < 1) throw ConfigError("workers must be at least 1");
  if (methods.empty() || learners.empty() || estimators.empty() || estimands.empty()) {
    throw ConfigError("methods, learners, estimators and estimands must be nonempty");
  }
  if (!grid && (sizes.empty() || rarities.empty() || confoundings.empty())) {
    throw ConfigError("n, rarity and confounding must be nonempty");
  }
  for (int n : sizes) {
    if (n < kMinSampleSize) {
      throw ConfigError("n must be at least " + std::to_string(kMinSampleSize));
    }
  }
  if (output_path.empty()) throw ConfigError("an output directory is required (--out)");
  if (tlf_lambdas.empty() || tlf_gammas.empty()) throw ConfigError("TLF grid must be nonempty");
  for (double v : tlf_lambdas) {
    if (!(v > 0.0)) throw ConfigError("tlf_lambdas must be positive");
  }
  for (double v : tlf_gammas) {
    if (!(v > 0.0)) throw ConfigError("tlf_gammas must be positive");
  }
  if (tlf_folds < 2) throw ConfigError("tlf_folds must be at least 2");
  if (tlf_calibration < 1) throw ConfigError("tlf_calibration must be at least 1");
}

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = {
      "n",          "rarity",      "confounding", "grid",      "reps",
      "methods",    "learners",    "estimators",  "estimands", "seed",
      "out",        "postproc",    "workers",     "emit_raw",  "tlf_lambdas",
      "tlf_gammas", "tlf_folds",   "tlf_calibration", "dump_weights"};
  return keys;
}

void apply_config_value(RunConfig& c, const std::string& key, const std::string& raw) {
  const std::string value = trim(raw);
  if (key == "n") {
    c.sizes = parse_list<int>(key, value, [&](const std::string& s) {
      return static_cast<int>(parse_integer(key, s));
    });
  } else if (key == "rarity") {
    c.rarities = parse_list<Rarity>(key, value, [](const std::string& s) { return parse_rarity(s); });
  } else if (key == "confounding") {
    c.confoundings = parse_list<Confounding>(
        key, value, [](const std::string& s) { return parse_confounding(s); });
  } else if (key == "grid") {
    c.grid = parse_bool(key, value);
  } else if (key == "reps") {
    c.replications = static_cast<int>(parse_integer(key, value));
  } else if (key == "methods") {
    c.methods = parse_list<Method>(key, value, [](const std::string& s) { return parse_method(s); });
  } else if (key == "learners") {
    c.learners = parse_list<LearnerKind>(
        key, value, [](const std::string& s) { return parse_learner_kind(s); });
  } else if (key == "estimators") {
    c.estimators = parse_list<EstimatorKind>(
        key, value, [](const std::string& s) { return parse_estimator(s); });
  } else if (key == "estimands") {
    c.estimands =
        parse_list<Estimand>(key, value, [](const std::string& s) { return parse_estimand(s); });
  } else if (key == "seed") {
    c.master_seed = parse_unsigned(key, value);
  } else if (key == "out") {
    c.output_path = value;
  } else if (key == "postproc") {
    c.iptw_postproc = parse_postproc(value);
  } else if (key == "workers") {
    c.workers = static_cast<int>(parse_integer(key, value));
  } else if (key == "emit_raw") {
    c.emit_raw = parse_bool(key, value);
  } else if (key == "dump_weights") {
    c.dump_weights = parse_bool(key, value);
  } else if (key == "tlf_lambdas") {
    c.tlf_lambdas = parse_list<double>(key, value, [&](const std::string& s) {
      return parse_double(key, s);
    });
  } else if (key == "tlf_gammas") {
    c.tlf_gammas = parse_list<double>(key, value, [&](const std::string& s) {
      return parse_double(key, s);
    });
  } else if (key == "tlf_folds") {
    c.tlf_folds = static_cast<int>(parse_integer(key, value));
  } else if (key == "tlf_calibration") {
    c.tlf_calibration = static_cast<int>(parse_integer(key, value));
  } else {
    throw ConfigError("unknown configuration key '" + key + "'");
  }
}

void load_config(RunConfig& config, std::istream& in) {
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string stripped = trim(line);
    if (stripped.empty() || stripped.front() == '#') continue;
    const auto eq = stripped.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(line_no) + ": expected key=value");
    }
    apply_config_value(config, trim(stripped.substr(0, eq)), stripped.substr(eq + 1));
  }
}

void load_config_file(RunConfig& config, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read configuration file " + path.string());
  load_config(config, in);
}

std::string to_config_text(const RunConfig& c) {
  auto num = [](int v) { return std::to_string(v); };
  std::ostringstream os;
  os << "n = " << join(c.sizes, num) << '\n'
     << "rarity = " << join(c.rarities, [](Rarity r) { return to_string(r); }) << '\n'
     << "confounding = " << join(c.confoundings, [](Confounding v) { return to_string(v); })
     << '\n'
     << "grid = " << (c.grid ? "true" : "false") << '\n'
     << "reps = " << c.replications << '\n'
     << "methods = " << join(c.methods, [](Method m) { return to_string(m); }) << '\n'
     << "learners = " << join(c.learners, [](LearnerKind k) { return to_string(k); }) << '\n'
     << "estimators = " << join(c.estimators, [](EstimatorKind k) { return to_string(k); })
     << '\n'
     << "estimands = " << join(c.estimands, [](Estimand e) { return to_string(e); }) << '\n'
     << "seed = " << c.master_seed << '\n'
     << "out = " << c.output_path.string() << '\n'
     << "postproc = " << to_string(c.iptw_postproc) << '\n'
     << "workers = " << c.workers << '\n'
     << "emit_raw = " << (c.emit_raw ? "true" : "false") << '\n'
     << "dump_weights = " << (c.dump_weights ? "true" : "false") << '\n'
     << "tlf_lambdas = " << join(c.tlf_lambdas, format_double) << '\n'
     << "tlf_gammas = " << join(c.tlf_gammas, format_double) << '\n'
     << "tlf_folds = " << c.tlf_folds << '\n'
     << "tlf_calibration = " << c.tlf_calibration << '\n';
  return os.str();
}

}  // namespace balance
