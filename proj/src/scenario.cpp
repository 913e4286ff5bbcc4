#include "balance/scenario.hpp"

#include <algorithm>

#include <cmath>
#include <fstream>
#include <iomanip>

#include "balance/errors.hpp"

namespace balance {

namespace {

struct ConfoundingConstants {
  double a0;
  double g;
};

ConfoundingConstants constants_for(Confounding c) {
  switch (c) {
    case Confounding::low: return {-1.5, 1.0};
    case Confounding::moderate: return {-2.22, 2.25};
    case Confounding::high: return {-4.1, 5.0};
  }
  throw ConfigError("unknown confounding level");
}

double intercept_for(Rarity r) {
  switch (r) {
    case Rarity::common: return -1.84;
    case Rarity::rare: return -4.12;
    case Rarity::very_rare: return -6.5;
  }
  throw ConfigError("unknown rarity level");
}

// 0-based pairs with nonzero latent correlation.
struct Correlation {
  int i;
  int j;
  double rho;
};
constexpr std::array<Correlation, 4> kCorrelations = {{
    {0, 4, 0.2},
    {2, 7, 0.2},
    {1, 5, 0.9},
    {3, 8, 0.9},
}};

Eigen::MatrixXd standard_covariance() {
  Eigen::MatrixXd c = Eigen::MatrixXd::Identity(kNumCovariates, kNumCovariates);
  for (const auto& [i, j, rho] : kCorrelations) {
    c(i, j) = rho;
    c(j, i) = rho;
  }
  return c;
}

// Treatment: b0 + g (x.b + 1/2 x1 x2^2); outcome: a0 + g (x.a + 1/2 x3 x4^2).
double treatment_index(const ScenarioSpec& spec, const Eigen::Ref<const Eigen::RowVectorXd>& row) {
  const double lin = row.dot(CovariateModel::treatment_coefficients().transpose());
  return spec.b0 + spec.g * (lin + 0.5 * row(0) * row(1) * row(1));
}

double outcome_index(const ScenarioSpec& spec, const Eigen::Ref<const Eigen::RowVectorXd>& row) {
  const double lin = row.dot(CovariateModel::outcome_coefficients().transpose());
  return spec.a0 + spec.g * (lin + 0.5 * row(2) * row(3) * row(3));
}

}  // namespace

Rarity parse_rarity(std::string_view label) {
  if (label == "common") return Rarity::common;
  if (label == "rare") return Rarity::rare;
  if (label == "very_rare" || label == "very-rare") return Rarity::very_rare;
  throw ConfigError("unknown treatment rarity '" + std::string(label) +
                    "' (expected common, rare or very_rare)");
}

Confounding parse_confounding(std::string_view label) {
  if (label == "low") return Confounding::low;
  if (label == "moderate") return Confounding::moderate;
  if (label == "high") return Confounding::high;
  throw ConfigError("unknown confounding level '" + std::string(label) +
                    "' (expected low, moderate or high)");
}

std::string to_string(Rarity r) {
  switch (r) {
    case Rarity::common: return "common";
    case Rarity::rare: return "rare";
    case Rarity::very_rare: return "very_rare";
  }
  return "?";
}

std::string to_string(Confounding c) {
  switch (c) {
    case Confounding::low: return "low";
    case Confounding::moderate: return "moderate";
    case Confounding::high: return "high";
  }
  return "?";
}

std::uint64_t ScenarioSpec::grid_index() const {
  const auto cell = static_cast<std::uint64_t>(static_cast<int>(rarity) * 3 +
                                               static_cast<int>(confounding));
  for (std::size_t k = 0; k < kGridSampleSizes.size(); ++k) {
    if (kGridSampleSizes[k] == n) return k * 9 + cell;
  }
  return splitmix64(static_cast<std::uint64_t>(n)) * 9 + cell;
}

std::string ScenarioSpec::id() const {
  return "n" + std::to_string(n) + "_" + to_string(rarity) + "_" + to_string(confounding);
}

ScenarioSpec build_scenario(Rarity rarity, Confounding confounding, int n, std::uint64_t seed) {
  if (n < kMinSampleSize) {
    throw DomainError("sample size " + std::to_string(n) + " is below the minimum of " +
                      std::to_string(kMinSampleSize));
  }
  const auto [a0, g] = constants_for(confounding);
  ScenarioSpec spec;
  spec.n = n;
  spec.rarity = rarity;
  spec.confounding = confounding;
  spec.a0 = a0;
  spec.g = g;
  spec.b0 = intercept_for(rarity);
  spec.seed = seed;
  return spec;
}

ScenarioSpec build_scenario(std::string_view rarity, std::string_view confounding, int n,
                            std::uint64_t seed) {
  return build_scenario(parse_rarity(rarity), parse_confounding(confounding), n, seed);
}

CovariateModel::CovariateModel() : CovariateModel(standard_covariance()) {}

CovariateModel::CovariateModel(const Eigen::MatrixXd& covariance) : covariance_(covariance) {
  if (covariance.rows() != kNumCovariates || covariance.cols() != kNumCovariates) {
    throw ShapeError("covariance must be 10 x 10");
  }
  Eigen::LLT<Eigen::MatrixXd> llt(covariance_);
  if (llt.info() != Eigen::Success) {
    throw NumericError("covariance matrix is not positive definite");
  }
  lower_ = llt.matrixL();
}

const CovariateModel& CovariateModel::standard() {
  static const CovariateModel model;
  return model;
}

bool CovariateModel::is_continuous(int column) {
  return column == 1 || column == 3 || column == 6;
}

const Eigen::Matrix<double, kNumCovariates, 1>& CovariateModel::outcome_coefficients() {
  static const Eigen::Matrix<double, kNumCovariates, 1> a =
      (Eigen::Matrix<double, kNumCovariates, 1>() << 0.3, -0.36, -0.73, -0.2, 0, 0, 0, 0.71, -0.19,
       0.26)
          .finished();
  return a;
}

const Eigen::Matrix<double, kNumCovariates, 1>& CovariateModel::treatment_coefficients() {
  static const Eigen::Matrix<double, kNumCovariates, 1> b =
      (Eigen::Matrix<double, kNumCovariates, 1>() << 0.8, -0.25, 0.6, -0.4, -0.8, -0.5, 0.7, 0, 0,
       0)
          .finished();
  return b;
}

Eigen::MatrixXd sample_latent(const CovariateModel& model, int n, Rng& rng) {
  if (n < 1) throw DomainError("cannot sample fewer than one row");
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd z(n, kNumCovariates);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < kNumCovariates; ++j) z(i, j) = normal(rng);
  }
  // Rows are iid N(0, L L^T).
  return z * model.cholesky_factor().transpose();
}

Eigen::MatrixXd dichotomize(const Eigen::MatrixXd& latent) {
  Eigen::MatrixXd x = latent;
  for (int j = 0; j < x.cols(); ++j) {
    if (CovariateModel::is_continuous(j)) continue;
    x.col(j) = (latent.col(j).array() > 0.0).cast<double>();
  }
  return x;
}

Eigen::MatrixXd sample_covariates(const CovariateModel& model, int n, Rng& rng) {
  return dichotomize(sample_latent(model, n, rng));
}

double logistic(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

double logit(double p) { return std::log(p / (1.0 - p)); }

double true_propensity(const ScenarioSpec& spec, const Eigen::Ref<const Eigen::RowVectorXd>& row) {
  if (row.size() != kNumCovariates) throw ShapeError("covariate row must have 10 entries");
  return std::clamp(logistic(treatment_index(spec, row)), kProbabilityClamp, 1.0 - kProbabilityClamp);
}

double true_response(const ScenarioSpec& spec, const Eigen::Ref<const Eigen::RowVectorXd>& row) {
  if (row.size() != kNumCovariates) throw ShapeError("covariate row must have 10 entries");
  return std::clamp(logistic(outcome_index(spec, row)), kProbabilityClamp, 1.0 - kProbabilityClamp);
}

SimulatedDataset generate_dataset(const ScenarioSpec& spec, Rng& rng) {
  if (spec.n < 1) throw DomainError("scenario has no observations");
  const auto& model = CovariateModel::standard();
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const int n = spec.n;

  for (int attempt = 0; attempt <= kMaxConsecutiveRejections; ++attempt) {
    SimulatedDataset d;
    d.x = sample_covariates(model, n, rng);
    d.t.resize(n);
    d.y.resize(n);
    d.y0.resize(n);
    d.y1.resize(n);
    d.e_true.resize(n);
    d.mu_true.resize(n);
    for (int i = 0; i < n; ++i) {
      const double e = true_propensity(spec, d.x.row(i));
      const double mu = true_response(spec, d.x.row(i));
      d.e_true(i) = e;
      d.mu_true(i) = mu;
      d.y0(i) = unif(rng) < mu ? 1.0 : 0.0;
      d.y1(i) = unif(rng) < mu ? 1.0 : 0.0;
      d.t(i) = unif(rng) < e ? 1.0 : 0.0;
      d.y(i) = d.t(i) * d.y1(i) + (1.0 - d.t(i)) * d.y0(i);
    }
    d.n1 = static_cast<int>(d.t.sum());
    d.n0 = n - d.n1;
    d.rejections = attempt;
    if (d.n1 >= 1 && d.n0 >= 1) return d;
  }
  throw GenerationError("scenario " + spec.id() + " produced an empty treatment arm " +
                        std::to_string(kMaxConsecutiveRejections + 1) + " times in a row");
}

double crude_estimate(const Eigen::VectorXd& y, const Eigen::VectorXd& t) {
  if (y.size() != t.size()) throw ShapeError("outcome and treatment lengths differ");
  const double n1 = t.sum();
  const double n0 = static_cast<double>(t.size()) - n1;
  if (n1 < 1 || n0 < 1) throw DomainError("crude estimate needs both groups nonempty");
  const double treated = t.dot(y);
  const double control = y.sum() - treated;
  return treated / n1 - control / n0;
}

double crude_estimate(const SimulatedDataset& data) { return crude_estimate(data.y, data.t); }

void write_dataset_csv(const SimulatedDataset& data, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  for (int j = 1; j <= kNumCovariates; ++j) out << 'x' << j << ',';
  out << "t,y,y0,y1,e_true,mu_true\n";
  out << std::setprecision(17);
  for (int i = 0; i < data.size(); ++i) {
    for (int j = 0; j < kNumCovariates; ++j) out << data.x(i, j) << ',';
    out << data.t(i) << ',' << data.y(i) << ',' << data.y0(i) << ',' << data.y1(i) << ','
        << data.e_true(i) << ',' << data.mu_true(i) << '\n';
  }
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace balance
