#include "balance/estimators.hpp"

#include <cmath>

#include "balance/errors.hpp"

namespace balance {

namespace {

constexpr double kZ95 = 1.96;

void check_lengths(const Eigen::VectorXd& y, const Eigen::VectorXd& t, const BalanceWeights& w) {
  if (y.size() != t.size() || w.values.size() != t.size() ||
      w.kept.size() != static_cast<std::size_t>(t.size())) {
    throw ShapeError("outcome, treatment and weight lengths differ");
  }
}

bool kept(const BalanceWeights& w, Eigen::Index i) { return w.kept[static_cast<std::size_t>(i)]; }

// Kept treated and control counts; throws when a kept group is empty.
std::pair<int, int> kept_groups(const Eigen::VectorXd& t, const BalanceWeights& w) {
  int n1 = 0, n0 = 0;
  for (Eigen::Index i = 0; i < t.size(); ++i) {
    if (!kept(w, i)) continue;
    (t(i) == 1.0 ? n1 : n0)++;
  }
  if (n1 == 0 || n0 == 0) throw EstimationError("a treatment group has no kept observations");
  return {n0, n1};
}

EffectEstimate make_estimate(double value, Estimand estimand, EstimatorKind kind) {
  EffectEstimate est;
  est.value = value;
  est.estimand = estimand;
  est.estimator = kind;
  est.valid = within_bounds(value);
  return est;
}

// Weighted means of T and Y and the slope numerator/denominator.
struct WlsParts {
  double t_bar = 0.0;
  double y_bar = 0.0;
  double sxy = 0.0;
  double sxx = 0.0;
};

WlsParts wls_parts(const Eigen::VectorXd& y, const Eigen::VectorXd& t, const BalanceWeights& w) {
  double sw = 0.0, st = 0.0, sy = 0.0;
  for (Eigen::Index i = 0; i < t.size(); ++i) {
    if (!kept(w, i)) continue;
    sw += w.values(i);
    st += w.values(i) * t(i);
    sy += w.values(i) * y(i);
  }
  if (!(sw > 0.0)) throw EstimationError("weights sum to zero");
  WlsParts p;
  p.t_bar = st / sw;
  p.y_bar = sy / sw;
  for (Eigen::Index i = 0; i < t.size(); ++i) {
    if (!kept(w, i)) continue;
    const double dt = t(i) - p.t_bar;
    p.sxy += w.values(i) * dt * (y(i) - p.y_bar);
    p.sxx += w.values(i) * dt * dt;
  }
  if (!(p.sxx > 0.0)) throw EstimationError("weighted treatment variance is zero");
  return p;
}

}  // namespace

EstimatorKind parse_estimator(std::string_view label) {
  if (label == "WA" || label == "wa") return EstimatorKind::WA;
  if (label == "AWA" || label == "awa") return EstimatorKind::AWA;
  if (label == "OLS" || label == "ols") return EstimatorKind::OLS;
  throw ConfigError("unknown estimator '" + std::string(label) + "' (expected WA, AWA or OLS)");
}

std::string to_string(EstimatorKind kind) {
  switch (kind) {
    case EstimatorKind::WA: return "WA";
    case EstimatorKind::AWA: return "AWA";
    case EstimatorKind::OLS: return "OLS";
  }
  return "?";
}

bool within_bounds(double value) { return std::isfinite(value) && std::abs(value) <= 1.0; }

EffectEstimate weighted_average(const Eigen::VectorXd& y, const Eigen::VectorXd& t,
                                const BalanceWeights& w) {
  check_lengths(y, t, w);
  const auto [n0, n1] = kept_groups(t, w);
  (void)n0;
  double treated = 0.0, control = 0.0;
  for (Eigen::Index i = 0; i < t.size(); ++i) {
    if (!kept(w, i)) continue;
    if (t(i) == 1.0) {
      treated += w.estimand == Estimand::ATE ? w.values(i) * y(i) : y(i);
    } else {
      control += w.values(i) * y(i);
    }
  }
  if (w.estimand == Estimand::ATT) treated /= n1;
  return make_estimate(treated - control, w.estimand, EstimatorKind::WA);
}

EffectEstimate augmented_weighted_average(const Eigen::VectorXd& y, const Eigen::VectorXd& t,
                                          const BalanceWeights& w,
                                          const ResponseSurfaces& surfaces) {
  check_lengths(y, t, w);
  if (surfaces.mu0_hat.size() != t.size() || surfaces.mu1_hat.size() != t.size()) {
    throw ShapeError("response surfaces are not aligned with the data");
  }
  const auto [n0, n1] = kept_groups(t, w);
  const Eigen::VectorXd& mu0 = surfaces.mu0_hat;
  const Eigen::VectorXd& mu1 = surfaces.mu1_hat;
  double value = 0.0;
  if (w.estimand == Estimand::ATE) {
    const double n_kept = static_cast<double>(n0 + n1);
    double plug_in = 0.0, resid = 0.0;
    for (Eigen::Index i = 0; i < t.size(); ++i) {
      if (!kept(w, i)) continue;
      plug_in += mu1(i) - mu0(i);
      const double mu = t(i) == 1.0 ? mu1(i) : mu0(i);
      resid += (2.0 * t(i) - 1.0) * w.values(i) * (y(i) - mu);
    }
    value = plug_in / n_kept + resid;
  } else {
    double treated = 0.0, control = 0.0;
    for (Eigen::Index i = 0; i < t.size(); ++i) {
      if (!kept(w, i)) continue;
      if (t(i) == 1.0) {
        treated += y(i) - mu0(i);
      } else {
        control += w.values(i) * (y(i) - mu0(i));
      }
    }
    value = treated / n1 - control;
  }
  return make_estimate(value, w.estimand, EstimatorKind::AWA);
}

SandwichResult sandwich_variance(const Eigen::VectorXd& y, const Eigen::VectorXd& t,
                                 const BalanceWeights& w, double beta) {
  check_lengths(y, t, w);
  const WlsParts p = wls_parts(y, t, w);
  const double intercept = p.y_bar - beta * p.t_bar;
  Eigen::Matrix2d bread = Eigen::Matrix2d::Zero();
  Eigen::Matrix2d meat = Eigen::Matrix2d::Zero();
  for (Eigen::Index i = 0; i < t.size(); ++i) {
    if (!kept(w, i)) continue;
    const Eigen::Vector2d z(1.0, t(i));
    const double r = y(i) - intercept - beta * t(i);
    const double wi = w.values(i);
    bread += wi * z * z.transpose();
    meat += wi * wi * r * r * z * z.transpose();
  }
  const Eigen::FullPivLU<Eigen::Matrix2d> lu(bread);
  if (!lu.isInvertible()) throw EstimationError("singular weighted design in sandwich variance");
  const Eigen::Matrix2d inv = lu.inverse();
  const Eigen::Matrix2d v = inv * meat * inv;
  SandwichResult out;
  out.se = std::sqrt(std::max(0.0, v(1, 1)));
  out.ci95 = {beta - kZ95 * out.se, beta + kZ95 * out.se};
  return out;
}

EffectEstimate weighted_ols(const Eigen::VectorXd& y, const Eigen::VectorXd& t,
                            const BalanceWeights& w) {
  check_lengths(y, t, w);
  kept_groups(t, w);
  const WlsParts p = wls_parts(y, t, w);
  EffectEstimate est = make_estimate(p.sxy / p.sxx, w.estimand, EstimatorKind::OLS);
  const SandwichResult s = sandwich_variance(y, t, w, est.value);
  est.se = s.se;
  est.ci95 = s.ci95;
  return est;
}

}  // namespace balance
