#pragma once

#include <Eigen/Dense>

#include <optional>
#include <string>
#include <string_view>
#include <utility>

#include "balance/balancers.hpp"

namespace balance {

enum class EstimatorKind { WA, AWA, OLS };

EstimatorKind parse_estimator(std::string_view label);
std::string to_string(EstimatorKind kind);

struct ResponseSurfaces {
  Eigen::VectorXd mu0_hat;
  Eigen::VectorXd mu1_hat;
};

struct EffectEstimate {
  double value = 0.0;
  std::optional<double> se;
  std::optional<std::pair<double, double>> ci95;
  Estimand estimand = Estimand::ATE;
  EstimatorKind estimator = EstimatorKind::WA;
  bool valid = false;  // |value| <= 1
};

bool within_bounds(double value);

EffectEstimate weighted_average(const Eigen::VectorXd& y, const Eigen::VectorXd& t,
                                const BalanceWeights& w);

EffectEstimate augmented_weighted_average(const Eigen::VectorXd& y, const Eigen::VectorXd& t,
                                          const BalanceWeights& w,
                                          const ResponseSurfaces& surfaces);

/// Weighted least squares slope of Y on [1, T] with an HC0 sandwich interval.
EffectEstimate weighted_ols(const Eigen::VectorXd& y, const Eigen::VectorXd& t,
                            const BalanceWeights& w);

struct SandwichResult {
  double se = 0.0;
  std::pair<double, double> ci95;
};

/// HC0 sandwich for the slope; `beta` is the weighted OLS slope.
SandwichResult sandwich_variance(const Eigen::VectorXd& y, const Eigen::VectorXd& t,
                                 const BalanceWeights& w, double beta);

}  // namespace balance
