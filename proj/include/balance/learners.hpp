#pragma once

#include <Eigen/Dense>

#include <functional>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "balance/scenario.hpp"

namespace balance {

enum class Target { propensity, outcome };
enum class Form { well_specified, misspecified };

/// Well-specified designs append the interaction used by the generator:
/// x1*x2^2 for the propensity, x3*x4^2 for the outcome.
struct FeatureSpec {
  Target target = Target::propensity;
  Form form = Form::misspecified;
};

Eigen::MatrixXd engineer_features(const Eigen::MatrixXd& x, const FeatureSpec& spec);

struct LogisticModel {
  Eigen::VectorXd coefficients;  // intercept first
  FeatureSpec features;
  bool converged = false;
  double ridge_used = 0.0;
  int iterations = 0;
  // Penalized log-likelihood after each accepted step of the final pass.
  std::vector<double> log_likelihood_trace;
};

struct LogisticOptions {
  int max_iter = 100;
  double tol = 1e-9;
  double initial_ridge = 1e-4;
  double ridge_factor = 10.0;
  double max_ridge = 1e4;
  // Coefficients beyond this magnitude in an unpenalized fit are treated as
  // separation.
  double divergence_bound = 30.0;
};


/// Maximum-likelihood logistic regression by IRLS with step halving. On
/// separation or non-convergence the fit is repeated with an escalating ridge
/// penalty on the slopes (intercept unpenalized).
LogisticModel fit_logistic(const Eigen::MatrixXd& design, const Eigen::VectorXd& labels,
                           const FeatureSpec& features = {}, const LogisticOptions& options = {});

/// Bernoulli log-likelihood of the coefficients on a design (no intercept
/// column in `design`).
double logistic_log_likelihood(const Eigen::VectorXd& coefficients, const Eigen::MatrixXd& design,
                               const Eigen::VectorXd& labels);

/// Probabilities for an already-engineered design.
Eigen::VectorXd predict_design(const LogisticModel& model, const Eigen::MatrixXd& design);
/// Probabilities for raw 10-column covariates; clamped to [1e-12, 1-1e-12].
Eigen::VectorXd predict_proba(const LogisticModel& model, const Eigen::MatrixXd& x);

void write_coefficients(std::ostream& out, const LogisticModel& model);

enum class LearnerKind { oracle, logistic_well, logistic_mis };

LearnerKind parse_learner_kind(std::string_view label);
std::string to_string(LearnerKind kind);

/// A nuisance model: covariate row -> probability.
class Learner {
 public:
  using RowFn = std::function<double(const Eigen::Ref<const Eigen::RowVectorXd>&)>;

  Learner(LearnerKind kind, RowFn fn) : kind_(kind), fn_(std::move(fn)) {}

  LearnerKind kind() const { return kind_; }
  double operator()(const Eigen::Ref<const Eigen::RowVectorXd>& row) const { return fn_(row); }
  Eigen::VectorXd predict(const Eigen::MatrixXd& x) const;

 private:
  LearnerKind kind_;
  RowFn fn_;
};

Learner make_learner(LearnerKind kind, const ScenarioSpec& spec, Target target);
Learner make_learner(const LogisticModel& model);

/// Fits the requested learner kind for `target` on (x, labels). Oracle kinds
/// ignore the data.
Learner fit_learner(LearnerKind kind, const ScenarioSpec& spec, Target target,
                    const Eigen::MatrixXd& x, const Eigen::VectorXd& labels);

}  // namespace balance
