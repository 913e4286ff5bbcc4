#include "balance/learners.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>

#include "balance/errors.hpp"

namespace balance {

namespace {

double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

Eigen::MatrixXd with_intercept(const Eigen::MatrixXd& design) {
  Eigen::MatrixXd z(design.rows(), design.cols() + 1);
  z.col(0).setOnes();
  z.rightCols(design.cols()) = design;
  return z;
}

double penalized_log_likelihood(const Eigen::VectorXd& beta, const Eigen::MatrixXd& z,
                                const Eigen::VectorXd& y, double ridge) {
  const Eigen::VectorXd eta = z * beta;
  double ll = 0.0;
  for (Eigen::Index i = 0; i < eta.size(); ++i) ll += y(i) * eta(i) - softplus(eta(i));
  return ll - 0.5 * ridge * beta.tail(beta.size() - 1).squaredNorm();
}

struct IrlsResult {
  Eigen::VectorXd beta;
  bool converged = false;
  int iterations = 0;
  std::vector<double> trace;
};

IrlsResult irls(const Eigen::MatrixXd& z, const Eigen::VectorXd& y, double ridge,
                const LogisticOptions& opt) {
  const Eigen::Index p = z.cols();
  IrlsResult res;
  res.beta = Eigen::VectorXd::Zero(p);
  const double ybar = std::clamp(y.mean(), 1e-6, 1.0 - 1e-6);
  res.beta(0) = logit(ybar);
  double ll = penalized_log_likelihood(res.beta, z, y, ridge);
  res.trace.push_back(ll);

  Eigen::VectorXd penalty = Eigen::VectorXd::Constant(p, ridge);
  penalty(0) = 0.0;

  for (int it = 1; it <= opt.max_iter; ++it) {
    res.iterations = it;
    const Eigen::VectorXd eta = z * res.beta;
    Eigen::VectorXd prob(eta.size()), w(eta.size());
    for (Eigen::Index i = 0; i < eta.size(); ++i) {
      prob(i) = logistic(eta(i));
      w(i) = prob(i) * (1.0 - prob(i));
    }
    const Eigen::VectorXd grad = z.transpose() * (y - prob) - penalty.cwiseProduct(res.beta);
    Eigen::MatrixXd hess = z.transpose() * w.asDiagonal() * z;
    hess.diagonal() += penalty;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(hess);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) return res;
    const Eigen::VectorXd step = ldlt.solve(grad);
    if (!step.allFinite()) return res;

    // Step halving keeps the log-likelihood non-decreasing.
    double scale = 1.0;
    Eigen::VectorXd candidate;
    double ll_new = -std::numeric_limits<double>::infinity();
    for (int halving = 0; halving < 40; ++halving) {
      candidate = res.beta + scale * step;
      ll_new = penalized_log_likelihood(candidate, z, y, ridge);
      if (ll_new >= ll - 1e-12 * std::abs(ll)) break;
      scale *= 0.5;
    }
    if (!(ll_new >= ll - 1e-12 * std::abs(ll))) return res;
    res.beta = candidate;
    const double change = (scale * step).cwiseAbs().maxCoeff();
    ll = ll_new;
    res.trace.push_back(ll);
    if (ridge == 0.0 && res.beta.cwiseAbs().maxCoeff() > opt.divergence_bound) return res;
    if (change <= opt.tol * (1.0 + res.beta.cwiseAbs().maxCoeff())) {
      res.converged = true;
      return res;
    }
  }
  return res;
}

}  // namespace

Eigen::MatrixXd engineer_features(const Eigen::MatrixXd& x, const FeatureSpec& spec) {
  if (x.cols() != kNumCovariates) {
    throw ShapeError("feature engineering expects 10 covariate columns, got " +
                     std::to_string(x.cols()));
  }
  if (spec.form == Form::misspecified) return x;
  Eigen::MatrixXd out(x.rows(), kNumCovariates + 1);
  out.leftCols(kNumCovariates) = x;
  const int a = spec.target == Target::propensity ? 0 : 2;
  out.col(kNumCovariates) = x.col(a).array() * x.col(a + 1).array().square();
  return out;
}

double logistic_log_likelihood(const Eigen::VectorXd& coefficients, const Eigen::MatrixXd& design,
                               const Eigen::VectorXd& labels) {
  return penalized_log_likelihood(coefficients, with_intercept(design), labels, 0.0);
}

LogisticModel fit_logistic(const Eigen::MatrixXd& design, const Eigen::VectorXd& labels,
                           const FeatureSpec& features, const LogisticOptions& options) {
  if (design.rows() != labels.size()) throw ShapeError("design rows and label count differ");
  if (design.rows() == 0) throw DomainError("cannot fit a logistic model on zero rows");
  for (Eigen::Index i = 0; i < labels.size(); ++i) {
    if (labels(i) != 0.0 && labels(i) != 1.0) throw DomainError("labels must be 0 or 1");
  }
  const double positives = labels.sum();
  if (positives < 1 || positives > static_cast<double>(labels.size()) - 1) {
    throw DomainError("logistic fit needs at least one observation of each class");
  }
  if (!design.allFinite()) throw NumericError("design contains non-finite values");

  const Eigen::MatrixXd z = with_intercept(design);
  LogisticModel model;
  model.features = features;

  IrlsResult res = irls(z, labels, 0.0, options);
  double ridge = 0.0;
  int total_iter = res.iterations;
  if (!res.converged) {
    ridge = options.initial_ridge;
    for (;;) {
      res = irls(z, labels, ridge, options);
      total_iter += res.iterations;
      if (res.converged) break;
      ridge *= options.ridge_factor;
      if (ridge > options.max_ridge) {
        throw NumericError("logistic fit failed to converge even with ridge penalty");
      }
    }
  }
  model.coefficients = res.beta;
  model.converged = true;
  model.ridge_used = ridge;
  model.iterations = total_iter;
  model.log_likelihood_trace = std::move(res.trace);
  return model;
}

Eigen::VectorXd predict_design(const LogisticModel& model, const Eigen::MatrixXd& design) {
  if (design.cols() + 1 != model.coefficients.size()) {
    throw ShapeError("design has " + std::to_string(design.cols()) + " columns, model expects " +
                     std::to_string(model.coefficients.size() - 1));
  }
  Eigen::VectorXd out(design.rows());
  for (Eigen::Index i = 0; i < design.rows(); ++i) {
    const double eta =
        model.coefficients(0) + design.row(i).dot(model.coefficients.tail(design.cols()));
    out(i) = std::clamp(logistic(eta), kProbabilityClamp, 1.0 - kProbabilityClamp);
  }
  return out;
}

Eigen::VectorXd predict_proba(const LogisticModel& model, const Eigen::MatrixXd& x) {
  return predict_design(model, engineer_features(x, model.features));
}

void write_coefficients(std::ostream& out, const LogisticModel& model) {
  out << "target=" << (model.features.target == Target::propensity ? "propensity" : "outcome")
      << " form="
      << (model.features.form == Form::well_specified ? "well_specified" : "misspecified")
      << " ridge=" << model.ridge_used << " iterations=" << model.iterations << '\n';
  for (Eigen::Index k = 0; k < model.coefficients.size(); ++k) {
    out << (k == 0 ? std::string("intercept") : "beta" + std::to_string(k)) << ' '
        << model.coefficients(k) << '\n';
  }
}

LearnerKind parse_learner_kind(std::string_view label) {
  if (label == "oracle") return LearnerKind::oracle;
  if (label == "logistic_well") return LearnerKind::logistic_well;
  if (label == "logistic_mis") return LearnerKind::logistic_mis;
  throw ConfigError("unknown learner '" + std::string(label) +
                    "' (expected oracle, logistic_well or logistic_mis)");
}

std::string to_string(LearnerKind kind) {
  switch (kind) {
    case LearnerKind::oracle: return "oracle";
    case LearnerKind::logistic_well: return "logistic_well";
    case LearnerKind::logistic_mis: return "logistic_mis";
  }
  return "?";
}

Eigen::VectorXd Learner::predict(const Eigen::MatrixXd& x) const {
  Eigen::VectorXd out(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) out(i) = fn_(x.row(i));
  return out;
}

Learner make_learner(LearnerKind kind, const ScenarioSpec& spec, Target target) {
  if (kind != LearnerKind::oracle) {
    throw ConfigError("only oracle learners can be built from a scenario");
  }
  if (target == Target::propensity) {
    return Learner(kind, [spec](const Eigen::Ref<const Eigen::RowVectorXd>& row) {
      return true_propensity(spec, row);
    });
  }
  return Learner(kind, [spec](const Eigen::Ref<const Eigen::RowVectorXd>& row) {
    return true_response(spec, row);
  });
}

Learner make_learner(const LogisticModel& model) {
  const LearnerKind kind = model.features.form == Form::well_specified ? LearnerKind::logistic_well
                                                                        : LearnerKind::logistic_mis;
  return Learner(kind, [model](const Eigen::Ref<const Eigen::RowVectorXd>& row) {
    const Eigen::MatrixXd one = row;
    return predict_proba(model, one)(0);
  });
}

Learner fit_learner(LearnerKind kind, const ScenarioSpec& spec, Target target,
                    const Eigen::MatrixXd& x, const Eigen::VectorXd& labels) {
  if (kind == LearnerKind::oracle) return make_learner(kind, spec, target);
  FeatureSpec features;
  features.target = target;
  features.form = kind == LearnerKind::logistic_well ? Form::well_specified : Form::misspecified;
  return make_learner(fit_logistic(engineer_features(x, features), labels, features));
}

}  // namespace balance
