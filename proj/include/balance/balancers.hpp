#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include "balance/kernels.hpp"
#include "balance/qp.hpp"

namespace balance {

enum class Estimand { ATE, ATT };
enum class Method { iptw, eb, kom, tlf };
enum class PostProc { trim99, hajek, none };

Estimand parse_estimand(std::string_view label);
Method parse_method(std::string_view label);
PostProc parse_postproc(std::string_view label);
std::string to_string(Estimand e);
std::string to_string(Method m);
std::string to_string(PostProc p);

struct WeightDiagnostics {
  double max_weight = 0.0;
  double ess_treated = 0.0;
  double ess_control = 0.0;
  std::string solver_status = "none";  // "none" for closed-form methods
  int solver_iterations = 0;
  double kkt_residual = 0.0;
  double diagonal_shift = 0.0;
  // KOM only.
  double kernel_scale = 0.0;
  double lambda0 = 0.0;
  double lambda1 = 0.0;
  bool lambda_fallback = false;
};

struct BalanceWeights {
  Eigen::VectorXd values;
  Estimand estimand = Estimand::ATE;
  Method method = Method::iptw;
  std::vector<bool> kept;  // false = trimmed out (value 0)
  WeightDiagnostics diagnostics;

  /// True unless a QP-backed method ended without an optimality certificate.
  bool solver_ok() const {
    return diagnostics.solver_status == "none" || diagnostics.solver_status == "optimal";
  }
};

/// Debug listing with columns index,method,estimand,weight,kept.
void write_weights_csv(std::ostream& out, const BalanceWeights& w);

/// Group sizes; throws DomainError unless t is 0/1 with both groups present.
std::pair<int, int> group_sizes(const Eigen::VectorXd& t);

/// Linearly interpolated empirical quantile (p in [0, 1]) of `values`.
double quantile_linear(std::vector<double> values, double p);

// --- IPTW -----------------------------------------------------------------

/// ATE: (1/n)(T/e + (1-T)/(1-e)). ATT: treated 1/N1, control e/((1-e) N1).
/// trim99 zeroes observations whose raw weight exceeds the 99th percentile of
/// all raw weights and leaves the rest untouched; hajek rescales each group
/// to sum to one.
BalanceWeights iptw_weights(const Eigen::VectorXd& e_hat, const Eigen::VectorXd& t,
                            Estimand estimand, PostProc postproc);

// --- Energy balancing -----------------------------------------------------

/// Energy distance between two weightings of the same point set:
/// 2 p'Dq - p'Dp - q'Dq, with p and q summing to one.
double energy_distance(const Eigen::MatrixXd& distances, const Eigen::VectorXd& p,
                       const Eigen::VectorXd& q);

/// Balancing objective evaluated at group-normalized weights `w` (each group
/// summing to one). ATE: E(F0w, Fn) + E(F1w, Fn) + E(F0w, F1w).
/// ATT: E(F0w, F1).
double energy_objective(const Eigen::MatrixXd& distances, const Eigen::VectorXd& t,
                        const Eigen::VectorXd& w, Estimand estimand);

/// Weights minimizing the energy objective; each group sums to one on return.
BalanceWeights energy_balance(const Eigen::MatrixXd& x, const Eigen::VectorXd& t,
                              Estimand estimand, const QPOptions& qp_options = {});

// --- Kernel optimal matching ----------------------------------------------

struct KomOptions {
  std::optional<KernelSpec> kernel;  // default: gaussian, median heuristic
  std::optional<double> lambda0;     // fixed ridge values skip the grid search
  std::optional<double> lambda1;
  std::vector<double> lambda_grid = {1e-3, 1e-2, 1e-1, 1.0, 10.0};
  QPOptions qp;
};

/// Gram blocks and ridge parameters of one KOM problem.
struct KomProblem {
  GramMatrix gram;
  double lambda0 = 1.0;
  double lambda1 = 1.0;
  std::vector<int> control;
  std::vector<int> treated;
};

/// Profiled Gaussian-process log marginal likelihood of centered outcomes y
/// under covariance s^2 (K + lambda I), with s^2 maximized out. Returns
/// nullopt when the evaluation is not finite.
std::optional<double> gp_profile_log_likelihood(const Eigen::MatrixXd& k, const Eigen::VectorXd& y,
                                                double lambda);

/// Best lambda on the grid; second member is true when every grid point
/// failed and lambda = 1 was used instead.
std::pair<double, bool> select_kom_lambda(const Eigen::MatrixXd& k, const Eigen::VectorXd& y,
                                          const std::vector<double>& grid);

/// KOM objective at weights w (full-length vector).
double kom_objective(const KomProblem& problem, const Eigen::VectorXd& w, Estimand estimand);

BalanceWeights kom_weights(const Eigen::MatrixXd& x, const Eigen::VectorXd& t,
                           const Eigen::VectorXd& y, Estimand estimand,
                           const KomOptions& options = {});

// --- Tailored loss function -----------------------------------------------

/// Scoring rules S(q, t) for q in (0, 1).
double tlf_score(double q, double t, Estimand estimand);

struct TlfModel {
  Eigen::VectorXd alpha;
  double intercept = 0.0;
  KernelSpec kernel{KernelFamily::laplacian, 1.0};
  double lambda = 0.0;
  Eigen::MatrixXd x_train;
  Eigen::MatrixXd gram;  // over x_train
  Estimand estimand = Estimand::ATE;
  bool converged = false;
  int iterations = 0;

  /// Fitted propensity logistic(intercept + K alpha) on the training rows.
  Eigen::VectorXd fitted() const;
  Eigen::VectorXd predict(const Eigen::MatrixXd& x) const;
  /// alpha' K alpha
  double penalty() const { return alpha.dot(gram * alpha); }
};

struct TlfFitOptions {
  double grad_tol = 1e-6;
  int max_iter = 5000;
};

/// (1/n) sum S(p_i, t_i) - lambda alpha'K alpha with p = logistic(b + K alpha).
double tlf_objective(const Eigen::MatrixXd& k, const Eigen::VectorXd& t, Estimand estimand,
                     double lambda, const Eigen::VectorXd& alpha, double intercept);
/// Gradient of tlf_objective: first n entries w.r.t. alpha, last w.r.t. the
/// intercept.
Eigen::VectorXd tlf_gradient(const Eigen::MatrixXd& k, const Eigen::VectorXd& t, Estimand estimand,
                             double lambda, const Eigen::VectorXd& alpha, double intercept);

/// Fit on a precomputed Gram matrix (rows of x_train in the same order).
TlfModel tlf_fit_gram(const Eigen::MatrixXd& k, const Eigen::VectorXd& t, Estimand estimand,
                      double lambda, const TlfFitOptions& options = {});
TlfModel tlf_fit(const Eigen::MatrixXd& x, const Eigen::VectorXd& t, Estimand estimand,
                 double lambda, double gamma, const TlfFitOptions& options = {});

struct TlfHyper {
  double lambda = 1e-2;
  double gamma = 0.5;
  bool operator==(const TlfHyper&) const = default;
};

struct TlfGrid {
  std::vector<double> lambdas = {1e-4, 1e-3, 1e-2, 1e-1};
  std::vector<double> gammas = {0.1, 0.5, 1.0, 2.0};
  int folds = 5;
};

struct TlfSelection {
  TlfHyper best;
  // Mean held-out score per (lambda, gamma), lambda-major.
  std::vector<double> cv_scores;
};

/// K-fold cross-validated mean held-out score over the grid. Fold assignment
/// is a deterministic shuffle driven by `seed`.
TlfSelection select_tlf_hyper(const Eigen::MatrixXd& x, const Eigen::VectorXd& t,
                              Estimand estimand, const TlfGrid& grid, std::uint64_t seed);

/// Write-once cache of selected hyperparameters, shared across workers.
class TlfHyperCache {
 public:
  using Key = std::tuple<std::string, Estimand>;

  TlfHyper get_or_compute(const Key& key, const std::function<TlfHyper()>& compute);
  std::optional<TlfHyper> find(const Key& key) const;

 private:
  mutable std::mutex mutex_;
  std::map<Key, TlfHyper> values_;
};

/// IPTW formulas on the TLF propensity, normalized so each group sums to one.
BalanceWeights tlf_weights(const Eigen::MatrixXd& x, const Eigen::VectorXd& t, Estimand estimand,
                           const TlfHyper& hyper, const TlfFitOptions& options = {});

}  // namespace balance
