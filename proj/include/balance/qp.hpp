#pragma once

#include <Eigen/Dense>

#include <string>
#include <vector>

namespace balance {

/// sum_{i in indices} w_i == target
struct EqualityConstraint {
  std::vector<int> indices;
  double target = 1.0;
};

/// min 1/2 w'Qw + c'w  s.t. the (disjoint) group-sum equalities and w >= 0.
struct QuadraticProgram {
  Eigen::MatrixXd q;
  Eigen::VectorXd c;
  std::vector<EqualityConstraint> equalities;
};

enum class QPStatus { optimal, max_iter, infeasible };

std::string to_string(QPStatus status);

struct QPSolution {
  Eigen::VectorXd w;
  double objective = 0.0;
  // Infinity norm of w - P(w - grad) on the problem rescaled so that
  // max(|Q|, |c|) = 1, where P projects onto the feasible set.
  double kkt_residual = 0.0;
  int iterations = 0;
  QPStatus status = QPStatus::optimal;
  double diagonal_shift = 0.0;
  std::vector<double> objective_trace;  // filled when requested
};

struct QPOptions {
  double tol = 1e-8;
  int max_iter = 50000;
  bool record_trace = false;
};

/// Euclidean projection of v onto {x >= 0, sum x = target}.
Eigen::VectorXd project_simplex(const Eigen::VectorXd& v, double target);

double qp_objective(const QuadraticProgram& qp, const Eigen::VectorXd& w);

/// Projected-Newton solver. Each iteration identifies the variables held at
/// zero, solves the equality-constrained Newton system on the rest, and
/// searches along the projection arc; a projected-gradient step with
/// backtracking is used whenever the Newton step fails to decrease the
/// objective, so the objective never increases. Starts from the uniform
/// feasible point. If negative curvature is met inside the feasible
/// subspace, the smallest diagonal shift restoring convexity there is added
/// and reported in `diagonal_shift`.
QPSolution solve_qp(const QuadraticProgram& qp, const QPOptions& options = {});

}  // namespace balance
