#include "balance/qp.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "balance/errors.hpp"

namespace balance {

namespace {

struct Groups {
  std::vector<std::vector<int>> members;
  std::vector<double> targets;
  std::vector<int> group_of;  // -1 when the variable has only w >= 0
};

Groups index_groups(const QuadraticProgram& qp) {
  const auto n = static_cast<int>(qp.c.size());
  Groups g;
  g.group_of.assign(static_cast<std::size_t>(n), -1);
  for (std::size_t k = 0; k < qp.equalities.size(); ++k) {
    const auto& eq = qp.equalities[k];
    if (eq.indices.empty()) throw DomainError("equality constraint with empty index set");
    for (int i : eq.indices) {
      if (i < 0 || i >= n) throw ShapeError("equality index out of range");
      if (g.group_of[static_cast<std::size_t>(i)] != -1) {
        throw DomainError("equality index sets must be disjoint");
      }
      g.group_of[static_cast<std::size_t>(i)] = static_cast<int>(k);
    }
    g.members.push_back(eq.indices);
    g.targets.push_back(eq.target);
  }
  return g;
}

Eigen::VectorXd project(const Eigen::VectorXd& v, const Groups& groups) {
  Eigen::VectorXd out(v.size());
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (groups.group_of[static_cast<std::size_t>(i)] < 0) out(i) = std::max(0.0, v(i));
  }
  for (std::size_t k = 0; k < groups.members.size(); ++k) {
    const auto& idx = groups.members[k];
    Eigen::VectorXd sub(static_cast<Eigen::Index>(idx.size()));
    for (std::size_t j = 0; j < idx.size(); ++j) sub(static_cast<Eigen::Index>(j)) = v(idx[j]);
    const Eigen::VectorXd p = project_simplex(sub, groups.targets[k]);
    for (std::size_t j = 0; j < idx.size(); ++j) out(idx[j]) = p(static_cast<Eigen::Index>(j));
  }
  return out;
}

double objective(const Eigen::MatrixXd& q, const Eigen::VectorXd& c, const Eigen::VectorXd& w) {
  return 0.5 * w.dot(q * w) + c.dot(w);
}

// Smallest eigenvalue of Q restricted to directions that keep every group sum
// fixed.
double reduced_min_eigenvalue(const Eigen::MatrixXd& q, const Groups& groups) {
  const Eigen::Index n = q.rows();
  Eigen::MatrixXd p = Eigen::MatrixXd::Identity(n, n);
  for (const auto& idx : groups.members) {
    const double inv = 1.0 / static_cast<double>(idx.size());
    for (int a : idx) {
      for (int b : idx) p(a, b) -= inv;
    }
  }
  const Eigen::MatrixXd m = p * q * p;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()),
                                                    Eigen::EigenvaluesOnly);
  return es.eigenvalues().minCoeff();
}

// Equality-constrained Newton point on the free variables: minimizes
// 1/2 x'Hx + c'x subject to the group sums, other variables held at zero.
bool newton_point(const Eigen::MatrixXd& q, const Eigen::VectorXd& c, const Groups& groups,
                  const std::vector<int>& free, Eigen::VectorXd& x_free) {
  const auto m = static_cast<Eigen::Index>(free.size());
  if (m == 0) return false;

  std::vector<int> local_group(groups.members.size(), -1);
  std::vector<int> row_group;
  for (int i : free) {
    const int g = groups.group_of[static_cast<std::size_t>(i)];
    if (g >= 0 && local_group[static_cast<std::size_t>(g)] < 0) {
      local_group[static_cast<std::size_t>(g)] = static_cast<int>(row_group.size());
      row_group.push_back(g);
    }
  }
  const auto k = static_cast<Eigen::Index>(row_group.size());

  Eigen::MatrixXd h(m, m);
  Eigen::VectorXd rhs(m);
  Eigen::MatrixXd e = Eigen::MatrixXd::Zero(k, m);
  Eigen::VectorXd s(k);
  for (Eigen::Index a = 0; a < m; ++a) {
    const int ia = free[static_cast<std::size_t>(a)];
    for (Eigen::Index b = 0; b < m; ++b) h(a, b) = q(ia, free[static_cast<std::size_t>(b)]);
    rhs(a) = -c(ia);
    const int g = groups.group_of[static_cast<std::size_t>(ia)];
    if (g >= 0) e(local_group[static_cast<std::size_t>(g)], a) = 1.0;
  }
  for (Eigen::Index r = 0; r < k; ++r) s(r) = groups.targets[static_cast<std::size_t>(row_group[static_cast<std::size_t>(r)])];

  // H + mu E'E coincides with H on the feasible directions and is positive
  // definite whenever H is positive definite there, so Cholesky applies.
  const double row_bound = h.cwiseAbs().rowwise().sum().maxCoeff();
  double min_size = static_cast<double>(m);
  for (Eigen::Index r = 0; r < k; ++r) min_size = std::min(min_size, e.row(r).sum());
  const double mu = (row_bound > 0 ? row_bound : 1.0) / min_size + 1.0;
  const double ridge = 1e-13 * (1.0 + h.diagonal().cwiseAbs().maxCoeff());

  Eigen::MatrixXd a = h;
  if (k > 0) a.noalias() += mu * e.transpose() * e;
  a.diagonal().array() += ridge;
  const Eigen::VectorXd b = k > 0 ? Eigen::VectorXd(rhs + mu * e.transpose() * s) : rhs;

  Eigen::LLT<Eigen::MatrixXd> llt(a);
  if (llt.info() == Eigen::Success) {
    const Eigen::VectorXd z = llt.solve(b);
    if (k == 0) {
      x_free = z;
    } else {
      const Eigen::MatrixXd y = llt.solve(e.transpose());
      const Eigen::MatrixXd schur = e * y;
      const Eigen::VectorXd nu = schur.partialPivLu().solve(e * z - s);
      x_free = z - y * nu;
    }
  } else {
    Eigen::MatrixXd kkt = Eigen::MatrixXd::Zero(m + k, m + k);
    kkt.topLeftCorner(m, m) = h;
    kkt.topLeftCorner(m, m).diagonal().array() += ridge;
    kkt.topRightCorner(m, k) = e.transpose();
    kkt.bottomLeftCorner(k, m) = e;
    Eigen::VectorXd full(m + k);
    full << rhs, s;
    const Eigen::VectorXd sol = kkt.fullPivLu().solve(full);
    x_free = sol.head(m);
  }
  return x_free.allFinite();
}

}  // namespace

std::string to_string(QPStatus status) {
  switch (status) {
    case QPStatus::optimal: return "optimal";
    case QPStatus::max_iter: return "max_iter";
    case QPStatus::infeasible: return "infeasible";
  }
  return "?";
}

Eigen::VectorXd project_simplex(const Eigen::VectorXd& v, double target) {
  const Eigen::Index m = v.size();
  if (m == 0) return v;
  if (target <= 0.0) return Eigen::VectorXd::Zero(m);
  std::vector<double> u(v.data(), v.data() + m);
  std::sort(u.begin(), u.end(), std::greater<>());
  double cumulative = 0.0;
  double theta = 0.0;
  for (Eigen::Index j = 0; j < m; ++j) {
    cumulative += u[static_cast<std::size_t>(j)];
    const double candidate = (cumulative - target) / static_cast<double>(j + 1);
    if (u[static_cast<std::size_t>(j)] - candidate > 0.0) theta = candidate;
  }
  Eigen::VectorXd out = (v.array() - theta).max(0.0).matrix();
  // Remove rounding drift from the sum.
  const double sum = out.sum();
  if (sum > 0.0) out *= target / sum;
  return out;
}

double qp_objective(const QuadraticProgram& qp, const Eigen::VectorXd& w) {
  return objective(qp.q, qp.c, w);
}

QPSolution solve_qp(const QuadraticProgram& qp, const QPOptions& options) {
  const Eigen::Index n = qp.c.size();
  if (qp.q.rows() != n || qp.q.cols() != n) throw ShapeError("Q must be n x n with n = |c|");
  if (n == 0) throw DomainError("empty quadratic program");
  const Groups groups = index_groups(qp);

  QPSolution sol;
  for (double t : groups.targets) {
    if (!(t >= 0.0) || !std::isfinite(t)) {
      sol.status = QPStatus::infeasible;
      sol.w = Eigen::VectorXd::Zero(n);
      sol.objective = std::numeric_limits<double>::quiet_NaN();
      sol.kkt_residual = std::numeric_limits<double>::infinity();
      return sol;
    }
  }
  if (!qp.q.allFinite() || !qp.c.allFinite()) throw NumericError("non-finite problem data");

  double scale = std::max(qp.q.cwiseAbs().maxCoeff(), qp.c.cwiseAbs().maxCoeff());
  if (!(scale > 0.0)) scale = 1.0;
  Eigen::MatrixXd q = 0.5 * (qp.q + qp.q.transpose()) / scale;
  const Eigen::VectorXd c = qp.c / scale;

  Eigen::VectorXd x = Eigen::VectorXd::Zero(n);
  for (std::size_t k = 0; k < groups.members.size(); ++k) {
    const double share = groups.targets[k] / static_cast<double>(groups.members[k].size());
    for (int i : groups.members[k]) x(i) = share;
  }

  bool shifted = false;
  auto apply_shift = [&]() {
    const double lmin = reduced_min_eigenvalue(q, groups);
    if (lmin < 0.0) {
      const double delta = -lmin * (1.0 + 1e-9) + 1e-15;
      q.diagonal().array() += delta;
      sol.diagonal_shift += delta * scale;
    }
    shifted = true;
  };

  double f = objective(q, c, x);
  if (options.record_trace) sol.objective_trace.push_back(f * scale);
  double alpha = 1.0 / std::max(q.cwiseAbs().rowwise().sum().maxCoeff(), 1e-300);
  double residual = std::numeric_limits<double>::infinity();
  sol.status = QPStatus::max_iter;

  int it = 0;
  for (; it < options.max_iter; ++it) {
    const Eigen::VectorXd grad = q * x + c;
    const Eigen::VectorXd xp = project(x - grad, groups);
    residual = (x - xp).cwiseAbs().maxCoeff();
    if (residual <= options.tol) {
      sol.status = QPStatus::optimal;
      break;
    }

    bool accepted = false;

    // Newton step on the variables not held at zero.
    const double eps = std::min(1e-6, residual);
    std::vector<int> free;
    free.reserve(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
      if (!(x(i) <= eps && xp(i) == 0.0)) free.push_back(static_cast<int>(i));
    }
    Eigen::VectorXd x_free;
    if (newton_point(q, c, groups, free, x_free)) {
      Eigen::VectorXd d = -x;
      for (std::size_t a = 0; a < free.size(); ++a) d(free[a]) = x_free(static_cast<Eigen::Index>(a)) - x(free[a]);
      const double curvature = d.dot(q * d);
      if (!shifted && curvature < -1e-12 * d.squaredNorm()) {
        apply_shift();
        f = objective(q, c, x);
        continue;
      }
      double t = 1.0;
      for (int ls = 0; ls < 30 && !accepted; ++ls, t *= 0.5) {
        const Eigen::VectorXd xt = project(x + t * d, groups);
        const Eigen::VectorXd delta = xt - x;
        const double slope = grad.dot(delta);
        if (!(slope < 0.0)) continue;
        const double ft = objective(q, c, xt);
        if (ft <= f + 1e-4 * slope) {
          x = xt;
          f = ft;
          accepted = true;
        }
      }
    }

    // Projected gradient with backtracking.
    if (!accepted) {
      double step = alpha * 4.0;
      for (int ls = 0; ls < 80 && !accepted; ++ls, step *= 0.5) {
        const Eigen::VectorXd xt = project(x - step * grad, groups);
        const Eigen::VectorXd delta = xt - x;
        if (delta.squaredNorm() == 0.0) break;
        const double ft = objective(q, c, xt);
        if (ft <= f + grad.dot(delta) + delta.squaredNorm() / (2.0 * step) && ft <= f) {
          x = xt;
          f = ft;
          alpha = step;
          accepted = true;
        }
      }
    }
    if (options.record_trace && accepted) sol.objective_trace.push_back(f * scale);
    if (!accepted) {
      if (!shifted) {
        apply_shift();
        f = objective(q, c, x);
        continue;
      }
      break;  // no further decrease possible at working precision
    }
  }
  if (sol.status != QPStatus::optimal && it >= options.max_iter) {
    const Eigen::VectorXd grad = q * x + c;
    residual = (x - project(x - grad, groups)).cwiseAbs().maxCoeff();
    if (residual <= options.tol) sol.status = QPStatus::optimal;
  }

  sol.w = x;
  sol.iterations = it;
  sol.kkt_residual = residual;
  sol.objective = qp_objective(qp, x);
  return sol;
}

}  // namespace balance
