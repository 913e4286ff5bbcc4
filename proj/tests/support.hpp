#pragma once

// Brute-force oracles shared by the unit tests and the acceptance run.

#include <Eigen/Dense>

#include <algorithm>
#include <numeric>
#include <random>

#include "balance/balancers.hpp"
#include "balance/qp.hpp"

#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <vector>

namespace testsupport {

/// Calls f on every point of {w >= 0, sum w = 1} in R^dim whose coordinates
/// are multiples of 1/steps.
inline void for_each_simplex_point(int dim, int steps,
                                   const std::function<void(const Eigen::VectorXd&)>& f) {
  Eigen::VectorXd w(dim);
  std::vector<int> counts(static_cast<std::size_t>(dim), 0);
  std::function<void(int, int)> rec = [&](int pos, int left) {
    if (pos == dim - 1) {
      counts[static_cast<std::size_t>(pos)] = left;
      for (int i = 0; i < dim; ++i) w(i) = static_cast<double>(counts[static_cast<std::size_t>(i)]) / steps;
      f(w);
      return;
    }
    for (int k = 0; k <= left; ++k) {
      counts[static_cast<std::size_t>(pos)] = k;
      rec(pos + 1, left - k);
    }
  };
  rec(0, steps);
}

struct GridMin {
  double value = std::numeric_limits<double>::infinity();
  Eigen::VectorXd argmin;
};

inline GridMin simplex_grid_min(int dim, int steps,
                                const std::function<double(const Eigen::VectorXd&)>& f) {
  GridMin best;
  for_each_simplex_point(dim, steps, [&](const Eigen::VectorXd& w) {
    const double v = f(w);
    if (v < best.value) {
      best.value = v;
      best.argmin = w;
    }
  });
  return best;
}

/// Energy distance between two weightings of the same points, by explicit
/// double sums over pairwise Euclidean distances.
inline double energy_distance_loop(const Eigen::MatrixXd& x, const Eigen::VectorXd& p,
                                   const Eigen::VectorXd& q) {
  const Eigen::Index n = x.rows();
  double pq = 0.0, pp = 0.0, qq = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      const double d = (x.row(i) - x.row(j)).norm();
      pq += p(i) * q(j) * d;
      pp += p(i) * p(j) * d;
      qq += q(i) * q(j) * d;
    }
  }
  return 2.0 * pq - pp - qq;
}

inline Eigen::MatrixXd random_matrix(int rows, int cols, std::mt19937_64& rng) {
  std::normal_distribution<double> z;
  Eigen::MatrixXd m(rows, cols);
  for (int j = 0; j < cols; ++j) {
    for (int i = 0; i < rows; ++i) m(i, j) = z(rng);
  }
  return m;
}

struct Toy {
  Eigen::MatrixXd x;
  Eigen::VectorXd t;
  Eigen::VectorXd y;
};

inline Toy toy(int n, int n1, int dims, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Toy d;
  d.x = testsupport::random_matrix(n, dims, rng);
  d.t = Eigen::VectorXd::Zero(n);
  d.t.head(n1).setOnes();
  d.y.resize(n);
  std::bernoulli_distribution coin(0.4);
  for (int i = 0; i < n; ++i) d.y(i) = coin(rng) ? 1.0 : 0.0;
  return d;
}

// Scatter a control-simplex point (and optionally a treated one) into a full
// weight vector; toy data puts treated rows first.
inline Eigen::VectorXd assemble(const Eigen::VectorXd& treated, const Eigen::VectorXd& control) {
  Eigen::VectorXd w(treated.size() + control.size());
  w << treated, control;
  return w;
}

inline double kom_objective_loop(const Eigen::MatrixXd& k, const Eigen::VectorXd& t,
                                 const Eigen::VectorXd& w, double l0, double l1, balance::Estimand est) {
  const Eigen::Index n = t.size();
  const double n1 = t.sum();
  double v = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      if (est == balance::Estimand::ATE) {
        if (t(i) == t(j)) v += w(i) * w(j) * k(i, j);
      } else if (t(i) == 0.0 && t(j) == 0.0) {
        v += w(i) * w(j) * k(i, j);
      }
    }
    if (est == balance::Estimand::ATE) {
      v += (t(i) == 1.0 ? l1 : l0) * w(i) * w(i);
      double s = 0.0;
      for (Eigen::Index j = 0; j < n; ++j) s += k(j, i);
      v -= 2.0 / static_cast<double>(n) * s * w(i);
    } else if (t(i) == 0.0) {
      v += l0 * w(i) * w(i);
      double s = 0.0;
      for (Eigen::Index j = 0; j < n; ++j) {
        if (t(j) == 1.0) s += k(j, i);
      }
      v -= 2.0 / n1 * s * w(i);
    }
  }
  return v;
}

inline std::vector<int> iota_vec(int n, int start = 0) {
  std::vector<int> v(static_cast<std::size_t>(n));
  std::iota(v.begin(), v.end(), start);
  return v;
}

// Stationarity, dual feasibility and complementary slackness at a claimed
// optimum, with per-group multipliers read off the largest coordinate.
struct KktCheck {
  double stationarity = 0.0;
  double dual = 0.0;
  double slackness = 0.0;
  double primal = 0.0;
};

inline KktCheck kkt_check(const balance::QuadraticProgram& qp, const Eigen::VectorXd& w) {
  const Eigen::VectorXd g = qp.q * w + qp.c;
  const Eigen::Index n = w.size();
  Eigen::VectorXd mult = Eigen::VectorXd::Zero(n);
  KktCheck k;
  for (const auto& eq : qp.equalities) {
    int arg = eq.indices.front();
    double s = 0.0;
    for (int i : eq.indices) {
      if (w(i) > w(arg)) arg = i;
      s += w(i);
    }
    k.primal = std::max(k.primal, std::abs(s - eq.target));
    for (int i : eq.indices) mult(i) = g(arg);
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    const double r = g(i) - mult(i);
    k.primal = std::max(k.primal, std::max(0.0, -w(i)));
    k.dual = std::max(k.dual, std::max(0.0, -r));
    k.slackness = std::max(k.slackness, std::abs(w(i) * r));
    if (w(i) > 1e-9) k.stationarity = std::max(k.stationarity, std::abs(r) * std::min(1.0, w(i) * 1e3));
  }
  return k;
}

inline double scale_of(const balance::QuadraticProgram& qp) {
  return std::max(qp.q.cwiseAbs().maxCoeff(), qp.c.cwiseAbs().maxCoeff());
}

inline balance::QuadraticProgram random_problem(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> dim(2, 8);
  const int n = dim(rng);
  std::uniform_int_distribution<int> rank_dist(1, n);
  const Eigen::MatrixXd a = testsupport::random_matrix(rank_dist(rng), n, rng);
  balance::QuadraticProgram qp;
  qp.q = a.transpose() * a;
  qp.c = testsupport::random_matrix(n, 1, rng);
  std::uniform_int_distribution<int> layout(0, 2);
  std::uniform_real_distribution<double> target(0.5, 3.0);
  switch (layout(rng)) {
    case 0:
      qp.equalities = {{iota_vec(n), target(rng)}};
      break;
    case 1: {
      const int split = n / 2;
      qp.equalities = {{iota_vec(split), target(rng)}, {iota_vec(n - split, split), target(rng)}};
      break;
    }
    default:
      // Last variable only carries the bound.
      qp.equalities = {{iota_vec(n - 1), target(rng)}};
      qp.q.diagonal().array() += 0.1;
      break;
  }
  return qp;
}

}  // namespace testsupport
