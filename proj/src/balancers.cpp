#include "balance/balancers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>
#include <random>

#include "balance/errors.hpp"
#include "balance/rng.hpp"

namespace balance {

namespace {

constexpr double kPropensityFloor = 1e-12;

double clamp_probability(double p) {
  return std::clamp(p, kPropensityFloor, 1.0 - kPropensityFloor);
}

double logistic_fn(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

std::vector<int> members(const Eigen::VectorXd& t, double value) {
  std::vector<int> idx;
  for (Eigen::Index i = 0; i < t.size(); ++i) {
    if (t(i) == value) idx.push_back(static_cast<int>(i));
  }
  return idx;
}

double effective_sample_size(const Eigen::VectorXd& w, const Eigen::VectorXd& t, double group) {
  double s = 0.0, s2 = 0.0;
  for (Eigen::Index i = 0; i < w.size(); ++i) {
    if (t(i) != group) continue;
    s += w(i);
    s2 += w(i) * w(i);
  }
  return s2 > 0.0 ? s * s / s2 : 0.0;
}

void fill_summary(BalanceWeights& bw, const Eigen::VectorXd& t) {
  bw.diagnostics.max_weight = bw.values.size() ? bw.values.maxCoeff() : 0.0;
  bw.diagnostics.ess_treated = effective_sample_size(bw.values, t, 1.0);
  bw.diagnostics.ess_control = effective_sample_size(bw.values, t, 0.0);
}

void normalize_groups(Eigen::VectorXd& w, const Eigen::VectorXd& t) {
  double s1 = 0.0, s0 = 0.0;
  for (Eigen::Index i = 0; i < w.size(); ++i) (t(i) == 1.0 ? s1 : s0) += w(i);
  for (Eigen::Index i = 0; i < w.size(); ++i) {
    const double s = t(i) == 1.0 ? s1 : s0;
    if (s > 0.0) w(i) /= s;
  }
}

BalanceWeights uniform_weights(const Eigen::VectorXd& t, Estimand estimand, Method method) {
  const auto [n0, n1] = group_sizes(t);
  BalanceWeights bw;
  bw.estimand = estimand;
  bw.method = method;
  bw.values.resize(t.size());
  for (Eigen::Index i = 0; i < t.size(); ++i) bw.values(i) = t(i) == 1.0 ? 1.0 / n1 : 1.0 / n0;
  bw.kept.assign(static_cast<std::size_t>(t.size()), true);
  bw.diagnostics.solver_status = "optimal";
  fill_summary(bw, t);
  return bw;
}

void record_solution(BalanceWeights& bw, const QPSolution& sol) {
  bw.diagnostics.solver_status = to_string(sol.status);
  bw.diagnostics.solver_iterations = sol.iterations;
  bw.diagnostics.kkt_residual = sol.kkt_residual;
  bw.diagnostics.diagonal_shift = sol.diagonal_shift;
}

Eigen::MatrixXd submatrix(const Eigen::MatrixXd& m, const std::vector<int>& rows,
                          const std::vector<int>& cols) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()),
                      static_cast<Eigen::Index>(cols.size()));
  for (std::size_t a = 0; a < rows.size(); ++a) {
    for (std::size_t b = 0; b < cols.size(); ++b) {
      out(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) = m(rows[a], cols[b]);
    }
  }
  return out;
}

Eigen::VectorXd subvector(const Eigen::VectorXd& v, const std::vector<int>& idx) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(idx.size()));
  for (std::size_t a = 0; a < idx.size(); ++a) out(static_cast<Eigen::Index>(a)) = v(idx[a]);
  return out;
}

}  // namespace

Estimand parse_estimand(std::string_view label) {
  if (label == "ATE" || label == "ate") return Estimand::ATE;
  if (label == "ATT" || label == "att") return Estimand::ATT;
  throw ConfigError("unknown estimand '" + std::string(label) + "' (expected ATE or ATT)");
}

Method parse_method(std::string_view label) {
  if (label == "iptw") return Method::iptw;
  if (label == "eb") return Method::eb;
  if (label == "kom") return Method::kom;
  if (label == "tlf") return Method::tlf;
  throw ConfigError("unknown method '" + std::string(label) + "' (expected iptw, eb, kom or tlf)");
}

PostProc parse_postproc(std::string_view label) {
  if (label == "trim99") return PostProc::trim99;
  if (label == "hajek") return PostProc::hajek;
  if (label == "none") return PostProc::none;
  throw ConfigError("unknown post-processing '" + std::string(label) +
                    "' (expected trim99, hajek or none)");
}

std::string to_string(Estimand e) { return e == Estimand::ATE ? "ATE" : "ATT"; }

std::string to_string(Method m) {
  switch (m) {
    case Method::iptw: return "iptw";
    case Method::eb: return "eb";
    case Method::kom: return "kom";
    case Method::tlf: return "tlf";
  }
  return "?";
}

std::string to_string(PostProc p) {
  switch (p) {
    case PostProc::trim99: return "trim99";
    case PostProc::hajek: return "hajek";
    case PostProc::none: return "none";
  }
  return "?";
}

void write_weights_csv(std::ostream& out, const BalanceWeights& w) {
  out << "index,method,estimand,weight,kept\n";
  const auto precision = out.precision(17);
  for (Eigen::Index i = 0; i < w.values.size(); ++i) {
    out << i << ',' << to_string(w.method) << ',' << to_string(w.estimand) << ',' << w.values(i)
        << ',' << (w.kept[static_cast<std::size_t>(i)] ? 1 : 0) << '\n';
  }
  out.precision(precision);
}

std::pair<int, int> group_sizes(const Eigen::VectorXd& t) {
  int n1 = 0;
  for (Eigen::Index i = 0; i < t.size(); ++i) {
    if (t(i) == 1.0) {
      ++n1;
    } else if (t(i) != 0.0) {
      throw DomainError("treatment indicator must be 0 or 1");
    }
  }
  const int n0 = static_cast<int>(t.size()) - n1;
  if (n1 == 0 || n0 == 0) throw DomainError("both treatment groups must be nonempty");
  return {n0, n1};
}

double quantile_linear(std::vector<double> values, double p) {
  if (values.empty()) throw DomainError("quantile of an empty sample");
  std::sort(values.begin(), values.end());
  const double h = (static_cast<double>(values.size()) - 1.0) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (h - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

// --- IPTW -------------------------------------------------------------------

BalanceWeights iptw_weights(const Eigen::VectorXd& e_hat, const Eigen::VectorXd& t,
                            Estimand estimand, PostProc postproc) {
  if (e_hat.size() != t.size()) throw ShapeError("propensity and treatment lengths differ");
  const auto [n0, n1] = group_sizes(t);
  for (Eigen::Index i = 0; i < e_hat.size(); ++i) {
    if (!(e_hat(i) > 0.0 && e_hat(i) < 1.0)) {
      throw DomainError("estimated propensity must lie strictly inside (0, 1)");
    }
  }
  const auto n = static_cast<double>(t.size());
  BalanceWeights bw;
  bw.estimand = estimand;
  bw.method = Method::iptw;
  bw.values.resize(t.size());
  bw.kept.assign(static_cast<std::size_t>(t.size()), true);
  for (Eigen::Index i = 0; i < t.size(); ++i) {
    const double e = e_hat(i);
    if (estimand == Estimand::ATE) {
      bw.values(i) = (t(i) / e + (1.0 - t(i)) / (1.0 - e)) / n;
    } else {
      bw.values(i) = t(i) == 1.0 ? 1.0 / n1 : e / ((1.0 - e) * n1);
    }
  }
  (void)n0;

  if (postproc == PostProc::trim99) {
    const std::vector<double> raw(bw.values.data(), bw.values.data() + bw.values.size());
    const double cutoff = quantile_linear(raw, 0.99);
    for (Eigen::Index i = 0; i < t.size(); ++i) {
      if (bw.values(i) > cutoff) {
        bw.values(i) = 0.0;
        bw.kept[static_cast<std::size_t>(i)] = false;
      }
    }
  } else if (postproc == PostProc::hajek) {
    normalize_groups(bw.values, t);
  }
  fill_summary(bw, t);
  return bw;
}

// --- Energy balancing -------------------------------------------------------

double energy_distance(const Eigen::MatrixXd& distances, const Eigen::VectorXd& p,
                       const Eigen::VectorXd& q) {
  const Eigen::VectorXd dp = distances * p;
  const Eigen::VectorXd dq = distances * q;
  return 2.0 * p.dot(dq) - p.dot(dp) - q.dot(dq);
}

double energy_objective(const Eigen::MatrixXd& distances, const Eigen::VectorXd& t,
                        const Eigen::VectorXd& w, Estimand estimand) {
  const Eigen::Index n = t.size();
  Eigen::VectorXd p0 = Eigen::VectorXd::Zero(n), p1 = Eigen::VectorXd::Zero(n);
  for (Eigen::Index i = 0; i < n; ++i) (t(i) == 1.0 ? p1 : p0)(i) = w(i);
  if (estimand == Estimand::ATT) {
    const auto [n0, n1] = group_sizes(t);
    (void)n0;
    Eigen::VectorXd f1 = t / static_cast<double>(n1);
    return energy_distance(distances, p0, f1);
  }
  const Eigen::VectorXd fn = Eigen::VectorXd::Constant(n, 1.0 / static_cast<double>(n));
  return energy_distance(distances, p0, fn) + energy_distance(distances, p1, fn) +
         energy_distance(distances, p0, p1);
}

BalanceWeights energy_balance(const Eigen::MatrixXd& x, const Eigen::VectorXd& t,
                              Estimand estimand, const QPOptions& qp_options) {
  if (x.rows() != t.size()) throw ShapeError("covariate rows and treatment length differ");
  const auto [n0, n1] = group_sizes(t);
  if (all_rows_identical(x)) return uniform_weights(t, estimand, Method::eb);

  const Eigen::MatrixXd d = distance_matrix(x).values;
  const std::vector<int> control = members(t, 0.0);
  const std::vector<int> treated = members(t, 1.0);
  const Eigen::Index n = t.size();
  const double dn = static_cast<double>(n);
  const double d0 = n0, d1 = n1;

  BalanceWeights bw;
  bw.estimand = estimand;
  bw.method = Method::eb;
  bw.kept.assign(static_cast<std::size_t>(n), true);
  bw.values = Eigen::VectorXd::Zero(n);

  // Weights w in the program sum to the group size; they are normalized
  // afterwards.
  if (estimand == Estimand::ATE) {
    QuadraticProgram qp;
    qp.q.resize(n, n);
    qp.c.resize(n);
    const Eigen::VectorXd row_sums = d.rowwise().sum();
    for (Eigen::Index j = 0; j < n; ++j) {
      for (Eigen::Index i = 0; i < n; ++i) {
        if (t(i) == t(j)) {
          const double ng = t(i) == 1.0 ? d1 : d0;
          qp.q(i, j) = -4.0 / (ng * ng) * d(i, j);
        } else {
          qp.q(i, j) = 2.0 / (d0 * d1) * d(i, j);
        }
      }
      const double ng = t(j) == 1.0 ? d1 : d0;
      qp.c(j) = 2.0 / (ng * dn) * row_sums(j);
    }
    qp.equalities = {{control, d0}, {treated, d1}};
    const QPSolution sol = solve_qp(qp, qp_options);
    record_solution(bw, sol);
    bw.values = sol.w.cwiseMax(0.0);
  } else {
    const auto m = static_cast<Eigen::Index>(control.size());
    QuadraticProgram qp;
    qp.q = -2.0 / (d0 * d0) * submatrix(d, control, control);
    qp.c.resize(m);
    for (Eigen::Index a = 0; a < m; ++a) {
      double s = 0.0;
      for (int j : treated) s += d(control[static_cast<std::size_t>(a)], j);
      qp.c(a) = 2.0 / (d0 * d1) * s;
    }
    std::vector<int> all(static_cast<std::size_t>(m));
    std::iota(all.begin(), all.end(), 0);
    qp.equalities = {{all, d0}};
    const QPSolution sol = solve_qp(qp, qp_options);
    record_solution(bw, sol);
    for (Eigen::Index a = 0; a < m; ++a) {
      bw.values(control[static_cast<std::size_t>(a)]) = std::max(0.0, sol.w(a));
    }
    for (int j : treated) bw.values(j) = 1.0;
  }
  normalize_groups(bw.values, t);
  fill_summary(bw, t);
  return bw;
}

// --- Kernel optimal matching ------------------------------------------------

std::optional<double> gp_profile_log_likelihood(const Eigen::MatrixXd& k, const Eigen::VectorXd& y,
                                                double lambda) {
  const Eigen::Index m = y.size();
  if (m == 0 || !(lambda > 0.0)) return std::nullopt;
  Eigen::MatrixXd c = k;
  c.diagonal().array() += lambda;
  Eigen::LLT<Eigen::MatrixXd> llt(c);
  if (llt.info() != Eigen::Success) return std::nullopt;
  const double quad = y.dot(llt.solve(y));
  const Eigen::MatrixXd l = llt.matrixL();
  const double log_det = 2.0 * l.diagonal().array().log().sum();
  const double dm = static_cast<double>(m);
  const double value = -0.5 * dm * std::log(quad / dm) - 0.5 * log_det -
                       0.5 * dm * (1.0 + std::log(2.0 * M_PI));
  if (!std::isfinite(value)) return std::nullopt;
  return value;
}

std::pair<double, bool> select_kom_lambda(const Eigen::MatrixXd& k, const Eigen::VectorXd& y,
                                          const std::vector<double>& grid) {
  const Eigen::VectorXd centered = (y.array() - y.mean()).matrix();
  double best = -std::numeric_limits<double>::infinity();
  std::optional<double> arg;
  for (double lambda : grid) {
    const auto ll = gp_profile_log_likelihood(k, centered, lambda);
    if (ll && *ll > best) {
      best = *ll;
      arg = lambda;
    }
  }
  if (!arg) return {1.0, true};
  return {*arg, false};
}

double kom_objective(const KomProblem& problem, const Eigen::VectorXd& w, Estimand estimand) {
  const Eigen::MatrixXd& k = problem.gram.values;
  const Eigen::Index n = k.rows();
  if (estimand == Estimand::ATT) {
    const Eigen::VectorXd w0 = subvector(w, problem.control);
    const Eigen::MatrixXd k00 = submatrix(k, problem.control, problem.control);
    const Eigen::MatrixXd k10 = submatrix(k, problem.treated, problem.control);
    const double n1 = static_cast<double>(problem.treated.size());
    return w0.dot(k00 * w0) + problem.lambda0 * w0.squaredNorm() -
           2.0 / n1 * (k10.transpose() * Eigen::VectorXd::Ones(k10.rows())).dot(w0);
  }
  double value = 0.0;
  for (int g = 0; g < 2; ++g) {
    const auto& idx = g == 0 ? problem.control : problem.treated;
    const double lambda = g == 0 ? problem.lambda0 : problem.lambda1;
    const Eigen::VectorXd wg = subvector(w, idx);
    value += wg.dot(submatrix(k, idx, idx) * wg) + lambda * wg.squaredNorm();
  }
  const Eigen::VectorXd col_sums = k.colwise().sum().transpose();
  Eigen::VectorXd wm = Eigen::VectorXd::Zero(n);
  for (int i : problem.control) wm(i) = w(i);
  for (int i : problem.treated) wm(i) = w(i);
  return value - 2.0 / static_cast<double>(n) * col_sums.dot(wm);
}

BalanceWeights kom_weights(const Eigen::MatrixXd& x, const Eigen::VectorXd& t,
                           const Eigen::VectorXd& y, Estimand estimand, const KomOptions& options) {
  if (x.rows() != t.size() || y.size() != t.size()) {
    throw ShapeError("covariate, treatment and outcome lengths differ");
  }
  const auto [n0, n1] = group_sizes(t);
  if (all_rows_identical(x)) {
    BalanceWeights bw = uniform_weights(t, estimand, Method::kom);
    return bw;
  }
  const Eigen::Index n = t.size();

  KomProblem problem;
  problem.control = members(t, 0.0);
  problem.treated = members(t, 1.0);
  const KernelSpec kernel =
      options.kernel ? *options.kernel : KernelSpec{KernelFamily::gaussian, median_heuristic(x)};
  problem.gram = gram(kernel, x);
  const Eigen::MatrixXd& k = problem.gram.values;

  BalanceWeights bw;
  bw.estimand = estimand;
  bw.method = Method::kom;
  bw.kept.assign(static_cast<std::size_t>(n), true);
  bw.values = Eigen::VectorXd::Zero(n);
  bw.diagnostics.kernel_scale = kernel.scale;

  auto choose = [&](const std::optional<double>& fixed, const std::vector<int>& idx) {
    if (fixed) return std::pair<double, bool>{*fixed, false};
    return select_kom_lambda(submatrix(k, idx, idx), subvector(y, idx), options.lambda_grid);
  };
  const auto [lambda0, fb0] = choose(options.lambda0, problem.control);
  problem.lambda0 = lambda0;
  bool fallback = fb0;
  if (estimand == Estimand::ATE) {
    const auto [lambda1, fb1] = choose(options.lambda1, problem.treated);
    problem.lambda1 = lambda1;
    fallback = fallback || fb1;
  }
  bw.diagnostics.lambda0 = problem.lambda0;
  bw.diagnostics.lambda1 = problem.lambda1;
  bw.diagnostics.lambda_fallback = fallback;

  if (estimand == Estimand::ATE) {
    QuadraticProgram qp;
    qp.q = Eigen::MatrixXd::Zero(n, n);
    const Eigen::VectorXd col_sums = k.colwise().sum().transpose();
    qp.c = -2.0 / static_cast<double>(n) * col_sums;
    for (int g = 0; g < 2; ++g) {
      const auto& idx = g == 0 ? problem.control : problem.treated;
      const double lambda = g == 0 ? problem.lambda0 : problem.lambda1;
      for (int i : idx) {
        for (int j : idx) qp.q(i, j) = 2.0 * k(i, j);
        qp.q(i, i) += 2.0 * lambda;
      }
    }
    qp.equalities = {{problem.control, 1.0}, {problem.treated, 1.0}};
    const QPSolution sol = solve_qp(qp, options.qp);
    record_solution(bw, sol);
    bw.values = sol.w.cwiseMax(0.0);
  } else {
    const auto m = static_cast<Eigen::Index>(problem.control.size());
    QuadraticProgram qp;
    qp.q = 2.0 * submatrix(k, problem.control, problem.control);
    qp.q.diagonal().array() += 2.0 * problem.lambda0;
    const Eigen::MatrixXd k10 = submatrix(k, problem.treated, problem.control);
    qp.c = -2.0 / static_cast<double>(n1) * k10.colwise().sum().transpose();
    std::vector<int> all(static_cast<std::size_t>(m));
    std::iota(all.begin(), all.end(), 0);
    qp.equalities = {{all, 1.0}};
    const QPSolution sol = solve_qp(qp, options.qp);
    record_solution(bw, sol);
    for (Eigen::Index a = 0; a < m; ++a) {
      bw.values(problem.control[static_cast<std::size_t>(a)]) = std::max(0.0, sol.w(a));
    }
    for (int j : problem.treated) bw.values(j) = 1.0;
  }
  (void)n0;
  // Constraint sums already equal one; this only removes rounding drift.
  normalize_groups(bw.values, t);
  fill_summary(bw, t);
  return bw;
}

// --- Tailored loss function -------------------------------------------------

namespace {

// Score, first and second derivative with respect to the linear index f,
// where q = logistic(f).
struct ScoreTerms {
  double s;
  double d1;
  double d2;
};

ScoreTerms score_terms(double f, double t, Estimand estimand) {
  if (estimand == Estimand::ATE) {
    if (t == 1.0) {
      const double e = std::exp(-f);
      return {f - 1.0 - e, 1.0 + e, -e};
    }
    const double e = std::exp(f);
    return {-f - 1.0 - e, -1.0 - e, -e};
  }
  if (t == 1.0) {
    const double e = std::exp(-f);
    return {-1.0 - e, e, -e};
  }
  return {-f, -1.0, 0.0};
}

struct TlfState {
  Eigen::VectorXd f;   // intercept + K alpha
  Eigen::VectorXd ka;  // K alpha
  double value = 0.0;
};

double tlf_value(const Eigen::VectorXd& f, const Eigen::VectorXd& t, Estimand estimand,
                 double lambda, double penalty) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < f.size(); ++i) s += score_terms(f(i), t(i), estimand).s;
  return s / static_cast<double>(f.size()) - lambda * penalty;
}

}  // namespace

double tlf_score(double q, double t, Estimand estimand) {
  if (!(q > 0.0 && q < 1.0)) throw DomainError("score needs q strictly inside (0, 1)");
  if (estimand == Estimand::ATE) {
    return (2.0 * t - 1.0) * std::log(q / (1.0 - q)) - t / q - (1.0 - t) / (1.0 - q);
  }
  return (1.0 - t) * std::log((1.0 - q) / q) - t / q;
}

Eigen::VectorXd TlfModel::fitted() const {
  Eigen::VectorXd p = gram * alpha;
  for (Eigen::Index i = 0; i < p.size(); ++i) p(i) = logistic_fn(intercept + p(i));
  return p;
}

Eigen::VectorXd TlfModel::predict(const Eigen::MatrixXd& x) const {
  const Eigen::MatrixXd kx = cross_gram(kernel, x, x_train);
  Eigen::VectorXd p = kx * alpha;
  for (Eigen::Index i = 0; i < p.size(); ++i) p(i) = logistic_fn(intercept + p(i));
  return p;
}

double tlf_objective(const Eigen::MatrixXd& k, const Eigen::VectorXd& t, Estimand estimand,
                     double lambda, const Eigen::VectorXd& alpha, double intercept) {
  const Eigen::VectorXd ka = k * alpha;
  const Eigen::VectorXd f = (ka.array() + intercept).matrix();
  return tlf_value(f, t, estimand, lambda, alpha.dot(ka));
}

Eigen::VectorXd tlf_gradient(const Eigen::MatrixXd& k, const Eigen::VectorXd& t, Estimand estimand,
                             double lambda, const Eigen::VectorXd& alpha, double intercept) {
  const Eigen::Index n = t.size();
  const Eigen::VectorXd ka = k * alpha;
  Eigen::VectorXd u(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    u(i) = score_terms(intercept + ka(i), t(i), estimand).d1 / static_cast<double>(n);
  }
  Eigen::VectorXd g(n + 1);
  g.head(n) = k * (u - 2.0 * lambda * alpha);
  g(n) = u.sum();
  return g;
}

TlfModel tlf_fit_gram(const Eigen::MatrixXd& k, const Eigen::VectorXd& t, Estimand estimand,
                      double lambda, const TlfFitOptions& options) {
  const auto [n0, n1] = group_sizes(t);
  if (!(lambda >= 0.0)) throw DomainError("TLF penalty must be nonnegative");
  const Eigen::Index n = t.size();
  const double dn = static_cast<double>(n);
  (void)n0;

  TlfModel model;
  model.estimand = estimand;
  model.lambda = lambda;
  model.gram = k;
  model.alpha = Eigen::VectorXd::Zero(n);
  model.intercept = std::log(static_cast<double>(n1) / static_cast<double>(n - n1));

  Eigen::VectorXd ka = Eigen::VectorXd::Zero(n);
  Eigen::VectorXd f = Eigen::VectorXd::Constant(n, model.intercept);
  double penalty = 0.0;
  double value = tlf_value(f, t, estimand, lambda, penalty);
  if (!std::isfinite(value)) throw NumericError("TLF objective is not finite at the start point");

  Eigen::VectorXd u(n), w(n);
  for (int it = 0; it < options.max_iter; ++it) {
    model.iterations = it;
    for (Eigen::Index i = 0; i < n; ++i) {
      const ScoreTerms st = score_terms(f(i), t(i), estimand);
      u(i) = st.d1 / dn;
      w(i) = -st.d2 / dn;
    }
    const Eigen::VectorXd resid = u - 2.0 * lambda * model.alpha;
    Eigen::VectorXd grad(n + 1);
    grad.head(n) = k * resid;
    grad(n) = u.sum();
    if (grad.cwiseAbs().maxCoeff() < options.grad_tol) {
      model.converged = true;
      break;
    }

    // Damped Newton direction; the Newton system is the Hessian identity
    // with the common factor K removed from the alpha block.
    Eigen::MatrixXd sys(n + 1, n + 1);
    sys.topLeftCorner(n, n) = w.asDiagonal() * k;
    sys.topLeftCorner(n, n).diagonal().array() += 2.0 * lambda;
    sys.topRightCorner(n, 1) = w;
    sys.bottomLeftCorner(1, n) = (k * w).transpose();
    sys(n, n) = w.sum();
    Eigen::VectorXd rhs(n + 1);
    rhs.head(n) = resid;
    rhs(n) = u.sum();
    Eigen::VectorXd dir = sys.partialPivLu().solve(rhs);
    double slope = dir.allFinite() ? grad.dot(dir) : -1.0;
    if (!(slope > 0.0)) {
      // Fall back to the RKHS gradient, an ascent direction for any K >= 0.
      dir = rhs;
      slope = grad.dot(dir);
      if (!(slope > 0.0)) break;
    }

    const Eigen::VectorXd kd = k * dir.head(n);
    const double da = dir(n);
    const double cross = dir.head(n).dot(ka);
    const double quad = dir.head(n).dot(kd);
    double step = 1.0;
    bool accepted = false;
    for (int ls = 0; ls < 60; ++ls, step *= 0.5) {
      const Eigen::VectorXd ft = (f + step * kd).array() + step * da;
      const double pen = penalty + 2.0 * step * cross + step * step * quad;
      const double vt = tlf_value(ft, t, estimand, lambda, pen);
      if (std::isfinite(vt) && vt >= value + 1e-4 * step * slope) {
        model.alpha += step * dir.head(n);
        model.intercept += step * da;
        ka += step * kd;
        f = ft;
        penalty = pen;
        value = vt;
        accepted = true;
        break;
      }
    }
    if (!accepted) break;
  }
  if (!std::isfinite(value)) throw NumericError("TLF objective became non-finite");
  return model;
}

TlfModel tlf_fit(const Eigen::MatrixXd& x, const Eigen::VectorXd& t, Estimand estimand,
                 double lambda, double gamma, const TlfFitOptions& options) {
  if (x.rows() != t.size()) throw ShapeError("covariate rows and treatment length differ");
  if (!(gamma > 0.0)) throw DomainError("Laplacian kernel rate must be positive");
  const KernelSpec kernel{KernelFamily::laplacian, gamma};
  TlfModel model = tlf_fit_gram(gram(kernel, x).values, t, estimand, lambda, options);
  model.kernel = kernel;
  model.x_train = x;
  return model;
}

TlfSelection select_tlf_hyper(const Eigen::MatrixXd& x, const Eigen::VectorXd& t,
                              Estimand estimand, const TlfGrid& grid, std::uint64_t seed) {
  group_sizes(t);
  const Eigen::Index n = t.size();
  if (grid.folds < 2 || grid.folds > n) throw DomainError("invalid number of folds");

  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<int> fold_of(static_cast<std::size_t>(n));
  for (std::size_t pos = 0; pos < order.size(); ++pos) {
    fold_of[static_cast<std::size_t>(order[pos])] = static_cast<int>(pos % static_cast<std::size_t>(grid.folds));
  }

  // L1 distances once; every gamma reuses them.
  Eigen::MatrixXd l1 = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    for (Eigen::Index i = j + 1; i < n; ++i) {
      const double v = (x.row(i) - x.row(j)).cwiseAbs().sum();
      l1(i, j) = v;
      l1(j, i) = v;
    }
  }

  TlfSelection sel;
  double best = -std::numeric_limits<double>::infinity();
  bool have_best = false;
  for (double lambda : grid.lambdas) {
    for (double gamma : grid.gammas) {
      const Eigen::MatrixXd k = (-gamma * l1.array()).exp().matrix();
      double total = 0.0;
      bool ok = true;
      for (int fold = 0; fold < grid.folds && ok; ++fold) {
        std::vector<int> train, test;
        for (Eigen::Index i = 0; i < n; ++i) {
          (fold_of[static_cast<std::size_t>(i)] == fold ? test : train).push_back(static_cast<int>(i));
        }
        const Eigen::VectorXd t_train = subvector(t, train);
        const double s1 = t_train.sum();
        if (s1 < 1 || s1 > static_cast<double>(train.size()) - 1) {
          ok = false;
          break;
        }
        try {
          const TlfModel m = tlf_fit_gram(submatrix(k, train, train), t_train, estimand, lambda);
          const Eigen::VectorXd fx =
              (submatrix(k, test, train) * m.alpha).array() + m.intercept;
          double score = 0.0;
          for (std::size_t a = 0; a < test.size(); ++a) {
            score += score_terms(fx(static_cast<Eigen::Index>(a)), t(test[a]), estimand).s;
          }
          total += score / static_cast<double>(test.size());
        } catch (const NumericError&) {
          ok = false;
        }
      }
      const double mean = ok && std::isfinite(total) ? total / grid.folds
                                                     : -std::numeric_limits<double>::infinity();
      sel.cv_scores.push_back(mean);
      if (!have_best || mean > best) {
        best = mean;
        sel.best = {lambda, gamma};
        have_best = true;
      }
    }
  }
  return sel;
}

TlfHyper TlfHyperCache::get_or_compute(const Key& key, const std::function<TlfHyper()>& compute) {
  std::lock_guard<std::mutex> lock(mutex_);
  const auto it = values_.find(key);
  if (it != values_.end()) return it->second;
  const TlfHyper value = compute();
  values_.emplace(key, value);
  return value;
}

std::optional<TlfHyper> TlfHyperCache::find(const Key& key) const {
  std::lock_guard<std::mutex> lock(mutex_);
  const auto it = values_.find(key);
  if (it == values_.end()) return std::nullopt;
  return it->second;
}

BalanceWeights tlf_weights(const Eigen::MatrixXd& x, const Eigen::VectorXd& t, Estimand estimand,
                           const TlfHyper& hyper, const TlfFitOptions& options) {
  const auto [n0, n1] = group_sizes(t);
  (void)n0;
  (void)n1;
  const TlfModel model = tlf_fit(x, t, estimand, hyper.lambda, hyper.gamma, options);
  const Eigen::VectorXd p = model.fitted();

  BalanceWeights bw;
  bw.estimand = estimand;
  bw.method = Method::tlf;
  bw.kept.assign(static_cast<std::size_t>(t.size()), true);
  bw.values.resize(t.size());
  for (Eigen::Index i = 0; i < t.size(); ++i) {
    const double q = clamp_probability(p(i));
    if (estimand == Estimand::ATE) {
      bw.values(i) = t(i) == 1.0 ? 1.0 / q : 1.0 / (1.0 - q);
    } else {
      bw.values(i) = t(i) == 1.0 ? 1.0 : q / (1.0 - q);
    }
  }
  normalize_groups(bw.values, t);
  bw.diagnostics.solver_status = model.converged ? "optimal" : "max_iter";
  bw.diagnostics.solver_iterations = model.iterations;
  fill_summary(bw, t);
  return bw;
}

}  // namespace balance
