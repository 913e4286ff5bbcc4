#include "balance/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "balance/errors.hpp"

namespace balance {

namespace {

void check_scale(const KernelSpec& kernel) {
  if (!(kernel.scale > 0.0) || !std::isfinite(kernel.scale)) {
    throw DomainError("kernel scale must be positive and finite");
  }
}

}  // namespace

double KernelSpec::operator()(const Eigen::Ref<const Eigen::RowVectorXd>& a,
                              const Eigen::Ref<const Eigen::RowVectorXd>& b) const {
  if (family == KernelFamily::gaussian) {
    return std::exp(-(a - b).squaredNorm() / (2.0 * scale * scale));
  }
  return std::exp(-scale * (a - b).cwiseAbs().sum());
}

Eigen::MatrixXd cross_gram(const KernelSpec& kernel, const Eigen::MatrixXd& a,
                           const Eigen::MatrixXd& b) {
  check_scale(kernel);
  if (a.cols() != b.cols()) throw ShapeError("cross_gram: column counts differ");
  Eigen::MatrixXd k(a.rows(), b.rows());
  for (Eigen::Index j = 0; j < b.rows(); ++j) {
    for (Eigen::Index i = 0; i < a.rows(); ++i) k(i, j) = kernel(a.row(i), b.row(j));
  }
  return k;
}

GramMatrix gram(const KernelSpec& kernel, const Eigen::MatrixXd& x) {
  check_scale(kernel);
  if (x.rows() == 0) throw DomainError("gram: empty covariate matrix");
  const Eigen::Index n = x.rows();
  GramMatrix g{Eigen::MatrixXd(n, n), kernel};
  for (Eigen::Index j = 0; j < n; ++j) {
    g.values(j, j) = 1.0;
    for (Eigen::Index i = j + 1; i < n; ++i) {
      const double v = kernel(x.row(i), x.row(j));
      g.values(i, j) = v;
      g.values(j, i) = v;
    }
  }
  return g;
}

DistanceMatrix distance_matrix(const Eigen::MatrixXd& x) {
  const Eigen::Index n = x.rows();
  DistanceMatrix d{Eigen::MatrixXd::Zero(n, n)};
  for (Eigen::Index j = 0; j < n; ++j) {
    for (Eigen::Index i = j + 1; i < n; ++i) {
      const double v = (x.row(i) - x.row(j)).norm();
      d.values(i, j) = v;
      d.values(j, i) = v;
    }
  }
  return d;
}

double median_heuristic(const Eigen::MatrixXd& x) {
  const Eigen::Index n = x.rows();
  std::vector<double> dist;
  dist.reserve(static_cast<std::size_t>(n * (n - 1) / 2));
  for (Eigen::Index j = 0; j < n; ++j) {
    for (Eigen::Index i = j + 1; i < n; ++i) {
      const double v = (x.row(i) - x.row(j)).norm();
      if (v > 0.0) dist.push_back(v);
    }
  }
  if (dist.empty()) throw DomainError("median heuristic needs at least two distinct rows");
  const std::size_t m = dist.size();
  const auto mid = dist.begin() + static_cast<std::ptrdiff_t>(m / 2);
  std::nth_element(dist.begin(), mid, dist.end());
  if (m % 2 == 1) return *mid;
  const double upper = *mid;
  const double lower = *std::max_element(dist.begin(), mid);
  return 0.5 * (lower + upper);
}

bool all_rows_identical(const Eigen::MatrixXd& x) {
  for (Eigen::Index i = 1; i < x.rows(); ++i) {
    if (x.row(i) != x.row(0)) return false;
  }
  return true;
}

}  // namespace balance
