#pragma once

#include <Eigen/Dense>

#include <string>
#include <string_view>

namespace balance {

enum class KernelFamily { gaussian, laplacian };

/// gaussian: exp(-|x-x'|_2^2 / (2 scale^2)); laplacian: exp(-scale |x-x'|_1).
struct KernelSpec {
  KernelFamily family = KernelFamily::gaussian;
  double scale = 1.0;

  double operator()(const Eigen::Ref<const Eigen::RowVectorXd>& a,
                    const Eigen::Ref<const Eigen::RowVectorXd>& b) const;
};

struct GramMatrix {
  Eigen::MatrixXd values;
  KernelSpec kernel;
};

struct DistanceMatrix {
  Eigen::MatrixXd values;  // Euclidean
};

GramMatrix gram(const KernelSpec& kernel, const Eigen::MatrixXd& x);
/// Rows of `a` against rows of `b`.
Eigen::MatrixXd cross_gram(const KernelSpec& kernel, const Eigen::MatrixXd& a,
                           const Eigen::MatrixXd& b);

DistanceMatrix distance_matrix(const Eigen::MatrixXd& x);

/// Median of the strictly positive pairwise Euclidean distances.
double median_heuristic(const Eigen::MatrixXd& x);

/// True when every row equals the first one.
bool all_rows_identical(const Eigen::MatrixXd& x);

}  // namespace balance
