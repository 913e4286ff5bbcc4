#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "balance/rng.hpp"

namespace balance {

enum class Rarity { common, rare, very_rare };
enum class Confounding { low, moderate, high };

Rarity parse_rarity(std::string_view label);
Confounding parse_confounding(std::string_view label);
std::string to_string(Rarity r);
std::string to_string(Confounding c);

inline constexpr int kNumCovariates = 10;
inline constexpr int kMinSampleSize = 20;
inline constexpr std::array<int, 4> kGridSampleSizes = {250, 500, 1000, 2000};

/// A simulation cell. The constants are fixed by the labels:
/// confounding -> (a0, g), rarity -> b0.
struct ScenarioSpec {
  int n = 0;
  Rarity rarity = Rarity::common;
  Confounding confounding = Confounding::low;
  double a0 = 0.0;
  double b0 = 0.0;
  double g = 0.0;
  std::uint64_t seed = 0;

  /// Position in the 36-cell grid (n-major, then rarity, then confounding)
  /// for grid sample sizes; a hash of n otherwise. Used to derive RNG streams.
  std::uint64_t grid_index() const;
  std::string id() const;
};

ScenarioSpec build_scenario(Rarity rarity, Confounding confounding, int n, std::uint64_t seed);
ScenarioSpec build_scenario(std::string_view rarity, std::string_view confounding, int n,
                            std::uint64_t seed);

/// Latent Gaussian covariance plus the fixed outcome/treatment coefficients.
/// The Cholesky factor is computed once at construction.
class CovariateModel {
 public:
  CovariateModel();
  explicit CovariateModel(const Eigen::MatrixXd& covariance);

  static const CovariateModel& standard();

  const Eigen::MatrixXd& covariance() const { return covariance_; }
  const Eigen::MatrixXd& cholesky_factor() const { return lower_; }
  static bool is_continuous(int column);  // 0-based

  static const Eigen::Matrix<double, kNumCovariates, 1>& outcome_coefficients();
  static const Eigen::Matrix<double, kNumCovariates, 1>& treatment_coefficients();

 private:
  Eigen::MatrixXd covariance_;
  Eigen::MatrixXd lower_;
};

/// Draws the latent Gaussian matrix (n x 10) without dichotomizing.
Eigen::MatrixXd sample_latent(const CovariateModel& model, int n, Rng& rng);
/// Applies the column-wise dichotomization to a latent matrix.
Eigen::MatrixXd dichotomize(const Eigen::MatrixXd& latent);
Eigen::MatrixXd sample_covariates(const CovariateModel& model, int n, Rng& rng);

struct SimulatedDataset {
  Eigen::MatrixXd x;       // n x 10
  Eigen::VectorXd t;       // 0/1
  Eigen::VectorXd y;       // observed outcome
  Eigen::VectorXd y0, y1;  // potential outcomes
  Eigen::VectorXd e_true;
  Eigen::VectorXd mu_true;
  int n0 = 0;
  int n1 = 0;
  int rejections = 0;  // redraws caused by an empty arm

  int size() const { return static_cast<int>(t.size()); }
};

inline constexpr int kMaxConsecutiveRejections = 100;

SimulatedDataset generate_dataset(const ScenarioSpec& spec, Rng& rng);

// Probabilities handed to weighting code are kept inside
// [kProbabilityClamp, 1 - kProbabilityClamp] so inverse weights stay finite.
inline constexpr double kProbabilityClamp = 1e-12;

double logistic(double z);
double logit(double p);

/// Exact logistic evaluation, clamped to [kProbabilityClamp, 1 - kProbabilityClamp].
double true_propensity(const ScenarioSpec& spec, const Eigen::Ref<const Eigen::RowVectorXd>& row);
double true_response(const ScenarioSpec& spec, const Eigen::Ref<const Eigen::RowVectorXd>& row);

/// Difference of raw group means.
double crude_estimate(const Eigen::VectorXd& y, const Eigen::VectorXd& t);
double crude_estimate(const SimulatedDataset& data);

/// Debug dump: x1..x10,t,y,y0,y1,e_true,mu_true.
void write_dataset_csv(const SimulatedDataset& data, const std::filesystem::path& path);

}  // namespace balance
