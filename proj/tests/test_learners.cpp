#include <doctest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "balance/errors.hpp"
#include "balance/learners.hpp"
#include "support.hpp"

using namespace balance;

namespace {

double expit(double z) { return 1.0 / (1.0 + std::exp(-z)); }

Eigen::VectorXd score(const LogisticModel& m, const Eigen::MatrixXd& design,
                      const Eigen::VectorXd& y) {
  Eigen::MatrixXd z(design.rows(), design.cols() + 1);
  z.col(0).setOnes();
  z.rightCols(design.cols()) = design;
  Eigen::VectorXd p(design.rows());
  for (Eigen::Index i = 0; i < p.size(); ++i) p(i) = expit(z.row(i).dot(m.coefficients));
  return z.transpose() * (y - p);
}

}  // namespace

TEST_CASE("feature engineering") {
  std::mt19937_64 rng(1);
  const Eigen::MatrixXd x = testsupport::random_matrix(6, 10, rng);
  CHECK(engineer_features(x, {Target::propensity, Form::misspecified}) == x);
  CHECK(engineer_features(x, {Target::outcome, Form::misspecified}) == x);

  Eigen::MatrixXd row = Eigen::MatrixXd::Zero(1, 10);
  row(0, 0) = 1.0;
  row(0, 1) = 2.0;
  const Eigen::MatrixXd p = engineer_features(row, {Target::propensity, Form::well_specified});
  REQUIRE(p.cols() == 11);
  CHECK(p(0, 10) == 4.0);
  CHECK(p.leftCols(10) == row);

  row(0, 2) = 0.0;
  row(0, 3) = 3.0;
  CHECK(engineer_features(row, {Target::outcome, Form::well_specified})(0, 10) == 0.0);
  row(0, 2) = -1.0;
  CHECK(engineer_features(row, {Target::outcome, Form::well_specified})(0, 10) == -9.0);

  CHECK_THROWS_AS(engineer_features(Eigen::MatrixXd::Zero(3, 9), {}), ShapeError);
}

TEST_CASE("separable labels fall back to a ridge fit") {
  Eigen::MatrixXd design(8, 1);
  design << -4, -3, -2, -1, 1, 2, 3, 4;
  Eigen::VectorXd labels(8);
  labels << 0, 0, 0, 0, 1, 1, 1, 1;
  const LogisticModel m = fit_logistic(design, labels);
  CHECK(m.converged);
  CHECK(m.ridge_used > 0.0);
  const Eigen::VectorXd p = predict_design(m, design);
  for (Eigen::Index i = 0; i < 8; ++i) CHECK((p(i) > 0.5) == (labels(i) == 1.0));
}

TEST_CASE("maximum likelihood recovers known coefficients") {
  std::mt19937_64 rng(12);
  const int n = 100000;
  const Eigen::MatrixXd x = testsupport::random_matrix(n, 3, rng);
  Eigen::VectorXd beta(4);
  beta << -0.5, 1.0, -0.7, 0.3;
  Eigen::VectorXd y(n);
  std::uniform_real_distribution<double> u;
  for (int i = 0; i < n; ++i) {
    y(i) = u(rng) < expit(beta(0) + x.row(i).dot(beta.tail(3))) ? 1.0 : 0.0;
  }
  const LogisticModel m = fit_logistic(x, y);
  CHECK(m.ridge_used == 0.0);
  CHECK((m.coefficients - beta).cwiseAbs().maxCoeff() < 0.05);
  CHECK(score(m, x, y).cwiseAbs().maxCoeff() < 1e-6);

  const auto& trace = m.log_likelihood_trace;
  REQUIRE(trace.size() >= 2);
  for (std::size_t k = 1; k < trace.size(); ++k) CHECK(trace[k] >= trace[k - 1] - 1e-9);
}

TEST_CASE("intercept-only fit") {
  Eigen::VectorXd y = Eigen::VectorXd::Zero(10);
  y.head(3).setOnes();
  const LogisticModel m = fit_logistic(Eigen::MatrixXd(10, 0), y);
  REQUIRE(m.coefficients.size() == 1);
  CHECK(m.coefficients(0) == doctest::Approx(std::log(0.3 / 0.7)).epsilon(1e-10));
}

TEST_CASE("fit_logistic input errors") {
  const Eigen::MatrixXd x = Eigen::MatrixXd::Ones(4, 1);
  CHECK_THROWS_AS(fit_logistic(x, Eigen::VectorXd::Ones(4)), DomainError);
  CHECK_THROWS_AS(fit_logistic(x, Eigen::VectorXd::Zero(4)), DomainError);
  CHECK_THROWS_AS(fit_logistic(x, Eigen::VectorXd::Zero(3)), ShapeError);
  Eigen::VectorXd bad(4);
  bad << 0, 1, 2, 0;
  CHECK_THROWS_AS(fit_logistic(x, bad), DomainError);
}

TEST_CASE("predictions") {
  LogisticModel m;
  m.features = {Target::propensity, Form::misspecified};
  m.coefficients = Eigen::VectorXd::Zero(11);
  m.coefficients(0) = -0.4;
  m.coefficients(1) = 0.8;
  m.coefficients(2) = -1.3;

  const Eigen::MatrixXd zero = Eigen::MatrixXd::Zero(1, 10);
  CHECK(predict_proba(m, zero)(0) == doctest::Approx(expit(-0.4)).epsilon(1e-15));

  Eigen::MatrixXd a = zero, b = zero;
  b(0, 0) = 1.0;
  CHECK(predict_proba(m, b)(0) > predict_proba(m, a)(0));

  std::mt19937_64 rng(3);
  const Eigen::MatrixXd x = testsupport::random_matrix(50, 10, rng);
  const Eigen::VectorXd p = predict_proba(m, x);
  for (int i = 0; i < 50; ++i) {
    double eta = m.coefficients(0);
    for (int k = 0; k < 10; ++k) eta += m.coefficients(k + 1) * x(i, k);
    CHECK(std::abs(p(i) - expit(eta)) < 1e-14);
  }

  m.coefficients(0) = 500.0;
  const double hi = predict_proba(m, zero)(0);
  CHECK(hi < 1.0);
  CHECK(hi == 1.0 - kProbabilityClamp);
  m.coefficients(0) = -500.0;
  CHECK(predict_proba(m, zero)(0) == kProbabilityClamp);

  CHECK_THROWS_AS(predict_proba(m, Eigen::MatrixXd::Zero(2, 9)), ShapeError);
}

TEST_CASE("coefficient listing") {
  LogisticModel m;
  m.coefficients = Eigen::VectorXd::LinSpaced(3, 0.0, 1.0);
  std::ostringstream os;
  write_coefficients(os, m);
  CHECK(os.str().find("intercept") != std::string::npos);
}

TEST_CASE("oracle learners are exact") {
  const ScenarioSpec spec = build_scenario(Rarity::rare, Confounding::high, 400, 2);
  Rng rng(8);
  const SimulatedDataset d = generate_dataset(spec, rng);
  const Learner prop = make_learner(LearnerKind::oracle, spec, Target::propensity);
  const Learner resp = make_learner(LearnerKind::oracle, spec, Target::outcome);
  CHECK((prop.predict(d.x) - d.e_true).cwiseAbs().maxCoeff() == 0.0);
  CHECK((resp.predict(d.x) - d.mu_true).cwiseAbs().maxCoeff() == 0.0);
  CHECK(prop.kind() == LearnerKind::oracle);
}

TEST_CASE("well-specified propensity fits better than the misspecified one") {
  const ScenarioSpec spec = build_scenario(Rarity::common, Confounding::high, 2000, 4);
  Rng rng(derive_seed(4, spec.grid_index(), 0));
  const SimulatedDataset d = generate_dataset(spec, rng);
  const FeatureSpec well{Target::propensity, Form::well_specified};
  const FeatureSpec mis{Target::propensity, Form::misspecified};
  const LogisticModel mw = fit_logistic(engineer_features(d.x, well), d.t, well);
  const LogisticModel mm = fit_logistic(engineer_features(d.x, mis), d.t, mis);
  const double lw = logistic_log_likelihood(mw.coefficients, engineer_features(d.x, well), d.t);
  const double lm = logistic_log_likelihood(mm.coefficients, engineer_features(d.x, mis), d.t);
  CHECK(lw > lm);

  const Learner lrn = fit_learner(LearnerKind::logistic_well, spec, Target::propensity, d.x, d.t);
  CHECK((lrn.predict(d.x) - predict_proba(mw, d.x)).cwiseAbs().maxCoeff() < 1e-12);
  const Eigen::VectorXd p = lrn.predict(d.x);
  CHECK(p.minCoeff() > 0.0);
  CHECK(p.maxCoeff() < 1.0);
}

TEST_CASE("learner labels") {
  CHECK(parse_learner_kind("oracle") == LearnerKind::oracle);
  CHECK(parse_learner_kind("logistic_well") == LearnerKind::logistic_well);
  CHECK(to_string(LearnerKind::logistic_mis) == "logistic_mis");
  CHECK_THROWS_AS(parse_learner_kind("forest"), ConfigError);
}
