#include <cmath>
#include <random>

#include <doctest.h>

#include "relkit/error.hpp"
#include "relkit/ood.hpp"
#include "relkit/rng.hpp"

using namespace relkit;
using Eigen::MatrixXd;
using Eigen::VectorXd;

TEST_CASE("softmax and logit scores") {
  CHECK(msp_score(Eigen::RowVector3d(0, 1, 0)) == 0.0);
  CHECK(msp_score(Eigen::RowVector4d::Constant(0.25)) == 0.75);
  CHECK(msp_score(Eigen::RowVector3d(0.6, 0.3, 0.1)) == doctest::Approx(0.4).epsilon(1e-15));
  CHECK(entropy_score(Eigen::RowVector3d(0, 0, 1)) == 0.0);
  CHECK(entropy_score(Eigen::RowVector4d::Constant(0.25)) == doctest::Approx(std::log(4.0)).epsilon(1e-15));
  CHECK(entropy_score(Eigen::RowVector3d(0.5, 0.25, 0.25)) == doctest::Approx(1.5 * std::log(2.0)).epsilon(1e-15));
  CHECK(maxlogit_score(Eigen::RowVector3d(3, 1, 0)) == -3.0);
  CHECK(maxlogit_score(Eigen::RowVector3d(3.5, 1.5, 0.5)) == -3.5);
  // Class permutation invariance.
  CHECK(entropy_score(Eigen::RowVector3d(0.1, 0.6, 0.3)) == doctest::Approx(entropy_score(Eigen::RowVector3d(0.6, 0.3, 0.1))));
  CHECK(msp_score(Eigen::RowVector3d(0.1, 0.6, 0.3)) == msp_score(Eigen::RowVector3d(0.6, 0.3, 0.1)));
}

TEST_CASE("gaussian fit on a 1-D two-class case") {
  MatrixXd x(4, 1);
  x << 0, 0, 2, 2;
  const std::vector<int> y = {0, 0, 1, 1};
  const auto m = fit_class_gaussians(x, y, 2, 1e-3);
  CHECK(m.means(0, 0) == 0.0);
  CHECK(m.means(1, 0) == 2.0);
  CHECK(m.shared_cov(0, 0) == 0.0);
  CHECK(m.bg_mean(0) == 1.0);
  CHECK(m.bg_cov(0, 0) == 1.0);
  // Factors of (0 + reg).
  CHECK(mahalanobis_score(m, VectorXd::Constant(1, 1.0)) == doctest::Approx(1.0 / 1e-3));
}

TEST_CASE("gaussian fit matches direct formulas on random 2-D data") {
  auto rng = make_rng(21);
  std::normal_distribution<double> normal(0.0, 1.0);
  const int n = 90, k = 3;
  MatrixXd x(n, 2);
  std::vector<int> y(n);
  for (int i = 0; i < n; ++i) {
    y[static_cast<std::size_t>(i)] = i % k;
    x(i, 0) = normal(rng) + 3.0 * (i % k);
    x(i, 1) = 0.5 * normal(rng) - (i % k);
  }
  const auto m = fit_class_gaussians(x, y, k);
  MatrixXd cov = MatrixXd::Zero(2, 2);
  for (int c = 0; c < k; ++c) {
    Eigen::RowVector2d mu = Eigen::RowVector2d::Zero();
    int count = 0;
    for (int i = 0; i < n; ++i)
      if (y[static_cast<std::size_t>(i)] == c) mu += x.row(i), ++count;
    mu /= count;
    CHECK((m.means.row(c) - mu).cwiseAbs().maxCoeff() <= 1e-10);
    for (int i = 0; i < n; ++i)
      if (y[static_cast<std::size_t>(i)] == c) cov += (x.row(i) - mu).transpose() * (x.row(i) - mu);
  }
  cov /= n;
  CHECK((m.shared_cov - cov).cwiseAbs().maxCoeff() <= 1e-10);
  CHECK(m.reg == doctest::Approx(1e-6 * cov.trace() / 2.0));
  for (int c = 0; c < k; ++c) CHECK(mahalanobis_score(m, m.means.row(c).transpose()) == 0.0);

  // Example order does not matter.
  std::vector<int> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  MatrixXd xp(n, 2);
  std::vector<int> yp(n);
  for (int i = 0; i < n; ++i) {
    xp.row(i) = x.row(perm[static_cast<std::size_t>(i)]);
    yp[static_cast<std::size_t>(i)] = y[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
  }
  const auto mp = fit_class_gaussians(xp, yp, k);
  CHECK((mp.means - m.means).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK((mp.shared_cov - m.shared_cov).cwiseAbs().maxCoeff() <= 1e-12);
}

namespace {

GaussianClassModel model_with(const MatrixXd& means, const MatrixXd& cov) {
  GaussianClassModel m;
  m.means = means;
  m.shared_cov = cov;
  m.bg_mean = means.colwise().mean().transpose();
  m.bg_cov = cov;
  m.chol.compute(cov);
  m.bg_chol.compute(cov);
  return m;
}

}  // namespace

TEST_CASE("mahalanobis distance examples") {
  MatrixXd means(2, 2);
  means << 0, 0, 2, 0;
  const auto iso = model_with(means, MatrixXd::Identity(2, 2));
  CHECK(mahalanobis_score(iso, Eigen::Vector2d(1, 0)) == doctest::Approx(1.0).epsilon(1e-15));

  // Sigma = s^2 I reduces to the scaled squared Euclidean distance.
  const auto scaled = model_with(means, 4.0 * MatrixXd::Identity(2, 2));
  CHECK(mahalanobis_score(scaled, Eigen::Vector2d(3, 1)) == doctest::Approx((1.0 + 1.0) / 4.0).epsilon(1e-15));

  // Anisotropic case against an explicit inverse.
  MatrixXd cov(2, 2);
  cov << 2.0, 0.6, 0.6, 0.5;
  const auto aniso = model_with(means, cov);
  const MatrixXd inv = cov.inverse();
  const Eigen::Vector2d z(0.7, -1.3);
  double expected = INFINITY;
  for (int c = 0; c < 2; ++c) {
    const Eigen::Vector2d d = z - means.row(c).transpose();
    expected = std::min(expected, d.dot(inv * d));
  }
  CHECK(std::abs(mahalanobis_score(aniso, z) - expected) <= 1e-10);
  CHECK_THROWS_AS(mahalanobis_score(aniso, Eigen::Vector3d(1, 2, 3)), ValidationError);
}

TEST_CASE("relative mahalanobis") {
  auto rng = make_rng(8);
  std::normal_distribution<double> normal(0.0, 1.0);
  MatrixXd x(40, 3);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = normal(rng);
  // A single class: class and background fits coincide.
  const auto one = fit_class_gaussians(x, std::vector<int>(40, 0), 1);
  for (int i = 0; i < 5; ++i) CHECK(std::abs(relative_mahalanobis_score(one, x.row(i).transpose())) <= 1e-12);

  std::vector<int> y(40);
  for (int i = 0; i < 40; ++i) y[static_cast<std::size_t>(i)] = i % 2;
  const auto two = fit_class_gaussians(x, y, 2);
  const VectorXd z = x.row(3).transpose();
  CHECK(relative_mahalanobis_score(two, z) ==
        doctest::Approx(mahalanobis_score(two, z) - background_mahalanobis(two, z)).epsilon(1e-14));
}

TEST_CASE("gaussian fit errors and warnings") {
  MatrixXd x = MatrixXd::Random(3, 4);
  CHECK_THROWS_AS(fit_class_gaussians(x, std::vector<int>{0, 0, 0}, 2), ValidationError);
  CHECK_THROWS_AS(fit_class_gaussians(x, std::vector<int>{0, 1}, 2), ValidationError);
  CHECK_THROWS_AS(fit_class_gaussians(x, std::vector<int>{0, 1, 5}, 2), ValidationError);
  const auto m = fit_class_gaussians(x, std::vector<int>{0, 1, 1}, 2);
  CHECK(m.warnings.size() == 2);  // single example in class 0; N <= D
}

TEST_CASE("sequence entropy") {
  SequenceDistribution seq;
  seq.step_probs.resize(4, 3);
  seq.step_probs << 1, 0, 0, 0.5, 0.5, 0, 1.0 / 3, 1.0 / 3, 1.0 / 3, 0.2, 0.2, 0.6;
  seq.length = 3;  // the last row is padding
  CHECK(sequence_entropy_score(seq) == doctest::Approx((std::log(2.0) + std::log(3.0)) / 3.0).epsilon(1e-15));

  SequenceDistribution one;
  one.step_probs = seq.step_probs.row(3);
  one.length = 1;
  CHECK(sequence_entropy_score(one) == doctest::Approx(entropy_score(seq.step_probs.row(3))).epsilon(1e-15));

  SequenceDistribution uniform{MatrixXd::Constant(5, 4, 0.25), 5};
  CHECK(sequence_entropy_score(uniform) == doctest::Approx(std::log(4.0)));
  SequenceDistribution empty{MatrixXd::Constant(2, 4, 0.25), 0};
  CHECK_THROWS_AS(sequence_entropy_score(empty), ValidationError);
}

TEST_CASE("osr evaluation") {
  const auto disjoint = osr_evaluate(std::vector<double>{0.1, 0.2}, std::vector<double>{0.5, 0.9});
  CHECK(disjoint.auroc == 1.0);
  CHECK(disjoint.auprc == 1.0);
  CHECK(osr_evaluate(std::vector<double>{0.3, 0.3}, std::vector<double>{0.3, 0.3}).auroc == 0.5);
  // 3 in, 3 out: out 0.4 beats 0.1 and ties 0.4; out 0.35 beats 0.1; out 0.8 beats all.
  const auto hand = osr_evaluate(std::vector<double>{0.1, 0.4, 0.6}, std::vector<double>{0.4, 0.35, 0.8});
  CHECK(hand.auroc == doctest::Approx(5.5 / 9.0).epsilon(1e-15));
  CHECK_THROWS_AS(osr_evaluate(std::vector<double>{}, std::vector<double>{1.0}), ValidationError);
}
