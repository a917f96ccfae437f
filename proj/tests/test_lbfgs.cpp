#include <cmath>
#include <set>

#include <doctest.h>

#include "oracles.hpp"
#include "relkit/error.hpp"
#include "relkit/lbfgs.hpp"
#include "relkit/rng.hpp"

using namespace relkit;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

// Class 0 at x, class 1 at -x.
void mirrored(const std::vector<double>& xs, MatrixXd& x, std::vector<int>& y) {
  const auto n = static_cast<Eigen::Index>(xs.size());
  x.resize(2 * n, 1);
  y.clear();
  for (Eigen::Index i = 0; i < n; ++i) {
    x(i, 0) = xs[static_cast<std::size_t>(i)];
    y.push_back(0);
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    x(n + i, 0) = -xs[static_cast<std::size_t>(i)];
    y.push_back(1);
  }
}

}  // namespace

TEST_CASE("objective and gradient agree with the oracle") {
  auto rng = make_rng(3);
  std::normal_distribution<double> normal(0.0, 1.0);
  MatrixXd x(12, 3);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = normal(rng);
  std::vector<int> y;
  for (int i = 0; i < 12; ++i) y.push_back(i % 4);
  LinearSoftmaxHead head(3, 4);
  head.params().setRandom();
  VectorXd grad;
  const double value = logreg_objective(head, x, y, 0.3, &grad);
  MatrixXd gw;
  Eigen::RowVectorXd gb;
  const double expected = oracle::logreg(head.weights(), head.bias().row(0), x, y, 0.3, gw, gb);
  CHECK(value == doctest::Approx(expected).epsilon(1e-13));
  const auto& wb = head.block("weights");
  const auto& bb = head.block("bias");
  CHECK((Eigen::Map<const MatrixXd>(grad.data() + wb.offset, 3, 4) - gw).cwiseAbs().maxCoeff() <= 1e-13);
  CHECK((Eigen::Map<const Eigen::RowVectorXd>(grad.data() + bb.offset, 4) - gb).cwiseAbs().maxCoeff() <= 1e-13);
}

TEST_CASE("mirrored two-class data gives zero bias and matches a 1-D bisection") {
  MatrixXd x;
  std::vector<int> y;
  mirrored({1.0, 2.0, -0.5, 0.3}, x, y);
  const double l2 = 0.05;
  const auto fit = lbfgs_logreg(x, y, 2, LbfgsOptions{.l2 = l2});
  CHECK(fit.report.converged);
  CHECK(std::abs(fit.head.bias()(0, 0)) <= 1e-6);
  CHECK(std::abs(fit.head.bias()(0, 1)) <= 1e-6);

  // With w = (d/2, -d/2) the objective is mean log(1 + exp(-s x d)) + (l2/4) d^2
  // with s = +1 for class 0 and -1 for class 1.
  const auto dfdd = [&](double d) {
    double g = 0.0;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const double s = y[static_cast<std::size_t>(i)] == 0 ? 1.0 : -1.0;
      g += -s * x(i, 0) / (1.0 + std::exp(s * x(i, 0) * d));
    }
    return g / static_cast<double>(x.rows()) + 0.5 * l2 * d;
  };
  double lo = -100.0, hi = 100.0;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    (dfdd(mid) > 0 ? hi : lo) = mid;
  }
  const double d = 0.5 * (lo + hi);
  CHECK(std::abs(fit.head.weights()(0, 0) - d / 2) <= 1e-6);
  CHECK(std::abs(fit.head.weights()(0, 1) + d / 2) <= 1e-6);
}

TEST_CASE("gradient is small at return") {
  auto rng = make_rng(5);
  std::normal_distribution<double> normal(0.0, 1.0);
  MatrixXd x(60, 4);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = normal(rng);
  std::vector<int> y;
  for (int i = 0; i < 60; ++i) y.push_back((i * 5) % 3);
  const auto fit = lbfgs_logreg(x, y, 3, LbfgsOptions{.l2 = 0.1});
  REQUIRE(fit.report.converged);
  VectorXd grad;
  logreg_objective(fit.head, x, y, 0.1, &grad);
  CHECK(grad.lpNorm<Eigen::Infinity>() <= 1e-8);
  CHECK(fit.report.objective == doctest::Approx(logreg_objective(fit.head, x, y, 0.1, nullptr)));
}

TEST_CASE("separable data without regularization warns and caps iterations") {
  MatrixXd x;
  std::vector<int> y;
  mirrored({1.0, 2.0, 3.0}, x, y);
  CHECK(perceptron_separable(x, y, 2));
  const auto fit = lbfgs_logreg(x, y, 2, LbfgsOptions{.l2 = 0.0, .separable_iter_cap = 25});
  CHECK(fit.report.iterations <= 25);
  CHECK_FALSE(fit.report.warnings.empty());
  CHECK_THROWS_AS(lbfgs_logreg(x, y, 2, LbfgsOptions{.l2 = -1.0}), ValidationError);

  MatrixXd overlap;
  mirrored({1.0, -2.0}, overlap, y);
  CHECK_FALSE(perceptron_separable(overlap, y, 2));
}

TEST_CASE("fewshot sampling") {
  std::vector<int> labels;
  for (int i = 0; i < 30; ++i) labels.push_back(i % 3);
  const auto a = fewshot_sample(labels, 3, 4, 11);
  CHECK(a.size() == 12);
  CHECK(std::is_sorted(a.begin(), a.end()));
  CHECK(std::set<Eigen::Index>(a.begin(), a.end()).size() == 12);
  int counts[3] = {0, 0, 0};
  for (auto i : a) ++counts[labels[static_cast<std::size_t>(i)]];
  CHECK((counts[0] == 4 && counts[1] == 4 && counts[2] == 4));
  CHECK(fewshot_sample(labels, 3, 4, 11) == a);
  CHECK(fewshot_sample(labels, 3, 4, 12) != a);
  CHECK(fewshot_sample(labels, 3, 1, 0).size() == 3);
  CHECK(fewshot_sample(labels, 3, 10, 0).size() == 30);
  CHECK_THROWS_AS(fewshot_sample(labels, 3, 11, 0), ValidationError);
  CHECK_THROWS_AS(fewshot_sample(labels, 3, 0, 0), ValidationError);
}
