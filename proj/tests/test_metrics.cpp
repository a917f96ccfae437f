#include <cmath>
#include <random>

#include <doctest.h>

#include "oracles.hpp"
#include "relkit/error.hpp"
#include "relkit/metrics.hpp"
#include "relkit/rng.hpp"

using namespace relkit;
using Eigen::MatrixXd;

namespace {

MatrixXd rows(std::initializer_list<std::initializer_list<double>> r) {
  MatrixXd m(static_cast<Eigen::Index>(r.size()), static_cast<Eigen::Index>(r.begin()->size()));
  Eigen::Index i = 0;
  for (const auto& row : r) {
    Eigen::Index j = 0;
    for (double v : row) m(i, j++) = v;
    ++i;
  }
  return m;
}

}  // namespace

TEST_CASE("accuracy, tie rule and proper scores") {
  CHECK(accuracy(PredictionBatch::make(rows({{1, 0}, {0, 1}}), {0, 1})) == 1.0);
  CHECK(accuracy(PredictionBatch::make(rows({{0.9, 0.1}, {0.2, 0.8}, {0.6, 0.4}, {0.3, 0.7}}), {0, 1, 0, 0})) == 0.75);
  CHECK(accuracy(PredictionBatch::make(rows({{0.5, 0.5}}), {1})) == 0.0);
  CHECK(argmax(Eigen::RowVector3d(0.4, 0.4, 0.2)) == 0);

  const auto perfect = PredictionBatch::make(rows({{1, 0, 0}, {0, 0, 1}}), {0, 2});
  CHECK(nll(perfect) == 0.0);
  CHECK(brier(perfect) == 0.0);
  const auto uniform = PredictionBatch::make(MatrixXd::Constant(3, 10, 0.1), {0, 4, 9});
  CHECK(nll(uniform) == doctest::Approx(std::log(10.0)).epsilon(1e-12));
  CHECK(brier(PredictionBatch::make(rows({{0.8, 0.2}}), {0})) == doctest::Approx(0.08).epsilon(1e-12));
}

TEST_CASE("nll clamps zero probabilities") {
  const double v = nll(PredictionBatch::make(rows({{1, 0}}), {1}));
  CHECK(std::isfinite(v));
  CHECK(v == doctest::Approx(-std::log(1e-12)));
}

TEST_CASE("ece examples") {
  CHECK(ece(PredictionBatch::make(rows({{1, 0}, {0, 1}}), {0, 1})) == 0.0);
  CHECK(ece(PredictionBatch::make(rows({{1, 0}}), {1})) == 1.0);
  // Confidences 0.9, 0.8, 0.6, 0.55 land in bins 13, 12, 9, 8: each bin holds
  // one example, so ECE = (0.1 + 0.8 + 0.4 + 0.55) / 4.
  const auto b = PredictionBatch::make(rows({{0.9, 0.1}, {0.8, 0.2}, {0.6, 0.4}, {0.55, 0.45}}), {0, 1, 0, 1});
  CHECK(ece(b, 15) == doctest::Approx(0.4625).epsilon(1e-14));
  CHECK(ece(b, 15) == doctest::Approx(oracle::ece(b.probs, b.labels, 15)).epsilon(1e-14));
  // One bin: |accuracy - mean confidence| = |0.5 - 0.7125|.
  CHECK(ece(b, 1) == doctest::Approx(0.2125).epsilon(1e-14));
  CHECK_THROWS_AS(ece(b, 0), ValidationError);
}

TEST_CASE("ece is permutation invariant") {
  auto rng = make_rng(3);
  MatrixXd z = MatrixXd::Random(50, 4) * 3.0;
  const MatrixXd p = softmax_rows(z);
  std::vector<int> y(50);
  for (int i = 0; i < 50; ++i) y[static_cast<std::size_t>(i)] = i % 4;
  std::vector<Eigen::Index> perm(50);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  const auto batch = PredictionBatch::make(p, y);
  CHECK(ece(batch.subset(perm)) == doctest::Approx(ece(batch)).epsilon(1e-14));
}

TEST_CASE("binary auroc and auprc") {
  const std::vector<double> s = {0.1, 0.4, 0.35, 0.8};
  const std::vector<bool> pos = {false, false, true, true};
  CHECK(binary_auroc(s, pos) == 0.75);
  CHECK(binary_auroc(std::vector<double>{1, 2, 3, 4}, {false, false, true, true}) == 1.0);
  CHECK(binary_auroc(std::vector<double>{2, 2, 2}, {false, true, true}) == 0.5);
  // Ranks by descending score: 0.8 (pos), 0.4 (neg), 0.35 (pos), 0.1 (neg).
  CHECK(binary_auprc(s, pos) == doctest::Approx((1.0 + 2.0 / 3.0) / 2.0).epsilon(1e-15));
  // Equal scores rank in index order: the negative at index 0 precedes both positives.
  CHECK(binary_auprc(std::vector<double>{1, 1, 1}, {false, true, true}) == doctest::Approx((0.5 + 2.0 / 3.0) / 2.0));
  CHECK_THROWS_AS(binary_auroc(std::vector<double>{1, 2}, {true, true}), DegenerateInput);
  CHECK_THROWS_AS(binary_auprc(std::vector<double>{1, 2}, {false, false}), DegenerateInput);
}

TEST_CASE("binary auroc matches pair counting on random inputs") {
  auto rng = make_rng(11);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 50; ++t) {
    const int n = 2 + t * 7;
    std::vector<double> s(static_cast<std::size_t>(n));
    std::vector<bool> pos(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      s[static_cast<std::size_t>(i)] = std::floor(u(rng) * 8.0);
      pos[static_cast<std::size_t>(i)] = i % 2 == 0;
    }
    CHECK(std::abs(binary_auroc(s, pos) - oracle::auroc(s, pos)) <= 1e-12);
    CHECK(std::abs(binary_auprc(s, pos) - oracle::auprc(s, pos)) <= 1e-12);
  }
}

TEST_CASE("calibration auroc") {
  // Uncertainties 0.1 0.2 0.3 0.4 0.4 0.5 with the 0.3, second 0.4 and 0.5
  // predictions wrong: 7.5 winning pairs of 9.
  const auto b = PredictionBatch::make(
      rows({{0.9, 0.1}, {0.8, 0.2}, {0.7, 0.3}, {0.6, 0.4}, {0.6, 0.4}, {0.5, 0.5}}), {0, 0, 1, 0, 1, 1});
  CHECK(calibration_auroc(b) == doctest::Approx(5.0 / 6.0).epsilon(1e-15));
  const auto exact = PredictionBatch::make(rows({{0.9, 0.1}, {0.6, 0.4}}), {0, 1});
  CHECK(calibration_auroc(exact) == 1.0);
  const auto constant = PredictionBatch::make(rows({{0.7, 0.3}, {0.7, 0.3}}), {0, 1});
  CHECK(calibration_auroc(constant) == 0.5);
  CHECK_THROWS_AS(calibration_auroc(PredictionBatch::make(rows({{0.9, 0.1}}), {0})), DegenerateInput);
}

TEST_CASE("oracle collaborative accuracy") {
  // Correct: 1 0 1 1 0 0 1 1 1 0. The three 0.9 uncertainties tie; the two
  // lowest indices (0 and 3, both already correct) are referred.
  MatrixXd p(10, 2);
  const std::vector<int> ok = {1, 0, 1, 1, 0, 0, 1, 1, 1, 0};
  std::vector<int> y;
  for (int i = 0; i < 10; ++i) {
    p.row(i) << 0.8, 0.2;
    y.push_back(ok[static_cast<std::size_t>(i)] ? 0 : 1);
  }
  const std::vector<double> u = {0.9, 0.5, 0.1, 0.9, 0.3, 0.9, 0.2, 0.1, 0.4, 0.3};
  const auto b = PredictionBatch::make(p, y);
  CHECK(oracle_collaborative_accuracy(b, u, 0.2) == 0.6);
  CHECK(oracle_collaborative_accuracy(b, u, 0.2) == oracle::collaborative_accuracy(p, y, u, 0.2));
  CHECK(oracle_collaborative_accuracy(b, u, 0.0) == accuracy(b));
  CHECK(oracle_collaborative_accuracy(b, u, 1.0) == 1.0);
  CHECK(oracle_collaborative_accuracy(b, u, 0.3) == 0.7);
  double prev = 0.0;
  for (int i = 0; i <= 20; ++i) {
    const double v = oracle_collaborative_accuracy(b, u, i / 20.0);
    CHECK(v >= prev);
    prev = v;
  }
}

TEST_CASE("oracle collaborative auroc scores referred examples as correct") {
  const auto b = PredictionBatch::make(rows({{0.9, 0.1}, {0.6, 0.4}, {0.7, 0.3}, {0.8, 0.2}}), {0, 1, 1, 0});
  const std::vector<double> u = {0.1, 0.4, 0.3, 0.2};
  // Budget 0.25 refers example 1; example 2 is the only remaining error and
  // has the highest remaining uncertainty.
  CHECK(oracle_collaborative_auroc(b, u, 0.25) == 1.0);
  CHECK_THROWS_AS(oracle_collaborative_auroc(b, u, 0.5), DegenerateInput);
}

TEST_CASE("rejection curve on a crafted case") {
  // Correct 1 0 1 1 0 1 1 0; rejection order 1, then 4 before 6 (tie), then 5.
  MatrixXd p(8, 2);
  const std::vector<int> ok = {1, 0, 1, 1, 0, 1, 1, 0};
  std::vector<int> y;
  for (int i = 0; i < 8; ++i) {
    p.row(i) << 0.7, 0.3;
    y.push_back(ok[static_cast<std::size_t>(i)] ? 0 : 1);
  }
  const std::vector<double> u = {0.1, 0.8, 0.2, 0.3, 0.6, 0.4, 0.6, 0.2};
  const std::vector<double> rates = {0.0, 0.25, 0.5};
  const auto b = PredictionBatch::make(p, y);
  const auto c = rejection_curve(b, u, RejectionMetric::accuracy, rates);
  REQUIRE(c.points.size() == 3);
  CHECK(c.points[0].y == 5.0 / 8.0);
  CHECK(c.points[1].y == 5.0 / 6.0);
  CHECK(c.points[2].y == 3.0 / 4.0);
  CHECK(rejection_auc(c.points) == doctest::Approx(73.0 / 192.0).epsilon(1e-15));
  CHECK(rejection_auc(c.points) == doctest::Approx(oracle::rejection_auc_accuracy(p, y, u, rates)).epsilon(1e-15));
}

TEST_CASE("rejection curve monotonicity with oracle uncertainty") {
  auto rng = make_rng(5);
  const MatrixXd p = softmax_rows(MatrixXd::Random(200, 3) * 2.0);
  std::vector<int> y(200);
  std::uniform_int_distribution<int> pick(0, 2);
  for (auto& v : y) v = pick(rng);
  const auto b = PredictionBatch::make(p, y);
  const auto ok = correctness(b);
  std::vector<double> oracle_u, anti_u;
  for (bool c : ok) {
    oracle_u.push_back(c ? 0.0 : 1.0);
    anti_u.push_back(c ? 1.0 : 0.0);
  }
  const auto rates = default_rejection_rates();
  const double err = 1.0 - accuracy(b);
  const auto good = rejection_curve(b, oracle_u, RejectionMetric::accuracy, rates);
  const auto bad = rejection_curve(b, anti_u, RejectionMetric::accuracy, rates);
  CHECK(good.points.front().y == accuracy(b));
  for (std::size_t i = 1; i < rates.size(); ++i) {
    CHECK(good.points[i].y >= good.points[i - 1].y);
    CHECK(bad.points[i].y <= bad.points[i - 1].y);
    if (rates[i] >= err) CHECK(good.points[i].y == 1.0);
  }
}

TEST_CASE("rejection curve validation and degenerate points") {
  const auto b = PredictionBatch::make(rows({{0.9, 0.1}, {0.2, 0.8}, {0.6, 0.4}, {0.3, 0.7}}), {0, 1, 1, 0});
  const std::vector<double> u = {0.1, 0.2, 0.3, 0.4};
  CHECK_THROWS_AS(rejection_curve(b, u, RejectionMetric::accuracy, std::vector<double>{0.0, 1.0}), ValidationError);
  CHECK_THROWS_AS(rejection_curve(b, u, RejectionMetric::accuracy, std::vector<double>{0.5, 0.2}), ValidationError);
  // After rejecting 3 of 4 only a negative remains.
  const auto c = rejection_curve(b, u, RejectionMetric::auroc, std::vector<double>{0.0, 0.75});
  CHECK(c.points.size() == 1);
  CHECK(c.omitted_rates == std::vector<double>{0.75});
  const auto rates = default_rejection_rates();
  CHECK(rates.size() == 100);
  CHECK(rates.front() == 0.0);
  CHECK(rates.back() == 0.99);
}

TEST_CASE("label uncertainty kl") {
  MatrixXd target = rows({{0.5, 0.5}});
  const auto b = PredictionBatch::make(rows({{0.9, 0.1}}), {0}, target);
  CHECK(label_uncertainty_kl(b) == doctest::Approx(std::log(5.0 / 3.0)).epsilon(1e-15));
  CHECK(label_uncertainty_kl(b) == doctest::Approx(oracle::kl(target, b.probs)).epsilon(1e-15));
  CHECK(label_uncertainty_kl(PredictionBatch::make(target, {0}, target)) == 0.0);
  const double clamped = label_uncertainty_kl(PredictionBatch::make(rows({{1.0, 0.0}}), {0}, target));
  CHECK(std::isfinite(clamped));
  CHECK(clamped > 10.0);
  CHECK_THROWS_AS(label_uncertainty_kl(PredictionBatch::make(target, {0})), ValidationError);
}

TEST_CASE("subpopulation percentiles") {
  const std::map<int, double> even = {{0, 0.2}, {1, 0.4}, {2, 0.6}, {3, 0.8}, {4, 1.0}};
  CHECK(subpopulation_percentiles(even, std::vector<double>{50}).at(50) == doctest::Approx(0.6));
  const std::map<int, double> same = {{0, 0.3}, {5, 0.3}};
  for (const auto& [q, v] : subpopulation_percentiles(same, std::vector<double>{10, 90})) CHECK(v == 0.3);
  // Sorted 0.1 0.2 0.3 0.5 0.7 0.8 0.9: position 1.5 lies halfway from 0.2 to 0.3.
  const std::map<int, double> uneven = {{0, 0.9}, {1, 0.1}, {2, 0.5}, {3, 0.3}, {7, 0.7}, {9, 0.2}, {12, 0.8}};
  const auto pct = subpopulation_percentiles(uneven, std::vector<double>{0, 25, 100});
  CHECK(pct.at(25) == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(pct.at(0) == 0.1);
  CHECK(pct.at(100) == 0.9);
}

TEST_CASE("per group accuracy") {
  const auto b = PredictionBatch::make(rows({{0.9, 0.1}, {0.2, 0.8}, {0.6, 0.4}}), {0, 0, 0}, std::nullopt,
                                       std::vector<int>{3, 3, 1});
  const auto g = per_group_accuracy(b);
  CHECK(g.at(3) == 0.5);
  CHECK(g.at(1) == 1.0);
}

TEST_CASE("prediction batch validation") {
  CHECK_THROWS_AS(PredictionBatch::make(rows({{0.5, 0.6}}), {0}), ValidationError);
  CHECK_THROWS_AS(PredictionBatch::make(rows({{0.5, 0.5}}), {2}), ValidationError);
  CHECK_THROWS_AS(PredictionBatch::make(rows({{0.5, 0.5}}), {0, 1}), ValidationError);
}

TEST_CASE("metric records and reliability score") {
  const auto acc = MetricRecord::make("in_distribution", "d", "test", "accuracy", 0.8, true, 0.0, 1.0);
  auto nll_rec = MetricRecord::make("in_distribution", "d", "test", "nll", 0.4 * std::log(10.0), false, 0.0, std::log(10.0));
  CHECK(acc.normalized() == doctest::Approx(80.0));
  CHECK(nll_rec.normalized() == doctest::Approx(60.0));
  const std::vector<MetricRecord> both = {acc, nll_rec};
  CHECK(reliability_score(both) == doctest::Approx(70.0));

  const auto over = MetricRecord::make("calibration", "d", "test", "kl", 5.0, false, 0.0, 1.0);
  CHECK(over.clamped);
  CHECK(over.value == 5.0);
  CHECK(over.normalized() == 0.0);
  auto bad = acc;
  bad.value = 1.5;
  CHECK_THROWS_AS(reliability_score(std::vector<MetricRecord>{bad}), ValidationError);
  CHECK_THROWS_AS(MetricRecord::make("t", "d", "s", "m", 0.5, true, 1.0, 1.0), ValidationError);

  // Affine re-expression with matching bounds leaves the score unchanged.
  const auto pct = MetricRecord::make("in_distribution", "d", "test", "accuracy_pct", 80.0, true, 0.0, 100.0);
  CHECK(pct.normalized() == doctest::Approx(acc.normalized()).epsilon(1e-15));
}
