#include "relkit/active_learning.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "relkit/error.hpp"
#include "relkit/metrics.hpp"
#include "relkit/rng.hpp"

namespace relkit {

namespace {

constexpr std::uint64_t kInitStream = 11;
constexpr std::uint64_t kTrainStream = 12;
constexpr std::uint64_t kAcquireStream = 13;

}  // namespace

std::string to_string(AcquisitionStrategy s) { return s == AcquisitionStrategy::margin ? "margin" : "uniform"; }

AcquisitionStrategy parse_strategy(const std::string& text) {
  if (text == "margin") return AcquisitionStrategy::margin;
  if (text == "uniform") return AcquisitionStrategy::uniform;
  throw ValidationError("strategy must be 'margin' or 'uniform', got '" + text + "'");
}

Eigen::VectorXd margin_scores(const Eigen::MatrixXd& probs) {
  if (probs.cols() < 2) throw ValidationError("margin_scores: need at least 2 classes");
  Eigen::VectorXd out(probs.rows());
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    double first = -std::numeric_limits<double>::infinity();
    double second = first;
    for (Eigen::Index k = 0; k < probs.cols(); ++k) {
      const double p = probs(i, k);
      if (p > first) {
        second = first;
        first = p;
      } else if (p > second) {
        second = p;
      }
    }
    out(i) = first - second;
  }
  return out;
}

PoolState PoolState::make(Eigen::Index pool_size, std::vector<Eigen::Index> initial) {
  PoolState pool;
  std::vector<bool> taken(static_cast<std::size_t>(pool_size), false);
  for (Eigen::Index i : initial) {
    if (i < 0 || i >= pool_size) throw ValidationError("initial index " + std::to_string(i) + " outside the pool");
    if (taken[static_cast<std::size_t>(i)]) throw ValidationError("initial index " + std::to_string(i) + " repeated");
    taken[static_cast<std::size_t>(i)] = true;
  }
  pool.labeled = std::move(initial);
  for (Eigen::Index i = 0; i < pool_size; ++i)
    if (!taken[static_cast<std::size_t>(i)]) pool.unlabeled.push_back(i);
  return pool;
}

std::vector<Eigen::Index> acquire_batch(PoolState& pool, const Eigen::VectorXd& scores, Eigen::Index batch_size,
                                        AcquisitionStrategy strategy, std::uint64_t seed) {
  const auto available = static_cast<Eigen::Index>(pool.unlabeled.size());
  if (available == 0) throw ValidationError("acquire_batch: unlabeled pool is empty");
  if (batch_size < 1 || batch_size > available) {
    throw ValidationError("acquire_batch: batch size " + std::to_string(batch_size) + " with " +
                          std::to_string(available) + " unlabeled examples");
  }
  std::vector<std::size_t> pos(pool.unlabeled.size());
  std::iota(pos.begin(), pos.end(), std::size_t{0});
  if (strategy == AcquisitionStrategy::margin) {
    if (scores.size() != available) throw ValidationError("acquire_batch: scores must align with the unlabeled pool");
    std::stable_sort(pos.begin(), pos.end(), [&](std::size_t a, std::size_t b) {
      return scores(static_cast<Eigen::Index>(a)) < scores(static_cast<Eigen::Index>(b));
    });
  } else {
    auto rng = make_rng(seed);
    std::shuffle(pos.begin(), pos.end(), rng);
  }
  pos.resize(static_cast<std::size_t>(batch_size));

  std::vector<Eigen::Index> chosen;
  chosen.reserve(pos.size());
  for (std::size_t p : pos) chosen.push_back(pool.unlabeled[p]);
  std::sort(pos.begin(), pos.end());
  for (std::size_t j = pos.size(); j-- > 0;) {
    pool.unlabeled.erase(pool.unlabeled.begin() + static_cast<std::ptrdiff_t>(pos[j]));
  }
  pool.labeled.insert(pool.labeled.end(), chosen.begin(), chosen.end());
  return chosen;
}

Eigen::Index al_size(double factor, int num_classes) {
  if (!(factor > 0.0)) throw ValidationError("active learning factors must be positive");
  return std::max<Eigen::Index>(1, static_cast<Eigen::Index>(std::llround(factor * num_classes)));
}

Eigen::Index ALConfig::init_size(int k) const { return al_size(init_per_class_factor, k); }
Eigen::Index ALConfig::max_size(int k) const { return al_size(max_per_class_factor, k); }
Eigen::Index ALConfig::batch_size(int k) const { return al_size(batch_per_class_factor, k); }

std::vector<Eigen::Index> stratified_initial(std::span<const int> labels, int num_classes, Eigen::Index size,
                                             std::uint64_t seed) {
  std::vector<std::vector<Eigen::Index>> by_class(static_cast<std::size_t>(num_classes));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i];
    if (y < 0 || y >= num_classes) throw ValidationError("active learning: label " + std::to_string(y) + " out of range");
    by_class[static_cast<std::size_t>(y)].push_back(static_cast<Eigen::Index>(i));
  }
  for (int k = 0; k < num_classes; ++k) {
    if (by_class[static_cast<std::size_t>(k)].empty()) {
      throw ValidationError("active learning: class " + std::to_string(k) + " is absent from the pool");
    }
    auto rng = make_rng(seed, static_cast<std::uint64_t>(k));
    std::shuffle(by_class[static_cast<std::size_t>(k)].begin(), by_class[static_cast<std::size_t>(k)].end(), rng);
  }
  std::vector<Eigen::Index> out;
  for (std::size_t depth = 0; static_cast<Eigen::Index>(out.size()) < size; ++depth) {
    bool any = false;
    for (int k = 0; k < num_classes && static_cast<Eigen::Index>(out.size()) < size; ++k) {
      const auto& idx = by_class[static_cast<std::size_t>(k)];
      if (depth < idx.size()) {
        out.push_back(idx[depth]);
        any = true;
      }
    }
    if (!any) throw ValidationError("active learning: pool smaller than the initial set");
  }
  return out;
}

ALResult al_loop(const LabeledData& pool_data, const LabeledData& test, int num_classes, const ALConfig& cfg) {
  const auto n = static_cast<Eigen::Index>(pool_data.y.size());
  if (pool_data.x.rows() != n || test.x.rows() != static_cast<Eigen::Index>(test.y.size()) || test.y.empty()) {
    throw ValidationError("active learning: embeddings and labels must align and the test split must be non-empty");
  }
  const Eigen::Index init = cfg.init_size(num_classes);
  const Eigen::Index max = cfg.max_size(num_classes);
  const Eigen::Index batch = cfg.batch_size(num_classes);
  if (init > max) throw ValidationError("active learning: initial size exceeds the maximum size");
  if (max > n) {
    throw ValidationError("active learning: pool has " + std::to_string(n) + " examples, fewer than the maximum " +
                          std::to_string(max));
  }

  ALResult result;
  result.pool = PoolState::make(n, stratified_initial(pool_data.y, num_classes, init, derive_seed(cfg.seed, kInitStream)));
  PoolState& pool = result.pool;
  std::vector<Eigen::Index> acquired;

  for (int round = 0;; ++round) {
    LabeledData labeled;
    labeled.x.resize(static_cast<Eigen::Index>(pool.labeled.size()), pool_data.x.cols());
    for (std::size_t j = 0; j < pool.labeled.size(); ++j) {
      labeled.x.row(static_cast<Eigen::Index>(j)) = pool_data.x.row(pool.labeled[j]);
      labeled.y.push_back(pool_data.y[static_cast<std::size_t>(pool.labeled[j])]);
    }
    TrainConfig tc = cfg.train;
    tc.seed = derive_seed(derive_seed(cfg.seed, kTrainStream), static_cast<std::uint64_t>(round));
    std::unique_ptr<Head> head;
    try {
      head = train_head(cfg.head, labeled, tc, num_classes);
    } catch (const RuntimeFailure& e) {
      result.failure = "round " + std::to_string(round) + ": " + e.what();
      return result;
    }
    const Eigen::MatrixXd test_probs = head->predict_probs(test.x);
    Eigen::Index correct = 0;
    for (Eigen::Index i = 0; i < test_probs.rows(); ++i)
      if (argmax(test_probs.row(i)) == test.y[static_cast<std::size_t>(i)]) ++correct;
    const double acc = static_cast<double>(correct) / static_cast<double>(test_probs.rows());
    const auto num_labels = static_cast<Eigen::Index>(pool.labeled.size());
    pool.history.push_back({round, acquired, num_labels, acc});
    result.curve.emplace_back(num_labels, acc);
    if (num_labels >= max) break;

    const Eigen::Index take = std::min(batch, max - num_labels);
    Eigen::VectorXd scores;
    if (cfg.strategy == AcquisitionStrategy::margin) {
      Eigen::MatrixXd ux(static_cast<Eigen::Index>(pool.unlabeled.size()), pool_data.x.cols());
      for (std::size_t j = 0; j < pool.unlabeled.size(); ++j) ux.row(static_cast<Eigen::Index>(j)) = pool_data.x.row(pool.unlabeled[j]);
      scores = margin_scores(head->predict_probs(ux));
    }
    acquired = acquire_batch(pool, scores, take, cfg.strategy,
                             derive_seed(derive_seed(cfg.seed, kAcquireStream), static_cast<std::uint64_t>(round)));
  }
  return result;
}

double labels_to_reach(const std::vector<std::pair<Eigen::Index, double>>& curve, double target) {
  for (const auto& [labels, acc] : curve)
    if (acc >= target) return static_cast<double>(labels);
  return std::numeric_limits<double>::infinity();
}

}  // namespace relkit
