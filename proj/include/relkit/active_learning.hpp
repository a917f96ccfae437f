#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "relkit/heads.hpp"
#include "relkit/training.hpp"

namespace relkit {

enum class AcquisitionStrategy { margin, uniform };
std::string to_string(AcquisitionStrategy s);
AcquisitionStrategy parse_strategy(const std::string& text);

/// Top-1 minus top-2 probability per row; smaller is more informative.
Eigen::VectorXd margin_scores(const Eigen::MatrixXd& probs);

struct RoundRecord {
  int round = 0;
  std::vector<Eigen::Index> acquired;  // labels added before this round's training
  Eigen::Index num_labels = 0;
  double accuracy = 0.0;
};

struct PoolState {
  std::vector<Eigen::Index> labeled;    // acquisition order
  std::vector<Eigen::Index> unlabeled;  // ascending
  std::vector<RoundRecord> history;

  static PoolState make(Eigen::Index pool_size, std::vector<Eigen::Index> initial);
};

/// `scores` is aligned with pool.unlabeled (ignored for uniform). Moves the
/// chosen indices from unlabeled to labeled and returns them.
std::vector<Eigen::Index> acquire_batch(PoolState& pool, const Eigen::VectorXd& scores, Eigen::Index batch_size,
                                        AcquisitionStrategy strategy, std::uint64_t seed);

struct ALConfig {
  double init_per_class_factor = 2.0;
  double max_per_class_factor = 20.0;
  double batch_per_class_factor = 0.5;
  AcquisitionStrategy strategy = AcquisitionStrategy::margin;
  std::uint64_t seed = 0;
  HeadSpec head;
  TrainConfig train;

  Eigen::Index init_size(int num_classes) const;
  Eigen::Index max_size(int num_classes) const;
  Eigen::Index batch_size(int num_classes) const;
};

/// round(factor * K), at least 1.
Eigen::Index al_size(double factor, int num_classes);

struct ALResult {
  PoolState pool;
  std::vector<std::pair<Eigen::Index, double>> curve;  // (num_labels, test accuracy)
  std::optional<std::string> failure;                  // set when a round aborted the loop
};

/// Class-stratified seeded initial set.
std::vector<Eigen::Index> stratified_initial(std::span<const int> labels, int num_classes, Eigen::Index size,
                                             std::uint64_t seed);

ALResult al_loop(const LabeledData& pool, const LabeledData& test, int num_classes, const ALConfig& cfg);

/// Smallest label count whose accuracy reaches `target`; +inf if never.
double labels_to_reach(const std::vector<std::pair<Eigen::Index, double>>& curve, double target);

}  // namespace relkit
