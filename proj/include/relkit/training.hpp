#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "relkit/heads.hpp"

namespace relkit {

enum class LrSchedule { constant, cosine };

struct TrainConfig {
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int epochs = 50;
  int batch_size = 32;
  std::uint64_t seed = 0;
  LrSchedule schedule = LrSchedule::cosine;

  void validate() const;
};

TrainConfig parse_train_config(const nlohmann::json& doc, std::uint64_t seed);
nlohmann::json to_json(const TrainConfig& cfg);

struct LabeledData {
  Eigen::MatrixXd x;
  std::vector<int> y;
};

inline const std::vector<double> kTemperatureGrid = {0.25, 0.5, 1.0, 1.5, 2.0, 3.0};

/// SGD with momentum on a freshly initialized head. A heteroscedastic head
/// without an explicit temperature is tuned over kTemperatureGrid on the
/// validation NLL when `validation` is given.
std::unique_ptr<Head> train_head(const HeadSpec& spec, const LabeledData& train, const TrainConfig& cfg,
                                 int num_classes, const LabeledData* validation = nullptr);

/// Trains `head` in place; returns the mean loss over the last epoch.
double sgd_train(TrainableHead& head, const Eigen::MatrixXd& x, std::span<const int> y, const TrainConfig& cfg);

struct GradientCheck {
  double max_rel_error = 0.0;
  Eigen::Index worst_index = -1;
  double analytic = 0.0;
  double numeric = 0.0;
};

inline constexpr double kGradCheckFloor = 1e-8;

/// Central differences on every parameter with the noise fixed by `noise_seed`.
/// Relative error is |a - n| / max(|a|, |n|, floor).
GradientCheck gradient_check(const TrainableHead& head, const Eigen::MatrixXd& x, std::span<const int> y,
                             std::uint64_t noise_seed, double h = 1e-5, double floor = kGradCheckFloor);

}  // namespace relkit
