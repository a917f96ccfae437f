#include "relkit/training.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "relkit/error.hpp"
#include "relkit/head_math.hpp"
#include "relkit/rng.hpp"

namespace relkit {

namespace {

constexpr std::uint64_t kShuffleStream = 2;
constexpr std::uint64_t kNoiseStream = 3;

template <typename T>
T field_or(const nlohmann::json& doc, const char* key, T fallback) {
  if (!doc.contains(key)) return fallback;
  try {
    return doc[key].get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ValidationError(std::string("train config '") + key + "' has the wrong type");
  }
}

double heldout_nll(const Head& head, const LabeledData& data) {
  const Eigen::MatrixXd p = head.predict_probs(data.x);
  double total = 0.0;
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    total -= std::log(std::max(p(i, data.y[static_cast<std::size_t>(i)]), 1e-12));
  }
  return total / static_cast<double>(p.rows());
}

void check_data(const LabeledData& data, const char* what) {
  if (data.x.rows() == 0) throw ValidationError(std::string(what) + ": no examples");
  if (static_cast<std::size_t>(data.x.rows()) != data.y.size()) {
    throw ValidationError(std::string(what) + ": " + std::to_string(data.x.rows()) + " embeddings but " +
                          std::to_string(data.y.size()) + " labels");
  }
}

}  // namespace

void TrainConfig::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ValidationError("train config: lr must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ValidationError("train config: momentum must be in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ValidationError("train config: weight_decay must be non-negative");
  if (epochs < 0) throw ValidationError("train config: epochs must be non-negative");
  if (batch_size < 1) throw ValidationError("train config: batch_size must be positive");
}

TrainConfig parse_train_config(const nlohmann::json& doc, std::uint64_t seed) {
  TrainConfig cfg;
  cfg.seed = seed;
  if (doc.is_null()) return cfg;
  if (!doc.is_object()) throw ValidationError("train config must be an object");
  static const std::vector<std::string> known = {"lr", "momentum", "weight_decay", "epochs", "batch_size", "schedule"};
  for (const auto& [key, value] : doc.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw ValidationError("train config: unknown key '" + key + "'");
    }
  }
  cfg.lr = field_or(doc, "lr", cfg.lr);
  cfg.momentum = field_or(doc, "momentum", cfg.momentum);
  cfg.weight_decay = field_or(doc, "weight_decay", cfg.weight_decay);
  cfg.epochs = field_or(doc, "epochs", cfg.epochs);
  cfg.batch_size = field_or(doc, "batch_size", cfg.batch_size);
  const auto schedule = field_or<std::string>(doc, "schedule", "cosine");
  if (schedule == "cosine") cfg.schedule = LrSchedule::cosine;
  else if (schedule == "constant") cfg.schedule = LrSchedule::constant;
  else throw ValidationError("train config: schedule must be 'cosine' or 'constant'");
  cfg.validate();
  return cfg;
}

nlohmann::json to_json(const TrainConfig& cfg) {
  return {{"lr", cfg.lr},
          {"momentum", cfg.momentum},
          {"weight_decay", cfg.weight_decay},
          {"epochs", cfg.epochs},
          {"batch_size", cfg.batch_size},
          {"seed", cfg.seed},
          {"schedule", cfg.schedule == LrSchedule::cosine ? "cosine" : "constant"}};
}

double sgd_train(TrainableHead& head, const Eigen::MatrixXd& x, std::span<const int> y, const TrainConfig& cfg) {
  cfg.validate();
  const Eigen::Index n = x.rows();
  if (n == 0 || static_cast<std::size_t>(n) != y.size()) throw ValidationError("sgd_train: bad training data");
  const std::uint64_t noise_base = derive_seed(cfg.seed, kNoiseStream);

  if (cfg.epochs == 0) {
    head.finalize(x);
    return head.loss(x, y, noise_base, nullptr);
  }

  auto shuffle_rng = make_rng(cfg.seed, kShuffleStream);
  const Eigen::Index batch = std::min<Eigen::Index>(cfg.batch_size, n);
  const Eigen::Index steps_per_epoch = (n + batch - 1) / batch;
  const double total_steps = static_cast<double>(steps_per_epoch) * cfg.epochs;
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  Eigen::VectorXd velocity = Eigen::VectorXd::Zero(head.params().size());
  Eigen::VectorXd grad;
  Eigen::MatrixXd bx;
  std::vector<int> by;
  double epoch_loss = 0.0;
  std::uint64_t step = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    epoch_loss = 0.0;
    for (Eigen::Index start = 0; start < n; start += batch) {
      const Eigen::Index len = std::min(batch, n - start);
      bx.resize(len, x.cols());
      by.resize(static_cast<std::size_t>(len));
      for (Eigen::Index i = 0; i < len; ++i) {
        const Eigen::Index src = order[static_cast<std::size_t>(start + i)];
        bx.row(i) = x.row(src);
        by[static_cast<std::size_t>(i)] = y[static_cast<std::size_t>(src)];
      }
      const double value = head.loss(bx, by, derive_seed(noise_base, step), &grad);
      if (!std::isfinite(value) || !grad.allFinite()) {
        throw RuntimeFailure("training diverged at step " + std::to_string(step) + " (epoch " +
                             std::to_string(epoch) + "): non-finite loss");
      }
      epoch_loss += value * static_cast<double>(len);
      double lr = cfg.lr;
      if (cfg.schedule == LrSchedule::cosine) {
        lr *= 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / total_steps));
      }
      velocity = cfg.momentum * velocity + grad + cfg.weight_decay * head.params();
      head.params() -= lr * velocity;
      ++step;
    }
    epoch_loss /= static_cast<double>(n);
  }
  if (!head.params().allFinite()) throw RuntimeFailure("training diverged: non-finite parameters");
  head.finalize(x);
  return epoch_loss;
}

std::unique_ptr<Head> train_head(const HeadSpec& spec, const LabeledData& train, const TrainConfig& cfg,
                                 int num_classes, const LabeledData* validation) {
  cfg.validate();
  check_data(train, "train_head");
  const int dim = static_cast<int>(train.x.cols());

  if (spec.kind == HeadKind::ensemble) {
    const int count = spec.hyperparams.value("members", 4);
    if (count < 1) throw ValidationError("ensemble needs at least one member");
    const HeadSpec member = spec.hyperparams.contains("member") ? parse_head_spec(spec.hyperparams["member"]) : HeadSpec{};
    if (member.kind == HeadKind::ensemble) throw ValidationError("nested ensembles are not supported");
    std::vector<std::unique_ptr<Head>> members;
    double loss = 0.0;
    for (int m = 0; m < count; ++m) {
      TrainConfig mc = cfg;
      mc.seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(m) + 1);
      members.push_back(train_head(member, train, mc, num_classes, validation));
      loss += members.back()->train_loss;
    }
    auto head = std::make_unique<EnsembleHead>(std::move(members));
    head->seed = cfg.seed;
    head->train_loss = loss / count;
    return head;
  }

  if (spec.kind == HeadKind::heteroscedastic && validation && !spec.hyperparams.contains("temperature")) {
    check_data(*validation, "validation");
    std::unique_ptr<Head> best;
    double best_nll = std::numeric_limits<double>::infinity();
    for (double tau : kTemperatureGrid) {
      HeadSpec s = spec;
      s.hyperparams["temperature"] = tau;
      auto head = train_head(s, train, cfg, num_classes, nullptr);
      const double v = heldout_nll(*head, *validation);
      if (v < best_nll) {
        best_nll = v;
        best = std::move(head);
      }
    }
    if (!best) throw RuntimeFailure("heteroscedastic temperature tuning produced no finite validation NLL");
    return best;
  }

  auto head = make_head(spec, dim, num_classes, cfg.seed);
  auto* trainable = dynamic_cast<TrainableHead*>(head.get());
  if (!trainable) throw ValidationError("head kind '" + to_string(spec.kind) + "' is not trainable");
  head->train_loss = sgd_train(*trainable, train.x, train.y, cfg);
  return head;
}

GradientCheck gradient_check(const TrainableHead& head, const Eigen::MatrixXd& x, std::span<const int> y,
                             std::uint64_t noise_seed, double h, double floor) {
  Eigen::VectorXd analytic;
  head.loss(x, y, noise_seed, &analytic);
  auto probe = head.clone();
  auto& p = dynamic_cast<TrainableHead&>(*probe);
  GradientCheck result;
  for (Eigen::Index j = 0; j < p.params().size(); ++j) {
    const double orig = p.params()(j);
    p.params()(j) = orig + h;
    const double up = p.loss(x, y, noise_seed, nullptr);
    p.params()(j) = orig - h;
    const double down = p.loss(x, y, noise_seed, nullptr);
    p.params()(j) = orig;
    const double numeric = (up - down) / (2.0 * h);
    const double a = analytic(j);
    const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
    if (rel > result.max_rel_error || result.worst_index < 0) {
      result = {rel, j, a, numeric};
    }
  }
  return result;
}

}  // namespace relkit
