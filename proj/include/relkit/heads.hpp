#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "relkit/tensor.hpp"

namespace relkit {

enum class HeadKind { linear, rfgp, heteroscedastic, batch_ensemble, mc_dropout, ensemble };

std::string to_string(HeadKind kind);
HeadKind parse_head_kind(const std::string& text);

/// A contiguous slice of a head's flat parameter vector, stored column-major.
struct ParamBlock {
  std::string name;
  Eigen::Index offset = 0;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  Eigen::Index size() const { return rows * cols; }
};

/// Last-layer model over fixed embeddings.
class Head {
 public:
  virtual ~Head() = default;

  virtual HeadKind kind() const = 0;
  virtual int input_dim() const = 0;
  virtual int num_classes() const = 0;

  /// N x K class probabilities; rows sum to one.
  virtual Eigen::MatrixXd predict_probs(const Eigen::MatrixXd& x) const = 0;
  /// Deterministic logits, for heads that have a single logit per class.
  virtual std::optional<Eigen::MatrixXd> predict_logits(const Eigen::MatrixXd&) const { return std::nullopt; }

  virtual std::unique_ptr<Head> clone() const = 0;
  virtual nlohmann::json hyperparams() const = 0;
  virtual std::vector<std::string> interpretation_flags() const { return {}; }

  /// Named tensors that, together with hyperparams(), fully determine predictions.
  virtual std::map<std::string, Tensor> state() const = 0;
  virtual void load_state(const std::map<std::string, Tensor>& state) = 0;

  std::uint64_t seed = 0;
  double train_loss = std::numeric_limits<double>::quiet_NaN();
};

/// Head trained by gradient descent on a flat parameter vector.
class TrainableHead : public Head {
 public:
  Eigen::VectorXd& params() { return params_; }
  const Eigen::VectorXd& params() const { return params_; }
  const std::vector<ParamBlock>& blocks() const { return blocks_; }
  const ParamBlock& block(const std::string& name) const;

  /// Mean training loss over the batch. Fills `grad` (sized like params())
  /// when non-null. All stochastic draws derive from `noise_seed`, so two
  /// calls with the same seed see the same noise.
  virtual double loss(const Eigen::MatrixXd& x, std::span<const int> y, std::uint64_t noise_seed,
                      Eigen::VectorXd* grad) const = 0;

  /// Post-training statistics over the training inputs.
  virtual void finalize(const Eigen::MatrixXd&) {}

  std::map<std::string, Tensor> state() const override;
  void load_state(const std::map<std::string, Tensor>& state) override;

 protected:
  ParamBlock& add_block(std::string name, Eigen::Index rows, Eigen::Index cols);
  void allocate();  // sizes params_ to cover every block, zero-filled

  Eigen::Map<Eigen::MatrixXd> view(const ParamBlock& b) { return {params_.data() + b.offset, b.rows, b.cols}; }
  Eigen::Map<const Eigen::MatrixXd> view(const ParamBlock& b) const {
    return {params_.data() + b.offset, b.rows, b.cols};
  }
  static Eigen::Map<Eigen::MatrixXd> view(Eigen::VectorXd& flat, const ParamBlock& b) {
    return {flat.data() + b.offset, b.rows, b.cols};
  }

  Eigen::VectorXd params_;
  std::vector<ParamBlock> blocks_;
};

class LinearSoftmaxHead final : public TrainableHead {
 public:
  LinearSoftmaxHead(int input_dim, int num_classes);

  void initialize(std::uint64_t seed);

  HeadKind kind() const override { return HeadKind::linear; }
  int input_dim() const override { return input_dim_; }
  int num_classes() const override { return num_classes_; }

  Eigen::Map<Eigen::MatrixXd> weights() { return view(blocks_[0]); }
  Eigen::Map<const Eigen::MatrixXd> weights() const { return view(blocks_[0]); }
  Eigen::Map<Eigen::MatrixXd> bias() { return view(blocks_[1]); }
  Eigen::Map<const Eigen::MatrixXd> bias() const { return view(blocks_[1]); }

  Eigen::MatrixXd logits(const Eigen::MatrixXd& x) const;
  Eigen::MatrixXd predict_probs(const Eigen::MatrixXd& x) const override;
  std::optional<Eigen::MatrixXd> predict_logits(const Eigen::MatrixXd& x) const override { return logits(x); }
  double loss(const Eigen::MatrixXd& x, std::span<const int> y, std::uint64_t noise_seed,
              Eigen::VectorXd* grad) const override;

  std::unique_ptr<Head> clone() const override { return std::make_unique<LinearSoftmaxHead>(*this); }
  nlohmann::json hyperparams() const override;

 private:
  int input_dim_;
  int num_classes_;
};

struct RFGPOptions {
  int num_features = 256;
  double lengthscale = 0.0;  // <= 0 picks sqrt(input_dim)
  bool mean_field = true;
  double mean_field_factor = 3.14159265358979323846 / 8.0;
};

/// Random-feature GP output layer with a Laplace precision over the features.
///
/// phi(x) = sqrt(2 / D_rf) cos(W x + b) with frozen W ~ N(0, 1/l^2), b ~ U[0, 2 pi).
/// logits = phi(x)^T beta; var(x) = phi^T (I + Phi^T Phi)^-1 phi.
class RFGPHead final : public TrainableHead {
 public:
  RFGPHead(int input_dim, int num_classes, RFGPOptions options);

  void initialize(std::uint64_t seed);

  HeadKind kind() const override { return HeadKind::rfgp; }
  int input_dim() const override { return input_dim_; }
  int num_classes() const override { return num_classes_; }
  const RFGPOptions& options() const { return options_; }
  void set_mean_field(bool on) { options_.mean_field = on; }

  Eigen::MatrixXd features(const Eigen::MatrixXd& x) const;
  Eigen::Map<const Eigen::MatrixXd> beta() const { return view(blocks_[0]); }
  Eigen::Map<Eigen::MatrixXd> beta() { return view(blocks_[0]); }

  /// Precision back to the identity (prior only).
  void reset_precision();
  /// Adds Phi^T Phi for the given feature rows.
  void accumulate_precision(const Eigen::MatrixXd& features);
  bool precision_ready() const { return precision_ready_; }
  const Eigen::MatrixXd& precision() const { return precision_; }

  Eigen::VectorXd posterior_variance(const Eigen::MatrixXd& x) const;

  Eigen::MatrixXd predict_probs(const Eigen::MatrixXd& x) const override;
  std::optional<Eigen::MatrixXd> predict_logits(const Eigen::MatrixXd& x) const override;
  double loss(const Eigen::MatrixXd& x, std::span<const int> y, std::uint64_t noise_seed,
              Eigen::VectorXd* grad) const override;
  void finalize(const Eigen::MatrixXd& train_x) override;

  std::unique_ptr<Head> clone() const override { return std::make_unique<RFGPHead>(*this); }
  nlohmann::json hyperparams() const override;
  std::vector<std::string> interpretation_flags() const override;
  std::map<std::string, Tensor> state() const override;
  void load_state(const std::map<std::string, Tensor>& state) override;

 private:
  void refactor();

  int input_dim_;
  int num_classes_;
  RFGPOptions options_;
  Eigen::MatrixXd rf_weights_;  // D x D_rf, frozen
  Eigen::VectorXd rf_bias_;     // D_rf, frozen
  Eigen::MatrixXd precision_;
  Eigen::LLT<Eigen::MatrixXd> precision_chol_;
  bool precision_ready_ = false;
};

struct HeteroscedasticOptions {
  int rank = -1;  // < 0 picks min(K - 1, 15)
  double temperature = 1.0;
  int train_samples = 10;
  int eval_samples = 1000;
};

/// Gaussian over the logits: u = mu(x) + V(x) eps1 + d(x) * eps2, with
/// p(y|x) estimated by averaging softmax(u / temperature) over samples.
class HeteroscedasticHead final : public TrainableHead {
 public:
  HeteroscedasticHead(int input_dim, int num_classes, HeteroscedasticOptions options);

  void initialize(std::uint64_t seed);

  HeadKind kind() const override { return HeadKind::heteroscedastic; }
  int input_dim() const override { return input_dim_; }
  int num_classes() const override { return num_classes_; }
  int rank() const { return rank_; }
  const HeteroscedasticOptions& options() const { return options_; }
  void set_eval_samples(int samples) { options_.eval_samples = samples; }

  Eigen::Map<Eigen::MatrixXd> mean_weights() { return view(blocks_[0]); }
  Eigen::Map<Eigen::MatrixXd> mean_bias() { return view(blocks_[1]); }
  Eigen::Map<Eigen::MatrixXd> diag_weights() { return view(blocks_[2]); }
  /// D x (K * R); column k * R + r maps x to V(x)[k, r].
  Eigen::Map<Eigen::MatrixXd> low_rank_weights() { return view(blocks_[3]); }

  Eigen::MatrixXd predict_probs(const Eigen::MatrixXd& x) const override;
  double loss(const Eigen::MatrixXd& x, std::span<const int> y, std::uint64_t noise_seed,
              Eigen::VectorXd* grad) const override;

  std::unique_ptr<Head> clone() const override { return std::make_unique<HeteroscedasticHead>(*this); }
  nlohmann::json hyperparams() const override;

 private:
  int input_dim_;
  int num_classes_;
  int rank_;
  HeteroscedasticOptions options_;
};

enum class OutputSharing { shared, per_member };

struct BatchEnsembleOptions {
  int members = 4;
  std::vector<int> hidden = {32};
  OutputSharing output = OutputSharing::shared;
};

/// MLP head whose member-i hidden weights are W0 o (r_i s_i^T). Members see the
/// same inputs; predictions average member probabilities.
class BatchEnsembleHead final : public TrainableHead {
 public:
  BatchEnsembleHead(int input_dim, int num_classes, BatchEnsembleOptions options);

  /// Glorot-style shared weights, random +-1 fast weights.
  void initialize(std::uint64_t seed);
  void set_identity_fast_weights();

  HeadKind kind() const override { return HeadKind::batch_ensemble; }
  int input_dim() const override { return input_dim_; }
  int num_classes() const override { return num_classes_; }
  const BatchEnsembleOptions& options() const { return options_; }

  Eigen::Index shared_parameter_count() const;
  Eigen::Index fast_parameter_count() const;

  /// Probabilities of a single member.
  Eigen::MatrixXd member_probs(const Eigen::MatrixXd& x, int member) const;
  Eigen::MatrixXd predict_probs(const Eigen::MatrixXd& x) const override;
  double loss(const Eigen::MatrixXd& x, std::span<const int> y, std::uint64_t noise_seed,
              Eigen::VectorXd* grad) const override;

  std::unique_ptr<Head> clone() const override { return std::make_unique<BatchEnsembleHead>(*this); }
  nlohmann::json hyperparams() const override;

 private:
  struct Layer {
    std::size_t weight, bias, fast_in, fast_out;  // indices into blocks_
  };
  Eigen::MatrixXd member_logits(const Eigen::MatrixXd& x, int member, std::vector<Eigen::MatrixXd>* acts) const;
  std::size_t output_weight_block(int member) const;
  std::size_t output_bias_block(int member) const;

  int input_dim_;
  int num_classes_;
  BatchEnsembleOptions options_;
  std::vector<Layer> layers_;
  std::vector<std::size_t> out_w_, out_b_;
};

struct MCDropoutOptions {
  std::vector<int> hidden = {32};
  double rate = 0.1;
  int samples = 32;
};

/// Tanh MLP with inverted dropout on hidden activations, kept on at prediction
/// time and averaged over `samples` passes.
class MCDropoutHead final : public TrainableHead {
 public:
  MCDropoutHead(int input_dim, int num_classes, MCDropoutOptions options);

  void initialize(std::uint64_t seed);

  HeadKind kind() const override { return HeadKind::mc_dropout; }
  int input_dim() const override { return input_dim_; }
  int num_classes() const override { return num_classes_; }
  const MCDropoutOptions& options() const { return options_; }

  /// Dropout disabled.
  Eigen::MatrixXd deterministic_probs(const Eigen::MatrixXd& x) const;
  Eigen::MatrixXd predict_probs(const Eigen::MatrixXd& x) const override;
  double loss(const Eigen::MatrixXd& x, std::span<const int> y, std::uint64_t noise_seed,
              Eigen::VectorXd* grad) const override;

  std::unique_ptr<Head> clone() const override { return std::make_unique<MCDropoutHead>(*this); }
  nlohmann::json hyperparams() const override;

 private:
  // masks[l] is N x H_l of {0, 1/(1-rate)}; empty means no dropout.
  Eigen::MatrixXd forward(const Eigen::MatrixXd& x, const std::vector<Eigen::MatrixXd>& masks,
                          std::vector<Eigen::MatrixXd>* acts) const;

  int input_dim_;
  int num_classes_;
  MCDropoutOptions options_;
};

/// Deep ensemble: arithmetic mean of member probabilities.
class EnsembleHead final : public Head {
 public:
  explicit EnsembleHead(std::vector<std::unique_ptr<Head>> members);
  EnsembleHead(const EnsembleHead& other);

  HeadKind kind() const override { return HeadKind::ensemble; }
  int input_dim() const override { return members_.front()->input_dim(); }
  int num_classes() const override { return members_.front()->num_classes(); }
  const std::vector<std::unique_ptr<Head>>& members() const { return members_; }

  Eigen::MatrixXd predict_probs(const Eigen::MatrixXd& x) const override;
  std::unique_ptr<Head> clone() const override { return std::make_unique<EnsembleHead>(*this); }
  nlohmann::json hyperparams() const override;
  std::vector<std::string> interpretation_flags() const override;
  std::map<std::string, Tensor> state() const override { return {}; }
  void load_state(const std::map<std::string, Tensor>&) override {}

 private:
  std::vector<std::unique_ptr<Head>> members_;
};

/// Kind plus hyperparameters, as written in run configs and head descriptors.
struct HeadSpec {
  HeadKind kind = HeadKind::linear;
  nlohmann::json hyperparams = nlohmann::json::object();
};

HeadSpec parse_head_spec(const nlohmann::json& doc);

/// Builds an initialized (untrained) head. Ensembles are built with
/// initialized members seeded from `seed`.
std::unique_ptr<Head> make_head(const HeadSpec& spec, int input_dim, int num_classes, std::uint64_t seed);

/// Running mean that reproduces its input exactly when every sample is equal.
void accumulate_mean(Eigen::MatrixXd& mean, const Eigen::MatrixXd& sample, int count_before);

double gp_mean_field_scale(double variance, double factor);

/// Writes `<name>.ubt` per state tensor plus head.json {kind, hyperparams, seed,
/// train_loss, flags, input_dim, num_classes}. Ensemble members go to member_<i>/.
void save_head(const Head& head, const std::filesystem::path& dir);
std::unique_ptr<Head> load_head(const std::filesystem::path& dir);

}  // namespace relkit
