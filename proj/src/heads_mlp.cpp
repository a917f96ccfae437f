#include <cmath>

#include "relkit/error.hpp"
#include "relkit/head_math.hpp"
#include "relkit/heads.hpp"
#include "relkit/rng.hpp"

namespace relkit {

namespace {

constexpr std::uint64_t kEvalStream = 0xd409;

void check_hidden(const std::vector<int>& hidden, const char* who) {
  for (int h : hidden)
    if (h < 1) throw ValidationError(std::string(who) + ": hidden sizes must be positive");
}

void glorot(Eigen::Map<Eigen::MatrixXd> w, std::mt19937_64& rng) {
  fill_normal(w, rng, std::sqrt(2.0 / static_cast<double>(w.rows() + w.cols())));
}

}  // namespace

// ---------------------------------------------------------------------------
// BatchEnsembleHead

BatchEnsembleHead::BatchEnsembleHead(int input_dim, int num_classes, BatchEnsembleOptions options)
    : input_dim_(input_dim), num_classes_(num_classes), options_(std::move(options)) {
  if (options_.members < 1) throw ValidationError("batch_ensemble: members must be positive");
  check_hidden(options_.hidden, "batch_ensemble");
  const int m = options_.members;
  int in = input_dim;
  std::vector<int> widths = options_.hidden;
  const bool shared_out = options_.output == OutputSharing::shared;
  if (shared_out) widths.push_back(num_classes);
  for (std::size_t l = 0; l < widths.size(); ++l) {
    const int out = widths[l];
    const std::string p = "layer" + std::to_string(l) + "_";
    Layer layer{};
    layer.weight = blocks_.size();
    add_block(p + "weight", in, out);
    layer.bias = blocks_.size();
    add_block(p + "bias", 1, out);
    layer.fast_in = blocks_.size();
    add_block(p + "fast_r", m, in);
    layer.fast_out = blocks_.size();
    add_block(p + "fast_s", m, out);
    layers_.push_back(layer);
    in = out;
  }
  if (!shared_out) {
    for (int k = 0; k < m; ++k) {
      out_w_.push_back(blocks_.size());
      add_block("member" + std::to_string(k) + "_out_weight", in, num_classes);
      out_b_.push_back(blocks_.size());
      add_block("member" + std::to_string(k) + "_out_bias", 1, num_classes);
    }
  }
  allocate();
}

void BatchEnsembleHead::initialize(std::uint64_t s) {
  seed = s;
  auto rng = make_rng(s);
  std::bernoulli_distribution coin(0.5);
  for (const auto& layer : layers_) {
    glorot(view(blocks_[layer.weight]), rng);
    view(blocks_[layer.bias]).setZero();
    for (std::size_t b : {layer.fast_in, layer.fast_out}) {
      auto f = view(blocks_[b]);
      for (Eigen::Index j = 0; j < f.cols(); ++j)
        for (Eigen::Index i = 0; i < f.rows(); ++i) f(i, j) = coin(rng) ? 1.0 : -1.0;
    }
  }
  for (std::size_t k = 0; k < out_w_.size(); ++k) {
    glorot(view(blocks_[out_w_[k]]), rng);
    view(blocks_[out_b_[k]]).setZero();
  }
}

void BatchEnsembleHead::set_identity_fast_weights() {
  for (const auto& layer : layers_) {
    view(blocks_[layer.fast_in]).setOnes();
    view(blocks_[layer.fast_out]).setOnes();
  }
}

Eigen::Index BatchEnsembleHead::fast_parameter_count() const {
  Eigen::Index n = 0;
  for (const auto& layer : layers_) n += blocks_[layer.fast_in].size() + blocks_[layer.fast_out].size();
  return n;
}

Eigen::Index BatchEnsembleHead::shared_parameter_count() const { return params_.size() - fast_parameter_count(); }

std::size_t BatchEnsembleHead::output_weight_block(int member) const { return out_w_.at(static_cast<std::size_t>(member)); }
std::size_t BatchEnsembleHead::output_bias_block(int member) const { return out_b_.at(static_cast<std::size_t>(member)); }

// acts receives the input to every layer followed by the logits.
Eigen::MatrixXd BatchEnsembleHead::member_logits(const Eigen::MatrixXd& x, int member,
                                                 std::vector<Eigen::MatrixXd>* acts) const {
  if (x.cols() != input_dim_) throw ValidationError("batch_ensemble: input dimension mismatch");
  const bool shared_out = out_w_.empty();
  Eigen::MatrixXd a = x;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& layer = layers_[l];
    if (acts) acts->push_back(a);
    const Eigen::RowVectorXd r = view(blocks_[layer.fast_in]).row(member);
    const Eigen::RowVectorXd s = view(blocks_[layer.fast_out]).row(member);
    Eigen::MatrixXd pre = (a.array().rowwise() * r.array()).matrix() * view(blocks_[layer.weight]);
    pre.array().rowwise() *= s.array();
    pre.rowwise() += view(blocks_[layer.bias]).row(0);
    const bool last = shared_out && l + 1 == layers_.size();
    a = last ? pre : Eigen::MatrixXd(pre.array().tanh().matrix());
  }
  if (!shared_out) {
    if (acts) acts->push_back(a);
    Eigen::MatrixXd z = a * view(blocks_[output_weight_block(member)]);
    z.rowwise() += view(blocks_[output_bias_block(member)]).row(0);
    a = std::move(z);
  }
  return a;
}

Eigen::MatrixXd BatchEnsembleHead::member_probs(const Eigen::MatrixXd& x, int member) const {
  if (member < 0 || member >= options_.members) throw ValidationError("batch_ensemble: member index out of range");
  return softmax(member_logits(x, member, nullptr));
}

Eigen::MatrixXd BatchEnsembleHead::predict_probs(const Eigen::MatrixXd& x) const {
  Eigen::MatrixXd mean;
  for (int m = 0; m < options_.members; ++m) accumulate_mean(mean, member_probs(x, m), m);
  return mean;
}

double BatchEnsembleHead::loss(const Eigen::MatrixXd& x, std::span<const int> y, std::uint64_t,
                               Eigen::VectorXd* grad) const {
  const int members = options_.members;
  const bool shared_out = out_w_.empty();
  if (grad) grad->setZero(params_.size());
  double total = 0.0;
  for (int m = 0; m < members; ++m) {
    std::vector<Eigen::MatrixXd> acts;
    const Eigen::MatrixXd z = member_logits(x, m, grad ? &acts : nullptr);
    Eigen::MatrixXd dz;
    total += softmax_cross_entropy(z, y, grad ? &dz : nullptr);
    if (!grad) continue;
    dz /= static_cast<double>(members);

    // dz is the gradient w.r.t. the current layer's pre-activation.
    if (!shared_out) {
      const Eigen::MatrixXd& a = acts.back();
      view(*grad, blocks_[output_weight_block(m)]).noalias() += a.transpose() * dz;
      view(*grad, blocks_[output_bias_block(m)]) += dz.colwise().sum();
      if (layers_.empty()) continue;
      const Eigen::MatrixXd da = dz * view(blocks_[output_weight_block(m)]).transpose();
      dz = (da.array() * (1.0 - a.array().square())).matrix();
    }
    for (std::size_t l = layers_.size(); l-- > 0;) {
      const auto& layer = layers_[l];
      const Eigen::MatrixXd& a = acts[l];
      const auto w0 = view(blocks_[layer.weight]);
      const Eigen::RowVectorXd r = view(blocks_[layer.fast_in]).row(m);
      const Eigen::RowVectorXd s = view(blocks_[layer.fast_out]).row(m);
      const Eigen::MatrixXd t = (a.array().rowwise() * r.array()).matrix();
      const Eigen::MatrixXd u = t * w0;
      view(*grad, blocks_[layer.bias]) += dz.colwise().sum();
      view(*grad, blocks_[layer.fast_out]).row(m) += (dz.array() * u.array()).colwise().sum().matrix();
      const Eigen::MatrixXd du = (dz.array().rowwise() * s.array()).matrix();
      view(*grad, blocks_[layer.weight]).noalias() += t.transpose() * du;
      const Eigen::MatrixXd dt = du * w0.transpose();
      view(*grad, blocks_[layer.fast_in]).row(m) += (dt.array() * a.array()).colwise().sum().matrix();
      if (l == 0) break;
      const Eigen::MatrixXd da = (dt.array().rowwise() * r.array()).matrix();
      dz = (da.array() * (1.0 - a.array().square())).matrix();
    }
  }
  return total / static_cast<double>(members);
}

nlohmann::json BatchEnsembleHead::hyperparams() const {
  return {{"members", options_.members},
          {"hidden", options_.hidden},
          {"output", options_.output == OutputSharing::shared ? "shared" : "per_member"}};
}

// ---------------------------------------------------------------------------
// MCDropoutHead

MCDropoutHead::MCDropoutHead(int input_dim, int num_classes, MCDropoutOptions options)
    : input_dim_(input_dim), num_classes_(num_classes), options_(std::move(options)) {
  check_hidden(options_.hidden, "mc_dropout");
  if (!(options_.rate >= 0.0 && options_.rate < 1.0)) throw ValidationError("mc_dropout: rate must be in [0, 1)");
  if (options_.samples < 1) throw ValidationError("mc_dropout: samples must be positive");
  int in = input_dim;
  for (std::size_t l = 0; l < options_.hidden.size(); ++l) {
    add_block("layer" + std::to_string(l) + "_weight", in, options_.hidden[l]);
    add_block("layer" + std::to_string(l) + "_bias", 1, options_.hidden[l]);
    in = options_.hidden[l];
  }
  add_block("out_weight", in, num_classes);
  add_block("out_bias", 1, num_classes);
  allocate();
}

void MCDropoutHead::initialize(std::uint64_t s) {
  seed = s;
  auto rng = make_rng(s);
  for (std::size_t b = 0; b < blocks_.size(); b += 2) {
    glorot(view(blocks_[b]), rng);
    view(blocks_[b + 1]).setZero();
  }
}

// acts receives each hidden layer's tanh output (before the mask).
Eigen::MatrixXd MCDropoutHead::forward(const Eigen::MatrixXd& x, const std::vector<Eigen::MatrixXd>& masks,
                                       std::vector<Eigen::MatrixXd>* acts) const {
  if (x.cols() != input_dim_) throw ValidationError("mc_dropout: input dimension mismatch");
  Eigen::MatrixXd a = x;
  const std::size_t hidden = options_.hidden.size();
  for (std::size_t l = 0; l < hidden; ++l) {
    Eigen::MatrixXd pre = a * view(blocks_[2 * l]);
    pre.rowwise() += view(blocks_[2 * l + 1]).row(0);
    Eigen::MatrixXd h = pre.array().tanh().matrix();
    if (acts) acts->push_back(h);
    a = masks.empty() ? h : Eigen::MatrixXd(h.array() * masks[l].array());
  }
  Eigen::MatrixXd z = a * view(blocks_[2 * hidden]);
  z.rowwise() += view(blocks_[2 * hidden + 1]).row(0);
  return z;
}

namespace {

Eigen::MatrixXd draw_mask(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols, double rate) {
  std::bernoulli_distribution keep(1.0 - rate);
  const double scale = 1.0 / (1.0 - rate);
  Eigen::MatrixXd mask(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) mask(i, j) = keep(rng) ? scale : 0.0;
  return mask;
}

}  // namespace

Eigen::MatrixXd MCDropoutHead::deterministic_probs(const Eigen::MatrixXd& x) const { return softmax(forward(x, {}, nullptr)); }

Eigen::MatrixXd MCDropoutHead::predict_probs(const Eigen::MatrixXd& x) const {
  auto rng = make_rng(seed, kEvalStream);
  Eigen::MatrixXd mean;
  for (int s = 0; s < options_.samples; ++s) {
    std::vector<Eigen::MatrixXd> masks;
    for (int h : options_.hidden) {
      const Eigen::RowVectorXd row = draw_mask(rng, 1, h, options_.rate);
      masks.push_back(row.replicate(x.rows(), 1));
    }
    accumulate_mean(mean, softmax(forward(x, masks, nullptr)), s);
  }
  return mean;
}

double MCDropoutHead::loss(const Eigen::MatrixXd& x, std::span<const int> y, std::uint64_t noise_seed,
                           Eigen::VectorXd* grad) const {
  auto rng = make_rng(noise_seed);
  std::vector<Eigen::MatrixXd> masks;
  for (int h : options_.hidden) masks.push_back(draw_mask(rng, x.rows(), h, options_.rate));
  std::vector<Eigen::MatrixXd> acts;
  const Eigen::MatrixXd z = forward(x, masks, grad ? &acts : nullptr);
  Eigen::MatrixXd dz;
  const double value = softmax_cross_entropy(z, y, grad ? &dz : nullptr);
  if (!grad) return value;

  grad->setZero(params_.size());
  const std::size_t hidden = options_.hidden.size();
  for (std::size_t l = hidden + 1; l-- > 0;) {
    const Eigen::MatrixXd a = l == 0 ? x : Eigen::MatrixXd(acts[l - 1].array() * masks[l - 1].array());
    view(*grad, blocks_[2 * l]).noalias() = a.transpose() * dz;
    view(*grad, blocks_[2 * l + 1]) = dz.colwise().sum();
    if (l == 0) break;
    const Eigen::MatrixXd da = dz * view(blocks_[2 * l]).transpose();
    const Eigen::MatrixXd& h = acts[l - 1];
    dz = (da.array() * masks[l - 1].array() * (1.0 - h.array().square())).matrix();
  }
  return value;
}

nlohmann::json MCDropoutHead::hyperparams() const {
  return {{"hidden", options_.hidden}, {"rate", options_.rate}, {"samples", options_.samples}};
}

}  // namespace relkit
