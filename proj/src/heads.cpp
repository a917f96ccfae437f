#include "relkit/heads.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "relkit/error.hpp"
#include "relkit/head_math.hpp"
#include "relkit/rng.hpp"

namespace relkit {

namespace {

const std::vector<std::pair<HeadKind, const char*>>& kind_names() {
  static const std::vector<std::pair<HeadKind, const char*>> names = {
      {HeadKind::linear, "linear"},
      {HeadKind::rfgp, "rfgp"},
      {HeadKind::heteroscedastic, "heteroscedastic"},
      {HeadKind::batch_ensemble, "batch_ensemble"},
      {HeadKind::mc_dropout, "mc_dropout"},
      {HeadKind::ensemble, "ensemble"},
  };
  return names;
}

// Eval-time noise streams are fixed per head so predictions do not depend on
// batch composition.
constexpr std::uint64_t kEvalStream = 0xe7a1;

}  // namespace

std::string to_string(HeadKind kind) {
  for (const auto& [k, name] : kind_names())
    if (k == kind) return name;
  return "unknown";
}

HeadKind parse_head_kind(const std::string& text) {
  for (const auto& [k, name] : kind_names())
    if (text == name) return k;
  throw ValidationError("unknown head kind '" + text + "'");
}

void accumulate_mean(Eigen::MatrixXd& mean, const Eigen::MatrixXd& sample, int count_before) {
  if (count_before == 0) {
    mean = sample;
    return;
  }
  mean += (sample - mean) / static_cast<double>(count_before + 1);
}

double gp_mean_field_scale(double variance, double factor) { return 1.0 / std::sqrt(1.0 + factor * variance); }

// ---------------------------------------------------------------------------
// TrainableHead

const ParamBlock& TrainableHead::block(const std::string& name) const {
  for (const auto& b : blocks_)
    if (b.name == name) return b;
  throw ValidationError("no parameter block named '" + name + "'");
}

ParamBlock& TrainableHead::add_block(std::string name, Eigen::Index rows, Eigen::Index cols) {
  const Eigen::Index offset = blocks_.empty() ? 0 : blocks_.back().offset + blocks_.back().size();
  blocks_.push_back({std::move(name), offset, rows, cols});
  return blocks_.back();
}

void TrainableHead::allocate() {
  const Eigen::Index total = blocks_.empty() ? 0 : blocks_.back().offset + blocks_.back().size();
  params_ = Eigen::VectorXd::Zero(total);
}

std::map<std::string, Tensor> TrainableHead::state() const {
  std::map<std::string, Tensor> out;
  for (const auto& b : blocks_) out.emplace(b.name, from_matrix(view(b)));
  return out;
}

void TrainableHead::load_state(const std::map<std::string, Tensor>& state) {
  for (const auto& b : blocks_) {
    auto it = state.find(b.name);
    if (it == state.end()) throw ValidationError("head state is missing parameter '" + b.name + "'");
    const Eigen::MatrixXd m = to_matrix(it->second);
    if (m.rows() != b.rows || m.cols() != b.cols) {
      throw ValidationError("parameter '" + b.name + "' has the wrong shape");
    }
    view(b) = m;
  }
}

// ---------------------------------------------------------------------------
// LinearSoftmaxHead

LinearSoftmaxHead::LinearSoftmaxHead(int input_dim, int num_classes)
    : input_dim_(input_dim), num_classes_(num_classes) {
  add_block("weights", input_dim, num_classes);
  add_block("bias", 1, num_classes);
  allocate();
}

void LinearSoftmaxHead::initialize(std::uint64_t s) {
  seed = s;
  auto rng = make_rng(s);
  fill_normal(weights(), rng, 1.0 / std::sqrt(static_cast<double>(input_dim_)));
  bias().setZero();
}

Eigen::MatrixXd LinearSoftmaxHead::logits(const Eigen::MatrixXd& x) const {
  Eigen::MatrixXd z = x * weights();
  z.rowwise() += bias().row(0);
  return z;
}

Eigen::MatrixXd LinearSoftmaxHead::predict_probs(const Eigen::MatrixXd& x) const { return softmax(logits(x)); }

double LinearSoftmaxHead::loss(const Eigen::MatrixXd& x, std::span<const int> y, std::uint64_t,
                               Eigen::VectorXd* grad) const {
  Eigen::MatrixXd dlogits;
  const double value = softmax_cross_entropy(logits(x), y, grad ? &dlogits : nullptr);
  if (grad) {
    grad->setZero(params_.size());
    view(*grad, blocks_[0]).noalias() = x.transpose() * dlogits;
    view(*grad, blocks_[1]) = dlogits.colwise().sum();
  }
  return value;
}

nlohmann::json LinearSoftmaxHead::hyperparams() const { return nlohmann::json::object(); }

// ---------------------------------------------------------------------------
// RFGPHead

RFGPHead::RFGPHead(int input_dim, int num_classes, RFGPOptions options)
    : input_dim_(input_dim), num_classes_(num_classes), options_(options) {
  if (options_.num_features < 1) throw ValidationError("rfgp: num_features must be positive");
  if (options_.lengthscale <= 0.0) options_.lengthscale = std::sqrt(static_cast<double>(input_dim));
  add_block("beta", options_.num_features, num_classes);
  allocate();
  rf_weights_ = Eigen::MatrixXd::Zero(input_dim, options_.num_features);
  rf_bias_ = Eigen::VectorXd::Zero(options_.num_features);
}

void RFGPHead::initialize(std::uint64_t s) {
  seed = s;
  auto rng = make_rng(s);
  fill_normal(rf_weights_, rng, 1.0 / options_.lengthscale);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  for (Eigen::Index j = 0; j < rf_bias_.size(); ++j) rf_bias_(j) = phase(rng);
  fill_normal(beta(), rng, 1.0 / std::sqrt(static_cast<double>(options_.num_features)));
  precision_ready_ = false;
}

Eigen::MatrixXd RFGPHead::features(const Eigen::MatrixXd& x) const {
  if (x.cols() != input_dim_) throw ValidationError("rfgp: input dimension mismatch");
  Eigen::MatrixXd z = x * rf_weights_;
  z.rowwise() += rf_bias_.transpose();
  return std::sqrt(2.0 / options_.num_features) * z.array().cos().matrix();
}

void RFGPHead::reset_precision() {
  precision_ = Eigen::MatrixXd::Identity(options_.num_features, options_.num_features);
  refactor();
}

void RFGPHead::accumulate_precision(const Eigen::MatrixXd& phi) {
  if (!precision_ready_) reset_precision();
  precision_.noalias() += phi.transpose() * phi;
  refactor();
}

void RFGPHead::refactor() {
  precision_chol_.compute(precision_);
  if (precision_chol_.info() != Eigen::Success) throw RuntimeFailure("rfgp: precision is not positive definite");
  precision_ready_ = true;
}

Eigen::VectorXd RFGPHead::posterior_variance(const Eigen::MatrixXd& x) const {
  if (!precision_ready_) throw RuntimeFailure("rfgp: precision has not been accumulated");
  const Eigen::MatrixXd phi = features(x);
  // Columns of L^-1 phi^T; variance is each column's squared norm.
  const Eigen::MatrixXd solved = precision_chol_.matrixL().solve(phi.transpose());
  return solved.colwise().squaredNorm().transpose();
}

std::optional<Eigen::MatrixXd> RFGPHead::predict_logits(const Eigen::MatrixXd& x) const {
  Eigen::MatrixXd z = features(x) * beta();
  if (options_.mean_field) {
    const Eigen::VectorXd var = posterior_variance(x);
    for (Eigen::Index i = 0; i < z.rows(); ++i) z.row(i) *= gp_mean_field_scale(var(i), options_.mean_field_factor);
  }
  return z;
}

Eigen::MatrixXd RFGPHead::predict_probs(const Eigen::MatrixXd& x) const { return softmax(*predict_logits(x)); }

double RFGPHead::loss(const Eigen::MatrixXd& x, std::span<const int> y, std::uint64_t, Eigen::VectorXd* grad) const {
  const Eigen::MatrixXd phi = features(x);
  Eigen::MatrixXd dlogits;
  const double value = softmax_cross_entropy(phi * beta(), y, grad ? &dlogits : nullptr);
  if (grad) {
    grad->setZero(params_.size());
    view(*grad, blocks_[0]).noalias() = phi.transpose() * dlogits;
  }
  return value;
}

void RFGPHead::finalize(const Eigen::MatrixXd& train_x) {
  reset_precision();
  accumulate_precision(features(train_x));
}

nlohmann::json RFGPHead::hyperparams() const {
  return {{"num_features", options_.num_features},
          {"lengthscale", options_.lengthscale},
          {"mean_field", options_.mean_field},
          {"mean_field_factor", options_.mean_field_factor},
          {"precision_weighting", "pooled"}};
}

std::vector<std::string> RFGPHead::interpretation_flags() const {
  std::vector<std::string> flags = {"gp_precision_pooled"};
  if (options_.mean_field) flags.push_back("gp_mean_field");
  return flags;
}

std::map<std::string, Tensor> RFGPHead::state() const {
  auto out = TrainableHead::state();
  out.emplace("rf_weights", from_matrix(rf_weights_));
  out.emplace("rf_bias", from_vector(rf_bias_));
  if (precision_ready_) out.emplace("precision", from_matrix(precision_));
  return out;
}

void RFGPHead::load_state(const std::map<std::string, Tensor>& state) {
  TrainableHead::load_state(state);
  auto get = [&](const char* name) -> const Tensor& {
    auto it = state.find(name);
    if (it == state.end()) throw ValidationError(std::string("rfgp state is missing '") + name + "'");
    return it->second;
  };
  rf_weights_ = to_matrix(get("rf_weights"));
  rf_bias_ = to_vector(get("rf_bias"));
  if (rf_weights_.rows() != input_dim_ || rf_weights_.cols() != options_.num_features ||
      rf_bias_.size() != options_.num_features) {
    throw ValidationError("rfgp state has the wrong random-feature shape");
  }
  precision_ready_ = false;
  if (state.count("precision")) {
    precision_ = to_matrix(state.at("precision"));
    refactor();
  }
}

// ---------------------------------------------------------------------------
// HeteroscedasticHead

HeteroscedasticHead::HeteroscedasticHead(int input_dim, int num_classes, HeteroscedasticOptions options)
    : input_dim_(input_dim), num_classes_(num_classes), options_(options) {
  rank_ = options_.rank < 0 ? std::min(num_classes - 1, 15) : options_.rank;
  options_.rank = rank_;
  if (!(options_.temperature > 0.0)) throw ValidationError("heteroscedastic: temperature must be positive");
  if (options_.train_samples < 1 || options_.eval_samples < 1) {
    throw ValidationError("heteroscedastic: sample counts must be positive");
  }
  add_block("mean_weights", input_dim, num_classes);
  add_block("mean_bias", 1, num_classes);
  add_block("diag_weights", input_dim, num_classes);
  add_block("low_rank_weights", input_dim, static_cast<Eigen::Index>(num_classes) * rank_);
  allocate();
}

void HeteroscedasticHead::initialize(std::uint64_t s) {
  seed = s;
  auto rng = make_rng(s);
  const double scale = 1.0 / std::sqrt(static_cast<double>(input_dim_));
  fill_normal(mean_weights(), rng, scale);
  mean_bias().setZero();
  fill_normal(diag_weights(), rng, 0.1 * scale);
  fill_normal(low_rank_weights(), rng, 0.1 * scale);
}

namespace {

// Noise for one logit sample: eps1 (R) then eps2 (K).
struct LogitNoise {
  Eigen::VectorXd low_rank;
  Eigen::VectorXd diag;
};

LogitNoise draw_noise(std::mt19937_64& rng, int rank, int k) {
  std::normal_distribution<double> normal(0.0, 1.0);
  LogitNoise n{Eigen::VectorXd(rank), Eigen::VectorXd(k)};
  for (int r = 0; r < rank; ++r) n.low_rank(r) = normal(rng);
  for (int c = 0; c < k; ++c) n.diag(c) = normal(rng);
  return n;
}

// u = mu + V eps1 + d * eps2 for one example; V is stored row-major as k * R + r.
Eigen::RowVectorXd sample_logits(const Eigen::Ref<const Eigen::RowVectorXd>& mu,
                                 const Eigen::Ref<const Eigen::RowVectorXd>& v_flat,
                                 const Eigen::Ref<const Eigen::RowVectorXd>& d, const LogitNoise& noise, int rank) {
  Eigen::RowVectorXd u = mu;
  for (Eigen::Index k = 0; k < mu.size(); ++k) {
    double lr = 0.0;
    for (int r = 0; r < rank; ++r) lr += v_flat(k * rank + r) * noise.low_rank(r);
    u(k) += lr;
    u(k) += d(k) * noise.diag(k);
  }
  return u;
}

}  // namespace

Eigen::MatrixXd HeteroscedasticHead::predict_probs(const Eigen::MatrixXd& x) const {
  const auto mw = view(blocks_[0]);
  const auto mb = view(blocks_[1]);
  Eigen::MatrixXd mu = x * mw;
  mu.rowwise() += mb.row(0);
  const Eigen::MatrixXd d = x * view(blocks_[2]);
  const Eigen::MatrixXd v = x * view(blocks_[3]);

  auto rng = make_rng(seed, kEvalStream);
  std::vector<LogitNoise> noise;
  noise.reserve(static_cast<std::size_t>(options_.eval_samples));
  for (int s = 0; s < options_.eval_samples; ++s) noise.push_back(draw_noise(rng, rank_, num_classes_));

  Eigen::MatrixXd probs(x.rows(), num_classes_);
  Eigen::MatrixXd mean;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (int s = 0; s < options_.eval_samples; ++s) {
      const Eigen::RowVectorXd u = sample_logits(mu.row(i), v.row(i), d.row(i), noise[static_cast<std::size_t>(s)], rank_);
      accumulate_mean(mean, softmax(u / options_.temperature), s);
    }
    probs.row(i) = mean;
  }
  return probs;
}

double HeteroscedasticHead::loss(const Eigen::MatrixXd& x, std::span<const int> y, std::uint64_t noise_seed,
                                 Eigen::VectorXd* grad) const {
  const Eigen::Index n = x.rows();
  const int k = num_classes_;
  const int samples = options_.train_samples;
  const double tau = options_.temperature;
  Eigen::MatrixXd mu = x * view(blocks_[0]);
  mu.rowwise() += view(blocks_[1]).row(0);
  const Eigen::MatrixXd d = x * view(blocks_[2]);
  const Eigen::MatrixXd v = x * view(blocks_[3]);

  Eigen::MatrixXd dmu, dd, dv;
  if (grad) {
    dmu = Eigen::MatrixXd::Zero(n, k);
    dd = Eigen::MatrixXd::Zero(n, k);
    dv = Eigen::MatrixXd::Zero(n, v.cols());
  }

  auto rng = make_rng(noise_seed);
  double total = 0.0;
  std::vector<LogitNoise> noise(static_cast<std::size_t>(samples));
  std::vector<Eigen::RowVectorXd> probs(static_cast<std::size_t>(samples));
  Eigen::VectorXd log_lik(samples);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int label = y[static_cast<std::size_t>(i)];
    for (int s = 0; s < samples; ++s) {
      auto& eps = noise[static_cast<std::size_t>(s)];
      eps = draw_noise(rng, rank_, k);
      const Eigen::RowVectorXd z = sample_logits(mu.row(i), v.row(i), d.row(i), eps, rank_) / tau;
      const double lse = log_sum_exp(z);
      log_lik(s) = z(label) - lse;
      probs[static_cast<std::size_t>(s)] = (z.array() - lse).exp().matrix();
    }
    // -log of the MC-averaged likelihood.
    const double lse_s = log_sum_exp(log_lik.transpose());
    total -= lse_s - std::log(static_cast<double>(samples));
    if (!grad) continue;
    for (int s = 0; s < samples; ++s) {
      const double w = std::exp(log_lik(s) - lse_s);
      Eigen::RowVectorXd du = w * probs[static_cast<std::size_t>(s)];
      du(label) -= w;
      du /= tau;
      const auto& eps = noise[static_cast<std::size_t>(s)];
      dmu.row(i) += du;
      for (int c = 0; c < k; ++c) {
        dd(i, c) += du(c) * eps.diag(c);
        for (int r = 0; r < rank_; ++r) dv(i, c * rank_ + r) += du(c) * eps.low_rank(r);
      }
    }
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  if (grad) {
    grad->setZero(params_.size());
    view(*grad, blocks_[0]).noalias() = inv_n * x.transpose() * dmu;
    view(*grad, blocks_[1]) = inv_n * dmu.colwise().sum();
    view(*grad, blocks_[2]).noalias() = inv_n * x.transpose() * dd;
    view(*grad, blocks_[3]).noalias() = inv_n * x.transpose() * dv;
  }
  return total * inv_n;
}

nlohmann::json HeteroscedasticHead::hyperparams() const {
  return {{"rank", rank_},
          {"temperature", options_.temperature},
          {"train_samples", options_.train_samples},
          {"eval_samples", options_.eval_samples}};
}

// ---------------------------------------------------------------------------
// EnsembleHead

EnsembleHead::EnsembleHead(std::vector<std::unique_ptr<Head>> members) : members_(std::move(members)) {
  if (members_.empty()) throw ValidationError("ensemble needs at least one member");
  for (const auto& m : members_) {
    if (m->num_classes() != members_.front()->num_classes() || m->input_dim() != members_.front()->input_dim()) {
      throw ValidationError("ensemble members must share input dimension and class count");
    }
  }
}

EnsembleHead::EnsembleHead(const EnsembleHead& other) : Head(other) {
  for (const auto& m : other.members_) members_.push_back(m->clone());
}

Eigen::MatrixXd EnsembleHead::predict_probs(const Eigen::MatrixXd& x) const {
  Eigen::MatrixXd mean;
  for (std::size_t m = 0; m < members_.size(); ++m) accumulate_mean(mean, members_[m]->predict_probs(x), static_cast<int>(m));
  return mean;
}

nlohmann::json EnsembleHead::hyperparams() const {
  nlohmann::json members = nlohmann::json::array();
  for (const auto& m : members_) members.push_back({{"kind", to_string(m->kind())}, {"hyperparams", m->hyperparams()}});
  return {{"members", members}, {"combine", "mean_probs"}};
}

std::vector<std::string> EnsembleHead::interpretation_flags() const {
  std::vector<std::string> flags = {"ensemble_mean_probs"};
  for (const auto& f : members_.front()->interpretation_flags()) flags.push_back(f);
  return flags;
}

// ---------------------------------------------------------------------------
// Construction from specs

HeadSpec parse_head_spec(const nlohmann::json& doc) {
  if (!doc.is_object() || !doc.contains("kind") || !doc["kind"].is_string()) {
    throw ValidationError("head spec needs a string 'kind'");
  }
  HeadSpec spec;
  spec.kind = parse_head_kind(doc["kind"].get<std::string>());
  if (doc.contains("hyperparams")) {
    if (!doc["hyperparams"].is_object()) throw ValidationError("head 'hyperparams' must be an object");
    spec.hyperparams = doc["hyperparams"];
  }
  return spec;
}

namespace {

template <typename T>
T param_or(const nlohmann::json& hp, const char* key, T fallback) {
  if (!hp.contains(key)) return fallback;
  try {
    return hp[key].get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ValidationError(std::string("head hyperparameter '") + key + "' has the wrong type");
  }
}

void check_keys(const nlohmann::json& hp, HeadKind kind, std::initializer_list<const char*> allowed) {
  for (const auto& [key, value] : hp.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
      throw ValidationError("unknown hyperparameter '" + key + "' for head kind '" + to_string(kind) + "'");
    }
  }
}

OutputSharing parse_output(const std::string& s) {
  if (s == "shared") return OutputSharing::shared;
  if (s == "per_member") return OutputSharing::per_member;
  throw ValidationError("batch_ensemble output must be 'shared' or 'per_member'");
}

}  // namespace

std::unique_ptr<Head> make_head(const HeadSpec& spec, int input_dim, int num_classes, std::uint64_t seed) {
  if (input_dim < 1 || num_classes < 2) throw ValidationError("heads need input_dim >= 1 and at least 2 classes");
  const auto& hp = spec.hyperparams;
  switch (spec.kind) {
    case HeadKind::linear: {
      check_keys(hp, spec.kind, {});
      auto h = std::make_unique<LinearSoftmaxHead>(input_dim, num_classes);
      h->initialize(seed);
      return h;
    }
    case HeadKind::rfgp: {
      check_keys(hp, spec.kind, {"num_features", "lengthscale", "mean_field", "mean_field_factor", "precision_weighting"});
      if (param_or<std::string>(hp, "precision_weighting", "pooled") != "pooled") {
        throw ValidationError("rfgp precision_weighting must be 'pooled'");
      }
      RFGPOptions o;
      o.num_features = param_or(hp, "num_features", o.num_features);
      o.lengthscale = param_or(hp, "lengthscale", o.lengthscale);
      o.mean_field = param_or(hp, "mean_field", o.mean_field);
      o.mean_field_factor = param_or(hp, "mean_field_factor", o.mean_field_factor);
      auto h = std::make_unique<RFGPHead>(input_dim, num_classes, o);
      h->initialize(seed);
      return h;
    }
    case HeadKind::heteroscedastic: {
      check_keys(hp, spec.kind, {"rank", "temperature", "train_samples", "eval_samples"});
      HeteroscedasticOptions o;
      o.rank = param_or(hp, "rank", o.rank);
      o.temperature = param_or(hp, "temperature", o.temperature);
      o.train_samples = param_or(hp, "train_samples", o.train_samples);
      o.eval_samples = param_or(hp, "eval_samples", o.eval_samples);
      auto h = std::make_unique<HeteroscedasticHead>(input_dim, num_classes, o);
      h->initialize(seed);
      return h;
    }
    case HeadKind::batch_ensemble: {
      check_keys(hp, spec.kind, {"members", "hidden", "output"});
      BatchEnsembleOptions o;
      o.members = param_or(hp, "members", o.members);
      o.hidden = param_or(hp, "hidden", o.hidden);
      o.output = parse_output(param_or<std::string>(hp, "output", "shared"));
      auto h = std::make_unique<BatchEnsembleHead>(input_dim, num_classes, o);
      h->initialize(seed);
      return h;
    }
    case HeadKind::mc_dropout: {
      check_keys(hp, spec.kind, {"hidden", "rate", "samples"});
      MCDropoutOptions o;
      o.hidden = param_or(hp, "hidden", o.hidden);
      o.rate = param_or(hp, "rate", o.rate);
      o.samples = param_or(hp, "samples", o.samples);
      auto h = std::make_unique<MCDropoutHead>(input_dim, num_classes, o);
      h->initialize(seed);
      return h;
    }
    case HeadKind::ensemble: {
      check_keys(hp, spec.kind, {"members", "member"});
      const int count = param_or(hp, "members", 4);
      if (count < 1) throw ValidationError("ensemble needs at least one member");
      const HeadSpec member = hp.contains("member") ? parse_head_spec(hp["member"]) : HeadSpec{};
      if (member.kind == HeadKind::ensemble) throw ValidationError("nested ensembles are not supported");
      std::vector<std::unique_ptr<Head>> members;
      for (int m = 0; m < count; ++m) {
        members.push_back(make_head(member, input_dim, num_classes, derive_seed(seed, static_cast<std::uint64_t>(m) + 1)));
      }
      auto h = std::make_unique<EnsembleHead>(std::move(members));
      h->seed = seed;
      return h;
    }
  }
  throw ValidationError("unsupported head kind");
}

}  // namespace relkit
