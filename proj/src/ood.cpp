#include "relkit/ood.hpp"

#include <cmath>
#include <limits>

#include "relkit/error.hpp"
#include "relkit/metrics.hpp"

namespace relkit {

double msp_score(const Eigen::Ref<const Eigen::RowVectorXd>& probs) { return 1.0 - probs.maxCoeff(); }

double entropy_score(const Eigen::Ref<const Eigen::RowVectorXd>& probs) {
  double h = 0.0;
  for (Eigen::Index k = 0; k < probs.size(); ++k) {
    const double p = probs(k);
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

double maxlogit_score(const Eigen::Ref<const Eigen::RowVectorXd>& logits) { return -logits.maxCoeff(); }

GaussianClassModel fit_class_gaussians(const Eigen::MatrixXd& embeddings, std::span<const int> labels,
                                       int num_classes, std::optional<double> reg) {
  const Eigen::Index n = embeddings.rows();
  const Eigen::Index d = embeddings.cols();
  if (static_cast<std::size_t>(n) != labels.size()) {
    throw ValidationError("fit_class_gaussians: " + std::to_string(n) + " embeddings but " +
                          std::to_string(labels.size()) + " labels");
  }
  if (num_classes < 1) throw ValidationError("fit_class_gaussians: need at least one class");
  if (!embeddings.allFinite()) throw ValidationError("fit_class_gaussians: non-finite embedding");

  GaussianClassModel model;
  model.counts.assign(static_cast<std::size_t>(num_classes), 0);
  model.means = Eigen::MatrixXd::Zero(num_classes, d);
  model.bg_mean = Eigen::VectorXd::Zero(d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= num_classes) throw ValidationError("fit_class_gaussians: label " + std::to_string(y) + " out of range");
    model.means.row(y) += embeddings.row(i);
    model.bg_mean += embeddings.row(i).transpose();
    ++model.counts[static_cast<std::size_t>(y)];
  }
  for (int k = 0; k < num_classes; ++k) {
    const auto c = model.counts[static_cast<std::size_t>(k)];
    if (c == 0) throw ValidationError("fit_class_gaussians: class " + std::to_string(k) + " has no examples");
    if (c == 1) model.warnings.push_back("class " + std::to_string(k) + " has a single example");
    model.means.row(k) /= static_cast<double>(c);
  }
  model.bg_mean /= static_cast<double>(n);
  if (n <= d) {
    model.warnings.push_back("N=" + std::to_string(n) + " does not exceed D=" + std::to_string(d) +
                             "; covariance relies on the ridge");
  }

  model.shared_cov = Eigen::MatrixXd::Zero(d, d);
  model.bg_cov = Eigen::MatrixXd::Zero(d, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::VectorXd within = (embeddings.row(i) - model.means.row(labels[static_cast<std::size_t>(i)])).transpose();
    const Eigen::VectorXd centered = embeddings.row(i).transpose() - model.bg_mean;
    model.shared_cov.noalias() += within * within.transpose();
    model.bg_cov.noalias() += centered * centered.transpose();
  }
  model.shared_cov /= static_cast<double>(n);
  model.bg_cov /= static_cast<double>(n);

  model.reg = reg.value_or(1e-6 * model.shared_cov.trace() / static_cast<double>(d));
  if (!(model.reg >= 0.0)) throw ValidationError("fit_class_gaussians: ridge must be non-negative");
  const Eigen::MatrixXd ridge = model.reg * Eigen::MatrixXd::Identity(d, d);
  model.chol.compute(model.shared_cov + ridge);
  if (model.chol.info() != Eigen::Success) {
    throw RuntimeFailure("fit_class_gaussians: shared covariance is not positive definite after ridge " +
                         std::to_string(model.reg));
  }
  model.bg_chol.compute(model.bg_cov + ridge);
  if (model.bg_chol.info() != Eigen::Success) {
    throw RuntimeFailure("fit_class_gaussians: background covariance is not positive definite after ridge " +
                         std::to_string(model.reg));
  }
  return model;
}

namespace {

double squared_distance(const Eigen::LLT<Eigen::MatrixXd>& chol, const Eigen::VectorXd& diff) {
  return chol.matrixL().solve(diff).squaredNorm();
}

void check_dim(const GaussianClassModel& model, Eigen::Index size) {
  if (size != model.dim()) {
    throw ValidationError("mahalanobis: embedding has dimension " + std::to_string(size) + ", model expects " +
                          std::to_string(model.dim()));
  }
}

}  // namespace

double mahalanobis_score(const GaussianClassModel& model, const Eigen::Ref<const Eigen::VectorXd>& z) {
  check_dim(model, z.size());
  double best = std::numeric_limits<double>::infinity();
  for (Eigen::Index k = 0; k < model.num_classes(); ++k) {
    best = std::min(best, squared_distance(model.chol, z - model.means.row(k).transpose()));
  }
  return best;
}

double background_mahalanobis(const GaussianClassModel& model, const Eigen::Ref<const Eigen::VectorXd>& z) {
  check_dim(model, z.size());
  return squared_distance(model.bg_chol, z - model.bg_mean);
}

double relative_mahalanobis_score(const GaussianClassModel& model, const Eigen::Ref<const Eigen::VectorXd>& z) {
  return mahalanobis_score(model, z) - background_mahalanobis(model, z);
}

double sequence_entropy_score(const SequenceDistribution& seq) {
  if (seq.length < 1 || seq.length > seq.step_probs.rows()) {
    throw ValidationError("sequence length must be in [1, " + std::to_string(seq.step_probs.rows()) + "]");
  }
  double total = 0.0;
  for (Eigen::Index l = 0; l < seq.length; ++l) total += entropy_score(seq.step_probs.row(l));
  return total / static_cast<double>(seq.length);
}

OsrResult osr_evaluate(std::span<const double> in_scores, std::span<const double> out_scores) {
  if (in_scores.empty() || out_scores.empty()) {
    throw ValidationError("osr_evaluate: both in-distribution and OOD score sets must be non-empty");
  }
  std::vector<double> scores(in_scores.begin(), in_scores.end());
  scores.insert(scores.end(), out_scores.begin(), out_scores.end());
  std::vector<bool> is_ood(scores.size(), false);
  std::fill(is_ood.begin() + static_cast<std::ptrdiff_t>(in_scores.size()), is_ood.end(), true);
  return {binary_auroc(scores, is_ood), binary_auprc(scores, is_ood)};
}

}  // namespace relkit
