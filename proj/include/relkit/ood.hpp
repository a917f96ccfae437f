#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace relkit {

// Per-example uncertainty scores; higher always means "more likely OOD".
double msp_score(const Eigen::Ref<const Eigen::RowVectorXd>& probs);
double entropy_score(const Eigen::Ref<const Eigen::RowVectorXd>& probs);
double maxlogit_score(const Eigen::Ref<const Eigen::RowVectorXd>& logits);

/// Class-conditional Gaussians with a shared covariance, plus a label-free
/// background Gaussian fitted on the same embeddings.
struct GaussianClassModel {
  Eigen::MatrixXd means;       // K x D
  Eigen::MatrixXd shared_cov;  // D x D, unregularized
  Eigen::VectorXd bg_mean;     // D
  Eigen::MatrixXd bg_cov;      // D x D, unregularized
  Eigen::LLT<Eigen::MatrixXd> chol;     // of shared_cov + reg I
  Eigen::LLT<Eigen::MatrixXd> bg_chol;  // of bg_cov + reg I
  double reg = 0.0;
  std::vector<Eigen::Index> counts;
  std::vector<std::string> warnings;

  Eigen::Index dim() const { return means.cols(); }
  Eigen::Index num_classes() const { return means.rows(); }
};

/// Default ridge: 1e-6 * trace(shared_cov) / D.
GaussianClassModel fit_class_gaussians(const Eigen::MatrixXd& embeddings, std::span<const int> labels,
                                       int num_classes, std::optional<double> reg = std::nullopt);

/// min_k (z - mu_k)^T Sigma^-1 (z - mu_k), squared form.
double mahalanobis_score(const GaussianClassModel& model, const Eigen::Ref<const Eigen::VectorXd>& z);
/// Squared distance to the background Gaussian.
double background_mahalanobis(const GaussianClassModel& model, const Eigen::Ref<const Eigen::VectorXd>& z);
double relative_mahalanobis_score(const GaussianClassModel& model, const Eigen::Ref<const Eigen::VectorXd>& z);

/// Per-step conditional distributions of one decoded sequence. Only the
/// first `length` rows count; the rest are padding.
struct SequenceDistribution {
  Eigen::MatrixXd step_probs;  // L x K
  Eigen::Index length = 0;
};

/// Mean per-step entropy over the effective length. Reported as a magnitude
/// so that higher means more uncertain.
double sequence_entropy_score(const SequenceDistribution& seq);

struct OsrResult {
  double auroc = 0.0;
  double auprc = 0.0;
};

/// OOD examples are the positive class.
OsrResult osr_evaluate(std::span<const double> in_scores, std::span<const double> out_scores);

}  // namespace relkit
