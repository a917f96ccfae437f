#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace relkit {

/// Predicted class probabilities with their targets.
///
/// Rows of `probs` are non-negative and sum to 1 within 1e-5. Argmax ties go
/// to the lowest class index everywhere in this library.
struct PredictionBatch {
  Eigen::MatrixXd probs;  // N x K
  std::vector<int> labels;
  std::optional<Eigen::MatrixXd> soft_labels;
  std::optional<std::vector<int>> groups;

  static PredictionBatch make(Eigen::MatrixXd probs, std::vector<int> labels,
                              std::optional<Eigen::MatrixXd> soft_labels = std::nullopt,
                              std::optional<std::vector<int>> groups = std::nullopt);

  Eigen::Index size() const { return probs.rows(); }
  int num_classes() const { return static_cast<int>(probs.cols()); }
  PredictionBatch subset(std::span<const Eigen::Index> rows) const;
};

int argmax(const Eigen::Ref<const Eigen::RowVectorXd>& row);
double max_probability(const Eigen::Ref<const Eigen::RowVectorXd>& row);
std::vector<bool> correctness(const PredictionBatch& batch);
Eigen::MatrixXd softmax_rows(const Eigen::MatrixXd& logits);

inline constexpr double kProbabilityFloor = 1e-12;
inline constexpr int kDefaultEceBins = 15;

double accuracy(const PredictionBatch& batch);
double nll(const PredictionBatch& batch);
double brier(const PredictionBatch& batch);
double ece(const PredictionBatch& batch, int num_bins = kDefaultEceBins);

/// P(score_pos > score_neg) + P(tie)/2 via midranks. Throws DegenerateInput
/// when only one class is present.
double binary_auroc(std::span<const double> scores, const std::vector<bool>& positives);
/// Average precision: mean over positives of the precision at that positive's
/// rank, scanning by descending score with ties in index order.
double binary_auprc(std::span<const double> scores, const std::vector<bool>& positives);

/// AUROC of (1 - max prob) at detecting incorrect predictions.
double calibration_auroc(const PredictionBatch& batch);

/// Indices of the `count` largest uncertainties, ties to the lowest index.
std::vector<Eigen::Index> most_uncertain(std::span<const double> uncertainty, Eigen::Index count);

double oracle_collaborative_accuracy(const PredictionBatch& batch, std::span<const double> uncertainty,
                                     double budget);
/// Referred examples become correct with zero uncertainty; AUROC of the
/// remaining uncertainty at flagging the still-incorrect predictions.
double oracle_collaborative_auroc(const PredictionBatch& batch, std::span<const double> uncertainty, double budget);

enum class RejectionMetric { accuracy, auroc, auprc };
std::string to_string(RejectionMetric metric);

struct CurvePoint {
  double x = 0.0;
  double y = 0.0;
  bool operator==(const CurvePoint&) const = default;
};

struct RejectionCurve {
  std::vector<CurvePoint> points;
  std::vector<double> omitted_rates;  // retained set was degenerate for the metric
};

/// Evaluates `metric` on the examples kept after rejecting the floor(rate*N)
/// most uncertain ones. AUROC/AUPRC need a binary batch and score class 1.
RejectionCurve rejection_curve(const PredictionBatch& batch, std::span<const double> uncertainty,
                               RejectionMetric metric, std::span<const double> rates);
double rejection_auc(std::span<const CurvePoint> curve);
std::vector<double> default_rejection_rates(int count = 100);

double label_uncertainty_kl(const PredictionBatch& batch);

std::map<int, double> per_group_accuracy(const PredictionBatch& batch);
/// Linear-interpolation percentiles (0..100) over the sorted group values.
std::map<double, double> subpopulation_percentiles(const std::map<int, double>& per_group_metric,
                                                   std::span<const double> percentiles);

/// A named metric value with the bounds used to normalize it.
struct MetricRecord {
  std::string task;
  std::string dataset;
  std::string split;
  std::string metric;
  double value = 0.0;
  bool higher_is_better = true;
  double lower_bound = 0.0;
  double upper_bound = 1.0;
  bool clamped = false;
  std::vector<std::string> flags;

  /// Builds a record, setting `clamped` when value lies outside the bounds.
  static MetricRecord make(std::string task, std::string dataset, std::string split, std::string metric,
                           double value, bool higher_is_better, double lower_bound, double upper_bound);

  /// Value mapped affinely onto [0, 100], higher is better.
  double normalized() const;

  bool operator==(const MetricRecord&) const = default;
};

/// Unweighted mean of normalized records. Throws ValidationError for a record
/// outside its bounds by more than 1e-9 that was not flagged as clamped.
double reliability_score(std::span<const MetricRecord> records);

}  // namespace relkit
