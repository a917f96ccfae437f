#include "relkit/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "relkit/error.hpp"

namespace relkit {

namespace {

constexpr double kRowSumTolerance = 1e-5;
constexpr double kBoundTolerance = 1e-9;

// floor(fraction * n) that tolerates decimal fractions like 0.29 landing just
// below an integer after multiplication.
Eigen::Index fraction_count(double fraction, Eigen::Index n) {
  return static_cast<Eigen::Index>(std::floor(fraction * static_cast<double>(n) + 1e-9));
}

void check_same_length(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw ValidationError(std::string(what) + ": length mismatch " + std::to_string(a) + " vs " + std::to_string(b));
  }
}

}  // namespace

PredictionBatch PredictionBatch::make(Eigen::MatrixXd probs, std::vector<int> labels,
                                      std::optional<Eigen::MatrixXd> soft_labels,
                                      std::optional<std::vector<int>> groups) {
  const Eigen::Index n = probs.rows();
  const Eigen::Index k = probs.cols();
  if (n < 1) throw ValidationError("prediction batch needs at least one example");
  if (k < 1) throw ValidationError("prediction batch needs at least one class");
  check_same_length(static_cast<std::size_t>(n), labels.size(), "probs/labels");
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto row = probs.row(i);
    if (!row.allFinite() || row.minCoeff() < 0.0) {
      throw ValidationError("probability row " + std::to_string(i) + " has a negative or non-finite entry");
    }
    if (std::abs(row.sum() - 1.0) > kRowSumTolerance) {
      throw ValidationError("probability row " + std::to_string(i) + " sums to " + std::to_string(row.sum()));
    }
    if (labels[static_cast<std::size_t>(i)] < 0 || labels[static_cast<std::size_t>(i)] >= k) {
      throw ValidationError("label " + std::to_string(labels[static_cast<std::size_t>(i)]) + " outside [0, " +
                            std::to_string(k) + ")");
    }
  }
  if (soft_labels && (soft_labels->rows() != n || soft_labels->cols() != k)) {
    throw ValidationError("soft labels must be N x K");
  }
  if (groups) check_same_length(static_cast<std::size_t>(n), groups->size(), "probs/groups");
  return PredictionBatch{std::move(probs), std::move(labels), std::move(soft_labels), std::move(groups)};
}

PredictionBatch PredictionBatch::subset(std::span<const Eigen::Index> rows) const {
  PredictionBatch out;
  out.probs.resize(static_cast<Eigen::Index>(rows.size()), probs.cols());
  out.labels.reserve(rows.size());
  if (soft_labels) out.soft_labels = Eigen::MatrixXd(static_cast<Eigen::Index>(rows.size()), probs.cols());
  if (groups) out.groups = std::vector<int>{};
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto i = rows[r];
    out.probs.row(static_cast<Eigen::Index>(r)) = probs.row(i);
    out.labels.push_back(labels[static_cast<std::size_t>(i)]);
    if (soft_labels) out.soft_labels->row(static_cast<Eigen::Index>(r)) = soft_labels->row(i);
    if (groups) out.groups->push_back((*groups)[static_cast<std::size_t>(i)]);
  }
  return out;
}

int argmax(const Eigen::Ref<const Eigen::RowVectorXd>& row) {
  int best = 0;
  for (Eigen::Index k = 1; k < row.size(); ++k) {
    if (row(k) > row(best)) best = static_cast<int>(k);
  }
  return best;
}

double max_probability(const Eigen::Ref<const Eigen::RowVectorXd>& row) { return row.maxCoeff(); }

std::vector<bool> correctness(const PredictionBatch& batch) {
  std::vector<bool> out(static_cast<std::size_t>(batch.size()));
  for (Eigen::Index i = 0; i < batch.size(); ++i) {
    out[static_cast<std::size_t>(i)] = argmax(batch.probs.row(i)) == batch.labels[static_cast<std::size_t>(i)];
  }
  return out;
}

Eigen::MatrixXd softmax_rows(const Eigen::MatrixXd& logits) {
  Eigen::MatrixXd out(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double m = logits.row(i).maxCoeff();
    out.row(i) = (logits.row(i).array() - m).exp().matrix();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

double accuracy(const PredictionBatch& batch) {
  const auto ok = correctness(batch);
  return static_cast<double>(std::count(ok.begin(), ok.end(), true)) / static_cast<double>(ok.size());
}

double nll(const PredictionBatch& batch) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < batch.size(); ++i) {
    const double p = batch.probs(i, batch.labels[static_cast<std::size_t>(i)]);
    total -= std::log(std::clamp(p, kProbabilityFloor, 1.0));
  }
  return total / static_cast<double>(batch.size());
}

double brier(const PredictionBatch& batch) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < batch.size(); ++i) {
    for (Eigen::Index k = 0; k < batch.probs.cols(); ++k) {
      const double target = k == batch.labels[static_cast<std::size_t>(i)] ? 1.0 : 0.0;
      const double d = batch.probs(i, k) - target;
      total += d * d;
    }
  }
  return total / static_cast<double>(batch.size());
}

double ece(const PredictionBatch& batch, int num_bins) {
  if (num_bins < 1) throw ValidationError("ece: num_bins must be positive");
  std::vector<double> conf_sum(static_cast<std::size_t>(num_bins), 0.0);
  std::vector<double> correct(static_cast<std::size_t>(num_bins), 0.0);
  std::vector<double> count(static_cast<std::size_t>(num_bins), 0.0);
  const auto ok = correctness(batch);
  for (Eigen::Index i = 0; i < batch.size(); ++i) {
    const double c = max_probability(batch.probs.row(i));
    // [b/B, (b+1)/B), with confidence 1.0 in the last bin.
    const int b = std::min(static_cast<int>(std::floor(c * num_bins)), num_bins - 1);
    conf_sum[static_cast<std::size_t>(b)] += c;
    correct[static_cast<std::size_t>(b)] += ok[static_cast<std::size_t>(i)] ? 1.0 : 0.0;
    count[static_cast<std::size_t>(b)] += 1.0;
  }
  double total = 0.0;
  for (std::size_t b = 0; b < count.size(); ++b) {
    if (count[b] == 0.0) continue;
    total += std::abs(correct[b] - conf_sum[b]);  // n_b * |acc_b - conf_b|
  }
  return total / static_cast<double>(batch.size());
}

double binary_auroc(std::span<const double> scores, const std::vector<bool>& positives) {
  check_same_length(scores.size(), positives.size(), "auroc");
  const std::size_t n = scores.size();
  const auto n_pos = static_cast<double>(std::count(positives.begin(), positives.end(), true));
  const double n_neg = static_cast<double>(n) - n_pos;
  if (n_pos == 0.0 || n_neg == 0.0) throw DegenerateInput("auroc: both positive and negative examples are required");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Midranks; rank sums stay exact in double for any realistic N.
  double pos_rank_sum = 0.0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double midrank = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (std::size_t t = i; t <= j; ++t) {
      if (positives[order[t]]) pos_rank_sum += midrank;
    }
    i = j + 1;
  }
  return (pos_rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg);
}

double binary_auprc(std::span<const double> scores, const std::vector<bool>& positives) {
  check_same_length(scores.size(), positives.size(), "auprc");
  const auto n_pos = static_cast<std::size_t>(std::count(positives.begin(), positives.end(), true));
  if (n_pos == 0 || n_pos == positives.size()) {
    throw DegenerateInput("auprc: both positive and negative examples are required");
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double tp = 0.0;
  double precision_sum = 0.0;
  for (std::size_t r = 0; r < order.size(); ++r) {
    if (positives[order[r]]) {
      tp += 1.0;
      precision_sum += tp / static_cast<double>(r + 1);
    }
  }
  return precision_sum / static_cast<double>(n_pos);
}

double calibration_auroc(const PredictionBatch& batch) {
  const auto ok = correctness(batch);
  std::vector<double> uncertainty(ok.size());
  std::vector<bool> incorrect(ok.size());
  for (std::size_t i = 0; i < ok.size(); ++i) {
    uncertainty[i] = 1.0 - max_probability(batch.probs.row(static_cast<Eigen::Index>(i)));
    incorrect[i] = !ok[i];
  }
  return binary_auroc(uncertainty, incorrect);
}

std::vector<Eigen::Index> most_uncertain(std::span<const double> uncertainty, Eigen::Index count) {
  std::vector<Eigen::Index> order(uncertainty.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
    return uncertainty[static_cast<std::size_t>(a)] > uncertainty[static_cast<std::size_t>(b)];
  });
  order.resize(static_cast<std::size_t>(std::clamp<Eigen::Index>(count, 0, static_cast<Eigen::Index>(order.size()))));
  return order;
}

namespace {

std::vector<bool> referred_mask(const PredictionBatch& batch, std::span<const double> uncertainty, double budget) {
  check_same_length(static_cast<std::size_t>(batch.size()), uncertainty.size(), "uncertainty");
  if (!(budget >= 0.0 && budget <= 1.0)) throw ValidationError("referral budget must be in [0, 1]");
  std::vector<bool> referred(uncertainty.size(), false);
  for (auto i : most_uncertain(uncertainty, fraction_count(budget, batch.size()))) {
    referred[static_cast<std::size_t>(i)] = true;
  }
  return referred;
}

}  // namespace

double oracle_collaborative_accuracy(const PredictionBatch& batch, std::span<const double> uncertainty,
                                     double budget) {
  const auto referred = referred_mask(batch, uncertainty, budget);
  const auto ok = correctness(batch);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < ok.size(); ++i) correct += (referred[i] || ok[i]) ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(ok.size());
}

double oracle_collaborative_auroc(const PredictionBatch& batch, std::span<const double> uncertainty,
                                  double budget) {
  const auto referred = referred_mask(batch, uncertainty, budget);
  const auto ok = correctness(batch);
  std::vector<double> scores(ok.size());
  std::vector<bool> incorrect(ok.size());
  for (std::size_t i = 0; i < ok.size(); ++i) {
    scores[i] = referred[i] ? 0.0 : uncertainty[i];
    incorrect[i] = !(referred[i] || ok[i]);
  }
  return binary_auroc(scores, incorrect);
}

std::string to_string(RejectionMetric metric) {
  switch (metric) {
    case RejectionMetric::accuracy:
      return "accuracy";
    case RejectionMetric::auroc:
      return "auroc";
    case RejectionMetric::auprc:
      return "auprc";
  }
  return "unknown";
}

RejectionCurve rejection_curve(const PredictionBatch& batch, std::span<const double> uncertainty,
                               RejectionMetric metric, std::span<const double> rates) {
  check_same_length(static_cast<std::size_t>(batch.size()), uncertainty.size(), "uncertainty");
  for (std::size_t r = 0; r < rates.size(); ++r) {
    if (!(rates[r] >= 0.0 && rates[r] <= 0.99)) throw ValidationError("rejection rates must lie in [0, 0.99]");
    if (r > 0 && !(rates[r] > rates[r - 1])) throw ValidationError("rejection rates must be strictly increasing");
  }
  if (metric != RejectionMetric::accuracy && batch.num_classes() != 2) {
    throw ValidationError("rejection curve " + to_string(metric) + " requires a binary task");
  }
  const Eigen::Index n = batch.size();
  const auto ranked = most_uncertain(uncertainty, n);

  RejectionCurve curve;
  for (double rate : rates) {
    const Eigen::Index rejected = fraction_count(rate, n);
    std::vector<Eigen::Index> kept(ranked.begin() + rejected, ranked.end());
    std::sort(kept.begin(), kept.end());
    const auto sub = batch.subset(kept);
    if (metric == RejectionMetric::accuracy) {
      curve.points.push_back({rate, accuracy(sub)});
      continue;
    }
    std::vector<double> score(kept.size());
    std::vector<bool> pos(kept.size());
    for (std::size_t i = 0; i < kept.size(); ++i) {
      score[i] = sub.probs(static_cast<Eigen::Index>(i), 1);
      pos[i] = sub.labels[i] == 1;
    }
    try {
      const double y = metric == RejectionMetric::auroc ? binary_auroc(score, pos) : binary_auprc(score, pos);
      curve.points.push_back({rate, y});
    } catch (const DegenerateInput&) {
      curve.omitted_rates.push_back(rate);
    }
  }
  return curve;
}

double rejection_auc(std::span<const CurvePoint> curve) {
  double area = 0.0;
  for (std::size_t i = 1; i < curve.size(); ++i) {
    area += (curve[i].x - curve[i - 1].x) * (curve[i].y + curve[i - 1].y) / 2.0;
  }
  return area;
}

std::vector<double> default_rejection_rates(int count) {
  std::vector<double> rates(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) rates[static_cast<std::size_t>(i)] = count == 1 ? 0.0 : 0.99 * i / (count - 1);
  if (count > 1) rates.back() = 0.99;
  return rates;
}

double label_uncertainty_kl(const PredictionBatch& batch) {
  if (!batch.soft_labels) throw ValidationError("label uncertainty metric requires soft labels");
  const auto& target = *batch.soft_labels;
  double total = 0.0;
  for (Eigen::Index i = 0; i < batch.size(); ++i) {
    for (Eigen::Index k = 0; k < target.cols(); ++k) {
      const double p = target(i, k);
      if (p <= 0.0) continue;
      total += p * (std::log(p) - std::log(std::max(batch.probs(i, k), kProbabilityFloor)));
    }
  }
  return total / static_cast<double>(batch.size());
}

std::map<int, double> per_group_accuracy(const PredictionBatch& batch) {
  if (!batch.groups) throw ValidationError("per-group accuracy requires group ids");
  std::map<int, std::pair<double, double>> tally;
  const auto ok = correctness(batch);
  for (std::size_t i = 0; i < ok.size(); ++i) {
    auto& [hits, total] = tally[(*batch.groups)[i]];
    hits += ok[i] ? 1.0 : 0.0;
    total += 1.0;
  }
  std::map<int, double> out;
  for (const auto& [g, t] : tally) out[g] = t.first / t.second;
  return out;
}

std::map<double, double> subpopulation_percentiles(const std::map<int, double>& per_group_metric,
                                                   std::span<const double> percentiles) {
  if (per_group_metric.empty()) throw ValidationError("subpopulation percentiles need at least one group");
  std::vector<double> values;
  for (const auto& [_, v] : per_group_metric) values.push_back(v);
  std::sort(values.begin(), values.end());
  std::map<double, double> out;
  for (double q : percentiles) {
    if (!(q >= 0.0 && q <= 100.0)) throw ValidationError("percentiles must be in [0, 100]");
    const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, values.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    out[q] = values[lo] + frac * (values[hi] - values[lo]);
  }
  return out;
}

MetricRecord MetricRecord::make(std::string task, std::string dataset, std::string split, std::string metric,
                                double value, bool higher_is_better, double lower_bound, double upper_bound) {
  if (!(lower_bound < upper_bound)) throw ValidationError("metric '" + metric + "': lower bound must be below upper bound");
  MetricRecord r;
  r.task = std::move(task);
  r.dataset = std::move(dataset);
  r.split = std::move(split);
  r.metric = std::move(metric);
  r.value = value;
  r.higher_is_better = higher_is_better;
  r.lower_bound = lower_bound;
  r.upper_bound = upper_bound;
  r.clamped = value < lower_bound || value > upper_bound;
  return r;
}

double MetricRecord::normalized() const {
  const double v = std::clamp(value, lower_bound, upper_bound);
  const double unit = (v - lower_bound) / (upper_bound - lower_bound);
  return 100.0 * (higher_is_better ? unit : 1.0 - unit);
}

double reliability_score(std::span<const MetricRecord> records) {
  if (records.empty()) throw ValidationError("reliability score needs at least one record");
  std::vector<double> normalized;
  for (const auto& r : records) {
    if (!(r.lower_bound < r.upper_bound)) throw ValidationError("record '" + r.metric + "' has invalid bounds");
    if (!std::isfinite(r.value)) throw ValidationError("record '" + r.metric + "' is not finite");
    const bool outside = r.value < r.lower_bound - kBoundTolerance || r.value > r.upper_bound + kBoundTolerance;
    if (outside && !r.clamped) {
      throw ValidationError("record '" + r.metric + "' value " + std::to_string(r.value) + " outside [" +
                            std::to_string(r.lower_bound) + ", " + std::to_string(r.upper_bound) + "]");
    }
    normalized.push_back(r.normalized());
  }
  // Summing in sorted order makes the result independent of record order.
  std::sort(normalized.begin(), normalized.end());
  return std::accumulate(normalized.begin(), normalized.end(), 0.0) / static_cast<double>(normalized.size());
}

}  // namespace relkit
