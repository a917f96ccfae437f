// Brute-force reference implementations used only by the tests.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace oracle {

inline int argmax(const Eigen::RowVectorXd& row) {
  int best = 0;
  for (int k = 1; k < row.size(); ++k)
    if (row(k) > row(best)) best = k;
  return best;
}

// Pairwise count over every (positive, negative) pair.
inline double auroc(std::span<const double> s, const std::vector<bool>& pos) {
  double wins = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!pos[i]) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (pos[j]) continue;
      pairs += 1.0;
      if (s[i] > s[j]) wins += 1.0;
      else if (s[i] == s[j]) wins += 0.5;
    }
  }
  return wins / pairs;
}

// Precision at each positive's rank; equal scores rank in index order.
inline double auprc(std::span<const double> s, const std::vector<bool>& pos) {
  double total = 0.0;
  int npos = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!pos[i]) continue;
    ++npos;
    int rank = 0, hits = 0;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (s[j] > s[i] || (s[j] == s[i] && j <= i)) {
        ++rank;
        if (pos[j]) ++hits;
      }
    }
    total += static_cast<double>(hits) / rank;
  }
  return total / npos;
}

inline double ece(const Eigen::MatrixXd& probs, const std::vector<int>& labels, int bins) {
  const auto n = probs.rows();
  double out = 0.0;
  for (int b = 0; b < bins; ++b) {
    double conf = 0.0, acc = 0.0;
    int count = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double c = probs.row(i).maxCoeff();
      int bin = static_cast<int>(c * bins);
      if (bin >= bins) bin = bins - 1;
      if (bin != b) continue;
      ++count;
      conf += c;
      acc += argmax(probs.row(i)) == labels[static_cast<std::size_t>(i)] ? 1.0 : 0.0;
    }
    if (count == 0) continue;
    out += static_cast<double>(count) / n * std::abs(acc / count - conf / count);
  }
  return out;
}

// Position of each example when sorted by descending uncertainty, ties by index.
inline std::vector<long> uncertainty_rank(std::span<const double> u) {
  std::vector<long> rank(u.size(), 0);
  for (std::size_t i = 0; i < u.size(); ++i)
    for (std::size_t j = 0; j < u.size(); ++j)
      if (u[j] > u[i] || (u[j] == u[i] && j < i)) ++rank[i];
  return rank;
}

inline long referral_count(double frac, std::size_t n) {
  // Smallest-integer search for floor(frac * n) that tolerates rounding just below an integer.
  long c = 0;
  while (static_cast<double>(c + 1) <= frac * static_cast<double>(n) + 1e-9) ++c;
  return c;
}

inline double collaborative_accuracy(const Eigen::MatrixXd& probs, const std::vector<int>& labels,
                                     std::span<const double> u, double budget) {
  const auto rank = uncertainty_rank(u);
  const long refer = referral_count(budget, u.size());
  long correct = 0;
  for (std::size_t i = 0; i < u.size(); ++i)
    if (rank[i] < refer || argmax(probs.row(static_cast<Eigen::Index>(i))) == labels[i]) ++correct;
  return static_cast<double>(correct) / static_cast<double>(u.size());
}

// Accuracy-rejection curve integrated with the trapezoid rule.
inline double rejection_auc_accuracy(const Eigen::MatrixXd& probs, const std::vector<int>& labels,
                                     std::span<const double> u, const std::vector<double>& rates) {
  const auto rank = uncertainty_rank(u);
  std::vector<double> acc;
  for (double r : rates) {
    const long drop = referral_count(r, u.size());
    long kept = 0, ok = 0;
    for (std::size_t i = 0; i < u.size(); ++i) {
      if (rank[i] < drop) continue;
      ++kept;
      if (argmax(probs.row(static_cast<Eigen::Index>(i))) == labels[i]) ++ok;
    }
    acc.push_back(static_cast<double>(ok) / kept);
  }
  double area = 0.0;
  for (std::size_t i = 1; i < rates.size(); ++i) area += 0.5 * (rates[i] - rates[i - 1]) * (acc[i] + acc[i - 1]);
  return area;
}

inline double kl(const Eigen::MatrixXd& target, const Eigen::MatrixXd& probs) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < target.rows(); ++i)
    for (Eigen::Index k = 0; k < target.cols(); ++k)
      if (target(i, k) > 0.0) total += target(i, k) * std::log(target(i, k) / std::max(probs(i, k), 1e-12));
  return total / static_cast<double>(target.rows());
}

// Gauss-Hermite nodes and weights for weight exp(-t^2) via Golub-Welsch.
inline void gauss_hermite(int n, Eigen::VectorXd& nodes, Eigen::VectorXd& weights) {
  Eigen::MatrixXd j = Eigen::MatrixXd::Zero(n, n);
  for (int i = 1; i < n; ++i) j(i, i - 1) = j(i - 1, i) = std::sqrt(i / 2.0);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(j);
  nodes = es.eigenvalues();
  weights = std::sqrt(M_PI) * es.eigenvectors().row(0).transpose().array().square();
}

// Mean cross-entropy + (l2/2)||W||^2 for logits x W + b, with its gradient.
inline double logreg(const Eigen::MatrixXd& w, const Eigen::RowVectorXd& b, const Eigen::MatrixXd& x,
                     const std::vector<int>& y, double l2, Eigen::MatrixXd& gw, Eigen::RowVectorXd& gb) {
  const auto n = x.rows();
  Eigen::MatrixXd z = x * w;
  z.rowwise() += b;
  double loss = 0.0;
  Eigen::MatrixXd d(n, w.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const double m = z.row(i).maxCoeff();
    const Eigen::RowVectorXd e = (z.row(i).array() - m).exp();
    const double s = e.sum();
    loss += std::log(s) + m - z(i, y[static_cast<std::size_t>(i)]);
    d.row(i) = e / s;
    d(i, y[static_cast<std::size_t>(i)]) -= 1.0;
  }
  gw = x.transpose() * d / static_cast<double>(n) + l2 * w;
  gb = d.colwise().sum() / static_cast<double>(n);
  return loss / static_cast<double>(n) + 0.5 * l2 * w.squaredNorm();
}

}  // namespace oracle
