#pragma once

#include <cmath>
#include <random>
#include <span>
#include <string>

#include <Eigen/Dense>

#include "relkit/error.hpp"

namespace relkit {

inline double log_sum_exp(const Eigen::Ref<const Eigen::RowVectorXd>& z) {
  const double m = z.maxCoeff();
  return m + std::log((z.array() - m).exp().sum());
}

/// Row-wise softmax.
inline Eigen::MatrixXd softmax(const Eigen::MatrixXd& z) {
  Eigen::MatrixXd p(z.rows(), z.cols());
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const double lse = log_sum_exp(z.row(i));
    p.row(i) = (z.row(i).array() - lse).exp().matrix();
  }
  return p;
}

/// Mean cross-entropy of integer labels; `dlogits` receives (P - Y) / N.
inline double softmax_cross_entropy(const Eigen::MatrixXd& logits, std::span<const int> y, Eigen::MatrixXd* dlogits) {
  const Eigen::Index n = logits.rows();
  if (static_cast<std::size_t>(n) != y.size()) throw ValidationError("loss: label count does not match inputs");
  if (n == 0) throw ValidationError("loss: empty batch");
  double total = 0.0;
  if (dlogits) dlogits->resize(n, logits.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const int label = y[static_cast<std::size_t>(i)];
    if (label < 0 || label >= logits.cols()) throw ValidationError("loss: label " + std::to_string(label) + " out of range");
    const double lse = log_sum_exp(logits.row(i));
    total += lse - logits(i, label);
    if (dlogits) {
      dlogits->row(i) = (logits.row(i).array() - lse).exp().matrix();
      (*dlogits)(i, label) -= 1.0;
    }
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  if (dlogits) *dlogits *= inv_n;
  return total * inv_n;
}

template <typename Derived>
void fill_normal(Eigen::MatrixBase<Derived>&& m, std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> normal(0.0, stddev);
  for (Eigen::Index j = 0; j < m.cols(); ++j)
    for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = normal(rng);
}

template <typename Derived>
void fill_normal(Eigen::MatrixBase<Derived>& m, std::mt19937_64& rng, double stddev) {
  fill_normal(std::move(m), rng, stddev);
}

}  // namespace relkit
