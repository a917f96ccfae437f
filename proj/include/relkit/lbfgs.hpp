#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "relkit/heads.hpp"

namespace relkit {

struct LbfgsOptions {
  double l2 = 1e-2;
  int max_iters = 1000;
  double tol = 1e-8;  // on the gradient infinity norm
  int history = 10;
  /// Iteration cap applied when l2 == 0 and the data is separable.
  int separable_iter_cap = 100;
};

struct LbfgsReport {
  int iterations = 0;
  double grad_norm = 0.0;
  double objective = 0.0;
  bool converged = false;
  bool line_search_failed = false;
  std::vector<std::string> warnings;
};

struct LbfgsResult {
  LinearSoftmaxHead head;
  LbfgsReport report;
};

/// Multinomial logistic regression: mean cross-entropy + (l2 / 2) ||W||^2 with
/// an unregularized bias, minimized from zero with L-BFGS and a strong-Wolfe
/// line search.
LbfgsResult lbfgs_logreg(const Eigen::MatrixXd& x, std::span<const int> y, int num_classes,
                         const LbfgsOptions& options = {});

/// Objective value and gradient at `head`'s parameters.
double logreg_objective(const LinearSoftmaxHead& head, const Eigen::MatrixXd& x, std::span<const int> y, double l2,
                        Eigen::VectorXd* grad);

/// True if a multiclass perceptron reaches zero training errors within `epochs`.
bool perceptron_separable(const Eigen::MatrixXd& x, std::span<const int> y, int num_classes, int epochs = 200);

/// Exactly `shots` indices per class, drawn without replacement; returned sorted.
std::vector<Eigen::Index> fewshot_sample(std::span<const int> labels, int num_classes, int shots, std::uint64_t seed);

}  // namespace relkit
