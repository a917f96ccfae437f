#include "relkit/lbfgs.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <optional>

#include "relkit/error.hpp"
#include "relkit/rng.hpp"

namespace relkit {

double logreg_objective(const LinearSoftmaxHead& head, const Eigen::MatrixXd& x, std::span<const int> y, double l2,
                        Eigen::VectorXd* grad) {
  double value = head.loss(x, y, 0, grad);
  const auto w = head.weights();
  value += 0.5 * l2 * w.squaredNorm();
  if (grad) {
    const ParamBlock& b = head.block("weights");
    grad->segment(b.offset, b.size()) += l2 * head.params().segment(b.offset, b.size());
  }
  return value;
}

bool perceptron_separable(const Eigen::MatrixXd& x, std::span<const int> y, int num_classes, int epochs) {
  const Eigen::Index n = x.rows();
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(x.cols() + 1, num_classes);
  Eigen::VectorXd xi(x.cols() + 1);
  for (int e = 0; e < epochs; ++e) {
    Eigen::Index errors = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
      xi << x.row(i).transpose(), 1.0;
      const Eigen::RowVectorXd s = xi.transpose() * w;
      const int label = y[static_cast<std::size_t>(i)];
      // Strict margin over every other class; ties count as errors.
      int worst = -1;
      for (int k = 0; k < num_classes; ++k) {
        if (k == label) continue;
        if (s(k) >= s(label) && (worst < 0 || s(k) > s(worst))) worst = k;
      }
      if (worst >= 0) {
        w.col(label) += xi;
        w.col(worst) -= xi;
        ++errors;
      }
    }
    if (errors == 0) return true;
  }
  return false;
}

namespace {

struct Probe {
  double f = 0.0;
  double d = 0.0;  // directional derivative
  Eigen::VectorXd g;
};

class Objective {
 public:
  Objective(LinearSoftmaxHead& head, const Eigen::MatrixXd& x, std::span<const int> y, double l2)
      : head_(head), x_(x), y_(y), l2_(l2) {}

  double operator()(const Eigen::VectorXd& theta, Eigen::VectorXd& grad) {
    head_.params() = theta;
    return logreg_objective(head_, x_, y_, l2_, &grad);
  }

 private:
  LinearSoftmaxHead& head_;
  const Eigen::MatrixXd& x_;
  std::span<const int> y_;
  double l2_;
};

// Minimizer of the cubic matching f and f' at a and b, or nullopt.
std::optional<double> cubic_min(double a, double fa, double da, double b, double fb, double db) {
  const double d1 = da + db - 3.0 * (fa - fb) / (a - b);
  const double disc = d1 * d1 - da * db;
  if (disc < 0.0) return std::nullopt;
  const double d2 = std::copysign(std::sqrt(disc), b - a);
  const double denom = db - da + 2.0 * d2;
  if (denom == 0.0) return std::nullopt;
  const double t = b - (b - a) * (db + d2 - d1) / denom;
  if (!std::isfinite(t)) return std::nullopt;
  return t;
}

struct LineSearch {
  double alpha = 0.0;
  Probe at;
  bool ok = false;
};

LineSearch strong_wolfe(Objective& obj, const Eigen::VectorXd& theta, const Eigen::VectorXd& dir, double f0,
                        double d0, double alpha0) {
  constexpr double c1 = 1e-4;
  constexpr double c2 = 0.9;
  constexpr int max_evals = 50;
  int evals = 0;
  auto eval = [&](double alpha) {
    Probe p;
    p.f = obj(theta + alpha * dir, p.g);
    p.d = p.g.dot(dir);
    ++evals;
    return p;
  };

  auto zoom = [&](double lo, Probe plo, double hi, Probe phi) -> LineSearch {
    while (evals < max_evals) {
      const double left = std::min(lo, hi), right = std::max(lo, hi);
      const double width = right - left;
      double alpha = 0.5 * (lo + hi);
      if (auto c = cubic_min(lo, plo.f, plo.d, hi, phi.f, phi.d)) {
        if (*c > left + 0.1 * width && *c < right - 0.1 * width) alpha = *c;
      }
      if (width <= 1e-16 * std::max(1.0, right)) break;
      Probe p = eval(alpha);
      if (p.f > f0 + c1 * alpha * d0 || p.f >= plo.f) {
        hi = alpha;
        phi = std::move(p);
      } else {
        if (std::abs(p.d) <= -c2 * d0) return {alpha, std::move(p), true};
        if (p.d * (hi - lo) >= 0.0) {
          hi = lo;
          phi = plo;
        }
        lo = alpha;
        plo = std::move(p);
      }
    }
    // Best decreasing point found so far, flagged as a failure.
    return {lo, std::move(plo), false};
  };

  Probe prev{f0, d0, {}};
  double alpha_prev = 0.0;
  double alpha = alpha0;
  for (int i = 0; evals < max_evals; ++i) {
    Probe p = eval(alpha);
    if (!std::isfinite(p.f) || p.f > f0 + c1 * alpha * d0 || (i > 0 && p.f >= prev.f)) {
      if (!std::isfinite(p.f)) {
        alpha *= 0.5;
        continue;
      }
      return zoom(alpha_prev, prev, alpha, std::move(p));
    }
    if (std::abs(p.d) <= -c2 * d0) return {alpha, std::move(p), true};
    if (p.d >= 0.0) return zoom(alpha, std::move(p), alpha_prev, prev);
    alpha_prev = alpha;
    prev = std::move(p);
    alpha *= 2.0;
  }
  return {alpha_prev, std::move(prev), false};
}

}  // namespace

LbfgsResult lbfgs_logreg(const Eigen::MatrixXd& x, std::span<const int> y, int num_classes,
                         const LbfgsOptions& options) {
  if (!(options.l2 >= 0.0)) throw ValidationError("lbfgs: l2 must be non-negative");
  if (options.max_iters < 0 || options.history < 1) throw ValidationError("lbfgs: bad iteration settings");
  if (x.rows() == 0 || static_cast<std::size_t>(x.rows()) != y.size()) {
    throw ValidationError("lbfgs: need matching, non-empty embeddings and labels");
  }
  if (num_classes < 2) throw ValidationError("lbfgs: need at least 2 classes");
  for (int label : y)
    if (label < 0 || label >= num_classes) throw ValidationError("lbfgs: label " + std::to_string(label) + " out of range");

  LbfgsResult result{LinearSoftmaxHead(static_cast<int>(x.cols()), num_classes), {}};
  LinearSoftmaxHead& head = result.head;
  LbfgsReport& report = result.report;
  head.params().setZero();

  int max_iters = options.max_iters;
  if (options.l2 == 0.0 && perceptron_separable(x, y, num_classes)) {
    max_iters = std::min(max_iters, options.separable_iter_cap);
    report.warnings.push_back("training data is linearly separable and l2 = 0; the optimum is at infinity, "
                              "iterations capped at " + std::to_string(max_iters));
  }

  Objective obj(head, x, y, options.l2);
  Eigen::VectorXd theta = Eigen::VectorXd::Zero(head.params().size());
  Eigen::VectorXd g;
  double f = obj(theta, g);
  std::deque<Eigen::VectorXd> s_hist, y_hist;
  std::deque<double> rho_hist;

  int it = 0;
  for (; it < max_iters; ++it) {
    if (g.lpNorm<Eigen::Infinity>() <= options.tol) break;

    // Two-loop recursion.
    Eigen::VectorXd q = g;
    std::vector<double> alpha(s_hist.size());
    for (std::size_t j = s_hist.size(); j-- > 0;) {
      alpha[j] = rho_hist[j] * s_hist[j].dot(q);
      q -= alpha[j] * y_hist[j];
    }
    double gamma = 1.0;
    if (!s_hist.empty()) gamma = s_hist.back().dot(y_hist.back()) / y_hist.back().squaredNorm();
    Eigen::VectorXd dir = gamma * q;
    for (std::size_t j = 0; j < s_hist.size(); ++j) {
      const double beta = rho_hist[j] * y_hist[j].dot(dir);
      dir += (alpha[j] - beta) * s_hist[j];
    }
    dir = -dir;
    double d0 = g.dot(dir);
    if (!(d0 < 0.0)) {
      s_hist.clear();
      y_hist.clear();
      rho_hist.clear();
      dir = -g;
      d0 = g.dot(dir);
    }

    const double alpha0 = s_hist.empty() ? std::min(1.0, 1.0 / g.lpNorm<Eigen::Infinity>()) : 1.0;
    LineSearch ls = strong_wolfe(obj, theta, dir, f, d0, alpha0);
    if (!ls.ok) {
      report.line_search_failed = true;
      if (ls.alpha > 0.0 && ls.at.f < f) {
        theta += ls.alpha * dir;
        f = ls.at.f;
        g = ls.at.g;
        ++it;
      }
      report.warnings.push_back("line search failed at iteration " + std::to_string(it));
      break;
    }
    const Eigen::VectorXd step = ls.alpha * dir;
    const Eigen::VectorXd dg = ls.at.g - g;
    theta += step;
    f = ls.at.f;
    g = std::move(ls.at.g);
    const double sy = step.dot(dg);
    if (sy > 1e-12 * step.norm() * dg.norm()) {
      s_hist.push_back(step);
      y_hist.push_back(dg);
      rho_hist.push_back(1.0 / sy);
      if (static_cast<int>(s_hist.size()) > options.history) {
        s_hist.pop_front();
        y_hist.pop_front();
        rho_hist.pop_front();
      }
    }
  }

  head.params() = theta;
  report.iterations = it;
  report.objective = f;
  report.grad_norm = g.lpNorm<Eigen::Infinity>();
  report.converged = report.grad_norm <= options.tol;
  head.train_loss = head.loss(x, y, 0, nullptr);
  return result;
}

std::vector<Eigen::Index> fewshot_sample(std::span<const int> labels, int num_classes, int shots, std::uint64_t seed) {
  if (shots < 1) throw ValidationError("fewshot: shots must be positive");
  std::vector<std::vector<Eigen::Index>> by_class(static_cast<std::size_t>(num_classes));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int label = labels[i];
    if (label >= 0 && label < num_classes) by_class[static_cast<std::size_t>(label)].push_back(static_cast<Eigen::Index>(i));
  }
  std::vector<Eigen::Index> out;
  for (int k = 0; k < num_classes; ++k) {
    auto& idx = by_class[static_cast<std::size_t>(k)];
    if (static_cast<int>(idx.size()) < shots) {
      throw ValidationError("fewshot: class " + std::to_string(k) + " has " + std::to_string(idx.size()) +
                            " examples, fewer than " + std::to_string(shots) + " shots");
    }
    auto rng = make_rng(seed, static_cast<std::uint64_t>(k));
    std::shuffle(idx.begin(), idx.end(), rng);
    out.insert(out.end(), idx.begin(), idx.begin() + shots);
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace relkit
