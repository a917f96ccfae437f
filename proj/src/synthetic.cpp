#include "relkit/synthetic.hpp"

#include <cmath>
#include <random>

#include "relkit/error.hpp"
#include "relkit/head_math.hpp"
#include "relkit/rng.hpp"

namespace relkit::synth {

namespace {

Eigen::MatrixXd random_directions(int count, int dim, std::mt19937_64& rng) {
  Eigen::MatrixXd dirs(count, dim);
  fill_normal(dirs, rng, 1.0);
  for (int k = 0; k < count; ++k) dirs.row(k).normalize();
  return dirs;
}

Eigen::RowVectorXd noise_row(int dim, double scale, std::mt19937_64& rng) {
  Eigen::RowVectorXd r(dim);
  fill_normal(r, rng, scale);
  return r;
}

Tensor f32_tensor(const Eigen::MatrixXd& m) {
  std::vector<float> values;
  values.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) values.push_back(static_cast<float>(m(i, j)));
  return Tensor::f32({static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())}, std::move(values));
}

}  // namespace

LabeledData gaussian_blobs(int num_classes, int dim, int n_per_class, double separation, double noise,
                           std::uint64_t seed) {
  if (num_classes < 1 || dim < 1 || n_per_class < 1) throw ValidationError("gaussian_blobs: bad sizes");
  auto rng = make_rng(seed);
  const Eigen::MatrixXd means = separation * random_directions(num_classes, dim, rng);
  LabeledData out;
  out.x.resize(static_cast<Eigen::Index>(num_classes) * n_per_class, dim);
  Eigen::Index row = 0;
  for (int k = 0; k < num_classes; ++k) {
    for (int i = 0; i < n_per_class; ++i, ++row) {
      out.x.row(row) = means.row(k) + noise_row(dim, noise, rng);
      out.y.push_back(k);
    }
  }
  return out;
}

ALFixture duplicated_easy_points(int num_classes, int dim, int pool_size, int test_size, double easy_fraction,
                                 std::uint64_t seed) {
  if (num_classes < 2 || !(easy_fraction >= 0.0 && easy_fraction <= 1.0)) {
    throw ValidationError("duplicated_easy_points: bad parameters");
  }
  auto rng = make_rng(seed);
  const Eigen::MatrixXd means = 2.0 * random_directions(num_classes, dim, rng);
  // Labels follow argmax_k x.m_k - |m_k|^2 / 2 + c_k. The offsets c_k move the
  // boundaries away from the midpoints between means.
  Eigen::RowVectorXd offset(num_classes);
  std::uniform_real_distribution<double> shift(-1.2, 1.2);
  auto label_of = [&](const Eigen::RowVectorXd& x) {
    const Eigen::RowVectorXd s = x * means.transpose() + offset;
    Eigen::Index best = 0;
    s.maxCoeff(&best);
    return static_cast<int>(best);
  };
  // Redraw until every class mean is labelled as its own class.
  for (bool ok = false; !ok;) {
    for (int k = 0; k < num_classes; ++k) offset(k) = shift(rng) - 0.5 * means.row(k).squaredNorm();
    ok = true;
    for (int k = 0; k < num_classes; ++k) ok = ok && label_of(means.row(k)) == k;
  }

  constexpr int kPrototypes = 3;
  Eigen::MatrixXd protos(num_classes * kPrototypes, dim);
  for (int k = 0; k < num_classes; ++k)
    for (int p = 0; p < kPrototypes; ++p) protos.row(k * kPrototypes + p) = means.row(k) + noise_row(dim, 0.1, rng);

  auto sample = [&](int n, double easy, LabeledData& out) {
    out.x.resize(n, dim);
    out.y.assign(static_cast<std::size_t>(n), 0);
    std::bernoulli_distribution is_easy(easy);
    std::uniform_int_distribution<int> proto(0, num_classes * kPrototypes - 1), cls(0, num_classes - 1);
    std::uniform_real_distribution<double> along(0.15, 0.85);
    for (int i = 0; i < n; ++i) {
      Eigen::RowVectorXd x;
      if (is_easy(rng)) {
        x = protos.row(proto(rng)) + noise_row(dim, 0.01, rng);
      } else {
        // On the segment between two class means.
        const int a = cls(rng);
        int b = cls(rng);
        while (b == a) b = cls(rng);
        const double t = along(rng);
        x = (1.0 - t) * means.row(a) + t * means.row(b) + noise_row(dim, 0.05, rng);
      }
      out.x.row(i) = x;
      out.y[static_cast<std::size_t>(i)] = label_of(x);
    }
  };
  ALFixture f;
  sample(pool_size, easy_fraction, f.pool);
  sample(test_size, 0.5, f.test);
  return f;
}

OsrFixture nuisance_dimension(int num_classes, int informative, int nuisance, int n_per_class, std::uint64_t seed) {
  if (num_classes < 1 || informative < 1 || nuisance < 0 || n_per_class < 2) {
    throw ValidationError("nuisance_dimension: bad sizes");
  }
  auto rng = make_rng(seed);
  const int dim = informative + nuisance;
  Eigen::MatrixXd means = Eigen::MatrixXd::Zero(num_classes, dim);
  means.leftCols(informative) = 6.0 * random_directions(num_classes, informative, rng);
  auto draw = [&](const Eigen::RowVectorXd& centre) {
    Eigen::RowVectorXd x = centre;
    x.head(informative) += noise_row(informative, 1.0, rng);
    if (nuisance > 0) x.tail(nuisance) += noise_row(nuisance, 3.0, rng);
    return x;
  };
  OsrFixture f;
  const Eigen::Index n = static_cast<Eigen::Index>(num_classes) * n_per_class;
  f.train.x.resize(n, dim);
  f.in_test.resize(n, dim);
  for (int k = 0; k < num_classes; ++k) {
    for (int i = 0; i < n_per_class; ++i) {
      const Eigen::Index row = static_cast<Eigen::Index>(k) * n_per_class + i;
      f.train.x.row(row) = draw(means.row(k));
      f.train.y.push_back(k);
      f.in_test.row(row) = draw(means.row(k));
    }
  }
  // OOD centres sit between the classes in the informative subspace.
  const Eigen::RowVectorXd centre = means.colwise().mean();
  f.ood.resize(n, dim);
  for (Eigen::Index i = 0; i < n; ++i) f.ood.row(i) = draw(centre);
  return f;
}

DatasetManifest demo_dataset(std::uint64_t seed, int num_classes, int dim) {
  if (num_classes < 2 || dim < 1) throw ValidationError("demo_dataset: need K >= 2 and D >= 1");
  auto rng = make_rng(seed);
  const Eigen::MatrixXd means = 3.0 * random_directions(num_classes + 1, dim, rng);
  const Eigen::MatrixXd readout = means.topRows(num_classes).transpose();

  DatasetManifest m;
  m.name = "demo";
  for (int k = 0; k < num_classes; ++k) m.classes.push_back("class_" + std::to_string(k));
  m.ood_classes = {"novel"};

  auto make_split = [&](const std::string& name, SplitRole role, int n, double shift, double ood_fraction,
                        bool soft, bool groups) {
    Eigen::MatrixXd x(n, dim);
    std::vector<int> y(static_cast<std::size_t>(n));
    std::uniform_int_distribution<int> cls(0, num_classes - 1);
    std::bernoulli_distribution is_ood(ood_fraction);
    for (int i = 0; i < n; ++i) {
      const bool ood = is_ood(rng);
      const int k = ood ? num_classes : cls(rng);
      x.row(i) = means.row(k) + noise_row(dim, 1.0 + shift, rng);
      if (shift > 0.0) x.row(i).array() += shift;
      y[static_cast<std::size_t>(i)] = ood ? num_classes + 1 : k;
    }
    Split s;
    s.name = name;
    s.role = role;
    s.embeddings = f32_tensor(x);
    Eigen::MatrixXd logits = x * readout / 3.0;
    s.logits = f32_tensor(logits);
    s.labels = from_ints(y);
    if (soft) {
      Eigen::MatrixXd p = softmax(logits / 2.0);
      s.soft_labels = from_matrix(p);
    }
    if (groups) {
      std::vector<int> g(static_cast<std::size_t>(n));
      std::uniform_int_distribution<int> grp(0, 4);
      for (auto& v : g) v = grp(rng);
      s.groups = from_ints(g);
    }
    m.splits.emplace(name, std::move(s));
  };
  make_split("train", SplitRole::train, 90, 0.0, 0.0, false, false);
  make_split("validation", SplitRole::validation, 30, 0.0, 0.0, false, false);
  make_split("test", SplitRole::test, 60, 0.0, 0.0, false, false);
  make_split("shifted", SplitRole::covariate_shift, 60, 0.5, 0.0, false, false);
  make_split("open_set", SplitRole::semantic_shift, 60, 0.0, 0.5, false, false);
  make_split("ambiguous", SplitRole::label_uncertainty, 40, 0.0, 0.0, true, false);
  make_split("groups", SplitRole::subpopulation, 60, 0.0, 0.0, false, true);
  return m;
}

}  // namespace relkit::synth
