#pragma once

#include <cstdint>
#include <filesystem>

#include <Eigen/Dense>

#include "relkit/manifest.hpp"
#include "relkit/training.hpp"

namespace relkit::synth {

/// K isotropic Gaussian blobs with unit-norm random directions scaled by
/// `separation`; `n_per_class` points each, ordered by class.
LabeledData gaussian_blobs(int num_classes, int dim, int n_per_class, double separation, double noise,
                           std::uint64_t seed);

/// Pool for the label-efficiency experiment: a fraction `easy_fraction` of the
/// points are near-copies of a few prototypes close to their class mean, the
/// rest lie near the class boundaries.
struct ALFixture {
  LabeledData pool;
  LabeledData test;
};
ALFixture duplicated_easy_points(int num_classes, int dim, int pool_size, int test_size, double easy_fraction,
                                 std::uint64_t seed);

/// Class structure lives in the first `informative` dims; the remaining dims
/// carry large shared-scale nuisance variance. OOD points differ from training
/// only in the informative dims.
struct OsrFixture {
  LabeledData train;
  Eigen::MatrixXd in_test;
  Eigen::MatrixXd ood;
};
OsrFixture nuisance_dimension(int num_classes, int informative, int nuisance, int n_per_class, std::uint64_t seed);

/// Small multi-split dataset exercising every role and optional field.
DatasetManifest demo_dataset(std::uint64_t seed, int num_classes = 3, int dim = 8);

}  // namespace relkit::synth
