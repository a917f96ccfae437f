#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "relkit/tensor.hpp"

namespace relkit {

enum class SplitRole {
  train,
  validation,
  test,
  covariate_shift,
  semantic_shift,
  label_uncertainty,
  subpopulation,
};

std::string to_string(SplitRole role);
SplitRole parse_split_role(const std::string& text);

/// One validated split. Labels are [N] for classification or [N x L] for
/// sequences; in sequences the id K marks padding steps.
struct Split {
  std::string name;
  SplitRole role = SplitRole::test;
  std::optional<Tensor> embeddings;   // [N x D]
  std::optional<Tensor> logits;       // [N x K] or [N x L x K]
  Tensor labels;                      // [N] or [N x L], i32
  std::optional<Tensor> soft_labels;  // [N x K], rows renormalized, f64
  std::optional<Tensor> groups;       // [N], i32

  std::size_t num_examples() const { return static_cast<std::size_t>(labels.dim(0)); }
  bool is_sequence() const { return labels.rank() == 2; }

  bool operator==(const Split&) const = default;
};

/// A dataset of named splits sharing one ordered class list.
///
/// Label ids [0, K) are in-distribution classes. K is the sequence padding
/// id. Ids K+1 .. K+|ood_classes| name out-of-distribution classes and may
/// only appear in semantic_shift splits.
struct DatasetManifest {
  std::string name;
  std::vector<std::string> classes;
  std::vector<std::string> ood_classes;
  std::map<std::string, Split> splits;

  int num_classes() const { return static_cast<int>(classes.size()); }
  int padding_id() const { return num_classes(); }
  bool is_ood_label(int id) const { return id > num_classes(); }

  const Split* first_with_role(SplitRole role) const;
  std::vector<const Split*> with_role(SplitRole role) const;

  bool operator==(const DatasetManifest&) const = default;
};

DatasetManifest load_manifest(const std::filesystem::path& path);

/// Writes every split tensor as <dir>/<split>_<field>.ubt plus <dir>/manifest.json.
/// Returns the manifest path.
std::filesystem::path write_manifest(const DatasetManifest& manifest, const std::filesystem::path& dir);

}  // namespace relkit
