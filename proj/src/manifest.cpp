#include "relkit/manifest.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

#include <json.hpp>

#include "relkit/error.hpp"

namespace relkit {

namespace {

using nlohmann::json;

constexpr double kSoftLabelTolerance = 1e-5;

const std::vector<std::pair<SplitRole, const char*>>& role_names() {
  static const std::vector<std::pair<SplitRole, const char*>> names = {
      {SplitRole::train, "train"},
      {SplitRole::validation, "validation"},
      {SplitRole::test, "test"},
      {SplitRole::covariate_shift, "covariate_shift"},
      {SplitRole::semantic_shift, "semantic_shift"},
      {SplitRole::label_uncertainty, "label_uncertainty"},
      {SplitRole::subpopulation, "subpopulation"},
  };
  return names;
}

std::string fmt_g(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

std::string dims_str(const Tensor& t) {
  std::string s = "[";
  for (std::size_t i = 0; i < t.rank(); ++i) {
    if (i) s += " x ";
    s += std::to_string(t.dim(i));
  }
  return s + "]";
}

struct SplitContext {
  const std::string& split;
  const std::string& field;
  std::string where() const { return "split '" + split + "' " + field; }
};

void require_finite(const Tensor& t, const SplitContext& ctx) {
  if (!t.all_finite()) throw ValidationError(ctx.where() + ": non-finite value");
}

Tensor load_field(const std::filesystem::path& base, const json& entry, const std::string& split,
                  const std::string& field) {
  if (!entry.is_string()) throw ValidationError("split '" + split + "': '" + field + "' must be a path string");
  const auto path = base / entry.get<std::string>();
  if (!std::filesystem::exists(path)) {
    throw ValidationError("split '" + split + "': " + field + " file " + path.string() + " does not exist");
  }
  return load_tensor(path);
}

void check_rows(const Tensor& t, std::uint64_t n, const SplitContext& ctx) {
  if (t.rank() == 0 || t.dim(0) != n) {
    throw ValidationError(ctx.where() + " has " + (t.rank() ? std::to_string(t.dim(0)) : std::string("0")) +
                          " rows but labels has " + std::to_string(n));
  }
}

Tensor renormalize_soft_labels(const Tensor& t, int num_classes, const SplitContext& ctx) {
  if (t.rank() != 2 || t.dim(1) != static_cast<std::uint64_t>(num_classes)) {
    throw ValidationError(ctx.where() + " must be [N x " + std::to_string(num_classes) + "], got " + dims_str(t));
  }
  require_finite(t, ctx);
  const auto rows = t.dim(0);
  const auto cols = t.dim(1);
  std::vector<double> values = t.to_f64();
  for (std::uint64_t i = 0; i < rows; ++i) {
    double sum = 0.0;
    for (std::uint64_t k = 0; k < cols; ++k) {
      const double v = values[i * cols + k];
      if (v < 0.0) throw ValidationError(ctx.where() + " row " + std::to_string(i) + " has a negative entry");
      sum += v;
    }
    if (std::abs(sum - 1.0) > kSoftLabelTolerance) {
      throw ValidationError(ctx.where() + " row " + std::to_string(i) + ": row sum " + fmt_g(sum) +
                            " is not 1");
    }
    for (std::uint64_t k = 0; k < cols; ++k) values[i * cols + k] /= sum;
  }
  return Tensor::f64(t.dims(), std::move(values));
}

Split parse_split(const std::string& name, const json& spec, const std::filesystem::path& base,
                  const DatasetManifest& m) {
  if (!spec.is_object()) throw ValidationError("split '" + name + "' must be an object");
  static const std::set<std::string> known = {"role", "embeddings", "logits", "labels", "soft_labels", "groups"};
  for (const auto& [key, _] : spec.items()) {
    if (!known.count(key)) throw ValidationError("split '" + name + "': unknown key '" + key + "'");
  }
  if (!spec.contains("role") || !spec["role"].is_string()) {
    throw ValidationError("split '" + name + "': missing role");
  }
  if (!spec.contains("labels")) throw ValidationError("split '" + name + "': missing labels");

  Split s;
  s.name = name;
  s.role = parse_split_role(spec["role"].get<std::string>());
  const int k = m.num_classes();

  s.labels = load_field(base, spec["labels"], name, "labels");
  const SplitContext label_ctx{name, "labels"};
  if (s.labels.dtype() != DType::i32) throw ValidationError(label_ctx.where() + " must be i32");
  if (s.labels.rank() != 1 && s.labels.rank() != 2) {
    throw ValidationError(label_ctx.where() + " must be [N] or [N x L], got " + dims_str(s.labels));
  }
  const auto n = s.labels.dim(0);
  const bool sequence = s.labels.rank() == 2;
  const int max_ood = k + static_cast<int>(m.ood_classes.size());
  for (auto id : s.labels.i32_values()) {
    const bool in_dist = id >= 0 && id < k;
    const bool padding = sequence && id == k;
    const bool ood = s.role == SplitRole::semantic_shift && id > k && id <= max_ood;
    if (!in_dist && !padding && !ood) {
      throw ValidationError(label_ctx.where() + ": label id " + std::to_string(id) + " outside [0, " +
                            std::to_string(k) + ")");
    }
  }

  if (spec.contains("embeddings")) {
    const SplitContext ctx{name, "embeddings"};
    Tensor e = load_field(base, spec["embeddings"], name, "embeddings");
    if (e.dtype() == DType::i32 || e.rank() != 2) {
      throw ValidationError(ctx.where() + " must be a floating [N x D] tensor, got " + dims_str(e));
    }
    if (sequence) throw ValidationError(ctx.where() + ": embeddings are not supported for sequence labels");
    check_rows(e, n, ctx);
    require_finite(e, ctx);
    s.embeddings = std::move(e);
  }
  if (spec.contains("logits")) {
    const SplitContext ctx{name, "logits"};
    Tensor l = load_field(base, spec["logits"], name, "logits");
    if (l.dtype() == DType::i32) throw ValidationError(ctx.where() + " must be floating point");
    check_rows(l, n, ctx);
    const std::size_t want_rank = sequence ? 3 : 2;
    if (l.rank() != want_rank || l.dim(want_rank - 1) != static_cast<std::uint64_t>(k) ||
        (sequence && l.dim(1) != s.labels.dim(1))) {
      throw ValidationError(ctx.where() + " has shape " + dims_str(l) + ", incompatible with labels " +
                            dims_str(s.labels) + " and K=" + std::to_string(k));
    }
    require_finite(l, ctx);
    s.logits = std::move(l);
  }
  if (!s.embeddings && !s.logits) {
    throw ValidationError("split '" + name + "': at least one of embeddings/logits is required");
  }
  if (spec.contains("soft_labels")) {
    const SplitContext ctx{name, "soft_labels"};
    Tensor sl = load_field(base, spec["soft_labels"], name, "soft_labels");
    check_rows(sl, n, ctx);
    s.soft_labels = renormalize_soft_labels(sl, k, ctx);
  }
  if (spec.contains("groups")) {
    const SplitContext ctx{name, "groups"};
    Tensor g = load_field(base, spec["groups"], name, "groups");
    if (g.dtype() != DType::i32 || g.rank() != 1) throw ValidationError(ctx.where() + " must be an i32 [N] tensor");
    check_rows(g, n, ctx);
    for (auto id : g.i32_values()) {
      if (id < 0) throw ValidationError(ctx.where() + ": negative group id " + std::to_string(id));
    }
    s.groups = std::move(g);
  }
  return s;
}

std::vector<std::string> parse_names(const json& doc, const char* key, bool required) {
  std::vector<std::string> out;
  if (!doc.contains(key)) {
    if (required) throw ValidationError(std::string("manifest: missing '") + key + "'");
    return out;
  }
  if (!doc[key].is_array()) throw ValidationError(std::string("manifest: '") + key + "' must be an array");
  for (const auto& c : doc[key]) {
    if (!c.is_string()) throw ValidationError(std::string("manifest: '") + key + "' entries must be strings");
    out.push_back(c.get<std::string>());
  }
  return out;
}

}  // namespace

std::string to_string(SplitRole role) {
  for (const auto& [r, name] : role_names())
    if (r == role) return name;
  return "unknown";
}

SplitRole parse_split_role(const std::string& text) {
  for (const auto& [r, name] : role_names())
    if (text == name) return r;
  throw ValidationError("unknown split role '" + text + "'");
}

const Split* DatasetManifest::first_with_role(SplitRole role) const {
  for (const auto& [_, s] : splits)
    if (s.role == role) return &s;
  return nullptr;
}

std::vector<const Split*> DatasetManifest::with_role(SplitRole role) const {
  std::vector<const Split*> out;
  for (const auto& [_, s] : splits)
    if (s.role == role) out.push_back(&s);
  return out;
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open manifest " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ValidationError("manifest " + path.string() + " is not valid JSON: " + e.what());
  }
  if (!doc.is_object()) throw ValidationError("manifest must be a JSON object");
  static const std::set<std::string> known = {"name", "classes", "ood_classes", "splits"};
  for (const auto& [key, _] : doc.items()) {
    if (!known.count(key)) throw ValidationError("manifest: unknown key '" + key + "'");
  }
  if (!doc.contains("name") || !doc["name"].is_string()) throw ValidationError("manifest: missing 'name'");

  DatasetManifest m;
  m.name = doc["name"].get<std::string>();
  m.classes = parse_names(doc, "classes", true);
  m.ood_classes = parse_names(doc, "ood_classes", false);
  if (m.classes.size() < 2) throw ValidationError("manifest: need at least 2 classes, got " + std::to_string(m.classes.size()));
  std::set<std::string> seen;
  for (const auto& c : m.classes) {
    if (!seen.insert(c).second) throw ValidationError("manifest: duplicate class name '" + c + "'");
  }
  for (const auto& c : m.ood_classes) {
    if (!seen.insert(c).second) throw ValidationError("manifest: duplicate class name '" + c + "'");
  }
  if (!doc.contains("splits") || !doc["splits"].is_object() || doc["splits"].empty()) {
    throw ValidationError("manifest: 'splits' must be a non-empty object");
  }
  const auto base = path.parent_path();
  for (const auto& [name, spec] : doc["splits"].items()) {
    m.splits.emplace(name, parse_split(name, spec, base, m));
  }
  return m;
}

std::filesystem::path write_manifest(const DatasetManifest& m, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  json doc;
  doc["name"] = m.name;
  doc["classes"] = m.classes;
  if (!m.ood_classes.empty()) doc["ood_classes"] = m.ood_classes;
  doc["splits"] = json::object();
  for (const auto& [name, s] : m.splits) {
    json spec;
    spec["role"] = to_string(s.role);
    auto put = [&](const char* field, const Tensor& t) {
      const std::string file = name + "_" + field + ".ubt";
      save_tensor(t, dir / file);
      spec[field] = file;
    };
    put("labels", s.labels);
    if (s.embeddings) put("embeddings", *s.embeddings);
    if (s.logits) put("logits", *s.logits);
    if (s.soft_labels) put("soft_labels", *s.soft_labels);
    if (s.groups) put("groups", *s.groups);
    doc["splits"][name] = spec;
  }
  const auto path = dir / "manifest.json";
  std::ofstream out(path);
  if (!out) throw RuntimeFailure("cannot write " + path.string());
  out << doc.dump(2) << "\n";
  return path;
}

}  // namespace relkit
