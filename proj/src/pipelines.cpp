#include "relkit/pipelines.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include "relkit/error.hpp"
#include "relkit/head_math.hpp"
#include "relkit/lbfgs.hpp"
#include "relkit/manifest.hpp"
#include "relkit/metrics.hpp"
#include "relkit/ood.hpp"
#include "relkit/rng.hpp"

namespace relkit {

namespace fs = std::filesystem;

namespace {

constexpr const char* kVersion = "relkit 0.1.0";
constexpr const char* kOcAurocFlag = "oc_auroc_referred_correct";

// ---------------------------------------------------------------------------
// Config parsing

void reject_unknown(const nlohmann::json& doc, const std::vector<std::string>& known, const std::string& where) {
  for (const auto& [key, value] : doc.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw ValidationError(where + ": unknown key '" + key + "'");
    }
  }
}

template <typename T>
T get_or(const nlohmann::json& doc, const char* key, T fallback, const std::string& where) {
  if (!doc.contains(key)) return fallback;
  try {
    return doc[key].get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ValidationError(where + ": '" + key + "' has the wrong type");
  }
}

fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

bool is_builtin_predictor(const std::string& kind) { return kind == "logits" || kind == "lbfgs"; }

MetricOptions parse_metrics(const nlohmann::json& doc) {
  MetricOptions m;
  if (doc.is_null()) return m;
  const std::string where = "metrics";
  reject_unknown(doc, {"ece_bins", "budgets", "rejection_rates", "shots", "fewshot_seeds", "l2", "ood_scores",
                       "percentiles"},
                 where);
  m.ece_bins = get_or(doc, "ece_bins", m.ece_bins, where);
  m.budgets = get_or(doc, "budgets", m.budgets, where);
  if (doc.contains("rejection_rates")) {
    if (doc["rejection_rates"].is_number_integer()) {
      m.rejection_rates = default_rejection_rates(doc["rejection_rates"].get<int>());
    } else {
      m.rejection_rates = get_or(doc, "rejection_rates", m.rejection_rates, where);
    }
  }
  m.shots = get_or(doc, "shots", m.shots, where);
  m.fewshot_seeds = get_or(doc, "fewshot_seeds", m.fewshot_seeds, where);
  m.l2 = get_or(doc, "l2", m.l2, where);
  m.ood_scores = get_or(doc, "ood_scores", m.ood_scores, where);
  m.percentiles = get_or(doc, "percentiles", m.percentiles, where);
  if (m.ece_bins < 1) throw ValidationError("metrics: ece_bins must be positive");
  for (double b : m.budgets)
    if (!(b >= 0.0 && b <= 1.0)) throw ValidationError("metrics: budgets must lie in [0, 1]");
  for (int s : m.shots)
    if (s < 1) throw ValidationError("metrics: shots must be positive");
  if (m.fewshot_seeds.empty()) throw ValidationError("metrics: fewshot_seeds must not be empty");
  if (!(m.l2 >= 0.0)) throw ValidationError("metrics: l2 must be non-negative");
  for (const auto& s : m.ood_scores) {
    static const std::vector<std::string> known = {"msp", "entropy", "maxlogit", "maha", "rmaha"};
    if (std::find(known.begin(), known.end(), s) == known.end()) throw ValidationError("metrics: unknown OOD score '" + s + "'");
  }
  for (double p : m.percentiles)
    if (!(p >= 0.0 && p <= 100.0)) throw ValidationError("metrics: percentiles must lie in [0, 100]");
  return m;
}

nlohmann::json metrics_json(const MetricOptions& m) {
  return {{"ece_bins", m.ece_bins},     {"budgets", m.budgets},         {"rejection_rates", m.rejection_rates},
          {"shots", m.shots},           {"fewshot_seeds", m.fewshot_seeds}, {"l2", m.l2},
          {"ood_scores", m.ood_scores}, {"percentiles", m.percentiles}};
}

ALOptions parse_al(const nlohmann::json& doc) {
  ALOptions a;
  if (doc.is_null()) return a;
  const std::string where = "active_learning";
  reject_unknown(doc, {"init_per_class_factor", "max_per_class_factor", "batch_per_class_factor", "strategies", "head"},
                 where);
  a.init_per_class_factor = get_or(doc, "init_per_class_factor", a.init_per_class_factor, where);
  a.max_per_class_factor = get_or(doc, "max_per_class_factor", a.max_per_class_factor, where);
  a.batch_per_class_factor = get_or(doc, "batch_per_class_factor", a.batch_per_class_factor, where);
  a.strategies = get_or(doc, "strategies", a.strategies, where);
  for (const auto& s : a.strategies) parse_strategy(s);
  for (double f : {a.init_per_class_factor, a.max_per_class_factor, a.batch_per_class_factor}) {
    if (!(f > 0.0)) throw ValidationError("active_learning: factors must be positive");
  }
  if (doc.contains("head")) a.head = parse_head_spec(doc["head"]);
  return a;
}

}  // namespace

RunConfig parse_run_config(const nlohmann::json& doc, const fs::path& base_dir, std::optional<std::uint64_t> seed) {
  if (!doc.is_object()) throw ValidationError("config must be a JSON object");
  reject_unknown(doc, {"manifests", "heads", "train", "tasks", "metrics", "active_learning", "seed", "reports"}, "config");
  RunConfig cfg;
  cfg.seed = seed.value_or(get_or<std::uint64_t>(doc, "seed", 0, "config"));

  const auto manifests = get_or(doc, "manifests", std::vector<std::string>{}, "config");
  for (const auto& m : manifests) cfg.manifests.push_back(resolve(base_dir, m));
  const auto reports = get_or(doc, "reports", std::vector<std::string>{}, "config");
  for (const auto& r : reports) cfg.reports.push_back(resolve(base_dir, r));

  nlohmann::json heads_json = nlohmann::json::array();
  const nlohmann::json heads = doc.value("heads", nlohmann::json::array({{{"name", "linear"}, {"kind", "linear"}}}));
  if (!heads.is_array()) throw ValidationError("config: 'heads' must be an array");
  std::set<std::string> names;
  for (const auto& h : heads) {
    if (!h.is_object()) throw ValidationError("config: head entries must be objects");
    reject_unknown(h, {"name", "kind", "hyperparams", "path"}, "head");
    HeadEntry e;
    e.kind = get_or<std::string>(h, "kind", "", "head");
    e.name = get_or<std::string>(h, "name", e.kind, "head");
    e.hyperparams = h.value("hyperparams", nlohmann::json::object());
    if (e.name.empty()) throw ValidationError("head: needs a name or kind");
    if (!names.insert(e.name).second) throw ValidationError("head name '" + e.name + "' is used twice");
    if (h.contains("path")) {
      e.path = resolve(base_dir, h["path"].get<std::string>());
    } else if (!is_builtin_predictor(e.kind)) {
      parse_head_spec({{"kind", e.kind}, {"hyperparams", e.hyperparams}});
    }
    nlohmann::json canon = {{"name", e.name}, {"kind", e.kind}, {"hyperparams", e.hyperparams}};
    if (h.contains("path")) canon["path"] = h["path"];
    heads_json.push_back(canon);
    cfg.heads.push_back(std::move(e));
  }

  cfg.train = parse_train_config(doc.value("train", nlohmann::json()), cfg.seed);
  const auto tasks = get_or(doc, "tasks", kAllTasks, "config");
  for (const auto& t : tasks) {
    if (std::find(kAllTasks.begin(), kAllTasks.end(), t) == kAllTasks.end()) throw ValidationError("config: unknown task '" + t + "'");
    cfg.tasks.insert(t);
  }
  cfg.metrics = parse_metrics(doc.value("metrics", nlohmann::json()));
  if (cfg.metrics.rejection_rates.empty()) cfg.metrics.rejection_rates = default_rejection_rates();
  cfg.active_learning = parse_al(doc.value("active_learning", nlohmann::json()));

  cfg.canonical = {{"manifests", manifests},
                   {"heads", heads_json},
                   {"train", to_json(cfg.train)},
                   {"tasks", std::vector<std::string>(cfg.tasks.begin(), cfg.tasks.end())},
                   {"metrics", metrics_json(cfg.metrics)},
                   {"active_learning",
                    {{"init_per_class_factor", cfg.active_learning.init_per_class_factor},
                     {"max_per_class_factor", cfg.active_learning.max_per_class_factor},
                     {"batch_per_class_factor", cfg.active_learning.batch_per_class_factor},
                     {"strategies", cfg.active_learning.strategies},
                     {"head",
                      {{"kind", to_string(cfg.active_learning.head.kind)},
                       {"hyperparams", cfg.active_learning.head.hyperparams}}}}},
                   {"seed", cfg.seed}};
  cfg.hash = config_hash(cfg.canonical);
  return cfg;
}

RunConfig load_run_config(const fs::path& path, std::optional<std::uint64_t> seed) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
  return parse_run_config(doc, path.parent_path(), seed);
}

namespace {

// ---------------------------------------------------------------------------
// Data access

std::vector<DatasetManifest> load_all(const RunConfig& cfg) {
  if (cfg.manifests.empty()) throw ValidationError("config lists no manifests");
  std::vector<DatasetManifest> out;
  std::set<std::string> names;
  for (const auto& p : cfg.manifests) {
    out.push_back(load_manifest(p));
    if (!names.insert(out.back().name).second) throw ValidationError("two manifests share the name '" + out.back().name + "'");
  }
  return out;
}

LabeledData labeled(const Split& s) { return {to_matrix(*s.embeddings), to_ints(s.labels)}; }

/// Rows of a [N x L x K] tensor for one example as an L x K matrix.
Eigen::MatrixXd sequence_logits(const Tensor& t, std::size_t example) {
  const auto l = static_cast<Eigen::Index>(t.dim(1));
  const auto k = static_cast<Eigen::Index>(t.dim(2));
  Eigen::MatrixXd m(l, k);
  const std::size_t base = example * static_cast<std::size_t>(l * k);
  for (Eigen::Index i = 0; i < l; ++i)
    for (Eigen::Index j = 0; j < k; ++j) m(i, j) = t.at(base + static_cast<std::size_t>(i * k + j));
  return m;
}

Report new_report(const std::string& model, const RunConfig& cfg, const std::string& command) {
  Report r;
  r.model = model;
  r.provenance["config_hash"] = cfg.hash;
  r.provenance["seed"] = cfg.seed;
  r.provenance["version"] = kVersion;
  r.provenance["command"] = command;
  r.provenance["skipped"] = nlohmann::json::array();
  r.provenance["warnings"] = nlohmann::json::array();
  return r;
}

void warn(Report& r, const std::string& text) { r.provenance["warnings"].push_back(text); }

// ---------------------------------------------------------------------------
// Predictors

class Predictor {
 public:
  std::string name;
  std::vector<std::string> flags;

  static Predictor stored_logits(std::string name) {
    Predictor p;
    p.name = std::move(name);
    return p;
  }
  static Predictor from_head(std::string name, std::unique_ptr<Head> head) {
    Predictor p;
    p.name = std::move(name);
    p.flags = head->interpretation_flags();
    p.head_ = std::shared_ptr<Head>(std::move(head));
    return p;
  }

  bool uses_stored_logits() const { return head_ == nullptr; }
  const Head* head() const { return head_.get(); }

  /// Reason the split cannot be predicted, or nullopt.
  std::optional<std::string> unavailable(const Split& s) const {
    if (head_) {
      if (s.is_sequence()) return "sequence splits are evaluated from stored logits only";
      if (!s.embeddings) return "split '" + s.name + "' has no embeddings";
    } else if (!s.logits) {
      return "split '" + s.name + "' has no logits";
    }
    return std::nullopt;
  }

  Eigen::MatrixXd probs(const Split& s) const {
    if (head_) return head_->predict_probs(to_matrix(*s.embeddings));
    return softmax(to_matrix(*s.logits));
  }

  std::optional<Eigen::MatrixXd> logits(const Split& s) const {
    if (head_) return head_->predict_logits(to_matrix(*s.embeddings));
    return to_matrix(*s.logits);
  }

 private:
  std::shared_ptr<Head> head_;
};

std::optional<Predictor> build_predictor(const HeadEntry& entry, const DatasetManifest& m, const RunConfig& cfg,
                                         Report& report, std::string& reason) {
  const int k = m.num_classes();
  if (entry.kind == "logits" && !entry.path) return Predictor::stored_logits(entry.name);
  if (entry.path) {
    auto head = load_head(*entry.path);
    if (head->num_classes() != k) {
      reason = "saved head has " + std::to_string(head->num_classes()) + " classes, dataset has " + std::to_string(k);
      return std::nullopt;
    }
    return Predictor::from_head(entry.name, std::move(head));
  }
  const Split* train = m.first_with_role(SplitRole::train);
  if (!train || !train->embeddings || train->is_sequence()) {
    reason = "no train split with embeddings to fit the head";
    return std::nullopt;
  }
  const LabeledData data = labeled(*train);
  if (entry.kind == "lbfgs") {
    LbfgsOptions opt;
    opt.l2 = cfg.metrics.l2;
    auto fit = lbfgs_logreg(data.x, data.y, k, opt);
    for (const auto& w : fit.report.warnings) warn(report, m.name + ": " + w);
    report.provenance["lbfgs"][m.name] = {{"iterations", fit.report.iterations},
                                          {"grad_norm", round9(fit.report.grad_norm)},
                                          {"converged", fit.report.converged}};
    return Predictor::from_head(entry.name, std::make_unique<LinearSoftmaxHead>(std::move(fit.head)));
  }
  const HeadSpec spec = parse_head_spec({{"kind", entry.kind}, {"hyperparams", entry.hyperparams}});
  std::optional<LabeledData> val;
  if (const Split* v = m.first_with_role(SplitRole::validation); v && v->embeddings && !v->is_sequence()) val = labeled(*v);
  auto head = train_head(spec, data, cfg.train, k, val ? &*val : nullptr);
  report.provenance["heads"][m.name] = {{"kind", to_string(head->kind())}, {"hyperparams", head->hyperparams()}};
  return Predictor::from_head(entry.name, std::move(head));
}

// ---------------------------------------------------------------------------
// Evaluation helpers

struct Evaluated {
  PredictionBatch batch;
  std::optional<Eigen::MatrixXd> logits;
};

/// In-distribution rows of a split; sequence splits flatten to labelled steps.
Evaluated evaluate_split(const Predictor& p, const Split& s, int k) {
  if (!s.is_sequence()) {
    Evaluated e{PredictionBatch::make(p.probs(s), to_ints(s.labels),
                                      s.soft_labels ? std::optional(to_matrix(*s.soft_labels)) : std::nullopt,
                                      s.groups ? std::optional(to_ints(*s.groups)) : std::nullopt),
                p.logits(s)};
    return e;
  }
  const auto labels = to_ints(s.labels);
  const auto n = static_cast<std::size_t>(s.labels.dim(0));
  const auto len = static_cast<std::size_t>(s.labels.dim(1));
  std::vector<Eigen::RowVectorXd> rows;
  std::vector<int> ys;
  for (std::size_t i = 0; i < n; ++i) {
    const Eigen::MatrixXd z = sequence_logits(*s.logits, i);
    for (std::size_t l = 0; l < len; ++l) {
      const int y = labels[i * len + l];
      if (y < 0 || y >= k) continue;
      rows.push_back(z.row(static_cast<Eigen::Index>(l)));
      ys.push_back(y);
    }
  }
  if (rows.empty()) throw DegenerateInput("split '" + s.name + "' has no labelled steps");
  Eigen::MatrixXd z(static_cast<Eigen::Index>(rows.size()), k);
  for (std::size_t r = 0; r < rows.size(); ++r) z.row(static_cast<Eigen::Index>(r)) = rows[r];
  return {PredictionBatch::make(softmax(z), std::move(ys)), z};
}

std::vector<double> msp_uncertainty(const PredictionBatch& b) {
  std::vector<double> u(static_cast<std::size_t>(b.size()));
  for (Eigen::Index i = 0; i < b.size(); ++i) u[static_cast<std::size_t>(i)] = msp_score(b.probs.row(i));
  return u;
}

std::string budget_name(double b) {
  std::string s = format9(b);
  return s;
}

class RecordSink {
 public:
  RecordSink(Report& report, std::string dataset, std::vector<std::string> flags)
      : report_(report), dataset_(std::move(dataset)), flags_(std::move(flags)) {}

  MetricRecord& add(const std::string& task, const std::string& split, const std::string& metric, double value,
                    bool higher, double lo, double hi) {
    auto r = MetricRecord::make(task, dataset_, split, metric, value, higher, lo, hi);
    r.flags = flags_;
    if (r.clamped) r.flags.push_back("clamped");
    report_.add(std::move(r));
    return report_.records.back();
  }
  void aux(const std::string& task, const std::string& split, const std::string& metric, double value, bool higher,
           double lo, double hi) {
    auto r = MetricRecord::make(task, dataset_, split, metric, value, higher, lo, hi);
    r.flags = flags_;
    report_.auxiliary.push_back(std::move(r));
  }
  void skip(const std::string& task, const std::string& split, const std::string& reason) {
    report_.skip(task, dataset_ + "/" + split + ": " + reason);
  }

 private:
  Report& report_;
  std::string dataset_;
  std::vector<std::string> flags_;
};

std::string role_task(SplitRole role) { return role == SplitRole::test ? "in_distribution" : "covariate_shift"; }

void eval_core(const RunConfig& cfg, RecordSink& sink, const Split& s, const Evaluated& e, int k) {
  const auto& b = e.batch;
  const std::string task = role_task(s.role);
  const double log_k = std::log(static_cast<double>(k));
  if (cfg.wants("eval")) {
    sink.add(task, s.name, "accuracy", accuracy(b), true, 0.0, 1.0);
    sink.add(task, s.name, "nll", nll(b), false, 0.0, log_k);
    sink.add(task, s.name, "brier", brier(b), false, 0.0, 2.0);
    if (k == 2) {
      std::vector<double> score(static_cast<std::size_t>(b.size()));
      std::vector<bool> pos(score.size());
      for (Eigen::Index i = 0; i < b.size(); ++i) {
        score[static_cast<std::size_t>(i)] = b.probs(i, 1);
        pos[static_cast<std::size_t>(i)] = b.labels[static_cast<std::size_t>(i)] == 1;
      }
      try {
        sink.add(task, s.name, "auroc", binary_auroc(score, pos), true, 0.0, 1.0);
        sink.add(task, s.name, "auprc", binary_auprc(score, pos), true, 0.0, 1.0);
      } catch (const DegenerateInput& ex) {
        sink.skip("eval", s.name, std::string("auroc/auprc: ") + ex.what());
      }
    }
  }
  if (cfg.wants("calibration")) {
    sink.add("calibration", s.name, "ece", ece(b, cfg.metrics.ece_bins), false, 0.0, 1.0);
    try {
      sink.add("calibration", s.name, "calibration_auroc", calibration_auroc(b), true, 0.0, 1.0);
    } catch (const DegenerateInput& ex) {
      sink.skip("calibration", s.name, std::string("calibration_auroc: ") + ex.what());
    }
  }
}

void eval_selective(const RunConfig& cfg, Report& report, RecordSink& sink, const std::string& dataset, const Split& s,
                    const Evaluated& e) {
  const auto& b = e.batch;
  const auto u = msp_uncertainty(b);
  for (double budget : cfg.metrics.budgets) {
    const std::string suffix = "@" + budget_name(budget);
    sink.add("selective_prediction", s.name, "oc_accuracy" + suffix, oracle_collaborative_accuracy(b, u, budget), true,
             0.0, 1.0);
    try {
      sink.add("selective_prediction", s.name, "oc_auroc" + suffix, oracle_collaborative_auroc(b, u, budget), true, 0.0,
               1.0)
          .flags.push_back(kOcAurocFlag);
    } catch (const DegenerateInput& ex) {
      sink.skip("selective", s.name, "oc_auroc" + suffix + ": " + ex.what());
    }
  }
  const auto& rates = cfg.metrics.rejection_rates;
  const double span = rates.back() - rates.front();
  std::vector<RejectionMetric> kinds = {RejectionMetric::accuracy};
  if (b.num_classes() == 2) {
    kinds.push_back(RejectionMetric::auroc);
    kinds.push_back(RejectionMetric::auprc);
  }
  for (auto kind : kinds) {
    const auto curve = rejection_curve(b, u, kind, rates);
    const std::string name = "rejection_" + to_string(kind);
    report.curves[dataset + "." + s.name + "." + name] = curve.points;
    if (!curve.omitted_rates.empty()) {
      sink.skip("selective", s.name, name + ": " + std::to_string(curve.omitted_rates.size()) + " degenerate rates omitted");
    }
    if (curve.points.size() < 2 || span <= 0.0 || !curve.omitted_rates.empty()) {
      if (curve.points.size() < 2 || span <= 0.0) sink.skip("selective", s.name, name + "_auc: fewer than two points");
      else sink.skip("selective", s.name, name + "_auc: curve has omitted rates");
      continue;
    }
    sink.add("selective_prediction", s.name, name + "_auc", rejection_auc(curve.points), true, 0.0, span);
  }
}

bool evaluable_role(SplitRole r) { return r == SplitRole::test || r == SplitRole::covariate_shift; }
bool auxiliary_role(SplitRole r) {
  return r != SplitRole::train && r != SplitRole::validation && r != SplitRole::semantic_shift;
}

}  // namespace

// ---------------------------------------------------------------------------
// Pipelines

std::vector<fs::path> run_train_heads(const RunConfig& cfg, const fs::path& out) {
  std::vector<fs::path> written;
  for (const auto& m : load_all(cfg)) {
    for (const auto& entry : cfg.heads) {
      if (is_builtin_predictor(entry.kind) && entry.kind == "logits") continue;
      if (entry.path) continue;
      Report scratch;
      std::string reason;
      auto p = build_predictor(entry, m, cfg, scratch, reason);
      if (!p) throw ValidationError(m.name + "/" + entry.name + ": " + reason);
      const fs::path dir = out / m.name / entry.name;
      save_head(*p->head(), dir);
      written.push_back(dir);
    }
  }
  return written;
}

std::vector<Report> run_eval(const RunConfig& cfg) {
  const auto datasets = load_all(cfg);
  std::vector<Report> reports;
  for (const auto& entry : cfg.heads) {
    Report report = new_report(entry.name, cfg, "eval");
    for (const auto& m : datasets) {
      if (!m.first_with_role(SplitRole::test)) throw ValidationError(m.name + ": eval needs a test split");
      std::string reason;
      auto pred = build_predictor(entry, m, cfg, report, reason);
      if (!pred) {
        report.skip("eval", m.name + ": " + reason);
        continue;
      }
      auto& flags = report.provenance["flags"];
      for (const auto& f : pred->flags)
        if (std::find(flags.begin(), flags.end(), f) == flags.end()) flags.push_back(f);
      RecordSink sink(report, m.name, pred->flags);
      const int k = m.num_classes();
      for (const auto& [name, s] : m.splits) {
        const bool core = evaluable_role(s.role);
        const bool soft = auxiliary_role(s.role) && s.soft_labels && cfg.wants("label_uncertainty");
        const bool groups = auxiliary_role(s.role) && s.groups && cfg.wants("subpop");
        if (!core && !soft && !groups) continue;
        if (auto why = pred->unavailable(s)) {
          sink.skip("eval", name, *why);
          continue;
        }
        Evaluated e;
        try {
          e = evaluate_split(*pred, s, k);
        } catch (const DegenerateInput& ex) {
          sink.skip("eval", name, ex.what());
          continue;
        }
        if (core) {
          eval_core(cfg, sink, s, e, k);
          if (cfg.wants("selective")) eval_selective(cfg, report, sink, m.name, s, e);
        }
        if (soft && !s.is_sequence()) {
          sink.add("label_uncertainty", name, "kl", label_uncertainty_kl(e.batch), false, 0.0, std::log(static_cast<double>(k)));
        }
        if (groups && !s.is_sequence()) {
          const auto per_group = per_group_accuracy(e.batch);
          const auto pct = subpopulation_percentiles(per_group, cfg.metrics.percentiles);
          for (const auto& [q, v] : pct) sink.add("subpopulation_shift", name, "accuracy_p" + format9(q), v, true, 0.0, 1.0);
        }
      }
    }
    report.finalize();
    reports.push_back(std::move(report));
  }
  return reports;
}

namespace {

struct OsrSets {
  std::vector<double> in, out;
};

void add_osr_records(RecordSink& sink, const std::string& task, const std::string& split, const std::string& score,
                     const OsrSets& sets) {
  if (sets.in.empty() || sets.out.empty()) {
    sink.skip(task, split, score + ": needs both in-distribution and OOD examples");
    return;
  }
  try {
    const auto r = osr_evaluate(sets.in, sets.out);
    sink.add(task, split, score + "_auroc", r.auroc, true, 0.0, 1.0);
    sink.add(task, split, score + "_auprc", r.auprc, true, 0.0, 1.0);
  } catch (const DegenerateInput& ex) {
    sink.skip(task, split, score + ": " + ex.what());
  }
}

// Any label id above K marks the example (or sequence) as OOD.
std::vector<bool> ood_mask(const Split& s, const DatasetManifest& m) {
  const auto labels = to_ints(s.labels);
  const std::size_t n = s.num_examples();
  const std::size_t per = n == 0 ? 0 : labels.size() / n;
  std::vector<bool> mask(n, false);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t l = 0; l < per; ++l)
      if (m.is_ood_label(labels[i * per + l])) mask[i] = true;
  return mask;
}

std::vector<double> sequence_scores(const Split& s, int k) {
  const auto labels = to_ints(s.labels);
  const auto n = s.num_examples();
  const auto len = static_cast<std::size_t>(s.labels.dim(1));
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    SequenceDistribution d;
    d.step_probs = softmax(sequence_logits(*s.logits, i));
    std::size_t effective = 0;
    while (effective < len && labels[i * len + effective] != k) ++effective;
    d.length = static_cast<Eigen::Index>(std::max<std::size_t>(effective, 1));
    out[i] = sequence_entropy_score(d);
  }
  return out;
}

void split_scores(const std::vector<double>& scores, const std::vector<bool>& is_ood, OsrSets& sets) {
  for (std::size_t i = 0; i < scores.size(); ++i) (is_ood[i] ? sets.out : sets.in).push_back(scores[i]);
}

}  // namespace

std::vector<Report> run_osr(const RunConfig& cfg) {
  const auto datasets = load_all(cfg);
  bool any_semantic = false;
  for (const auto& m : datasets) any_semantic = any_semantic || !m.with_role(SplitRole::semantic_shift).empty();
  if (!any_semantic) throw ValidationError("osr needs at least one semantic_shift split");
  const std::string task = "open_set_recognition";
  std::vector<Report> reports;
  for (const auto& entry : cfg.heads) {
    Report report = new_report(entry.name, cfg, "osr");
    for (const auto& m : datasets) {
      const Split* test = m.first_with_role(SplitRole::test);
      const auto semantic = m.with_role(SplitRole::semantic_shift);
      if (!test || semantic.empty()) {
        report.skip(task, m.name + ": needs a test split and a semantic_shift split");
        continue;
      }
      std::string reason;
      auto pred = build_predictor(entry, m, cfg, report, reason);
      if (!pred) {
        report.skip(task, m.name + ": " + reason);
        continue;
      }
      RecordSink sink(report, m.name, pred->flags);
      const int k = m.num_classes();

      // Mahalanobis scores depend only on embeddings.
      std::optional<GaussianClassModel> gauss;
      const Split* train = m.first_with_role(SplitRole::train);
      const bool want_maha = std::any_of(cfg.metrics.ood_scores.begin(), cfg.metrics.ood_scores.end(),
                                         [](const std::string& s) { return s == "maha" || s == "rmaha"; });
      std::string maha_reason;
      if (want_maha) {
        if (!train || !train->embeddings || train->is_sequence()) {
          maha_reason = "no train embeddings";
        } else {
          try {
            gauss = fit_class_gaussians(to_matrix(*train->embeddings), to_ints(train->labels), k);
            for (const auto& w : gauss->warnings) warn(report, m.name + ": " + w);
          } catch (const std::exception& ex) {
            maha_reason = ex.what();
          }
        }
      }

      for (const Split* s : semantic) {
        if (test->is_sequence() != s->is_sequence()) {
          sink.skip(task, s->name, "test and semantic_shift splits differ in sequence layout");
          continue;
        }
        if (s->is_sequence()) {
          if (!pred->uses_stored_logits() || !test->logits || !s->logits) {
            sink.skip(task, s->name, "sequence OSR needs stored logits");
            continue;
          }
          OsrSets sets;
          split_scores(sequence_scores(*test, k), std::vector<bool>(test->num_examples(), false), sets);
          split_scores(sequence_scores(*s, k), ood_mask(*s, m), sets);
          add_osr_records(sink, task, s->name, "sequence_entropy", sets);
          continue;
        }
        const auto mask = ood_mask(*s, m);
        const std::vector<bool> none(test->num_examples(), false);
        for (const auto& score : cfg.metrics.ood_scores) {
          OsrSets sets;
          auto collect = [&](const Split& sp, const std::vector<bool>& is_ood) -> std::optional<std::string> {
            std::vector<double> vals(sp.num_examples());
            if (score == "maha" || score == "rmaha") {
              if (!gauss) return "mahalanobis unavailable: " + maha_reason;
              if (!sp.embeddings) return "split '" + sp.name + "' has no embeddings";
              const Eigen::MatrixXd x = to_matrix(*sp.embeddings);
              for (Eigen::Index i = 0; i < x.rows(); ++i) {
                const Eigen::VectorXd z = x.row(i).transpose();
                vals[static_cast<std::size_t>(i)] =
                    score == "maha" ? mahalanobis_score(*gauss, z) : relative_mahalanobis_score(*gauss, z);
              }
            } else {
              if (auto why = pred->unavailable(sp)) return *why;
              if (score == "maxlogit") {
                const auto z = pred->logits(sp);
                if (!z) return "head exposes no logits";
                for (Eigen::Index i = 0; i < z->rows(); ++i) vals[static_cast<std::size_t>(i)] = maxlogit_score(z->row(i));
              } else {
                const Eigen::MatrixXd p = pred->probs(sp);
                for (Eigen::Index i = 0; i < p.rows(); ++i) {
                  vals[static_cast<std::size_t>(i)] = score == "msp" ? msp_score(p.row(i)) : entropy_score(p.row(i));
                }
              }
            }
            split_scores(vals, is_ood, sets);
            return std::nullopt;
          };
          auto why = collect(*test, none);
          if (!why) why = collect(*s, mask);
          if (why) {
            sink.skip(task, s->name, score + ": " + *why);
            continue;
          }
          add_osr_records(sink, task, s->name, score, sets);
        }
      }
    }
    report.finalize();
    reports.push_back(std::move(report));
  }
  return reports;
}

std::vector<Report> run_fewshot(const RunConfig& cfg) {
  const auto datasets = load_all(cfg);
  Report report = new_report("fewshot_lbfgs", cfg, "fewshot");
  report.provenance["l2"] = cfg.metrics.l2;
  for (const auto& m : datasets) {
    const Split* train = m.first_with_role(SplitRole::train);
    const Split* test = m.first_with_role(SplitRole::test);
    if (!train || !test || !train->embeddings || !test->embeddings || train->is_sequence() || test->is_sequence()) {
      throw ValidationError(m.name + ": few-shot needs train and test splits with embeddings");
    }
    const int k = m.num_classes();
    const LabeledData tr = labeled(*train);
    const Eigen::MatrixXd test_x = to_matrix(*test->embeddings);
    const auto test_y = to_ints(test->labels);
    const auto semantic = m.with_role(SplitRole::semantic_shift);
    RecordSink sink(report, m.name, {});
    // Check the largest shot count up front so no partial results are produced.
    const int max_shots = *std::max_element(cfg.metrics.shots.begin(), cfg.metrics.shots.end());
    fewshot_sample(tr.y, k, max_shots, 0);

    for (int shots : cfg.metrics.shots) {
      std::map<std::string, std::vector<double>> values;
      for (std::uint64_t seed : cfg.metrics.fewshot_seeds) {
        const auto idx = fewshot_sample(tr.y, k, shots, derive_seed(cfg.seed, seed));
        Eigen::MatrixXd x(static_cast<Eigen::Index>(idx.size()), tr.x.cols());
        std::vector<int> y;
        for (std::size_t j = 0; j < idx.size(); ++j) {
          x.row(static_cast<Eigen::Index>(j)) = tr.x.row(idx[j]);
          y.push_back(tr.y[static_cast<std::size_t>(idx[j])]);
        }
        LbfgsOptions opt;
        opt.l2 = cfg.metrics.l2;
        auto fit = lbfgs_logreg(x, y, k, opt);
        for (const auto& w : fit.report.warnings) warn(report, m.name + " " + std::to_string(shots) + "-shot: " + w);
        const auto batch = PredictionBatch::make(fit.head.predict_probs(test_x), test_y);
        values["accuracy"].push_back(accuracy(batch));
        values["nll"].push_back(nll(batch));
        values["ece"].push_back(ece(batch, cfg.metrics.ece_bins));
        try {
          values["calibration_auroc"].push_back(calibration_auroc(batch));
        } catch (const DegenerateInput&) {
        }
        for (const Split* s : semantic) {
          if (!s->embeddings || s->is_sequence()) continue;
          OsrSets sets;
          const Eigen::MatrixXd ps = fit.head.predict_probs(to_matrix(*s->embeddings));
          const auto mask = ood_mask(*s, m);
          for (Eigen::Index i = 0; i < batch.size(); ++i) sets.in.push_back(msp_score(batch.probs.row(i)));
          for (Eigen::Index i = 0; i < ps.rows(); ++i) (mask[static_cast<std::size_t>(i)] ? sets.out : sets.in).push_back(msp_score(ps.row(i)));
          if (sets.out.empty()) continue;
          values["osr:" + s->name].push_back(osr_evaluate(sets.in, sets.out).auroc);
        }
      }
      const std::string suffix = "@" + std::to_string(shots) + "shot";
      const double log_k = std::log(static_cast<double>(k));
      for (const auto& [metric, vals] : values) {
        if (vals.empty()) continue;
        double mean = 0.0;
        for (double v : vals) mean += v;
        mean /= static_cast<double>(vals.size());
        double var = 0.0;
        for (double v : vals) var += (v - mean) * (v - mean);
        const double sd = std::sqrt(var / static_cast<double>(vals.size()));
        std::string task = "few_shot_uncertainty", split = test->name, name = metric;
        bool higher = true;
        double hi = 1.0;
        if (metric == "accuracy") task = "few_shot";
        if (metric == "nll" || metric == "ece") higher = false;
        if (metric == "nll") hi = log_k;
        if (metric.rfind("osr:", 0) == 0) {
          split = metric.substr(4);
          name = "msp_auroc";
        }
        sink.add(task, split, name + suffix, mean, higher, 0.0, hi);
        sink.aux(task, split, name + suffix + "_std", sd, false, 0.0, hi);
      }
    }
  }
  report.finalize();
  return {report};
}

std::vector<Report> run_zeroshot_osr(const RunConfig& cfg) {
  const auto datasets = load_all(cfg);
  Report report = new_report("zeroshot_mahalanobis", cfg, "zeroshot-osr");
  const std::string task = "zero_shot_osr";
  for (const auto& m : datasets) {
    const Split* train = m.first_with_role(SplitRole::train);
    const Split* test = m.first_with_role(SplitRole::test);
    const auto semantic = m.with_role(SplitRole::semantic_shift);
    if (!train || !test || !train->embeddings || !test->embeddings || semantic.empty()) {
      throw ValidationError(m.name + ": zero-shot OSR needs train and test embeddings and a semantic_shift split");
    }
    // Fit only the classes present in train, renumbered densely.
    auto train_y = to_ints(train->labels);
    std::map<int, int> present;
    for (int y : train_y) present.emplace(y, 0);
    int next = 0;
    for (auto& [cls, id] : present) id = next++;
    for (auto& y : train_y) y = present.at(y);
    if (static_cast<int>(present.size()) < m.num_classes()) {
      warn(report, m.name + ": " + std::to_string(m.num_classes() - static_cast<int>(present.size())) +
                       " classes have no training examples and are left out of the fit");
    }
    const auto model = fit_class_gaussians(to_matrix(*train->embeddings), train_y, static_cast<int>(present.size()));
    for (const auto& w : model.warnings) warn(report, m.name + ": " + w);
    if (present.size() == 1) {
      warn(report, m.name + ": single training class; the background and class Gaussians coincide, so relative "
                            "Mahalanobis is identically zero");
    }
    RecordSink sink(report, m.name, {});
    auto scores = [&](const Split& s, bool relative) {
      const Eigen::MatrixXd x = to_matrix(*s.embeddings);
      std::vector<double> out(static_cast<std::size_t>(x.rows()));
      for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const Eigen::VectorXd z = x.row(i).transpose();
        out[static_cast<std::size_t>(i)] = relative ? relative_mahalanobis_score(model, z) : mahalanobis_score(model, z);
      }
      return out;
    };
    for (const Split* s : semantic) {
      if (!s->embeddings) {
        sink.skip(task, s->name, "no embeddings");
        continue;
      }
      const auto mask = ood_mask(*s, m);
      for (bool relative : {false, true}) {
        OsrSets sets;
        split_scores(scores(*test, relative), std::vector<bool>(test->num_examples(), false), sets);
        split_scores(scores(*s, relative), mask, sets);
        add_osr_records(sink, task, s->name, relative ? "rmaha" : "maha", sets);
      }
    }
  }
  report.finalize();
  return {report};
}

std::vector<Report> run_active_learning(const RunConfig& cfg) {
  const auto datasets = load_all(cfg);
  std::vector<Report> reports;
  for (const auto& strategy : cfg.active_learning.strategies) {
    Report report = new_report("active_learning_" + strategy, cfg, "active-learn");
    for (const auto& m : datasets) {
      const Split* train = m.first_with_role(SplitRole::train);
      const Split* test = m.first_with_role(SplitRole::test);
      if (!train || !test || !train->embeddings || !test->embeddings || train->is_sequence() || test->is_sequence()) {
        throw ValidationError(m.name + ": active learning needs train and test splits with embeddings");
      }
      ALConfig al;
      al.init_per_class_factor = cfg.active_learning.init_per_class_factor;
      al.max_per_class_factor = cfg.active_learning.max_per_class_factor;
      al.batch_per_class_factor = cfg.active_learning.batch_per_class_factor;
      al.strategy = parse_strategy(strategy);
      al.seed = cfg.seed;
      al.head = cfg.active_learning.head;
      al.train = cfg.train;
      const auto result = al_loop(labeled(*train), labeled(*test), m.num_classes(), al);
      if (result.failure) warn(report, m.name + ": " + *result.failure);
      RecordSink sink(report, m.name, {});
      if (result.curve.empty()) {
        sink.skip("active_learning", test->name, "no rounds completed");
        continue;
      }
      auto& curve = report.curves[m.name + ".learning_curve"];
      double mean = 0.0;
      for (const auto& [labels, acc] : result.curve) {
        curve.push_back({static_cast<double>(labels), acc});
        mean += acc;
      }
      mean /= static_cast<double>(result.curve.size());
      sink.add("active_learning", test->name, "final_accuracy", result.curve.back().second, true, 0.0, 1.0);
      sink.add("active_learning", test->name, "mean_accuracy", mean, true, 0.0, 1.0);
      const double reach = labels_to_reach(result.curve, 0.95);
      if (std::isfinite(reach)) {
        sink.aux("active_learning", test->name, "labels_to_95", reach, false, 0.0, static_cast<double>(al.max_size(m.num_classes())));
      }
    }
    report.finalize();
    reports.push_back(std::move(report));
  }
  return reports;
}

ScoreSummary run_score(const std::vector<Report>& reports) {
  if (reports.empty()) throw ValidationError("score: no reports given");
  std::optional<std::string> hash;
  std::vector<MetricRecord> records;
  for (const auto& r : reports) {
    const std::string h = r.provenance.value("config_hash", std::string());
    if (hash && *hash != h) {
      throw ValidationError("score: reports come from different configs (" + *hash + " vs " + h + ")");
    }
    hash = h;
    records.insert(records.end(), r.records.begin(), r.records.end());
  }
  return score_records(records);
}

nlohmann::json to_json(const ScoreSummary& s) {
  nlohmann::json areas = nlohmann::json::object();
  for (const auto& [k, v] : s.areas) areas[k] = round9(v);
  nlohmann::json datasets = nlohmann::json::object();
  for (const auto& [k, v] : s.datasets) datasets[k] = round9(v);
  return {{"reliability_score", round9(s.overall)},
          {"areas", areas},
          {"missing_areas", s.missing_areas},
          {"datasets", datasets},
          {"num_records", s.num_records},
          {"aggregation", "mean within dataset, then mean across datasets"}};
}

void write_reports(const std::vector<Report>& reports, const fs::path& out) {
  for (const auto& r : reports) write_report(r, out / r.model);
}

}  // namespace relkit
