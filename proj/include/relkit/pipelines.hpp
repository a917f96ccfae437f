#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "relkit/active_learning.hpp"
#include "relkit/heads.hpp"
#include "relkit/report.hpp"
#include "relkit/training.hpp"

namespace relkit {

/// A predictor to evaluate. `kind` is a head kind, "logits" (stored logits)
/// or "lbfgs" (L-BFGS logistic regression). `path` loads a saved head.
struct HeadEntry {
  std::string name;
  std::string kind;
  nlohmann::json hyperparams = nlohmann::json::object();
  std::optional<std::filesystem::path> path;
};

struct MetricOptions {
  int ece_bins = 15;
  std::vector<double> budgets = {0.005, 0.01, 0.02, 0.05};
  std::vector<double> rejection_rates;  // empty means default_rejection_rates()
  std::vector<int> shots = {1, 5, 10, 25};
  std::vector<std::uint64_t> fewshot_seeds = {0, 1, 2};
  double l2 = 1e-2;
  std::vector<std::string> ood_scores = {"msp", "entropy", "maxlogit", "maha", "rmaha"};
  std::vector<double> percentiles = {10, 25, 50, 75, 90};
};

struct ALOptions {
  double init_per_class_factor = 2.0;
  double max_per_class_factor = 20.0;
  double batch_per_class_factor = 0.5;
  std::vector<std::string> strategies = {"margin", "uniform"};
  HeadSpec head;
};

inline const std::vector<std::string> kAllTasks = {"eval",     "calibration",  "selective",       "osr",
                                                   "label_uncertainty", "subpop", "fewshot", "zeroshot_osr",
                                                   "active_learning",   "score"};

struct RunConfig {
  std::vector<std::filesystem::path> manifests;
  std::vector<HeadEntry> heads;
  TrainConfig train;
  std::set<std::string> tasks;
  MetricOptions metrics;
  ALOptions active_learning;
  std::uint64_t seed = 0;
  std::vector<std::filesystem::path> reports;  // inputs for `score`
  nlohmann::json canonical;                    // config with the effective seed
  std::string hash;

  bool wants(const std::string& task) const { return tasks.count(task) > 0; }
};

/// Relative manifest and head paths resolve against `base_dir`. A given
/// `seed` overrides the config's seed.
RunConfig parse_run_config(const nlohmann::json& doc, const std::filesystem::path& base_dir,
                           std::optional<std::uint64_t> seed = std::nullopt);
RunConfig load_run_config(const std::filesystem::path& path, std::optional<std::uint64_t> seed = std::nullopt);

/// Trains every trainable head on each manifest's train split and saves it
/// under out/<dataset>/<head>/. Returns the directories written.
std::vector<std::filesystem::path> run_train_heads(const RunConfig& config, const std::filesystem::path& out);

std::vector<Report> run_eval(const RunConfig& config);
std::vector<Report> run_osr(const RunConfig& config);
std::vector<Report> run_fewshot(const RunConfig& config);
std::vector<Report> run_zeroshot_osr(const RunConfig& config);
std::vector<Report> run_active_learning(const RunConfig& config);

/// Refuses reports with different config hashes.
ScoreSummary run_score(const std::vector<Report>& reports);
nlohmann::json to_json(const ScoreSummary& summary);

/// Writes each report to out/<model>/.
void write_reports(const std::vector<Report>& reports, const std::filesystem::path& out);

}  // namespace relkit
