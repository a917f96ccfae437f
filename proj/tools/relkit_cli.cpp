// relkit command-line entry point.
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "relkit/error.hpp"
#include "relkit/manifest.hpp"
#include "relkit/pipelines.hpp"
#include "relkit/synthetic.hpp"

namespace fs = std::filesystem;
using namespace relkit;

namespace {

struct Globals {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
};

RunConfig require_config(const Globals& g) {
  if (g.config.empty()) throw ValidationError("--config is required");
  return load_run_config(g.config, g.seed);
}

fs::path require_out(const Globals& g) {
  if (g.out.empty()) throw ValidationError("--out is required");
  return g.out;
}

void collect_reports(const fs::path& p, std::vector<fs::path>& out) {
  if (fs::is_directory(p)) {
    std::vector<fs::path> found;
    for (const auto& e : fs::recursive_directory_iterator(p))
      if (e.is_regular_file() && e.path().filename() == "report.json") found.push_back(e.path());
    std::sort(found.begin(), found.end());
    out.insert(out.end(), found.begin(), found.end());
  } else if (fs::exists(p)) {
    out.push_back(p);
  } else {
    throw ValidationError("no such report: " + p.string());
  }
}

void write_demo(const fs::path& out, std::uint64_t seed) {
  const auto manifest = write_manifest(synth::demo_dataset(seed), out / "demo");
  nlohmann::json cfg = {
      {"manifests", {fs::relative(manifest, out).generic_string()}},
      {"heads",
       {{{"name", "stored_logits"}, {"kind", "logits"}},
        {{"name", "linear"}, {"kind", "linear"}},
        {{"name", "rfgp"}, {"kind", "rfgp"}, {"hyperparams", {{"num_features", 64}}}}}},
      {"train", {{"epochs", 30}, {"batch_size", 16}}},
      {"metrics", {{"shots", {1, 5}}, {"fewshot_seeds", {0, 1}}}},
      {"active_learning", {{"max_per_class_factor", 10.0}}},
      {"seed", seed}};
  std::ofstream(out / "config.json") << cfg.dump(2) << '\n';
  std::cout << "wrote " << manifest.string() << " and " << (out / "config.json").string() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Reliability evaluation and last-layer uncertainty heads over frozen embeddings"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "Run configuration (JSON)");
  app.add_option("--out", g.out, "Output directory");
  app.add_option("--seed", g.seed, "Seed overriding the config");
  app.fallthrough();

  auto* train = app.add_subcommand("train-head", "Train configured heads and save them");
  auto* eval = app.add_subcommand("eval", "Accuracy, calibration, selective prediction and shift metrics");
  auto* osr = app.add_subcommand("osr", "Open-set recognition with every configured OOD score");
  auto* fewshot = app.add_subcommand("fewshot", "Few-shot linear evaluation with L-BFGS");
  auto* zeroshot = app.add_subcommand("zeroshot-osr", "Mahalanobis and relative Mahalanobis on raw embeddings");
  auto* al = app.add_subcommand("active-learn", "Batch active learning curves");
  auto* score = app.add_subcommand("score", "Aggregate reports into reliability scores");
  std::vector<std::string> report_paths;
  score->add_option("reports", report_paths, "report.json files or directories to search");
  std::vector<std::string> strategies;
  al->add_option("--strategy", strategies, "margin and/or uniform (overrides config)");
  auto* synth_cmd = app.add_subcommand("synth", "Write a small demo dataset and config");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (synth_cmd->parsed()) {
      write_demo(require_out(g), g.seed.value_or(0));
      return 0;
    }
    if (score->parsed()) {
      std::vector<fs::path> files;
      if (!g.config.empty()) {
        for (const auto& p : require_config(g).reports) collect_reports(p, files);
      }
      for (const auto& p : report_paths) collect_reports(p, files);
      std::vector<Report> reports;
      for (const auto& f : files) reports.push_back(read_report(f));
      const std::string text = to_json(run_score(reports)).dump(2) + "\n";
      if (g.out.empty()) {
        std::cout << text;
      } else {
        fs::create_directories(g.out);
        std::ofstream(fs::path(g.out) / "score.json") << text;
      }
      return 0;
    }

    RunConfig cfg = require_config(g);
    const fs::path out = require_out(g);
    if (train->parsed()) {
      for (const auto& dir : run_train_heads(cfg, out)) std::cout << "saved " << dir.string() << '\n';
      return 0;
    }
    std::vector<Report> reports;
    if (eval->parsed()) reports = run_eval(cfg);
    if (osr->parsed()) reports = run_osr(cfg);
    if (fewshot->parsed()) reports = run_fewshot(cfg);
    if (zeroshot->parsed()) reports = run_zeroshot_osr(cfg);
    if (al->parsed()) {
      if (!strategies.empty()) {
        for (const auto& s : strategies) parse_strategy(s);
        cfg.active_learning.strategies = strategies;
      }
      reports = run_active_learning(cfg);
    }
    write_reports(reports, out);
    for (const auto& r : reports) std::cout << "wrote " << (out / r.model / "report.json").string() << '\n';
    return 0;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const RuntimeFailure& e) {
    std::cerr << "runtime failure: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "runtime failure: " << e.what() << '\n';
    return 1;
  }
}
