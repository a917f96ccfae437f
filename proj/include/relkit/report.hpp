#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "relkit/metrics.hpp"

namespace relkit {

/// Records, curves and provenance for one predictor.
struct Report {
  std::string model;
  std::vector<MetricRecord> records;
  std::vector<MetricRecord> auxiliary;  // reported but never scored
  std::map<std::string, std::vector<CurvePoint>> curves;
  nlohmann::json provenance = nlohmann::json::object();

  void add(MetricRecord record);
  void skip(const std::string& task, const std::string& reason);
  /// Sorts by (task, dataset, split, metric) and rounds every value to 9 significant digits.
  void finalize();
};

/// %.9g round trip.
double round9(double value);
std::string format9(double value);

/// 16 hex digits of 64-bit FNV-1a over the compact canonical dump.
std::string config_hash(const nlohmann::json& config);

nlohmann::json to_json(const MetricRecord& record);
MetricRecord record_from_json(const nlohmann::json& doc);
nlohmann::json to_json(const Report& report);
Report report_from_json(const nlohmann::json& doc);

/// Writes report.json, report.csv and curves/<name>.csv under `dir`.
void write_report(const Report& report, const std::filesystem::path& dir);
Report read_report(const std::filesystem::path& path);

/// "uncertainty", "robust_generalization", "adaptation", or nullopt.
std::optional<std::string> area_of_task(const std::string& task);

struct ScoreSummary {
  double overall = 0.0;
  std::map<std::string, double> areas;
  std::vector<std::string> missing_areas;
  std::map<std::string, double> datasets;
  std::size_t num_records = 0;
};

/// Averages normalized records within each dataset, then across datasets,
/// both overall and per area.
ScoreSummary score_records(std::span<const MetricRecord> records);

}  // namespace relkit
