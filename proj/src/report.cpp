#include "relkit/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <tuple>

#include "relkit/error.hpp"

namespace relkit {

namespace fs = std::filesystem;

void Report::add(MetricRecord record) { records.push_back(std::move(record)); }

void Report::skip(const std::string& task, const std::string& reason) {
  provenance["skipped"].push_back({{"task", task}, {"reason", reason}});
}

double round9(double value) {
  if (!std::isfinite(value)) return value;
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", value);
  return std::strtod(buf, nullptr);
}

std::string format9(double value) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", value);
  return buf;
}

void Report::finalize() {
  auto key = [](const MetricRecord& r) { return std::tie(r.task, r.dataset, r.split, r.metric); };
  for (auto* list : {&records, &auxiliary}) {
    // Rounding is monotone, so a value inside its bounds stays inside.
    for (auto& r : *list) {
      r.value = round9(r.value);
      r.lower_bound = round9(r.lower_bound);
      r.upper_bound = round9(r.upper_bound);
      std::sort(r.flags.begin(), r.flags.end());
    }
    std::stable_sort(list->begin(), list->end(), [&](const auto& a, const auto& b) { return key(a) < key(b); });
  }
  for (auto& [name, points] : curves) {
    for (auto& p : points) {
      p.x = round9(p.x);
      p.y = round9(p.y);
    }
  }
}

std::string config_hash(const nlohmann::json& config) {
  const std::string text = config.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

nlohmann::json to_json(const MetricRecord& r) {
  return {{"task", r.task},
          {"dataset", r.dataset},
          {"split", r.split},
          {"metric", r.metric},
          {"value", r.value},
          {"higher_is_better", r.higher_is_better},
          {"lower_bound", r.lower_bound},
          {"upper_bound", r.upper_bound},
          {"clamped", r.clamped},
          {"flags", r.flags}};
}

MetricRecord record_from_json(const nlohmann::json& doc) {
  try {
    MetricRecord r;
    r.task = doc.at("task").get<std::string>();
    r.dataset = doc.at("dataset").get<std::string>();
    r.split = doc.at("split").get<std::string>();
    r.metric = doc.at("metric").get<std::string>();
    r.value = doc.at("value").get<double>();
    r.higher_is_better = doc.at("higher_is_better").get<bool>();
    r.lower_bound = doc.at("lower_bound").get<double>();
    r.upper_bound = doc.at("upper_bound").get<double>();
    r.clamped = doc.value("clamped", false);
    r.flags = doc.value("flags", std::vector<std::string>{});
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed metric record: ") + e.what());
  }
}

nlohmann::json to_json(const Report& report) {
  nlohmann::json doc;
  doc["model"] = report.model;
  doc["records"] = nlohmann::json::array();
  for (const auto& r : report.records) doc["records"].push_back(to_json(r));
  doc["auxiliary"] = nlohmann::json::array();
  for (const auto& r : report.auxiliary) doc["auxiliary"].push_back(to_json(r));
  doc["curves"] = nlohmann::json::object();
  for (const auto& [name, points] : report.curves) {
    auto& arr = doc["curves"][name] = nlohmann::json::array();
    for (const auto& p : points) arr.push_back({p.x, p.y});
  }
  doc["provenance"] = report.provenance;
  return doc;
}

Report report_from_json(const nlohmann::json& doc) {
  Report report;
  try {
    report.model = doc.at("model").get<std::string>();
    for (const auto& r : doc.at("records")) report.records.push_back(record_from_json(r));
    const nlohmann::json aux = doc.value("auxiliary", nlohmann::json::array());
    for (const auto& r : aux) report.auxiliary.push_back(record_from_json(r));
    const nlohmann::json curves = doc.value("curves", nlohmann::json::object());
    for (const auto& [name, arr] : curves.items()) {
      auto& points = report.curves[name];
      for (const auto& p : arr) points.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
    }
    report.provenance = doc.value("provenance", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed report: ") + e.what());
  }
  return report;
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw RuntimeFailure("failed to write " + path.string());
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace

void write_report(const Report& report, const fs::path& dir) {
  fs::create_directories(dir);
  write_text(dir / "report.json", to_json(report).dump(2) + "\n");

  std::string csv = "task,dataset,split,metric,value\n";
  for (const auto& r : report.records) {
    csv += csv_field(r.task) + ',' + csv_field(r.dataset) + ',' + csv_field(r.split) + ',' + csv_field(r.metric) + ',' +
           format9(r.value) + '\n';
  }
  write_text(dir / "report.csv", csv);

  if (report.curves.empty()) return;
  fs::create_directories(dir / "curves");
  for (const auto& [name, points] : report.curves) {
    std::string text = "x,y\n";
    for (const auto& p : points) text += format9(p.x) + ',' + format9(p.y) + '\n';
    write_text(dir / "curves" / (name + ".csv"), text);
  }
}

Report read_report(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open report " + path.string());
  try {
    return report_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

std::optional<std::string> area_of_task(const std::string& task) {
  static const std::map<std::string, std::string> areas = {
      {"calibration", "uncertainty"},
      {"selective_prediction", "uncertainty"},
      {"open_set_recognition", "uncertainty"},
      {"label_uncertainty", "uncertainty"},
      {"in_distribution", "robust_generalization"},
      {"covariate_shift", "robust_generalization"},
      {"subpopulation_shift", "robust_generalization"},
      {"active_learning", "adaptation"},
      {"few_shot", "adaptation"},
      {"few_shot_uncertainty", "adaptation"},
      {"zero_shot_osr", "adaptation"},
  };
  auto it = areas.find(task);
  if (it == areas.end()) return std::nullopt;
  return it->second;
}

namespace {

// Per-dataset means, then their mean; datasets iterate in name order.
double dataset_then_across(const std::vector<MetricRecord>& records, std::map<std::string, double>* per_dataset) {
  std::map<std::string, std::vector<MetricRecord>> groups;
  for (const auto& r : records) groups[r.dataset].push_back(r);
  std::vector<double> means;
  for (const auto& [name, group] : groups) {
    const double s = reliability_score(group);
    if (per_dataset) (*per_dataset)[name] = s;
    means.push_back(s);
  }
  std::sort(means.begin(), means.end());
  double total = 0.0;
  for (double m : means) total += m;
  return total / static_cast<double>(means.size());
}

}  // namespace

ScoreSummary score_records(std::span<const MetricRecord> records) {
  if (records.empty()) throw ValidationError("score: no records");
  ScoreSummary out;
  out.num_records = records.size();
  std::vector<MetricRecord> all(records.begin(), records.end());
  out.overall = dataset_then_across(all, &out.datasets);
  std::map<std::string, std::vector<MetricRecord>> by_area;
  for (const auto& r : records) {
    if (auto area = area_of_task(r.task)) by_area[*area].push_back(r);
  }
  for (const char* area : {"uncertainty", "robust_generalization", "adaptation"}) {
    auto it = by_area.find(area);
    if (it == by_area.end()) {
      out.missing_areas.push_back(area);
      continue;
    }
    out.areas[area] = dataset_then_across(it->second, nullptr);
  }
  return out;
}

}  // namespace relkit
