#include "eqreg/harness.hpp"

#include <json.hpp>

#include <iomanip>
#include <sstream>

namespace eqreg {

namespace {

using nlohmann::json;

std::string fixed(double v, int precision) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << v;
  return os.str();
}

std::string angle_label(double angle) {
  std::ostringstream os;
  os << "[0," << angle << "]";
  return os.str();
}

std::string to_csv(const RecallReport& r) {
  std::ostringstream os;
  os << "scenario,stage,method,max_angle,instances,recall,median_rot_deg,median_trans";
  if (r.timing) os << ",seconds_per_instance";
  os << '\n';
  os << std::setprecision(10);
  for (const auto& c : r.cells) {
    os << r.scenario << ',' << r.stage << ',' << r.method << ',' << c.max_angle << ',' << c.instances << ','
       << c.recall << ',' << c.median_rot_deg << ',' << c.median_trans;
    if (r.timing) os << ',' << c.seconds_per_instance;
    os << '\n';
  }
  return os.str();
}

std::string to_table(const RecallReport& r) {
  constexpr int kLabel = 24;
  constexpr int kCell = 10;
  std::ostringstream os;
  os << std::left << std::setw(kLabel) << "Method";
  for (const auto& c : r.cells) os << std::right << std::setw(kCell) << angle_label(c.max_angle);
  os << '\n';
  if (r.cells.empty()) return os.str();

  const auto row = [&](const std::string& label, auto value) {
    os << std::left << std::setw(kLabel) << label;
    for (const auto& c : r.cells) os << std::right << std::setw(kCell) << value(c);
    os << '\n';
  };
  row(r.method + " (" + r.scenario + ")", [](const RecallCell& c) { return fixed(100.0 * c.recall, 1); });
  row("  median rot (deg)", [](const RecallCell& c) { return fixed(c.median_rot_deg, 4); });
  row("  median trans", [](const RecallCell& c) { return fixed(c.median_trans, 4); });
  if (r.timing) row("  seconds / instance", [](const RecallCell& c) { return fixed(c.seconds_per_instance, 4); });
  return os.str();
}

std::string to_json(const RecallReport& r) {
  json cells = json::array();
  for (const auto& c : r.cells) {
    json cell{{"max_angle", c.max_angle},         {"instances", c.instances},
              {"recall", c.recall},               {"median_rot_deg", c.median_rot_deg},
              {"median_trans", c.median_trans}};
    if (r.timing) cell["seconds_per_instance"] = c.seconds_per_instance;
    cells.push_back(std::move(cell));
  }
  const json doc{{"scenario", r.scenario}, {"stage", r.stage}, {"method", r.method},
                 {"timing", r.timing},     {"cells", std::move(cells)}};
  return doc.dump(2) + "\n";
}

}  // namespace

ReportFormat parse_format(std::string_view name) {
  if (name == "csv") return ReportFormat::Csv;
  if (name == "json") return ReportFormat::Json;
  if (name == "table") return ReportFormat::Table;
  throw Error(Errc::UnknownFormat, "unknown report format '" + std::string(name) + "' (expected csv, json or table)");
}

std::string report_format(const RecallReport& r, ReportFormat fmt) {
  switch (fmt) {
    case ReportFormat::Csv:
      return to_csv(r);
    case ReportFormat::Json:
      return to_json(r);
    case ReportFormat::Table:
      return to_table(r);
  }
  throw Error(Errc::UnknownFormat, "unknown report format");
}

std::string report_format(const RecallReport& r, std::string_view fmt) { return report_format(r, parse_format(fmt)); }

RecallReport parse_report_json(std::string_view text) {
  try {
    const json doc = json::parse(text);
    RecallReport r;
    r.scenario = doc.at("scenario").get<std::string>();
    r.stage = doc.at("stage").get<std::string>();
    r.method = doc.at("method").get<std::string>();
    r.timing = doc.at("timing").get<bool>();
    for (const auto& c : doc.at("cells")) {
      RecallCell cell;
      cell.max_angle = c.at("max_angle").get<double>();
      cell.instances = c.at("instances").get<Index>();
      cell.recall = c.at("recall").get<double>();
      cell.median_rot_deg = c.at("median_rot_deg").get<double>();
      cell.median_trans = c.at("median_trans").get<double>();
      if (c.contains("seconds_per_instance")) cell.seconds_per_instance = c.at("seconds_per_instance").get<double>();
      r.cells.push_back(cell);
    }
    return r;
  } catch (const json::exception& e) {
    throw Error(Errc::ConfigInvalid, std::string("malformed report json: ") + e.what());
  }
}

}  // namespace eqreg
