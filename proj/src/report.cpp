#include <algorithm>
#include <cstdio>
#include <sstream>

#include <json.hpp>

#include "attrib/harness.hpp"

namespace attrib {

namespace {

using nlohmann::json;

std::string cell(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

struct Row {
  std::string method;
  std::string label;
  std::vector<std::string> cells;
};

// Macro average of the case reports whose group matches (all when empty).
CaseReport group_average(const EvalReport& r, const MetricReport& m, const std::string& group) {
  std::vector<CaseReport> picked;
  for (std::size_t i = 0; i < r.cases.size() && i < m.cases.size(); ++i)
    if (group.empty() || r.cases[i].group == group) picked.push_back(m.cases[i]);
  const auto agg = aggregate(std::move(picked));
  CaseReport out;
  out.recall_at = agg.recall_at;
  out.mean_average_precision = agg.mean_average_precision;
  return out;
}

std::vector<std::string> groups_in_order(const EvalReport& r) {
  std::vector<std::string> groups;
  for (const auto& c : r.cases)
    if (std::find(groups.begin(), groups.end(), c.group) == groups.end()) groups.push_back(c.group);
  return groups;
}

}  // namespace

EmittedReport report_emit(const EvalReport& report) {
  std::vector<Row> rows;
  std::ostringstream records;
  const auto groups = groups_in_order(report);

  auto cells_of = [&](const CaseReport& c) {
    std::vector<std::string> cells;
    for (std::size_t k : report.ks) {
      const auto it = c.recall_at.find(k);
      cells.push_back(it == c.recall_at.end() ? "-" : cell(it->second));
    }
    cells.push_back(cell(c.mean_average_precision));
    return cells;
  };
  auto aggregate_records = [&](const std::string& method, const std::string& group,
                               const CaseReport& c) {
    for (std::size_t k : report.ks) {
      if (!c.recall_at.contains(k)) continue;
      records << json{{"record", "aggregate"}, {"method", method}, {"group", group}, {"K", k},
                      {"recall", c.recall_at.at(k)}, {"ap", c.mean_average_precision}}
                     .dump()
              << '\n';
    }
  };

  for (const auto& method : report.methods) {
    const auto it = report.by_method.find(method);
    if (it == report.by_method.end()) continue;
    const MetricReport& m = it->second;
    for (std::size_t i = 0; i < m.cases.size() && i < report.cases.size(); ++i) {
      const auto& spec = report.cases[i];
      const auto& c = m.cases[i];
      rows.push_back({method, spec.name(), cells_of(c)});
      for (const auto& q : c.per_query) {
        for (const auto& [k, recall] : q.recall_at) {
          records << json{{"record", "query"}, {"method", method}, {"case", spec.name()},
                          {"query_id", q.query_id}, {"K", k}, {"recall", recall},
                          {"ap", q.average_precision}}
                         .dump()
                  << '\n';
        }
      }
      for (std::size_t k : report.ks) {
        if (!c.recall_at.contains(k)) continue;
        records << json{{"record", "case"},       {"method", method},
                        {"case", spec.name()},    {"source", spec.source},
                        {"prompt_type", spec.prompt_type}, {"group", spec.group},
                        {"K", k},                 {"recall", c.recall_at.at(k)},
                        {"ap", c.mean_average_precision}}
                       .dump()
                << '\n';
      }
    }
    if (groups.size() > 1) {
      for (const auto& g : groups) {
        const auto avg = group_average(report, m, g);
        rows.push_back({method, "[" + g + "] average", cells_of(avg)});
        aggregate_records(method, g, avg);
      }
    }
    const auto all = group_average(report, m, "");
    rows.push_back({method, "[all] average", cells_of(all)});
    aggregate_records(method, "all", all);
  }

  std::vector<std::string> header = {"method", "case"};
  for (std::size_t k : report.ks) header.push_back("R@" + std::to_string(k));
  header.push_back("mAP");
  std::vector<std::size_t> width(header.size());
  for (std::size_t i = 0; i < header.size(); ++i) width[i] = header[i].size();
  for (const auto& r : rows) {
    width[0] = std::max(width[0], r.method.size());
    width[1] = std::max(width[1], r.label.size());
    for (std::size_t i = 0; i < r.cells.size(); ++i)
      width[i + 2] = std::max(width[i + 2], r.cells[i].size());
  }
  std::ostringstream table;
  auto emit = [&](const std::vector<std::string>& fields) {
    for (std::size_t i = 0; i < fields.size(); ++i) {
      table << fields[i];
      if (i + 1 < fields.size()) table << std::string(width[i] - fields[i].size() + 2, ' ');
    }
    table << '\n';
  };
  emit(header);
  std::size_t total = 0;
  for (std::size_t w : width) total += w + 2;
  table << std::string(total - 2, '-') << '\n';
  std::string last_method;
  for (const auto& r : rows) {
    std::vector<std::string> fields = {r.method == last_method ? "" : r.method, r.label};
    fields.insert(fields.end(), r.cells.begin(), r.cells.end());
    emit(fields);
    last_method = r.method;
  }
  return {table.str(), records.str()};
}

EvalReport parse_report_records(const std::string& records) {
  EvalReport out;
  std::istringstream in(records);
  std::string line;
  std::map<std::string, std::vector<std::string>> case_order;  // method -> case names
  std::map<std::pair<std::string, std::string>, CaseReport> cases;
  std::map<std::pair<std::string, std::string>, std::map<std::string, QueryMetrics>> queries;
  std::map<std::pair<std::string, std::string>, std::vector<std::string>> query_order;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw FormatError("report line " + std::to_string(n) + ": " + e.what());
    }
    try {
      const std::string kind = j.at("record");
      if (kind == "aggregate") continue;
      const std::string method = j.at("method");
      const std::string name = j.at("case");
      const std::size_t k = j.at("K");
      if (std::find(out.methods.begin(), out.methods.end(), method) == out.methods.end())
        out.methods.push_back(method);
      if (std::find(out.ks.begin(), out.ks.end(), k) == out.ks.end()) out.ks.push_back(k);
      const auto key = std::make_pair(method, name);
      if (kind == "case") {
        auto& order = case_order[method];
        if (std::find(order.begin(), order.end(), name) == order.end()) order.push_back(name);
        auto& c = cases[key];
        c.name = name;
        c.method = method;
        c.recall_at[k] = j.at("recall");
        c.mean_average_precision = j.at("ap");
        const bool known = std::any_of(out.cases.begin(), out.cases.end(),
                                       [&](const CaseSpec& s) { return s.name() == name; });
        if (!known) out.cases.push_back({j.at("source"), j.at("prompt_type"), j.at("group")});
      } else if (kind == "query") {
        const std::string qid = j.at("query_id");
        auto& q = queries[key][qid];
        if (q.query_id.empty()) query_order[key].push_back(qid);
        q.query_id = qid;
        q.recall_at[k] = j.at("recall");
        q.average_precision = j.at("ap");
      } else {
        throw FormatError("report line " + std::to_string(n) + ": unknown record '" + kind + "'");
      }
    } catch (const json::exception& e) {
      throw FormatError("report line " + std::to_string(n) + ": " + e.what());
    }
  }
  std::sort(out.ks.begin(), out.ks.end());
  for (const auto& method : out.methods) {
    std::vector<CaseReport> list;
    for (const auto& spec : out.cases) {
      const auto key = std::make_pair(method, spec.name());
      auto it = cases.find(key);
      if (it == cases.end())
        throw FormatError("report lacks case '" + spec.name() + "' for method '" + method + "'");
      CaseReport c = it->second;
      for (const auto& qid : query_order[key]) c.per_query.push_back(queries[key][qid]);
      list.push_back(std::move(c));
    }
    out.by_method[method] = aggregate(std::move(list));
  }
  return out;
}

}  // namespace attrib
