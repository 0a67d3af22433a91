#include <algorithm>
#include <cmath>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>

#include <spdlog/fmt/fmt.h>

#include "debias/errors.hpp"
#include "debias/harness.hpp"

namespace debias::harness {

using nlohmann::json;

namespace {

std::string num(std::optional<double> v) { return v ? fmt::format("{:.6f}", *v) : "NA"; }

json opt_json(std::optional<double> v) { return v ? json(*v) : json(nullptr); }

json mean_std(const std::vector<double>& v) {
  if (v.empty()) return {{"mean", nullptr}, {"std", nullptr}, {"n", 0}};
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  s = v.size() > 1 ? std::sqrt(s / static_cast<double>(v.size() - 1)) : 0.0;
  return {{"mean", m}, {"std", s}, {"n", v.size()}};
}

}  // namespace

void write_csv(const std::vector<RunResult>& runs, int num_groups, std::ostream& os) {
  os << "method,seed,order,step,task,f1,bacc";
  for (int g = 0; g < num_groups; ++g) os << ",acc_g" << g;
  os << ",dpr,eod,tsel_acc,probe_auc\n";
  for (const auto& run : runs) {
    for (const auto& r : run.rows) {
      const auto& m = r.metrics;
      os << method_name(r.method) << ',' << r.seed << ',' << r.order << ',' << r.step << ','
         << (r.is_average ? std::string("avg") : std::to_string(m.task_id)) << ','
         << num(m.macro_f1) << ',' << num(m.balanced_acc);
      for (int g = 0; g < num_groups; ++g) {
        os << ',' << num(g < static_cast<int>(m.per_group_acc.size()) ? m.per_group_acc[g] : std::nullopt);
      }
      os << ',' << num(m.dpr) << ',' << num(m.eod) << ',' << num(m.task_selection_acc) << ','
         << num(m.probe_auc) << '\n';
    }
  }
}

json summarize(const std::vector<RunResult>& runs, int num_groups) {
  std::map<std::string, std::vector<const RunResult*>> by_method;
  for (const auto& r : runs) by_method[method_name(r.method)].push_back(&r);
  json out = json::object();
  out["dpr_rule"] = metrics::kDprRule;
  out["eod_rule"] = metrics::kEodRule;
  out["batch_rule"] = infer::kBatchRule;
  json methods = json::object();
  for (const auto& [name, rs] : by_method) {
    std::map<std::string, std::vector<double>> cols;
    json per_run = json::array();
    for (const auto* r : rs) {
      const auto& a = r->final_report.averaged;
      auto add = [&cols](const std::string& k, std::optional<double> v) {
        if (v) cols[k].push_back(*v);
      };
      add("f1", a.macro_f1);
      add("bacc", a.balanced_acc);
      for (int g = 0; g < num_groups; ++g) {
        add("acc_g" + std::to_string(g),
            g < static_cast<int>(a.per_group_acc.size()) ? a.per_group_acc[g] : std::nullopt);
      }
      add("dpr", a.dpr);
      add("eod", a.eod);
      add("tsel_acc", a.task_selection_acc);
      add("probe_auc", r->probe_final);
      add("probe_auc_biased", r->probe_biased);
      per_run.push_back({{"seed", r->seed},
                         {"order", r->order},
                         {"bacc", a.balanced_acc},
                         {"f1", a.macro_f1},
                         {"dpr", opt_json(a.dpr)},
                         {"eod", opt_json(a.eod)},
                         {"tsel_acc", opt_json(a.task_selection_acc)},
                         {"probe_auc", opt_json(r->probe_final)},
                         {"probe_auc_biased", opt_json(r->probe_biased)}});
    }
    json m = json::object();
    for (const auto& [k, v] : cols) m[k] = mean_std(v);
    methods[name] = {{"final", m}, {"runs", per_run}};
  }
  out["methods"] = methods;
  return out;
}

CsvTable read_csv(std::istream& is) {
  CsvTable t;
  std::string line;
  auto split = [](const std::string& s) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream ss(s);
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    if (!s.empty() && s.back() == ',') out.emplace_back();
    return out;
  };
  if (!std::getline(is, line)) throw InvalidInput("empty CSV");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  t.header = split(line);
  int n = 1;
  while (std::getline(is, line)) {
    ++n;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto row = split(line);
    if (row.size() != t.header.size()) {
      throw InvalidInput("CSV line " + std::to_string(n) + " has " + std::to_string(row.size()) +
                         " fields, expected " + std::to_string(t.header.size()));
    }
    t.rows.push_back(std::move(row));
  }
  return t;
}

std::string render_svg(const CsvTable& table, const std::string& column, const std::string& title) {
  auto col = [&table](const std::string& name) {
    auto it = std::find(table.header.begin(), table.header.end(), name);
    if (it == table.header.end()) throw InvalidInput("CSV has no column '" + name + "'");
    return static_cast<std::size_t>(it - table.header.begin());
  };
  const auto c_method = col("method"), c_seed = col("seed"), c_order = col("order"),
             c_step = col("step"), c_task = col("task"), c_val = col(column);

  std::map<std::string, std::vector<std::pair<double, double>>> series;
  double max_step = 1.0;
  for (const auto& r : table.rows) {
    if (r[c_task] != "avg" || r[c_val] == "NA") continue;
    const double step = std::stod(r[c_step]);
    max_step = std::max(max_step, step);
    series[r[c_method] + " s" + r[c_seed] + " o" + r[c_order]].emplace_back(step, std::stod(r[c_val]));
  }

  constexpr double kW = 640, kH = 400, kL = 60, kR = 200, kT = 40, kB = 50;
  const double pw = kW - kL - kR, ph = kH - kT - kB;
  auto x_of = [&](double s) { return kL + (max_step > 1 ? (s - 1) / (max_step - 1) : 0.5) * pw; };
  auto y_of = [&](double v) { return kT + (1.0 - std::clamp(v, 0.0, 1.0)) * ph; };

  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                  "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  std::ostringstream os;
  os << fmt::format(R"(<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}">)", kW, kH) << '\n';
  os << fmt::format(R"(<text x="{}" y="24" font-family="sans-serif" font-size="16">{}</text>)", kL, title) << '\n';
  os << fmt::format(R"(<line x1="{0}" y1="{1}" x2="{0}" y2="{2}" stroke="black"/>)", kL, kT, kT + ph) << '\n';
  os << fmt::format(R"(<line x1="{0}" y1="{1}" x2="{2}" y2="{1}" stroke="black"/>)", kL, kT + ph, kL + pw) << '\n';
  for (int i = 0; i <= 4; ++i) {
    const double v = i / 4.0;
    os << fmt::format(R"(<text x="{}" y="{:.1f}" font-family="sans-serif" font-size="11" text-anchor="end">{:.2f}</text>)",
                      kL - 6, y_of(v) + 4, v) << '\n';
  }
  for (int s = 1; s <= static_cast<int>(max_step); ++s) {
    os << fmt::format(R"(<text x="{:.1f}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">{}</text>)",
                      x_of(s), kT + ph + 18, s) << '\n';
  }
  os << fmt::format(R"(<text x="{:.1f}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">tasks seen</text>)",
                    kL + pw / 2, kH - 10) << '\n';
  int i = 0;
  for (auto& [name, pts] : series) {
    std::sort(pts.begin(), pts.end());
    const char* colour = palette[i % 10];
    os << R"(<polyline fill="none" stroke=")" << colour << R"(" stroke-width="1.5" points=")";
    for (const auto& [s, v] : pts) os << fmt::format("{:.1f},{:.1f} ", x_of(s), y_of(v));
    os << "\"/>\n";
    os << fmt::format(R"(<text x="{}" y="{}" font-family="sans-serif" font-size="11" fill="{}">{}</text>)",
                      kL + pw + 12, kT + 14 * i + 10, colour, name) << '\n';
    ++i;
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace debias::harness
