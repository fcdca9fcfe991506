#include "clens/routing.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <stdexcept>

namespace clens {

using nlohmann::json;

json RoutingReport::to_json() const {
  auto head_json = [](const HeadDelta& h) {
    return json{{"layer", h.layer},
                {"head", h.head},
                {"baseline", h.baseline},
                {"steered", h.steered},
                {"delta", h.delta}};
  };
  json heads = json::array(), top10 = json::array();
  for (const HeadDelta& h : deltas) heads.push_back(head_json(h));
  for (const HeadDelta& h : top) top10.push_back(head_json(h));
  return json{{"planning_site", planning_site},
              {"query_position", query_position},
              {"heads", heads},
              {"top10", top10},
              {"total_shift", total_shift}};
}

RoutingReport routing_analysis(const ForwardTrace& baseline, const ForwardTrace& steered,
                               int planning_site, int top_k) {
  if (!baseline.captured.attention || !steered.captured.attention)
    throw std::runtime_error("routing_analysis: attention was not captured on both traces");
  if (baseline.n_positions != steered.n_positions)
    throw std::runtime_error("routing_analysis: traces have different sequence lengths");
  if (baseline.attention.size() != steered.attention.size())
    throw std::runtime_error("routing_analysis: traces have different layer counts");
  int query = baseline.n_positions - 1;
  if (planning_site < 0 || planning_site > query)
    throw std::runtime_error("routing_analysis: planning site out of range");

  RoutingReport report;
  report.planning_site = planning_site;
  report.query_position = query;
  for (size_t l = 0; l < baseline.attention.size(); ++l) {
    const auto& base_layer = baseline.attention[l];
    const auto& steer_layer = steered.attention[l];
    if (base_layer.size() != steer_layer.size())
      throw std::runtime_error("routing_analysis: head count mismatch at layer " + std::to_string(l));
    for (size_t h = 0; h < base_layer.size(); ++h) {
      HeadDelta d;
      d.layer = int(l);
      d.head = int(h);
      d.baseline = double(base_layer[h](query, planning_site));
      d.steered = double(steer_layer[h](query, planning_site));
      d.delta = d.steered - d.baseline;
      report.total_shift += std::abs(d.delta);
      report.deltas.push_back(d);
    }
  }
  report.top = report.deltas;
  std::sort(report.top.begin(), report.top.end(), [](const HeadDelta& a, const HeadDelta& b) {
    double aa = std::abs(a.delta), ab = std::abs(b.delta);
    if (aa != ab) return aa > ab;
    if (a.layer != b.layer) return a.layer < b.layer;
    return a.head < b.head;
  });
  if (int(report.top.size()) > top_k) report.top.resize(size_t(top_k));
  return report;
}

double suppress_amplification(const RoutingReport& inject_only, const RoutingReport& full) {
  return full.total_shift / std::max(inject_only.total_shift, 1e-12);
}

std::vector<RecurringHead> recurring_heads(std::span<const RoutingReport> reports, int top_n,
                                           int min_prompts) {
  if (reports.size() < 2) throw std::runtime_error("recurring_heads: need at least two reports");
  struct Acc {
    int count = 0;
    double abs_sum = 0.0;
  };
  std::map<HeadKey, Acc> acc;
  for (const RoutingReport& r : reports) {
    int n = std::min<int>(top_n, int(r.top.size()));
    for (int i = 0; i < n; ++i) {
      const HeadDelta& h = r.top[size_t(i)];
      Acc& a = acc[HeadKey{h.layer, h.head}];
      a.count += 1;
      a.abs_sum += std::abs(h.delta);
    }
  }
  std::vector<RecurringHead> out;
  for (const auto& [key, a] : acc) {
    if (a.count < min_prompts) continue;
    out.push_back({key, a.count, a.abs_sum / a.count});
  }
  std::sort(out.begin(), out.end(), [](const RecurringHead& a, const RecurringHead& b) {
    if (a.appearances != b.appearances) return a.appearances > b.appearances;
    if (a.mean_abs_delta != b.mean_abs_delta) return a.mean_abs_delta > b.mean_abs_delta;
    return a.head < b.head;
  });
  return out;
}

json OverlapReport::to_json() const {
  auto keys = [](const std::vector<HeadKey>& v) {
    json arr = json::array();
    for (const HeadKey& k : v)
      arr.push_back("L" + std::to_string(k.layer) + ":H" + std::to_string(k.head));
    return arr;
  };
  return json{{"recurring_planning_heads", keys(recurring_planning_heads)},
              {"task_b_top10", keys(task_b_top10)},
              {"intersection", keys(intersection)},
              {"mean_layer_planning", mean_layer_planning},
              {"mean_layer_task_b", mean_layer_task_b},
              {"depth_planning", depth_planning},
              {"depth_task_b", depth_task_b}};
}

OverlapReport cross_task_overlap(std::span<const RoutingReport> planning_reports,
                                 std::span<const HeadKey> task_b_top10, int n_layers, int n_heads,
                                 int top_n, int min_prompts) {
  OverlapReport out;
  for (const RecurringHead& r : recurring_heads(planning_reports, top_n, min_prompts))
    out.recurring_planning_heads.push_back(r.head);
  out.task_b_top10.assign(task_b_top10.begin(), task_b_top10.end());

  auto check_geometry = [&](const HeadKey& k) {
    if (k.layer < 0 || k.layer >= n_layers || k.head < 0 || k.head >= n_heads)
      throw std::runtime_error("cross_task_overlap: head L" + std::to_string(k.layer) + ":H" +
                               std::to_string(k.head) + " does not fit the model geometry");
  };
  for (const HeadKey& k : out.recurring_planning_heads) check_geometry(k);
  for (const HeadKey& k : out.task_b_top10) check_geometry(k);

  std::set<HeadKey> b_set(out.task_b_top10.begin(), out.task_b_top10.end());
  for (const HeadKey& k : out.recurring_planning_heads) {
    if (b_set.count(k)) out.intersection.push_back(k);
  }
  auto mean_layer = [](const std::vector<HeadKey>& v) {
    if (v.empty()) return 0.0;
    double sum = 0.0;
    for (const HeadKey& k : v) sum += k.layer;
    return sum / double(v.size());
  };
  out.mean_layer_planning = mean_layer(out.recurring_planning_heads);
  out.mean_layer_task_b = mean_layer(out.task_b_top10);
  double denom = std::max(1, n_layers - 1);
  out.depth_planning = out.mean_layer_planning / denom;
  out.depth_task_b = out.mean_layer_task_b / denom;
  return out;
}

}  // namespace clens
