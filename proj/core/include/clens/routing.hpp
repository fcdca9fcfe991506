#pragma once

#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "clens/forward.hpp"

namespace clens {

struct HeadDelta {
  int layer = 0;
  int head = 0;
  double baseline = 0.0;
  double steered = 0.0;
  double delta = 0.0;  // steered - baseline
};

struct RoutingReport {
  int planning_site = 0;
  int query_position = 0;
  std::vector<HeadDelta> deltas;  // every (layer, head), unranked
  std::vector<HeadDelta> top;     // ranked by |delta| desc, then layer, then head
  double total_shift = 0.0;       // sum of |delta| over all heads

  nlohmann::json to_json() const;
};

// Per-head attention change on the output -> planning-site edge: the single
// post-softmax weight attention[last query position][planning site].
RoutingReport routing_analysis(const ForwardTrace& baseline, const ForwardTrace& steered,
                               int planning_site, int top_k = 10);

// total_shift(full) / max(total_shift(inject_only), 1e-12)
double suppress_amplification(const RoutingReport& inject_only, const RoutingReport& full);

struct HeadKey {
  int layer = 0;
  int head = 0;
  auto operator<=>(const HeadKey&) const = default;
};

struct RecurringHead {
  HeadKey head;
  int appearances = 0;
  double mean_abs_delta = 0.0;
};

// Heads appearing in the top-n of at least min_prompts reports.
std::vector<RecurringHead> recurring_heads(std::span<const RoutingReport> reports, int top_n = 10,
                                           int min_prompts = 2);

struct OverlapReport {
  std::vector<HeadKey> recurring_planning_heads;
  std::vector<HeadKey> task_b_top10;
  std::vector<HeadKey> intersection;
  double mean_layer_planning = 0.0;
  double mean_layer_task_b = 0.0;
  double depth_planning = 0.0;  // mean layer / (n_layers - 1)
  double depth_task_b = 0.0;

  nlohmann::json to_json() const;
};

OverlapReport cross_task_overlap(std::span<const RoutingReport> planning_reports,
                                 std::span<const HeadKey> task_b_top10, int n_layers,
                                 int n_heads, int top_n = 10, int min_prompts = 2);

}  // namespace clens
