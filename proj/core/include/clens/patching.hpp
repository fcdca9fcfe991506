#pragma once

#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "clens/forward.hpp"
#include "clens/routing.hpp"

namespace clens {

struct FactPair {
  std::vector<int> prompt, cf_prompt;
  int subject_begin = 0, subject_end = 0;  // [begin, end) in the original prompt
  int cf_subject_begin = 0, cf_subject_end = 0;
  int answer = 0, cf_answer = 0;  // single leading answer tokens
  std::string name;

  static FactPair from_json(const nlohmann::json& j, const Model& model);
  nlohmann::json to_json(const Model& model) const;
};

std::vector<FactPair> parse_fact_pairs(const nlohmann::json& j, const Model& model);

enum class PatchPositions { subject, template_positions };

struct PatchResult {
  int block_start = 0, block_end = 0;
  bool changed = false;     // top-1 differs from the unpatched run
  bool exact_flip = false;  // top-1 equals the counterfactual answer
  double kl = 0.0;          // KL(patched || unpatched) at the last position
  int top_baseline = 0, top_patched = 0;

  nlohmann::json to_json() const;
};

// Keeps pairs where greedy top-1 matches the stated answer on both prompts.
std::vector<FactPair> screen_gold_pairs(std::span<const FactPair> candidates, const Model& model);

// Records donor residuals from the counterfactual forward at each layer of the
// block and writes them (replacement) into the original forward at the mapped
// positions. Spans of unequal length align from their ends.
PatchResult block_patch(const FactPair& pair, int block_start, int block_end,
                        PatchPositions positions, const Model& model);

struct BlockRate {
  int block_start = 0, block_end = 0;
  int changed = 0, total = 0;
  double rate = 0.0;
};

struct BlockGradient {
  std::vector<BlockRate> blocks;              // subject-position patches
  std::vector<PatchResult> subject_results;   // flattened, single source of truth
  double subject_rate = 0.0, template_rate = 0.0;
  double fact_vs_template_ratio = 0.0;

  nlohmann::json to_json() const;
};

BlockGradient block_gradient(std::span<const FactPair> gold, const Model& model,
                             std::span<const std::pair<int, int>> blocks);

struct KlSeparation {
  std::optional<double> mean_changed, mean_unchanged;
  std::optional<double> ratio;

  nlohmann::json to_json() const;
};

KlSeparation kl_separation(std::span<const PatchResult> results);

struct HeadStat {
  HeadKey head;
  double appearance_rate = 0.0;   // fraction of pairs with this head in the top-10
  double negative_fraction = 0.0; // share of negative deltas among appearances
  double mean_abs_delta = 0.0;
};

struct FactualRouting {
  std::vector<HeadStat> heads;              // at the probe block, ranked by appearance
  std::vector<double> per_block_shift;      // mean total routing shift per block
  std::vector<std::pair<int, int>> blocks;
  int probe_block = 0;

  nlohmann::json to_json() const;
};

// Attention deltas between the original forward and subject-patched forwards;
// the planning-site edge reads at the last subject position.
FactualRouting factual_routing(std::span<const FactPair> gold, const Model& model,
                               std::span<const std::pair<int, int>> blocks, int top_n = 10,
                               int probe_block = 0);

}  // namespace clens
