#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "clens/clt.hpp"
#include "clens/discovery.hpp"
#include "clens/routing.hpp"
#include "clens/stats.hpp"

namespace clens {

struct SweepConfig {
  std::vector<int> prompt;
  std::vector<FeatureId> suppress_group;
  FeatureId inject_feature;
  double strength = 10.0;
  std::string target_word;
  int planning_site = -1;  // -1: last prompt position
  // layer spans; -1 end means the model's final layer
  int suppress_range_start = -1;  // -1: each feature's home layer
  int suppress_range_end = -1;
  int inject_range_start = -1;
  int inject_range_end = -1;
  // suppression stays at the planning site while the inject position moves;
  // this flag moves it with the injection instead
  bool move_suppression = false;
  // baseline flavor: suppressed-but-uninjected (default) or a clean pass
  bool clean_baseline = false;

  nlohmann::json to_json() const;
};

struct SweepResult {
  std::vector<double> p_by_position;
  double baseline_p = 0.0;
  int peak_position = 0;
  double ratio = 0.0;   // p[planning_site] / max(baseline_p, 1e-30)
  bool localized = false;  // strict argmax at the planning site; ties fail
  int planning_site = 0;
  std::string target_word;

  nlohmann::json to_json() const;
};

SweepResult position_sweep(const SweepConfig& cfg, const Model& model, const Clt& clt);

// Localization fraction with a 95% binomial interval; boundary counts use the
// exact one-sided bound.
BinomialCi localization_rate(std::span<const SweepResult> results);
BinomialCi localization_rate(int localized, int total);

struct StrengthPoint {
  double strength = 0.0;
  double p_target = 0.0;
  double top_head_delta = 0.0;  // |delta| of the strongest head vs the clean pass
  double total_shift = 0.0;
};

// Scales both suppression and injection by each grid value; the zero point is
// the clean pass.
std::vector<StrengthPoint> strength_sweep(const SweepConfig& cfg, std::span<const double> grid,
                                          const Model& model, const Clt& clt);

struct AblationConfig {
  LayerMask mask;
  std::vector<std::vector<int>> couplet_prompts;  // each ends at the line-final position
  int max_tokens_per_line = 8;
  int newline_token = -1;  // -1: resolved from the token table
};

struct AblationResult {
  int rhymed = 0;
  int total = 0;
  double rhyme_rate = 0.0;
  std::vector<bool> per_couplet;
  std::vector<std::string> generated_lines;

  nlohmann::json to_json() const;
};

// Greedy generation with the mask applied at every step; a couplet scores as
// rhymed when the CMU endings of the prompt line's final word and the
// generated line's final word match. Out-of-dictionary words never rhyme.
AblationResult layer_ablation(const AblationConfig& cfg, const Model& model,
                              const PhonemeDict& dict);

struct CorrectionConfig {
  std::vector<int> prompt;
  std::vector<FeatureId> suppress_group;
  FeatureId commit_feature;
  double commit_strength = 10.0;
  int commit_range_start = -1, commit_range_end = -1;
  int suppress_range_start = -1, suppress_range_end = -1;
  FeatureId correct_feature;
  int correct_range_start = 0, correct_range_end = 0;  // must start above the commit home layer
  std::vector<double> strength_grid;                   // ascending, starts at 0
  std::string commit_word, correct_word;
  int position = -1;  // -1: last prompt position
  int key_head_layer = 0, key_head = 0;
  double override_threshold = 0.1;
};

struct CorrectionPoint {
  double strength = 0.0;
  double p_commit = 0.0;
  double p_correct = 0.0;
  double key_head_delta = 0.0;  // vs the clean pass
  double total_shift = 0.0;
};

enum class CorrectionVerdict { irrevocable, overridable, disrupted, ambiguous };
const char* verdict_name(CorrectionVerdict v);

struct CorrectionResult {
  std::vector<CorrectionPoint> points;
  CorrectionVerdict verdict = CorrectionVerdict::ambiguous;

  nlohmann::json to_json() const;
};

CorrectionResult correction_test(const CorrectionConfig& cfg, const Model& model, const Clt& clt);

// P(word): max over the single-token surface variants {word, " word",
// Capitalized, " Capitalized"}; throws if none tokenizes.
double word_probability(const Eigen::VectorXd& dist, const TokenTable& tokens,
                        const std::string& word);

}  // namespace clens
