#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "clens/clt.hpp"
#include "clens/protocols.hpp"

namespace clens {

enum class SteeringMethod {
  max_act_probe,
  decoder_dot,
  decoder_cosine,
  cosine_filtered_inject,
  multi_layer_clamp,
  contrastive_vector,
  activation_patch,
};

SteeringMethod parse_steering_method(const std::string& name);
const char* steering_method_name(SteeringMethod m);

struct SteeringConfig {
  std::vector<int> prompt;
  std::string target_word;
  int site = -1;  // -1: last prompt position
  std::vector<double> strengths;
  // alternative probe prompts; sample i uses prompts[i % size] when present
  std::vector<std::vector<int>> sample_prompts;
  int samples = 1;
  // method-specific knobs
  double cosine_filter = 0.3;      // methods 3/4
  int clamp_span = 4;              // method 4: consecutive layers written
  int contrast_layer = 1;          // method 5 read/write layer
  std::vector<std::vector<int>> prompts_a, prompts_b;  // method 5 contrast sets
  std::vector<int> donor_prompt;   // method 6 donor
  int patch_layer = 1;             // method 6 patched layer
};

struct SteeringOutcome {
  SteeringMethod method;
  double strength = 0.0;
  int sample = 0;
  bool target_hit = false;  // steered top-1 == target
  double p_target = 0.0;
  double logit_gap = 0.0;      // natural top-1 logit - target logit, steered run
  double logit_removal = 0.0;  // baseline natural-top logit - steered natural-top logit

  nlohmann::json to_json() const;
};

std::vector<SteeringOutcome> run_baseline_method(SteeringMethod method, const SteeringConfig& cfg,
                                                 const Model& model, const Clt* clt);

struct ContrastiveVector {
  int layer = 0;
  Eigen::VectorXf direction;  // unit length
  double norm = 0.0;          // L2 norm of the raw mean difference
};

// Mean residual_post difference at the last position between two prompt sets.
ContrastiveVector contrastive_vector(std::span<const std::vector<int>> prompts_pos,
                                     std::span<const std::vector<int>> prompts_neg, int layer,
                                     const Model& model);

struct AbsorptionPoint {
  double scale = 0.0;         // injected L2 magnitude
  double remaining = 0.0;     // deviation norm k layers downstream
  double absorption = 0.0;    // 1 - remaining / scale
  bool skipped = false;       // zero-scale points are undefined and skipped
};

struct AbsorptionReport {
  std::vector<AbsorptionPoint> points;
  std::optional<double> threshold_estimate;  // smallest scale with absorption < 0.5
  int inject_layer = 0;
  int measure_layer = 0;

  nlohmann::json to_json() const;
};

AbsorptionReport attractor_absorption(const ContrastiveVector& direction,
                                      std::span<const double> scales, const Model& model,
                                      const std::vector<int>& prompt, int k_layers = 2,
                                      int position = -1);

// Max pairwise KL between the next-token distributions of prompt variants.
double within_group_kl(std::span<const std::vector<int>> prompts, const Model& model);

}  // namespace clens
