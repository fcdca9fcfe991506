#pragma once

#include <cstdint>
#include <string>

#include <nlohmann/json.hpp>

#include "clens/clt.hpp"
#include "clens/model.hpp"

namespace clens {

// Small transformers with analytically planted circuits. Every quantitative
// manifest value is produced by the 64-bit oracle at build time; the manifest
// is a cache of oracle output, never hand-entered ground truth.

struct PlantedCircuitSpec {
  int d_model = 64;
  int n_layers = 6;
  uint64_t seed = 0;
  double strength = 10.0;  // canonical suppress+inject strength
  int commitment_layer = 2;            // injected edits land after this layer
  int coincidence_layer = 3;           // gated MLP that registers site+plan
  int routing_layer = 4;               // content-keyed routing heads
  int routing_head = 2;                // designated head for the inject group
  // Overridable negative control: the correction feature gets real late-layer
  // write access (strong decoder rows plus an unembedding read).
  bool late_write_access = false;
};

struct FactFixtureSpec {
  int d_model = 32;
  int n_layers = 6;
  uint64_t seed = 0;
  double contraction = 0.75;     // per-layer deviation shrink inside the basin
  double basin_radius = 4.0;     // raw residual units at the probe position
  double basin_edge_width = 0.07;  // relative width of the bump cutoff
  int copy_layer = 2;            // subject -> last position attention head
  int contraction_layers[2] = {3, 4};
};

struct FixtureBundle {
  Model model;
  std::string clt_path;  // synthetic CLT archive; empty for fixtures without one
  nlohmann::json manifest;             // oracle-computed expected values
  nlohmann::json experiment_defaults;  // canonical configs (sweep, couplets, ...)
  std::map<std::string, std::string> phoneme_dict;  // word -> phoneme string
};

// Plants a rhyme-planning circuit: a transport head copies plan directions
// from rhyme words to the line-final site, a gated MLP registers plan+site
// coincidence, and per-group routing heads carry the registered plan to the
// output token. Includes a synthetic CLT aligned with the planted directions.
FixtureBundle build_planted_model(const PlantedCircuitSpec& spec, const std::string& out_dir);

// Plants linear fact directions with a subject-copy head and a sharp
// contraction basin on a dedicated probe axis.
FixtureBundle build_fact_fixture(const FactFixtureSpec& spec, const std::string& out_dir);

// Bundle archives live side by side: <stem>.model.nt and <stem>.clt.nt.
std::string bundle_model_path(const std::string& out_dir, const std::string& stem);
std::string bundle_clt_path(const std::string& out_dir, const std::string& stem);

FixtureBundle load_bundle(const std::string& model_path);

}  // namespace clens
