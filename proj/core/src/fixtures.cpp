#include "clens/fixtures.hpp"

#include <cmath>
#include <filesystem>
#include <random>
#include <stdexcept>

#include "clens/oracle.hpp"
#include "clens/tensor_file.hpp"

namespace clens {

using nlohmann::json;

namespace {

// Deterministic gaussian independent of libstdc++ distribution internals,
// so identical seeds give bit-identical bundles.
class DetRng {
 public:
  explicit DetRng(uint64_t seed) : gen_(seed) {}
  double uniform() { return double(gen_() >> 11) * (1.0 / 9007199254740992.0); }
  double gauss() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 1e-300);
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * M_PI * u2);
    have_spare_ = true;
    return r * std::cos(2.0 * M_PI * u2);
  }

 private:
  std::mt19937_64 gen_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

Eigen::VectorXf unit_axis(int d, int axis, float mag = 1.0f) {
  Eigen::VectorXf v = Eigen::VectorXf::Zero(d);
  v[axis] = mag;
  return v;
}

Eigen::MatrixXf noise_matrix(DetRng& rng, long rows, long cols, double scale) {
  Eigen::MatrixXf m(rows, cols);
  for (long i = 0; i < rows; ++i)
    for (long j = 0; j < cols; ++j) m(i, j) = float(rng.gauss() * scale);
  return m;
}

std::vector<float> row_major(const Eigen::MatrixXf& m) {
  std::vector<float> v(size_t(m.rows()) * size_t(m.cols()));
  for (long i = 0; i < m.rows(); ++i)
    for (long j = 0; j < m.cols(); ++j) v[size_t(i) * size_t(m.cols()) + size_t(j)] = m(i, j);
  return v;
}

std::vector<double> oracle_distribution(const Model& model, const std::vector<int>& tokens,
                                        const ForwardOptions& opt = {}) {
  return oracle_forward(model, tokens, opt).next_token_distribution();
}

// -------------------------------------------------------------------------
// Planted rhyme-planning circuit.
//
// Axis roles: 0 anchor (every token), 1 site marker (newline), 2 rhyme-word
// marker, 3..5 plan directions per group, 6..8 registered-plan directions,
// 9..11 output directions. A transport head copies plan directions from
// rhyme words onto the line-final newline; a gated MLP at the coincidence
// layer registers plan+site co-occurrence; per-group routing heads key on the
// registered plan and write the group's output direction at the site.
// -------------------------------------------------------------------------

constexpr int kAnchor = 0, kSite = 1, kRhyme = 2;
constexpr int kPlan = 3, kReg = 6, kOut = 9;
constexpr int kPlantedDirections = 12;

constexpr int kNewlineTok = 1;
constexpr int kTheTok = 2;

// group 0: AW1 T, group 1: AW1 N D, group 2: IY1
constexpr int kGroupWords[3][4] = {{20, 21, 22, -1}, {23, 24, 25, 26}, {27, 28, -1, -1}};
constexpr int kGroupOutputTok[3] = {20, 23, 27};  // about, around, tree

std::vector<std::string> planted_surfaces() {
  std::vector<std::string> s = {
      "<bos>", "\n",   "the",  "a",      "was",   "and",   "in",    "she",
      "he",    "it",   "night", "dark",  "cold",  "wind",  "light", "went",
      "walked", "stood", "filled", "song", "about", "out",  "shout", "around",
      "found", "round", "ground", "tree", "free"};
  while (s.size() < 64) s.push_back("w" + std::to_string(s.size()));
  return s;
}

int group_of_token(int tok) {
  for (int g = 0; g < 3; ++g)
    for (int w : kGroupWords[g])
      if (w == tok) return g;
  return -1;
}

std::map<std::string, std::string> planted_pronunciations() {
  return {
      {"ABOUT", "AH0 B AW1 T"},   {"OUT", "AW1 T"},         {"SHOUT", "SH AW1 T"},
      {"AROUND", "ER0 AW1 N D"},  {"FOUND", "F AW1 N D"},   {"ROUND", "R AW1 N D"},
      {"GROUND", "G R AW1 N D"},  {"TREE", "T R IY1"},      {"FREE", "F R IY1"},
      {"THE", "DH AH0"},          {"NIGHT", "N AY1 T"},     {"DARK", "D AA1 R K"},
      {"COLD", "K OW1 L D"},      {"WIND", "W IH1 N D"},    {"LIGHT", "L AY1 T"},
      {"SONG", "S AO1 NG"},       {"WAS", "W AA1 Z"},       {"AND", "AH0 N D"},
      {"SHE", "SH IY1"},          {"HE", "HH IY1"},         {"IN", "IH0 N"},
      {"IT", "IH1 T"},            {"WENT", "W EH1 N T"},    {"WALKED", "W AO1 K T"},
      {"STOOD", "S T UH1 D"},     {"FILLED", "F IH1 L D"},  {"A", "AH0"}};
}

struct PlantedConstants {
  double anchor_mag = 2.0, site_mag = 6.0, rhyme_mag = 2.0, plan_mag = 2.0;
  double embed_noise = 0.02;
  double weight_noise = 0.004;
  // transport head gains (layer 0 carries 30% of the plan, layer 2 the rest)
  double transport_q = 1.0, transport_k = 2.0;
  double transport_o0 = 0.39, transport_o2 = 0.91;
  // coincidence MLP
  double gate_read = 1.0;
  double reg_scale[3] = {0.58, 0.85, 0.85};
  // routing heads (per group: A uses head 1, B uses head 2)
  double route_q[2] = {0.7, 0.9};
  double route_k[2] = {0.7, 0.9};
  double route_v[2] = {0.7, 0.9};
  double route_o[2] = {3.23, 2.68};
  // unembedding reads
  double w_the = 3.3, w_out = 3.0, w_newline = 4.5;
};

struct PlantedClt {
  // decoder row magnitude per (feature group, target layer)
  // group A home L1, group B home L2, group C home L3
  std::map<std::pair<int, int>, double> rows;
};

void add_planted_clt(TensorFileWriter& writer, const PlantedCircuitSpec& spec, int d_model,
                     DetRng& rng) {
  const int features = 8;
  const int n_layers = spec.n_layers;
  CltSpec clt_spec;
  clt_spec.features_per_layer = features;
  clt_spec.n_layers = n_layers;
  clt_spec.read_point = ReadPoint::post_attention_pre_mlp;
  clt_spec.nonlinearity = CltNonlinearity::identity;
  writer.set_metadata("clt_config", clt_spec.to_json().dump());

  struct Planted {
    int home, index, axis;
    std::map<int, double> row_mags;  // target layer -> magnitude
  };
  double c_mag = spec.late_write_access ? 1.0 : 0.1;
  std::vector<Planted> planted = {
      {1, 0, kPlan + 0, {{1, 0.3}, {2, 0.3}, {3, 0.02}, {4, 0.02}, {5, 0.02}}},
      {2, 1, kPlan + 1, {{2, 0.25}, {3, 0.008}, {4, 0.008}, {5, 0.008}}},
      {3, 2, kPlan + 2, {{3, c_mag}, {4, c_mag}, {5, c_mag}}},
  };

  for (int layer = 0; layer < n_layers; ++layer) {
    Eigen::MatrixXf encoder = noise_matrix(rng, features, d_model, 0.01);
    std::vector<Eigen::MatrixXf> decoders;
    for (int target = layer; target < n_layers; ++target)
      decoders.push_back(noise_matrix(rng, features, d_model, 0.002));
    for (const Planted& p : planted) {
      if (p.home != layer) continue;
      encoder.row(p.index) = unit_axis(d_model, p.axis).transpose();
      for (int target = layer; target < n_layers; ++target) {
        auto it = p.row_mags.find(target);
        double mag = it == p.row_mags.end() ? 0.0 : it->second;
        decoders[size_t(target - layer)].row(p.index) =
            unit_axis(d_model, p.axis, float(mag)).transpose();
      }
    }
    std::string prefix = "clt.layers." + std::to_string(layer) + ".";
    writer.add(prefix + "encoder.weight",
               HostTensor::from_f32({features, d_model}, row_major(encoder)));
    for (int target = layer; target < n_layers; ++target)
      writer.add(prefix + "decoder." + std::to_string(target) + ".weight",
                 HostTensor::from_f32({features, d_model},
                                      row_major(decoders[size_t(target - layer)])));
  }
}

LayerWeights noise_layer(DetRng& rng, const ModelSpec& spec, double scale) {
  LayerWeights w;
  long qd = long(spec.n_heads) * spec.d_head;
  w.wq = noise_matrix(rng, qd, spec.d_model, scale);
  w.wk = noise_matrix(rng, qd, spec.d_model, scale);
  w.wv = noise_matrix(rng, qd, spec.d_model, scale);
  w.wo = noise_matrix(rng, spec.d_model, qd, scale);
  w.attn_norm = Eigen::VectorXf::Ones(spec.d_model);
  w.mlp_norm = Eigen::VectorXf::Ones(spec.d_model);
  w.w_up = noise_matrix(rng, spec.d_ff, spec.d_model, scale);
  w.w_down = noise_matrix(rng, spec.d_model, spec.d_ff, scale);
  if (is_gated(spec.activation)) w.w_gate = noise_matrix(rng, spec.d_ff, spec.d_model, scale);
  return w;
}

std::vector<int> encode_text(const TokenTable& table, const std::string& text) {
  return table.encode(text);
}

}  // namespace

std::string bundle_model_path(const std::string& out_dir, const std::string& stem) {
  return (std::filesystem::path(out_dir) / (stem + ".model.nt")).string();
}

std::string bundle_clt_path(const std::string& out_dir, const std::string& stem) {
  return (std::filesystem::path(out_dir) / (stem + ".clt.nt")).string();
}

FixtureBundle build_planted_model(const PlantedCircuitSpec& spec, const std::string& out_dir) {
  if (spec.d_model < 4 * kPlantedDirections)
    throw std::runtime_error("planted fixture: infeasible geometry, d_model must be >= " +
                             std::to_string(4 * kPlantedDirections) +
                             " to hold the planted orthogonal directions");
  if (!(spec.commitment_layer < spec.routing_layer && spec.routing_layer < spec.n_layers))
    throw std::runtime_error("planted fixture: need commitment_layer < routing_layer < n_layers");
  if (spec.coincidence_layer <= spec.commitment_layer ||
      spec.coincidence_layer >= spec.routing_layer)
    throw std::runtime_error("planted fixture: coincidence layer must sit between commitment and routing");
  if (spec.n_layers < 6)
    throw std::runtime_error("planted fixture: need at least 6 layers");

  PlantedConstants c;
  DetRng rng(spec.seed);

  Model m;
  m.spec.n_layers = spec.n_layers;
  m.spec.n_heads = 4;
  m.spec.n_kv_heads = 4;
  m.spec.d_model = spec.d_model;
  m.spec.d_head = spec.d_model / 4;
  m.spec.vocab_size = 64;
  m.spec.d_ff = 16;
  m.spec.activation = Activation::relu_glu;
  m.spec.rope = false;
  m.tokens.surfaces = planted_surfaces();

  const int d = spec.d_model;
  const int dh = m.spec.d_head;

  // embeddings
  m.embedding = noise_matrix(rng, 64, d, c.embed_noise);
  m.embedding.block(0, 0, 64, kPlantedDirections).setZero();  // planted axes stay exact
  for (int tok = 0; tok < 64; ++tok) {
    m.embedding(tok, kAnchor) = float(c.anchor_mag);
    int g = group_of_token(tok);
    if (g >= 0) {
      m.embedding(tok, kRhyme) = float(c.rhyme_mag);
      m.embedding(tok, kPlan + g) = float(c.plan_mag);
    }
  }
  m.embedding(kNewlineTok, kSite) = float(c.site_mag);

  // layers default to faint random weights
  for (int l = 0; l < spec.n_layers; ++l) m.layers.push_back(noise_layer(rng, m.spec, c.weight_noise));

  // transport heads (head 0) at layers 0 and commitment_layer
  auto plant_transport = [&](int layer, double o_scale) {
    LayerWeights& w = m.layers[size_t(layer)];
    w.wq.row(0) = unit_axis(d, kSite, float(c.transport_q)).transpose();
    w.wk.row(0) = unit_axis(d, kRhyme, float(c.transport_k)).transpose();
    for (int g = 0; g < 3; ++g) {
      w.wv.row(1 + g) = unit_axis(d, kPlan + g).transpose();
      w.wo.col(1 + g) = unit_axis(d, kPlan + g, float(o_scale));
    }
  };
  plant_transport(0, c.transport_o0);
  plant_transport(spec.commitment_layer, c.transport_o2);

  // coincidence MLP: per group, gate reads the site marker, up reads the plan
  // direction, down writes the registered direction
  {
    LayerWeights& w = m.layers[size_t(spec.coincidence_layer)];
    w.w_gate.setZero();
    w.w_up.setZero();
    w.w_down.setZero();
    for (int g = 0; g < 3; ++g) {
      w.w_gate.row(g) = unit_axis(d, kSite, float(c.gate_read)).transpose();
      w.w_up.row(g) = unit_axis(d, kPlan + g).transpose();
      w.w_down.col(g) = unit_axis(d, kReg + g, float(c.reg_scale[g]));
    }
  }

  // routing heads: head 1 keys on the natural group's registered plan, the
  // designated head keys on the inject group's
  {
    LayerWeights& w = m.layers[size_t(spec.routing_layer)];
    int heads[2] = {1, spec.routing_head};
    if (heads[1] == heads[0]) throw std::runtime_error("planted fixture: routing head must not be head 1");
    for (int i = 0; i < 2; ++i) {
      int h = heads[i];
      int g = i;  // group A -> head 1, group B -> designated head
      w.wq.row(long(h) * dh) = unit_axis(d, kSite, float(c.route_q[i])).transpose();
      w.wk.row(long(h) * dh) = unit_axis(d, kReg + g, float(c.route_k[i])).transpose();
      w.wv.row(long(h) * dh + 1) = unit_axis(d, kReg + g, float(c.route_v[i])).transpose();
      w.wo.col(long(h) * dh + 1) = unit_axis(d, kOut + g, float(c.route_o[i]));
    }
  }

  // unembedding
  m.unembedding = noise_matrix(rng, 64, d, c.embed_noise);
  m.unembedding.block(0, 0, 64, kPlantedDirections).setZero();
  m.unembedding.row(kTheTok) += unit_axis(d, kAnchor, float(c.w_the)).transpose();
  m.unembedding.row(kNewlineTok) += unit_axis(d, kRhyme, float(c.w_newline)).transpose();
  for (int g = 0; g < 3; ++g)
    m.unembedding.row(kGroupOutputTok[g]) += unit_axis(d, kOut + g, float(c.w_out)).transpose();
  if (spec.late_write_access)
    m.unembedding.row(kGroupOutputTok[2]) += unit_axis(d, kPlan + 2, float(c.w_out)).transpose();
  m.final_norm = Eigen::VectorXf::Ones(d);
  m.validate_shapes();

  // synthetic CLT aligned with the planted directions
  std::string clt_path = bundle_clt_path(out_dir, spec.late_write_access ? "planted_overridable" : "planted");
  {
    std::filesystem::create_directories(out_dir);
    TensorFileWriter clt_writer;
    DetRng clt_rng(spec.seed ^ 0x9e3779b97f4a7c15ull);
    add_planted_clt(clt_writer, spec, d, clt_rng);
    clt_writer.write(clt_path);
  }

  // canonical experiment configs
  const std::string sweep_prompt = "the night was dark and cold she went out \n";
  std::vector<int> sweep_tokens = encode_text(m.tokens, sweep_prompt);
  int site = int(sweep_tokens.size()) - 1;
  json defaults;
  defaults["sweep"] = {{"prompt", sweep_prompt},
                       {"tokens", sweep_tokens},
                       {"suppress", {"L1:0"}},
                       {"inject", "L2:1"},
                       {"strength", spec.strength},
                       {"planning_site", site},
                       {"target_word", "around"},
                       {"suppress_range", {1, spec.n_layers - 1}},
                       {"inject_range", {spec.commitment_layer, spec.n_layers - 1}}};
  defaults["couplets"] = {"the night was dark and cold she went out \n",
                          "she walked in the dark and went about \n",
                          "the wind was cold and the song found \n",
                          "he stood in the light and walked round \n"};
  defaults["ablation_mask"] = {spec.coincidence_layer, spec.routing_layer};
  defaults["correction"] = {{"suppress", {"L1:0"}},
                            {"inject", "L2:1"},
                            {"inject_range", {spec.commitment_layer, spec.n_layers - 1}},
                            {"suppress_range", {1, spec.n_layers - 1}},
                            {"strength", spec.strength},
                            {"correct_feature", "L3:2"},
                            {"correct_range", {spec.coincidence_layer, spec.n_layers - 1}},
                            {"commit_word", "around"},
                            {"correct_word", "tree"},
                            {"grid", {0.0, 2.5, 5.0, 7.5, 10.0, 12.5, 15.0, 17.5, 20.0}}};
  defaults["steering"] = {
      {"target_word", "around"},
      {"strengths", {0.0, 1.0, 2.0, 4.0, 8.0, 12.0, 16.0}},
      {"prompts_a", {"the night was dark and cold she went out \n", "she walked in the dark and went about \n"}},
      {"prompts_b", {"the wind was cold and the song found \n", "he stood in the light and walked round \n"}},
      {"donor_prompt", "the wind was cold and the song found \n"},
      {"patch_layer", 1},
      {"contrast_layer", 1}};

  // ---- oracle self-checks and manifest ------------------------------------
  auto decoder_delta = [&](int feature_group, double strength, int position, int from, int to,
                           std::vector<ResidualEdit>& edits) {
    // mirrors the synthetic CLT rows; compile_edits is checked against this
    // path in the unit tests
    std::map<int, double> rows;
    if (feature_group == 0) rows = {{1, 0.3}, {2, 0.3}, {3, 0.02}, {4, 0.02}, {5, 0.02}};
    if (feature_group == 1) rows = {{2, 0.25}, {3, 0.008}, {4, 0.008}, {5, 0.008}};
    if (feature_group == 2) {
      double mag = spec.late_write_access ? 1.0 : 0.1;
      rows = {{3, mag}, {4, mag}, {5, mag}};
    }
    for (auto [layer, mag] : rows) {
      if (layer < from || layer > to) continue;
      ResidualEdit e;
      e.layer = layer;
      e.position = position;
      e.delta = unit_axis(d, kPlan + feature_group, float(strength * mag));
      e.tag = "oracle-fixture";
      edits.push_back(e);
    }
  };

  ForwardOptions suppress_only;
  decoder_delta(0, -spec.strength, site, 1, spec.n_layers - 1, suppress_only.edits);

  auto suppressed_injected_at = [&](int position) {
    ForwardOptions opt = suppress_only;
    decoder_delta(1, spec.strength, position, spec.commitment_layer, spec.n_layers - 1, opt.edits);
    return opt;
  };

  const int target_tok = kGroupOutputTok[1];
  std::vector<double> clean_dist = oracle_distribution(m, sweep_tokens);
  std::vector<double> base_dist = oracle_distribution(m, sweep_tokens, suppress_only);
  double clean_p = clean_dist[size_t(target_tok)];
  double baseline_p = base_dist[size_t(target_tok)];

  std::vector<double> p_by_position(sweep_tokens.size());
  for (int pos = 0; pos < int(sweep_tokens.size()); ++pos)
    p_by_position[size_t(pos)] =
        oracle_distribution(m, sweep_tokens, suppressed_injected_at(pos))[size_t(target_tok)];
  double injected_p = p_by_position[size_t(site)];
  double offsite_max = 0.0;
  for (int pos = 0; pos < site; ++pos) offsite_max = std::max(offsite_max, p_by_position[size_t(pos)]);

  if (clean_p > 0.05)
    throw std::runtime_error("planted fixture: clean P(target) too high: " + std::to_string(clean_p));
  if (injected_p < 0.9)
    throw std::runtime_error("planted fixture: injected P(target) too low: " + std::to_string(injected_p));
  if (injected_p / std::max(baseline_p, 1e-30) < 1e3)
    throw std::runtime_error("planted fixture: spike ratio too small");
  if (offsite_max > 10.0 * baseline_p)
    throw std::runtime_error("planted fixture: off-site injection leaks");

  // routing deltas on the output -> site edge, steered vs clean
  OracleTrace clean_trace = oracle_forward(m, sweep_tokens, {});
  OracleTrace steered_trace = oracle_forward(m, sweep_tokens, suppressed_injected_at(site));
  double best_abs = 0.0, designated_delta = 0.0;
  int best_layer = -1, best_head = -1;
  long T = long(sweep_tokens.size());
  for (int l = 0; l < spec.n_layers; ++l) {
    for (int h = 0; h < m.spec.n_heads; ++h) {
      double delta = steered_trace.attention[size_t(l)][size_t(h)][size_t(T - 1) * size_t(T) + size_t(site)] -
                     clean_trace.attention[size_t(l)][size_t(h)][size_t(T - 1) * size_t(T) + size_t(site)];
      if (std::abs(delta) > best_abs) {
        best_abs = std::abs(delta);
        best_layer = l;
        best_head = h;
      }
      if (l == spec.routing_layer && h == spec.routing_head) designated_delta = delta;
    }
  }
  if (best_layer != spec.routing_layer || best_head != spec.routing_head || designated_delta <= 0.0)
    throw std::runtime_error("planted fixture: routing head is not the top attention mover");

  // masking the commitment span kills the steered spike
  ForwardOptions masked = suppressed_injected_at(site);
  masked.mask.skipped = {spec.coincidence_layer, spec.routing_layer};
  double masked_p = oracle_distribution(m, sweep_tokens, masked)[size_t(target_tok)];
  if (masked_p > 2.0 * baseline_p || masked_p < baseline_p / 2.0)
    throw std::runtime_error("planted fixture: masked commitment should return P(target) to baseline, got " +
                             std::to_string(masked_p) + " vs " + std::to_string(baseline_p));

  // correction sweep: contradictory feature written only above the commitment
  double floor_p = 0.0, max_correct = 0.0;
  {
    for (double s : {0.0, 5.0, 10.0, 15.0, 20.0}) {
      ForwardOptions opt = suppressed_injected_at(site);
      decoder_delta(2, s, site, spec.coincidence_layer, spec.n_layers - 1, opt.edits);
      double p_c = oracle_distribution(m, sweep_tokens, opt)[size_t(kGroupOutputTok[2])];
      if (s == 0.0) floor_p = p_c;
      max_correct = std::max(max_correct, p_c);
    }
    bool overridable = max_correct > 0.1;
    if (spec.late_write_access && !overridable)
      throw std::runtime_error("planted fixture: overridable control failed to override");
    if (!spec.late_write_access && max_correct > 10.0 * floor_p)
      throw std::runtime_error("planted fixture: correction leaked past the commitment");
  }

  json manifest;
  manifest["kind"] = spec.late_write_access ? "planted_overridable" : "planted";
  manifest["seed"] = spec.seed;
  manifest["clt_file"] = std::filesystem::path(clt_path).filename().string();
  manifest["planning_site"] = site;
  manifest["strength"] = spec.strength;
  manifest["target_word"] = "around";
  manifest["target_token"] = target_tok;
  manifest["competing_word"] = "about";
  manifest["competing_token"] = kGroupOutputTok[0];
  manifest["correct_word"] = "tree";
  manifest["clean_p_target"] = clean_p;
  manifest["baseline_p_target"] = baseline_p;
  manifest["injected_p_target"] = injected_p;
  manifest["offsite_max_p"] = offsite_max;
  manifest["p_by_position"] = p_by_position;
  manifest["routing"] = {{"layer", spec.routing_layer},
                         {"head", spec.routing_head},
                         {"delta", designated_delta},
                         {"sign", 1}};
  manifest["natural_head"] = {{"layer", spec.routing_layer}, {"head", 1}};
  manifest["commitment_layers"] = {spec.coincidence_layer, spec.routing_layer};
  manifest["commitment_layer"] = spec.commitment_layer;
  manifest["correction_floor_p"] = floor_p;
  manifest["correction_max_p"] = max_correct;

  FixtureBundle bundle;
  bundle.phoneme_dict = planted_pronunciations();
  m.extra_metadata["fixture_manifest"] = manifest.dump();
  m.extra_metadata["experiment_defaults"] = defaults.dump();
  m.extra_metadata["phoneme_dict"] = json(bundle.phoneme_dict).dump();
  save_model(m, bundle_model_path(out_dir, spec.late_write_access ? "planted_overridable" : "planted"));

  bundle.model = std::move(m);
  bundle.clt_path = clt_path;
  bundle.manifest = manifest;
  bundle.experiment_defaults = defaults;
  return bundle;
}

// -------------------------------------------------------------------------
// Fact fixture: linear fact directions, a subject-copy head, and a sharp
// contraction basin on a dedicated probe axis.
// -------------------------------------------------------------------------

namespace {

constexpr int kFAnchor = 0, kFSubject = 1, kFact1 = 2, kFact2 = 3, kProbe = 4;
constexpr int kFact3 = 5, kFact4 = 6;
constexpr int kFactDirections = 7;

std::vector<std::string> fact_surfaces() {
  std::vector<std::string> s = {"<bos>", "the", "capital", "of", "is", "language", "currency",
                                "w7",    "w8",  "w9",
                                "france", "germany", "francia", "spain", "italy",
                                "w15",   "w16", "w17", "w18", "w19",
                                "paris", "berlin", "madrid", "rome"};
  while (s.size() < 48) s.push_back("w" + std::to_string(s.size()));
  return s;
}

}  // namespace

FixtureBundle build_fact_fixture(const FactFixtureSpec& spec, const std::string& out_dir) {
  if (spec.d_model < 4 * kFactDirections)
    throw std::runtime_error("fact fixture: infeasible geometry, d_model must be >= " +
                             std::to_string(4 * kFactDirections));
  if (spec.n_layers < 6) throw std::runtime_error("fact fixture: need at least 6 layers");
  if (spec.contraction <= 0.0 || spec.contraction >= 1.0)
    throw std::runtime_error("fact fixture: contraction must be in (0, 1)");

  DetRng rng(spec.seed);
  Model m;
  m.spec.n_layers = spec.n_layers;
  m.spec.n_heads = 4;
  m.spec.n_kv_heads = 4;
  m.spec.d_model = spec.d_model;
  m.spec.d_head = spec.d_model / 4;
  m.spec.vocab_size = 48;
  m.spec.d_ff = 16;
  m.spec.activation = Activation::relu;
  m.spec.rope = false;
  m.tokens.surfaces = fact_surfaces();

  const int d = spec.d_model;
  const int subj_tokens[4] = {10, 11, 13, 14};   // france, germany, spain, italy
  const int ans_tokens[4] = {20, 21, 22, 23};    // paris, berlin, madrid, rome
  const int fact_axis[4] = {kFact1, kFact2, kFact3, kFact4};

  m.embedding = noise_matrix(rng, m.spec.vocab_size, d, 0.02);
  m.embedding.block(0, 0, m.spec.vocab_size, 8).setZero();
  for (int t = 0; t < m.spec.vocab_size; ++t) m.embedding(t, kFAnchor) = 2.0f;
  for (int i = 0; i < 4; ++i) {
    m.embedding(subj_tokens[i], kFSubject) = 3.0f;
    m.embedding(subj_tokens[i], fact_axis[i]) = 4.0f;
  }
  // "francia": france synonym differing only on a dead axis
  m.embedding.row(12) = m.embedding.row(10);
  m.embedding(12, d - 1) = 0.05f;

  for (int l = 0; l < spec.n_layers; ++l) m.layers.push_back(noise_layer(rng, m.spec, 0.004));

  // copy head: query anchored, key reads the subject marker plus the original
  // facts (fact-sensitive so patches move its attention), values carry facts
  {
    LayerWeights& w = m.layers[size_t(spec.copy_layer)];
    w.wq.row(0) = unit_axis(d, kFAnchor, 0.3f).transpose();
    Eigen::VectorXf key = unit_axis(d, kFSubject, 1.0f);
    key += unit_axis(d, kFact1, 0.5f);
    key += unit_axis(d, kFact3, 0.5f);
    w.wk.row(0) = key.transpose();
    for (int i = 0; i < 4; ++i) {
      w.wv.row(1 + i) = unit_axis(d, fact_axis[i]).transpose();
      w.wo.col(1 + i) = unit_axis(d, fact_axis[i], 3.0f);
    }
  }

  // contraction layers: piecewise-linear bump on the probe axis.
  // g(a) = a inside [0, R], falls to zero across [R, R(1+eps)], zero beyond;
  // mirrored for negative a. The MLP writes -contraction * g(a) back onto the
  // probe axis, shrinking in-basin deviations and ignoring out-of-basin ones.
  {
    // R is expressed in normalized units at the probe position; calibrate from
    // the clean run below, then bake into the weights.
    // Placeholder rows are planted after the calibration pass.
  }

  m.unembedding = noise_matrix(rng, m.spec.vocab_size, d, 0.02);
  m.unembedding.block(0, 0, m.spec.vocab_size, 8).setZero();
  m.unembedding.block(0, d - 2, m.spec.vocab_size, 2).setZero();  // keep the synonym axis dead
  for (int i = 0; i < 4; ++i)
    m.unembedding.row(ans_tokens[i]) += unit_axis(d, fact_axis[i], 2.0f).transpose();
  m.final_norm = Eigen::VectorXf::Ones(d);
  m.validate_shapes();

  const std::string prompt_template = "the capital of ";
  auto subject_prompt = [&](int subj) {
    return prompt_template + m.tokens.surface(subj) + " is";
  };
  std::vector<int> probe_tokens = encode_text(m.tokens, subject_prompt(subj_tokens[0]));
  const int last = int(probe_tokens.size()) - 1;

  // calibrate the bump threshold in normalized units: a perturbation of raw
  // magnitude `basin_radius` at the probe position should sit at the basin edge
  OracleTrace clean = oracle_forward(m, probe_tokens, {});
  double base_norm2 = 0.0;
  {
    const auto& resid = clean.residual_post[size_t(spec.copy_layer)];
    for (int i = 0; i < d; ++i) {
      double v = resid[size_t(last) * size_t(d) + size_t(i)];
      base_norm2 += v * v;
    }
  }
  double s_edge = spec.basin_radius;
  double r_normed = std::sqrt(double(d)) * s_edge / std::sqrt(base_norm2 + s_edge * s_edge);
  double eps_edge = spec.basin_edge_width;
  // per-layer raw shrink ~= contraction requires kappa_c * sqrt(d)/norm ~= contraction
  double kappa_c = spec.contraction * std::sqrt(base_norm2) / std::sqrt(double(d));

  for (int ci = 0; ci < 2; ++ci) {
    LayerWeights& w = m.layers[size_t(spec.contraction_layers[ci])];
    w.w_up.setZero();
    w.w_down.setZero();
    w.up_bias = Eigen::VectorXf::Zero(m.spec.d_ff);
    double r1 = r_normed, r2 = r_normed * (1.0 + eps_edge);
    double inv_eps = 1.0 / eps_edge;
    // positive side: relu(a), relu(a - r1), relu(a - r2)
    // negative side: relu(-a), relu(-a - r1), relu(-a - r2)
    for (int sgn = 0; sgn < 2; ++sgn) {
      double s = sgn == 0 ? 1.0 : -1.0;
      int base = sgn * 3;
      for (int k = 0; k < 3; ++k) {
        w.w_up.row(base + k) = unit_axis(d, kProbe, float(s)).transpose();
        w.up_bias[base + k] = float(k == 0 ? 0.0 : (k == 1 ? -r1 : -r2));
      }
      // g = n0 - (1 + 1/eps) n1 + (1/eps) n2, written back as -kappa_c * g
      w.w_down.col(base + 0) += unit_axis(d, kProbe, float(-s * kappa_c));
      w.w_down.col(base + 1) += unit_axis(d, kProbe, float(s * kappa_c * (1.0 + inv_eps)));
      w.w_down.col(base + 2) += unit_axis(d, kProbe, float(-s * kappa_c * inv_eps));
    }
  }

  // ---- oracle calibration of the basin threshold ---------------------------
  const int measure_layer = spec.contraction_layers[1];
  auto deviation_at = [&](double scale) {
    ForwardOptions opt;
    ResidualEdit e;
    e.layer = spec.copy_layer;
    e.position = last;
    e.delta = unit_axis(d, kProbe, float(scale));
    e.tag = "probe";
    opt.edits = {e};
    OracleTrace pert = oracle_forward(m, probe_tokens, opt);
    double dev2 = 0.0;
    const auto& a = pert.residual_post[size_t(measure_layer)];
    const auto& b = clean.residual_post[size_t(measure_layer)];
    for (int i = 0; i < d; ++i) {
      double diff = a[size_t(last) * size_t(d) + size_t(i)] - b[size_t(last) * size_t(d) + size_t(i)];
      dev2 += diff * diff;
    }
    return std::sqrt(dev2);
  };
  auto absorption_at = [&](double scale) { return 1.0 - deviation_at(scale) / scale; };

  double inside = absorption_at(spec.basin_radius * 0.5);
  double outside = absorption_at(spec.basin_radius * 1.6);
  if (inside < 0.9)
    throw std::runtime_error("fact fixture: in-basin absorption too weak: " + std::to_string(inside));
  if (outside > 0.45)
    throw std::runtime_error("fact fixture: out-of-basin absorption too strong: " +
                             std::to_string(outside));
  // bisect the 50% crossing; this oracle-computed value is the planted threshold
  double lo = spec.basin_radius * 0.5, hi = spec.basin_radius * 1.6;
  for (int it = 0; it < 60; ++it) {
    double mid = 0.5 * (lo + hi);
    if (absorption_at(mid) >= 0.5) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  double planted_threshold = 0.5 * (lo + hi);

  // gold pairs + screening sanity via the oracle
  json pairs = json::array();
  for (int pair = 0; pair < 2; ++pair) {
    int orig = subj_tokens[2 * pair], cf = subj_tokens[2 * pair + 1];
    std::vector<int> orig_tokens = encode_text(m.tokens, subject_prompt(orig));
    std::vector<int> cf_tokens = encode_text(m.tokens, subject_prompt(cf));
    std::vector<double> od = oracle_distribution(m, orig_tokens);
    std::vector<double> cd = oracle_distribution(m, cf_tokens);
    int want_o = ans_tokens[2 * pair], want_c = ans_tokens[2 * pair + 1];
    if (int(std::max_element(od.begin(), od.end()) - od.begin()) != want_o ||
        int(std::max_element(cd.begin(), cd.end()) - cd.begin()) != want_c)
      throw std::runtime_error("fact fixture: planted answers are not the oracle argmax");
    pairs.push_back({{"prompt", subject_prompt(orig)},
                     {"subject", m.tokens.surface(orig)},
                     {"answer", m.tokens.surface(want_o)},
                     {"cf_prompt", subject_prompt(cf)},
                     {"cf_answer", m.tokens.surface(want_c)}});
  }

  json manifest;
  manifest["kind"] = "fact";
  manifest["seed"] = spec.seed;
  manifest["clt_file"] = "";
  manifest["copy_layer"] = spec.copy_layer;
  manifest["blocks"] = {{0, spec.copy_layer - 1},
                        {spec.copy_layer, spec.copy_layer + 1},
                        {spec.copy_layer + 2, spec.n_layers - 1}};
  manifest["probe"] = {{"axis", kProbe},
                       {"inject_layer", spec.copy_layer},
                       {"measure_k", measure_layer - spec.copy_layer},
                       {"planted_threshold", planted_threshold},
                       {"contraction", spec.contraction},
                       {"basin_radius", spec.basin_radius},
                       {"absorption_inside", inside},
                       {"absorption_outside", outside}};
  manifest["routing"] = {{"layer", spec.copy_layer}, {"head", 0}, {"sign", -1}};
  manifest["gold_pairs"] = pairs;
  manifest["subject_span_hint"] = 3;  // "the capital of <subject> is"

  json defaults;
  defaults["pairs"] = pairs;
  defaults["contrast"] = {{"prompts_pos", {subject_prompt(subj_tokens[1])}},
                          {"prompts_neg", {subject_prompt(subj_tokens[0])}},
                          {"inject_prompt", subject_prompt(subj_tokens[0])},
                          {"target_word", "berlin"},
                          {"layer", spec.copy_layer},
                          {"strengths", {0.0, 1.0, 2.0, 4.0, 8.0, 12.0, 16.0}}};
  defaults["absorption_grid"] = json::array();
  for (double g : {0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.4, 4.8, 5.2, 6.0, 7.0, 8.0})
    defaults["absorption_grid"].push_back(g * spec.basin_radius / 4.0);
  defaults["within_group"] = {subject_prompt(10), subject_prompt(12)};

  FixtureBundle bundle;
  m.extra_metadata["fixture_manifest"] = manifest.dump();
  m.extra_metadata["experiment_defaults"] = defaults.dump();
  std::filesystem::create_directories(out_dir);
  save_model(m, bundle_model_path(out_dir, "fact"));

  bundle.model = std::move(m);
  bundle.manifest = manifest;
  bundle.experiment_defaults = defaults;
  return bundle;
}

FixtureBundle load_bundle(const std::string& model_path) {
  FixtureBundle bundle;
  bundle.model = load_model(model_path);
  auto it = bundle.model.extra_metadata.find("fixture_manifest");
  if (it == bundle.model.extra_metadata.end())
    throw std::runtime_error("fixture bundle: archive carries no fixture_manifest: " + model_path);
  bundle.manifest = json::parse(it->second);
  auto defaults = bundle.model.extra_metadata.find("experiment_defaults");
  if (defaults != bundle.model.extra_metadata.end())
    bundle.experiment_defaults = json::parse(defaults->second);
  auto dict = bundle.model.extra_metadata.find("phoneme_dict");
  if (dict != bundle.model.extra_metadata.end())
    bundle.phoneme_dict = json::parse(dict->second).get<std::map<std::string, std::string>>();
  std::string clt_file = bundle.manifest.value("clt_file", std::string());
  if (!clt_file.empty())
    bundle.clt_path = (std::filesystem::path(model_path).parent_path() / clt_file).string();
  return bundle;
}

}  // namespace clens
