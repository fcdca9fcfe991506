#include "clens/protocols.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <stdexcept>

namespace clens {

using nlohmann::json;

namespace {

std::vector<int> resolve_word_tokens(const TokenTable& tokens, const std::string& word) {
  std::vector<int> ids;
  std::string cap = word;
  if (!cap.empty()) cap[0] = char(std::toupper(static_cast<unsigned char>(cap[0])));
  for (const std::string& variant : {word, " " + word, cap, " " + cap}) {
    if (auto id = tokens.find(variant)) {
      if (std::find(ids.begin(), ids.end(), *id) == ids.end()) ids.push_back(*id);
    }
  }
  return ids;
}

std::vector<FeatureEdit> sweep_edits(const SweepConfig& cfg, const Clt& clt, int suppress_pos,
                                     int inject_pos, double strength) {
  int last_layer = clt.spec().n_layers - 1;
  std::vector<FeatureEdit> edits;
  for (const FeatureId& f : cfg.suppress_group) {
    FeatureEdit e;
    e.feature = f;
    e.mode = EditMode::suppress;
    e.strength = float(strength);
    e.position = suppress_pos;
    e.range_start = cfg.suppress_range_start < 0 ? f.layer : cfg.suppress_range_start;
    e.range_end = cfg.suppress_range_end < 0 ? last_layer : cfg.suppress_range_end;
    edits.push_back(e);
  }
  FeatureEdit inj;
  inj.feature = cfg.inject_feature;
  inj.mode = EditMode::inject;
  inj.strength = float(strength);
  inj.position = inject_pos;
  inj.range_start = cfg.inject_range_start < 0 ? cfg.inject_feature.layer : cfg.inject_range_start;
  inj.range_end = cfg.inject_range_end < 0 ? last_layer : cfg.inject_range_end;
  edits.push_back(inj);
  return edits;
}

}  // namespace

double word_probability(const Eigen::VectorXd& dist, const TokenTable& tokens,
                        const std::string& word) {
  std::vector<int> ids = resolve_word_tokens(tokens, word);
  if (ids.empty())
    throw std::runtime_error("target word \"" + word + "\" does not tokenize to any single token");
  double p = 0.0;
  for (int id : ids) p = std::max(p, dist[id]);
  return p;
}

json SweepConfig::to_json() const {
  json suppress = json::array();
  for (const FeatureId& f : suppress_group) suppress.push_back(f.str());
  return json{{"suppress", suppress},
              {"inject", inject_feature.str()},
              {"strength", strength},
              {"target_word", target_word},
              {"planning_site", planning_site},
              {"move_suppression", move_suppression},
              {"clean_baseline", clean_baseline},
              {"prompt_tokens", prompt}};
}

json SweepResult::to_json() const {
  return json{{"p_by_position", p_by_position}, {"baseline_p", baseline_p},
              {"peak_position", peak_position}, {"ratio", ratio},
              {"localized", localized},         {"planning_site", planning_site},
              {"target_word", target_word}};
}

SweepResult position_sweep(const SweepConfig& cfg, const Model& model, const Clt& clt) {
  if (cfg.prompt.size() < 2) throw std::runtime_error("position_sweep: prompt needs >= 2 tokens");
  int site = cfg.planning_site < 0 ? int(cfg.prompt.size()) - 1 : cfg.planning_site;
  if (site < 0 || site >= int(cfg.prompt.size()))
    throw std::runtime_error("position_sweep: planning site out of range");

  SweepResult result;
  result.planning_site = site;
  result.target_word = cfg.target_word;

  // baseline: suppressed-but-uninjected by default, clean behind the flag
  {
    ForwardOptions opt;
    if (!cfg.clean_baseline) {
      std::vector<FeatureEdit> edits = sweep_edits(cfg, clt, site, site, cfg.strength);
      edits.pop_back();  // drop the injection
      opt.edits = compile_edits(edits, clt);
    }
    ForwardTrace trace = forward(model, cfg.prompt, opt);
    result.baseline_p = word_probability(next_token_distribution(trace), model.tokens, cfg.target_word);
  }

  result.p_by_position.resize(cfg.prompt.size());
  for (int pos = 0; pos < int(cfg.prompt.size()); ++pos) {
    int suppress_pos = cfg.move_suppression ? pos : site;
    ForwardOptions opt;
    opt.edits = compile_edits(sweep_edits(cfg, clt, suppress_pos, pos, cfg.strength), clt);
    ForwardTrace trace = forward(model, cfg.prompt, opt);
    result.p_by_position[size_t(pos)] =
        word_probability(next_token_distribution(trace), model.tokens, cfg.target_word);
  }

  int peak = 0;
  for (int i = 1; i < int(result.p_by_position.size()); ++i)
    if (result.p_by_position[size_t(i)] > result.p_by_position[size_t(peak)]) peak = i;
  result.peak_position = peak;
  bool strict = true;
  for (int i = 0; i < int(result.p_by_position.size()); ++i) {
    if (i != peak && result.p_by_position[size_t(i)] >= result.p_by_position[size_t(peak)])
      strict = false;
  }
  result.localized = strict && peak == site;
  result.ratio = result.p_by_position[size_t(site)] / std::max(result.baseline_p, 1e-30);
  return result;
}

BinomialCi localization_rate(int localized, int total) { return binomial_ci(localized, total); }

BinomialCi localization_rate(std::span<const SweepResult> results) {
  if (results.empty()) throw std::runtime_error("localization_rate: no sweep results");
  int localized = 0;
  for (const SweepResult& r : results) localized += r.localized ? 1 : 0;
  return localization_rate(localized, int(results.size()));
}

std::vector<StrengthPoint> strength_sweep(const SweepConfig& cfg, std::span<const double> grid,
                                          const Model& model, const Clt& clt) {
  if (grid.empty() || grid[0] != 0.0)
    throw std::runtime_error("strength_sweep: grid must be ascending and start at 0");
  for (size_t i = 1; i < grid.size(); ++i)
    if (grid[i] <= grid[i - 1]) throw std::runtime_error("strength_sweep: grid must be ascending");
  int site = cfg.planning_site < 0 ? int(cfg.prompt.size()) - 1 : cfg.planning_site;

  ForwardOptions capture;
  capture.capture.attention = true;
  ForwardTrace clean = forward(model, cfg.prompt, capture);

  std::vector<StrengthPoint> out;
  for (double s : grid) {
    StrengthPoint point;
    point.strength = s;
    ForwardOptions opt;
    opt.capture.attention = true;
    opt.edits = compile_edits(sweep_edits(cfg, clt, site, site, s), clt);
    ForwardTrace steered = forward(model, cfg.prompt, opt);
    point.p_target = word_probability(next_token_distribution(steered), model.tokens, cfg.target_word);
    RoutingReport report = routing_analysis(clean, steered, site);
    point.top_head_delta = report.top.empty() ? 0.0 : std::abs(report.top.front().delta);
    point.total_shift = report.total_shift;
    out.push_back(point);
  }
  return out;
}

json AblationResult::to_json() const {
  return json{{"rhymed", rhymed},
              {"total", total},
              {"rhyme_rate", rhyme_rate},
              {"per_couplet", per_couplet},
              {"generated_lines", generated_lines}};
}

namespace {

// last purely alphabetic word of a token sequence rendered through the table
std::string last_alpha_word(const Model& model, std::span<const int> tokens) {
  for (long i = long(tokens.size()) - 1; i >= 0; --i) {
    const std::string& s = model.tokens.surface(tokens[size_t(i)]);
    bool alpha = !s.empty();
    for (char c : s)
      if (!std::isalpha(static_cast<unsigned char>(c))) alpha = false;
    if (alpha) return s;
  }
  return "";
}

}  // namespace

AblationResult layer_ablation(const AblationConfig& cfg, const Model& model,
                              const PhonemeDict& dict) {
  if (cfg.couplet_prompts.empty()) throw std::runtime_error("layer_ablation: no couplet prompts");
  int newline = cfg.newline_token;
  if (newline < 0) {
    auto id = model.tokens.find("\n");
    if (!id) throw std::runtime_error("layer_ablation: token table has no newline token");
    newline = *id;
  }

  AblationResult result;
  for (const std::vector<int>& prompt : cfg.couplet_prompts) {
    std::vector<int> full = greedy_generate(model, prompt, cfg.max_tokens_per_line, newline, cfg.mask);
    std::span<const int> generated(full.data() + prompt.size(), full.size() - prompt.size());

    std::string line_end = last_alpha_word(model, std::span<const int>(prompt.data(), prompt.size()));
    std::string gen_end = last_alpha_word(model, generated);
    std::string gen_text;
    for (int id : generated) {
      if (id == newline) break;
      if (!gen_text.empty()) gen_text += ' ';
      gen_text += model.tokens.surface(id);
    }
    result.generated_lines.push_back(gen_text);

    bool rhymed = false;
    auto a = dict.lookup(line_end);
    auto b = dict.lookup(gen_end);
    if (a && b && !line_end.empty() && !gen_end.empty()) {
      std::string ea = rhyme_ending(*a), eb = rhyme_ending(*b);
      rhymed = !ea.empty() && ea == eb;
    }
    result.per_couplet.push_back(rhymed);
    result.rhymed += rhymed ? 1 : 0;
    result.total += 1;
  }
  result.rhyme_rate = double(result.rhymed) / result.total;
  return result;
}

const char* verdict_name(CorrectionVerdict v) {
  switch (v) {
    case CorrectionVerdict::irrevocable: return "irrevocable";
    case CorrectionVerdict::overridable: return "overridable";
    case CorrectionVerdict::disrupted: return "disrupted";
    case CorrectionVerdict::ambiguous: return "ambiguous";
  }
  return "ambiguous";
}

json CorrectionResult::to_json() const {
  json points_json = json::array();
  for (const CorrectionPoint& p : points)
    points_json.push_back({{"strength", p.strength},
                           {"p_commit", p.p_commit},
                           {"p_correct", p.p_correct},
                           {"key_head_delta", p.key_head_delta},
                           {"total_shift", p.total_shift}});
  return json{{"points", points_json}, {"verdict", verdict_name(verdict)}};
}

CorrectionResult correction_test(const CorrectionConfig& cfg, const Model& model, const Clt& clt) {
  if (cfg.strength_grid.empty() || cfg.strength_grid.front() != 0.0)
    throw std::runtime_error("correction_test: strength grid must be ascending and start at 0");
  for (size_t i = 1; i < cfg.strength_grid.size(); ++i)
    if (cfg.strength_grid[i] <= cfg.strength_grid[i - 1])
      throw std::runtime_error("correction_test: strength grid must be ascending");
  if (cfg.correct_range_start <= cfg.commit_feature.layer)
    throw std::runtime_error(
        "correction_test: correction range must start strictly above the commit feature's layer");

  int position = cfg.position < 0 ? int(cfg.prompt.size()) - 1 : cfg.position;
  int last_layer = clt.spec().n_layers - 1;

  std::vector<FeatureEdit> commit_edits;
  for (const FeatureId& f : cfg.suppress_group) {
    FeatureEdit e;
    e.feature = f;
    e.mode = EditMode::suppress;
    e.strength = float(cfg.commit_strength);
    e.position = position;
    e.range_start = cfg.suppress_range_start < 0 ? f.layer : cfg.suppress_range_start;
    e.range_end = cfg.suppress_range_end < 0 ? last_layer : cfg.suppress_range_end;
    commit_edits.push_back(e);
  }
  {
    FeatureEdit e;
    e.feature = cfg.commit_feature;
    e.mode = EditMode::inject;
    e.strength = float(cfg.commit_strength);
    e.position = position;
    e.range_start = cfg.commit_range_start < 0 ? cfg.commit_feature.layer : cfg.commit_range_start;
    e.range_end = cfg.commit_range_end < 0 ? last_layer : cfg.commit_range_end;
    commit_edits.push_back(e);
  }

  ForwardOptions clean_opt;
  clean_opt.capture.attention = true;
  ForwardTrace clean = forward(model, cfg.prompt, clean_opt);
  double clean_att = double(
      clean.attention[size_t(cfg.key_head_layer)][size_t(cfg.key_head)](clean.n_positions - 1, position));

  CorrectionResult result;
  for (double s : cfg.strength_grid) {
    std::vector<FeatureEdit> edits = commit_edits;
    if (s != 0.0) {
      FeatureEdit c;
      c.feature = cfg.correct_feature;
      c.mode = EditMode::inject;
      c.strength = float(s);
      c.position = position;
      c.range_start = cfg.correct_range_start;
      c.range_end = cfg.correct_range_end;
      edits.push_back(c);
    }
    ForwardOptions opt;
    opt.capture.attention = true;
    opt.edits = compile_edits(edits, clt);
    ForwardTrace steered = forward(model, cfg.prompt, opt);
    Eigen::VectorXd dist = next_token_distribution(steered);

    CorrectionPoint point;
    point.strength = s;
    point.p_commit = word_probability(dist, model.tokens, cfg.commit_word);
    point.p_correct = word_probability(dist, model.tokens, cfg.correct_word);
    double att = double(steered.attention[size_t(cfg.key_head_layer)][size_t(cfg.key_head)](
        steered.n_positions - 1, position));
    point.key_head_delta = att - clean_att;
    point.total_shift = routing_analysis(clean, steered, position).total_shift;
    result.points.push_back(point);
  }

  double floor = std::max(result.points.front().p_correct, 1e-30);
  double commit0 = result.points.front().p_commit;
  double max_correct = 0.0, min_commit = commit0;
  for (const CorrectionPoint& p : result.points) {
    max_correct = std::max(max_correct, p.p_correct);
    min_commit = std::min(min_commit, p.p_commit);
  }
  if (max_correct >= cfg.override_threshold) {
    result.verdict = CorrectionVerdict::overridable;
  } else if (min_commit < 0.5 * commit0) {
    result.verdict = CorrectionVerdict::disrupted;
  } else if (max_correct <= 10.0 * floor) {
    result.verdict = CorrectionVerdict::irrevocable;
  } else {
    result.verdict = CorrectionVerdict::ambiguous;
  }
  return result;
}

}  // namespace clens
