#include "clens/steering.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace clens {

using nlohmann::json;

SteeringMethod parse_steering_method(const std::string& name) {
  if (name == "max_act_probe") return SteeringMethod::max_act_probe;
  if (name == "decoder_dot") return SteeringMethod::decoder_dot;
  if (name == "decoder_cosine") return SteeringMethod::decoder_cosine;
  if (name == "cosine_filtered_inject") return SteeringMethod::cosine_filtered_inject;
  if (name == "multi_layer_clamp") return SteeringMethod::multi_layer_clamp;
  if (name == "contrastive_vector") return SteeringMethod::contrastive_vector;
  if (name == "activation_patch") return SteeringMethod::activation_patch;
  throw std::runtime_error("unknown steering method: " + name);
}

const char* steering_method_name(SteeringMethod m) {
  switch (m) {
    case SteeringMethod::max_act_probe: return "max_act_probe";
    case SteeringMethod::decoder_dot: return "decoder_dot";
    case SteeringMethod::decoder_cosine: return "decoder_cosine";
    case SteeringMethod::cosine_filtered_inject: return "cosine_filtered_inject";
    case SteeringMethod::multi_layer_clamp: return "multi_layer_clamp";
    case SteeringMethod::contrastive_vector: return "contrastive_vector";
    case SteeringMethod::activation_patch: return "activation_patch";
  }
  throw std::logic_error("bad steering method");
}

json SteeringOutcome::to_json() const {
  return json{{"method", steering_method_name(method)},
              {"strength", strength},
              {"sample", sample},
              {"target_hit", target_hit},
              {"p_target", p_target},
              {"logit_gap", logit_gap},
              {"logit_removal", logit_removal}};
}

namespace {

struct ProbeContext {
  std::vector<int> prompt;
  int site;
  int target_token;            // highest-probability single-token variant
  int natural_top;             // baseline argmax
  double natural_top_logit;    // baseline logit of the natural top
};

int best_target_token(const Model& model, const Eigen::VectorXd& dist, const std::string& word) {
  std::string cap = word;
  if (!cap.empty()) cap[0] = char(std::toupper(static_cast<unsigned char>(cap[0])));
  int best = -1;
  for (const std::string& variant : {word, " " + word, cap, " " + cap}) {
    if (auto id = model.tokens.find(variant)) {
      if (best < 0 || dist[*id] > dist[best]) best = *id;
    }
  }
  if (best < 0)
    throw std::runtime_error("steering: target word \"" + word + "\" does not tokenize");
  return best;
}

ProbeContext make_context(const SteeringConfig& cfg, const Model& model,
                          const std::vector<int>& prompt) {
  ProbeContext ctx;
  ctx.prompt = prompt;
  ctx.site = cfg.site < 0 ? int(prompt.size()) - 1 : cfg.site;
  ForwardTrace baseline = forward(model, prompt, {});
  Eigen::VectorXd dist = next_token_distribution(baseline);
  ctx.target_token = best_target_token(model, dist, cfg.target_word);
  ctx.natural_top = argmax_token(dist);
  ctx.natural_top_logit = double(baseline.logits(baseline.logits.rows() - 1, ctx.natural_top));
  return ctx;
}

SteeringOutcome evaluate(const Model& model, const ProbeContext& ctx, const ForwardOptions& opt,
                         SteeringMethod method, double strength, int sample) {
  ForwardTrace steered = forward(model, ctx.prompt, opt);
  Eigen::VectorXd dist = next_token_distribution(steered);
  long last = steered.logits.rows() - 1;
  SteeringOutcome out;
  out.method = method;
  out.strength = strength;
  out.sample = sample;
  out.target_hit = argmax_token(dist) == ctx.target_token;
  out.p_target = dist[ctx.target_token];
  out.logit_gap = double(steered.logits(last, ctx.natural_top)) -
                  double(steered.logits(last, ctx.target_token));
  out.logit_removal = ctx.natural_top_logit - double(steered.logits(last, ctx.natural_top));
  return out;
}

// best (feature, position) by activation, strict tie-break toward lower
// layer, index, position
struct BestActivation {
  FeatureId feature;
  int position = 0;
  double value = -1e300;
};

BestActivation max_activation(const Model& model, const Clt& clt, const std::vector<int>& prompt) {
  ForwardOptions capture;
  capture.capture.residual_mid = true;
  capture.capture.residual_post = true;
  ForwardTrace trace = forward(model, prompt, capture);
  BestActivation best;
  for (int layer = 0; layer < clt.spec().n_layers; ++layer) {
    const Eigen::MatrixXf& resid = clt.spec().read_point == ReadPoint::post_attention_pre_mlp
                                       ? trace.residual_mid[size_t(layer)]
                                       : trace.residual_post[size_t(layer)];
    const CltShard& shard = clt.shard(layer);
    for (long pos = 0; pos < resid.rows(); ++pos) {
      Eigen::VectorXf acts = encode(shard, resid.row(pos).transpose(), clt.spec().nonlinearity);
      for (long f = 0; f < acts.size(); ++f) {
        if (double(acts[f]) > best.value) {
          best.value = double(acts[f]);
          best.feature = FeatureId{layer, int(f)};
          best.position = int(pos);
        }
      }
    }
  }
  return best;
}

// decoder score against the target word's embedding, final-layer row
FeatureId best_decoder_feature(const Model& model, const Clt& clt, int target_token, bool cosine,
                               double min_cosine, const std::optional<ForwardTrace>& act_trace) {
  Eigen::VectorXf target = model.embedding.row(target_token).transpose();
  float target_norm = std::max(target.norm(), 1e-12f);
  int last_layer = clt.spec().n_layers - 1;
  FeatureId best{0, 0};
  double best_score = -1e300;
  for (int layer = 0; layer < clt.spec().n_layers; ++layer) {
    const CltShard& shard = clt.shard(layer);
    const Eigen::MatrixXf& decoder = shard.decoder_for(last_layer);
    for (long f = 0; f < decoder.rows(); ++f) {
      double score = double(decoder.row(f).dot(target));
      if (cosine) {
        float row_norm = std::max(decoder.row(f).norm(), 1e-12f);
        score /= double(row_norm) * double(target_norm);
      }
      if (act_trace) {
        // methods 3/4: cosine filter first, then rank by site activation
        float row_norm = std::max(decoder.row(f).norm(), 1e-12f);
        double cos = double(decoder.row(f).dot(target)) / (double(row_norm) * double(target_norm));
        if (cos < min_cosine) continue;
        const Eigen::MatrixXf& resid = clt.spec().read_point == ReadPoint::post_attention_pre_mlp
                                           ? act_trace->residual_mid[size_t(layer)]
                                           : act_trace->residual_post[size_t(layer)];
        Eigen::VectorXf acts =
            encode(shard, resid.row(resid.rows() - 1).transpose(), clt.spec().nonlinearity);
        score = double(acts[f]);
      }
      if (score > best_score) {
        best_score = score;
        best = FeatureId{layer, int(f)};
      }
    }
  }
  return best;
}

ForwardOptions inject_feature_options(const Clt& clt, const FeatureId& feature, double strength,
                                      int position, int range_end) {
  FeatureEdit e;
  e.feature = feature;
  e.mode = EditMode::inject;
  e.strength = float(strength);
  e.position = position;
  e.range_start = feature.layer;
  e.range_end = range_end;
  ForwardOptions opt;
  std::vector<FeatureEdit> edits = {e};
  opt.edits = compile_edits(edits, clt);
  return opt;
}

}  // namespace

std::vector<SteeringOutcome> run_baseline_method(SteeringMethod method, const SteeringConfig& cfg,
                                                 const Model& model, const Clt* clt) {
  bool needs_clt = method != SteeringMethod::contrastive_vector &&
                   method != SteeringMethod::activation_patch;
  if (needs_clt && !clt)
    throw std::runtime_error(std::string("steering method ") + steering_method_name(method) +
                             " requires a transcoder");
  if (cfg.strengths.empty()) throw std::runtime_error("steering: empty strength grid");
  if (cfg.prompt.empty()) throw std::runtime_error("steering: empty prompt");

  std::vector<SteeringOutcome> outcomes;
  for (int sample = 0; sample < std::max(1, cfg.samples); ++sample) {
    const std::vector<int>& prompt =
        cfg.sample_prompts.empty() ? cfg.prompt
                                   : cfg.sample_prompts[size_t(sample) % cfg.sample_prompts.size()];
    ProbeContext ctx = make_context(cfg, model, prompt);

    // per-sample feature/vector selection
    FeatureId feature{0, 0};
    ContrastiveVector contrast;
    std::optional<ForwardTrace> donor;
    switch (method) {
      case SteeringMethod::max_act_probe:
        feature = max_activation(model, *clt, prompt).feature;
        break;
      case SteeringMethod::decoder_dot:
        feature = best_decoder_feature(model, *clt, ctx.target_token, false, 0.0, std::nullopt);
        break;
      case SteeringMethod::decoder_cosine:
        feature = best_decoder_feature(model, *clt, ctx.target_token, true, 0.0, std::nullopt);
        break;
      case SteeringMethod::cosine_filtered_inject:
      case SteeringMethod::multi_layer_clamp: {
        ForwardOptions capture;
        capture.capture.residual_mid = true;
        capture.capture.residual_post = true;
        ForwardTrace acts = forward(model, prompt, capture);
        feature = best_decoder_feature(model, *clt, ctx.target_token, true, cfg.cosine_filter,
                                       std::optional<ForwardTrace>(std::move(acts)));
        break;
      }
      case SteeringMethod::contrastive_vector:
        if (cfg.prompts_a.empty() || cfg.prompts_b.empty())
          throw std::runtime_error("contrastive_vector: both prompt sets are required");
        contrast = contrastive_vector(cfg.prompts_a, cfg.prompts_b, cfg.contrast_layer, model);
        break;
      case SteeringMethod::activation_patch: {
        if (cfg.donor_prompt.empty()) throw std::runtime_error("activation_patch: donor prompt required");
        ForwardOptions capture;
        capture.capture.residual_post = true;
        donor = forward(model, cfg.donor_prompt, capture);
        break;
      }
    }

    for (double strength : cfg.strengths) {
      ForwardOptions opt;
      switch (method) {
        case SteeringMethod::max_act_probe:
        case SteeringMethod::decoder_dot:
        case SteeringMethod::decoder_cosine:
        case SteeringMethod::cosine_filtered_inject:
          // single-layer write at the feature's home layer
          opt = inject_feature_options(*clt, feature, strength, ctx.site, feature.layer);
          break;
        case SteeringMethod::multi_layer_clamp: {
          int end = std::min(feature.layer + cfg.clamp_span - 1, clt->spec().n_layers - 1);
          opt = inject_feature_options(*clt, feature, strength, ctx.site, end);
          break;
        }
        case SteeringMethod::contrastive_vector: {
          ResidualEdit e;
          e.layer = contrast.layer;
          e.position = ctx.site;
          e.delta = contrast.direction * float(strength);
          e.tag = "contrastive";
          opt.edits = {e};
          break;
        }
        case SteeringMethod::activation_patch: {
          // full replacement; the strength grid is kept for schema uniformity
          if (strength != 0.0) {
            ResidualEdit e;
            e.layer = cfg.patch_layer;
            e.position = ctx.site;
            int donor_site = donor->n_positions - 1;
            e.delta = donor->residual_post[size_t(cfg.patch_layer)].row(donor_site).transpose();
            e.op = EditOp::replace;
            e.tag = "activation-patch";
            opt.edits = {e};
          }
          break;
        }
      }
      outcomes.push_back(evaluate(model, ctx, opt, method, strength, sample));
    }
  }
  return outcomes;
}

ContrastiveVector contrastive_vector(std::span<const std::vector<int>> prompts_pos,
                                     std::span<const std::vector<int>> prompts_neg, int layer,
                                     const Model& model) {
  if (prompts_pos.empty() || prompts_neg.empty())
    throw std::runtime_error("contrastive_vector: empty prompt set");
  auto mean_resid = [&](std::span<const std::vector<int>> prompts) {
    Eigen::VectorXf sum = Eigen::VectorXf::Zero(model.spec.d_model);
    for (const std::vector<int>& p : prompts) {
      ForwardOptions opt;
      opt.capture.residual_post = true;
      ForwardTrace t = forward(model, p, opt);
      sum += t.residual_post[size_t(layer)].row(t.n_positions - 1).transpose();
    }
    return Eigen::VectorXf(sum / float(prompts.size()));
  };
  Eigen::VectorXf diff = mean_resid(prompts_pos) - mean_resid(prompts_neg);
  ContrastiveVector out;
  out.layer = layer;
  out.norm = double(diff.norm());
  out.direction = out.norm > 0.0 ? Eigen::VectorXf(diff / float(out.norm))
                                 : Eigen::VectorXf::Zero(model.spec.d_model);
  if (!out.direction.allFinite()) throw std::runtime_error("contrastive_vector: non-finite direction");
  return out;
}

json AbsorptionReport::to_json() const {
  json points_json = json::array();
  for (const AbsorptionPoint& p : points)
    points_json.push_back({{"scale", p.scale},
                           {"remaining", p.remaining},
                           {"absorption", p.absorption},
                           {"skipped", p.skipped}});
  json j{{"points", points_json}, {"inject_layer", inject_layer}, {"measure_layer", measure_layer}};
  j["threshold_estimate"] = threshold_estimate ? json(*threshold_estimate) : json(nullptr);
  return j;
}

AbsorptionReport attractor_absorption(const ContrastiveVector& direction,
                                      std::span<const double> scales, const Model& model,
                                      const std::vector<int>& prompt, int k_layers,
                                      int position) {
  if (k_layers < 1) throw std::runtime_error("attractor_absorption: k must be >= 1");
  for (size_t i = 1; i < scales.size(); ++i)
    if (scales[i] <= scales[i - 1])
      throw std::runtime_error("attractor_absorption: scale grid must be ascending");

  AbsorptionReport report;
  report.inject_layer = direction.layer;
  report.measure_layer = direction.layer + k_layers;
  if (report.measure_layer >= model.spec.n_layers)
    throw std::runtime_error("attractor_absorption: k reaches past the final layer");
  int pos = position < 0 ? int(prompt.size()) - 1 : position;

  ForwardOptions capture;
  capture.capture.residual_post = true;
  ForwardTrace clean = forward(model, prompt, capture);

  for (double scale : scales) {
    AbsorptionPoint point;
    point.scale = scale;
    if (scale == 0.0) {
      point.skipped = true;  // absorption of a zero-norm injection is undefined
      report.points.push_back(point);
      continue;
    }
    ForwardOptions opt;
    opt.capture.residual_post = true;
    ResidualEdit e;
    e.layer = direction.layer;
    e.position = pos;
    e.delta = direction.direction * float(scale);
    e.tag = "absorption-probe";
    opt.edits = {e};
    ForwardTrace pert = forward(model, prompt, opt);
    point.remaining = double((pert.residual_post[size_t(report.measure_layer)].row(pos) -
                              clean.residual_post[size_t(report.measure_layer)].row(pos))
                                 .norm());
    point.absorption = 1.0 - point.remaining / scale;
    if (!report.threshold_estimate && point.absorption < 0.5)
      report.threshold_estimate = scale;
    report.points.push_back(point);
  }
  return report;
}

double within_group_kl(std::span<const std::vector<int>> prompts, const Model& model) {
  if (prompts.size() < 2) throw std::runtime_error("within_group_kl: need at least two prompts");
  std::vector<Eigen::VectorXd> dists;
  for (const std::vector<int>& p : prompts)
    dists.push_back(next_token_distribution(forward(model, p, {})));
  double max_kl = 0.0;
  for (size_t i = 0; i < dists.size(); ++i) {
    for (size_t j = 0; j < dists.size(); ++j) {
      if (i == j) continue;
      max_kl = std::max(max_kl, kl_divergence(dists[i], dists[j]));
    }
  }
  return max_kl;
}

}  // namespace clens
