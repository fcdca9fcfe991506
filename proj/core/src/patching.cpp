#include "clens/patching.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

namespace clens {

using nlohmann::json;

namespace {

// first occurrence of `needle` as a token subsequence
std::pair<int, int> find_span(const std::vector<int>& haystack, const std::vector<int>& needle,
                              const std::string& what) {
  if (needle.empty()) throw std::runtime_error("fact pair: empty " + what);
  for (size_t i = 0; i + needle.size() <= haystack.size(); ++i) {
    bool match = true;
    for (size_t j = 0; j < needle.size(); ++j) {
      if (haystack[i + j] != needle[j]) {
        match = false;
        break;
      }
    }
    if (match) return {int(i), int(i + needle.size())};
  }
  throw std::runtime_error("fact pair: " + what + " tokens not found in the prompt");
}

int leading_answer_token(const Model& model, const std::string& answer) {
  std::vector<int> ids = model.tokens.encode(answer);
  if (ids.empty()) throw std::runtime_error("fact pair: answer \"" + answer + "\" tokenizes to nothing");
  return ids.front();
}

}  // namespace

FactPair FactPair::from_json(const json& j, const Model& model) {
  FactPair p;
  std::string prompt = j.at("prompt").get<std::string>();
  std::string cf_prompt = j.at("cf_prompt").get<std::string>();
  std::string subject = j.at("subject").get<std::string>();
  p.prompt = model.tokens.encode(prompt);
  p.cf_prompt = model.tokens.encode(cf_prompt);
  std::tie(p.subject_begin, p.subject_end) = find_span(p.prompt, model.tokens.encode(subject), "subject");
  if (j.contains("cf_subject")) {
    std::tie(p.cf_subject_begin, p.cf_subject_end) =
        find_span(p.cf_prompt, model.tokens.encode(j.at("cf_subject").get<std::string>()), "cf_subject");
  } else {
    // CounterFact-style pairs share the template; the counterfactual subject
    // occupies the same slot, end-aligned
    int tail = int(p.prompt.size()) - p.subject_end;
    p.cf_subject_end = int(p.cf_prompt.size()) - tail;
    p.cf_subject_begin = p.subject_begin;
    if (p.cf_subject_begin < 0 || p.cf_subject_begin > p.cf_subject_end ||
        p.cf_subject_end > int(p.cf_prompt.size()))
      throw std::runtime_error("fact pair: cannot align counterfactual subject span");
  }
  p.answer = leading_answer_token(model, j.at("answer").get<std::string>());
  p.cf_answer = leading_answer_token(model, j.at("cf_answer").get<std::string>());
  p.name = j.value("name", j.at("subject").get<std::string>());
  return p;
}

json FactPair::to_json(const Model& model) const {
  return json{{"prompt_tokens", nlohmann::json(prompt)},
              {"cf_prompt_tokens", nlohmann::json(cf_prompt)},
              {"subject_span", {subject_begin, subject_end}},
              {"cf_subject_span", {cf_subject_begin, cf_subject_end}},
              {"answer", model.tokens.surface(answer)},
              {"cf_answer", model.tokens.surface(cf_answer)},
              {"name", name}};
}

std::vector<FactPair> parse_fact_pairs(const json& j, const Model& model) {
  if (!j.is_array()) throw std::runtime_error("fact pairs: expected a JSON array");
  std::vector<FactPair> out;
  for (const auto& item : j) out.push_back(FactPair::from_json(item, model));
  return out;
}

json PatchResult::to_json() const {
  return json{{"block", {block_start, block_end}}, {"changed", changed},
              {"exact_flip", exact_flip},          {"kl", kl},
              {"top_baseline", top_baseline},      {"top_patched", top_patched}};
}

std::vector<FactPair> screen_gold_pairs(std::span<const FactPair> candidates, const Model& model) {
  if (candidates.empty()) throw std::runtime_error("screen_gold_pairs: no candidates");
  std::vector<FactPair> gold;
  for (const FactPair& pair : candidates) {
    int top_orig = argmax_token(next_token_distribution(forward(model, pair.prompt, {})));
    int top_cf = argmax_token(next_token_distribution(forward(model, pair.cf_prompt, {})));
    if (top_orig == pair.answer && top_cf == pair.cf_answer) gold.push_back(pair);
  }
  return gold;
}

namespace {

// aligned (recipient, donor) position pairs for a patch
std::vector<std::pair<int, int>> patch_positions(const FactPair& pair, PatchPositions mode) {
  std::vector<std::pair<int, int>> out;
  if (mode == PatchPositions::subject) {
    int len = std::min(pair.subject_end - pair.subject_begin,
                       pair.cf_subject_end - pair.cf_subject_begin);
    if (len <= 0) throw std::runtime_error("block_patch: subject spans do not overlap");
    // spans align from their ends
    for (int i = 0; i < len; ++i)
      out.push_back({pair.subject_end - len + i, pair.cf_subject_end - len + i});
    return out;
  }
  // template positions: shared prefix before the subject, suffix end-aligned
  int prefix = std::min(pair.subject_begin, pair.cf_subject_begin);
  for (int i = 0; i < prefix; ++i) out.push_back({i, i});
  int tail = std::min(int(pair.prompt.size()) - pair.subject_end,
                      int(pair.cf_prompt.size()) - pair.cf_subject_end);
  for (int i = 0; i < tail; ++i)
    out.push_back({int(pair.prompt.size()) - tail + i, int(pair.cf_prompt.size()) - tail + i});
  if (out.empty()) throw std::runtime_error("block_patch: no aligned template positions");
  return out;
}

ForwardOptions donor_patch_options(const FactPair& pair, int block_start, int block_end,
                                   PatchPositions mode, const Model& model,
                                   const ForwardTrace& donor, bool capture_attention) {
  ForwardOptions opt;
  if (capture_attention) opt.capture.attention = true;
  for (int layer = block_start; layer <= block_end; ++layer) {
    for (auto [recipient_pos, donor_pos] : patch_positions(pair, mode)) {
      ResidualEdit e;
      e.layer = layer;
      e.position = recipient_pos;
      e.delta = donor.residual_post[size_t(layer)].row(donor_pos).transpose();
      e.op = EditOp::replace;
      e.tag = "patch L" + std::to_string(layer) + " p" + std::to_string(recipient_pos);
      opt.edits.push_back(std::move(e));
    }
  }
  return opt;
}

}  // namespace

PatchResult block_patch(const FactPair& pair, int block_start, int block_end,
                        PatchPositions positions, const Model& model) {
  if (block_start < 0 || block_end < block_start || block_end >= model.spec.n_layers)
    throw std::runtime_error("block_patch: bad layer block");

  ForwardOptions donor_capture;
  donor_capture.capture.residual_post = true;
  ForwardTrace donor = forward(model, pair.cf_prompt, donor_capture);

  ForwardTrace baseline = forward(model, pair.prompt, {});
  Eigen::VectorXd base_dist = next_token_distribution(baseline);

  ForwardOptions patched_opt =
      donor_patch_options(pair, block_start, block_end, positions, model, donor, false);
  ForwardTrace patched = forward(model, pair.prompt, patched_opt);
  Eigen::VectorXd patched_dist = next_token_distribution(patched);

  PatchResult result;
  result.block_start = block_start;
  result.block_end = block_end;
  result.top_baseline = argmax_token(base_dist);
  result.top_patched = argmax_token(patched_dist);
  result.changed = result.top_patched != result.top_baseline;
  result.exact_flip = result.top_patched == pair.cf_answer;
  result.kl = kl_divergence(patched_dist, base_dist);
  return result;
}

json BlockGradient::to_json() const {
  json blocks_json = json::array();
  for (const BlockRate& b : blocks)
    blocks_json.push_back({{"block", {b.block_start, b.block_end}},
                           {"changed", b.changed},
                           {"total", b.total},
                           {"rate", b.rate}});
  json results = json::array();
  for (const PatchResult& r : subject_results) results.push_back(r.to_json());
  return json{{"blocks", blocks_json},
              {"subject_rate", subject_rate},
              {"template_rate", template_rate},
              {"fact_vs_template_ratio", fact_vs_template_ratio},
              {"subject_results", results}};
}

BlockGradient block_gradient(std::span<const FactPair> gold, const Model& model,
                             std::span<const std::pair<int, int>> blocks) {
  if (gold.empty()) throw std::runtime_error("block_gradient: empty gold set");
  BlockGradient out;
  int subject_changed = 0, template_changed = 0, n = 0;
  for (auto [start, end] : blocks) {
    BlockRate rate;
    rate.block_start = start;
    rate.block_end = end;
    for (const FactPair& pair : gold) {
      PatchResult r = block_patch(pair, start, end, PatchPositions::subject, model);
      rate.total += 1;
      rate.changed += r.changed ? 1 : 0;
      subject_changed += r.changed ? 1 : 0;
      out.subject_results.push_back(r);

      PatchResult t = block_patch(pair, start, end, PatchPositions::template_positions, model);
      template_changed += t.changed ? 1 : 0;
      n += 1;
    }
    rate.rate = double(rate.changed) / rate.total;
    out.blocks.push_back(rate);
  }
  out.subject_rate = double(subject_changed) / n;
  out.template_rate = double(template_changed) / n;
  out.fact_vs_template_ratio = out.subject_rate / std::max(out.template_rate, 1e-12);
  return out;
}

json KlSeparation::to_json() const {
  json j;
  j["mean_changed"] = mean_changed ? json(*mean_changed) : json(nullptr);
  j["mean_unchanged"] = mean_unchanged ? json(*mean_unchanged) : json(nullptr);
  j["ratio"] = ratio ? json(*ratio) : json(nullptr);
  return j;
}

KlSeparation kl_separation(std::span<const PatchResult> results) {
  double changed_sum = 0.0, unchanged_sum = 0.0;
  int changed_n = 0, unchanged_n = 0;
  for (const PatchResult& r : results) {
    if (r.changed) {
      changed_sum += r.kl;
      changed_n += 1;
    } else {
      unchanged_sum += r.kl;
      unchanged_n += 1;
    }
  }
  KlSeparation out;
  if (changed_n > 0) out.mean_changed = changed_sum / changed_n;
  if (unchanged_n > 0) out.mean_unchanged = unchanged_sum / unchanged_n;
  if (out.mean_changed && out.mean_unchanged)
    out.ratio = *out.mean_changed / std::max(*out.mean_unchanged, 1e-12);
  return out;
}

json FactualRouting::to_json() const {
  json heads_json = json::array();
  for (const HeadStat& h : heads)
    heads_json.push_back({{"layer", h.head.layer},
                          {"head", h.head.head},
                          {"appearance_rate", h.appearance_rate},
                          {"negative_fraction", h.negative_fraction},
                          {"mean_abs_delta", h.mean_abs_delta}});
  json blocks_json = json::array();
  for (auto [a, b] : blocks) blocks_json.push_back({a, b});
  return json{{"heads", heads_json},
              {"per_block_shift", per_block_shift},
              {"blocks", blocks_json},
              {"probe_block", probe_block}};
}

FactualRouting factual_routing(std::span<const FactPair> gold, const Model& model,
                               std::span<const std::pair<int, int>> blocks, int top_n,
                               int probe_block) {
  if (gold.empty()) throw std::runtime_error("factual_routing: empty gold set");
  if (probe_block < 0 || probe_block >= int(blocks.size()))
    throw std::runtime_error("factual_routing: probe block out of range");

  FactualRouting out;
  out.blocks.assign(blocks.begin(), blocks.end());
  out.probe_block = probe_block;
  out.per_block_shift.assign(blocks.size(), 0.0);

  struct Acc {
    int appearances = 0;
    int negative = 0;
    double abs_sum = 0.0;
  };
  std::map<HeadKey, Acc> acc;

  for (const FactPair& pair : gold) {
    ForwardOptions capture;
    capture.capture.attention = true;
    capture.capture.residual_post = true;
    ForwardTrace baseline = forward(model, pair.prompt, capture);
    ForwardOptions donor_capture;
    donor_capture.capture.residual_post = true;
    ForwardTrace donor = forward(model, pair.cf_prompt, donor_capture);

    int site = pair.subject_end - 1;
    for (size_t b = 0; b < blocks.size(); ++b) {
      ForwardOptions opt = donor_patch_options(pair, blocks[b].first, blocks[b].second,
                                               PatchPositions::subject, model, donor, true);
      ForwardTrace patched = forward(model, pair.prompt, opt);
      RoutingReport report = routing_analysis(baseline, patched, site, top_n);
      out.per_block_shift[b] += report.total_shift / double(gold.size());
      if (int(b) == probe_block) {
        for (const HeadDelta& h : report.top) {
          Acc& a = acc[HeadKey{h.layer, h.head}];
          a.appearances += 1;
          a.negative += h.delta < 0.0 ? 1 : 0;
          a.abs_sum += std::abs(h.delta);
        }
      }
    }
  }

  for (const auto& [key, a] : acc) {
    HeadStat stat;
    stat.head = key;
    stat.appearance_rate = double(a.appearances) / double(gold.size());
    stat.negative_fraction = double(a.negative) / double(a.appearances);
    stat.mean_abs_delta = a.abs_sum / a.appearances;
    out.heads.push_back(stat);
  }
  std::sort(out.heads.begin(), out.heads.end(), [](const HeadStat& a, const HeadStat& b) {
    if (a.appearance_rate != b.appearance_rate) return a.appearance_rate > b.appearance_rate;
    if (a.mean_abs_delta != b.mean_abs_delta) return a.mean_abs_delta > b.mean_abs_delta;
    return a.head < b.head;
  });
  return out;
}

}  // namespace clens
