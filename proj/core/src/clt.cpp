#include "clens/clt.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

namespace clens {

using nlohmann::json;

json CltSpec::to_json() const {
  return json{{"features_per_layer", features_per_layer},
              {"n_layers", n_layers},
              {"read_point", read_point == ReadPoint::post_block ? "post_block"
                                                                 : "post_attention_pre_mlp"},
              {"nonlinearity", nonlinearity == CltNonlinearity::relu ? "relu" : "identity"}};
}

CltSpec CltSpec::from_json(const json& j) {
  CltSpec s;
  s.features_per_layer = j.at("features_per_layer").get<int>();
  s.n_layers = j.at("n_layers").get<int>();
  std::string rp = j.value("read_point", std::string("post_attention_pre_mlp"));
  if (rp == "post_attention_pre_mlp") {
    s.read_point = ReadPoint::post_attention_pre_mlp;
  } else if (rp == "post_block") {
    s.read_point = ReadPoint::post_block;
  } else {
    throw std::runtime_error("clt spec: unknown read_point " + rp);
  }
  std::string nl = j.value("nonlinearity", std::string("relu"));
  if (nl == "relu") {
    s.nonlinearity = CltNonlinearity::relu;
  } else if (nl == "identity") {
    s.nonlinearity = CltNonlinearity::identity;
  } else {
    throw std::runtime_error("clt spec: unknown nonlinearity " + nl);
  }
  if (s.features_per_layer < 1 || s.n_layers < 1)
    throw std::runtime_error("clt spec: features_per_layer and n_layers must be >= 1");
  return s;
}

std::string FeatureId::str() const {
  return "L" + std::to_string(layer) + ":" + std::to_string(index);
}

FeatureId FeatureId::parse(const std::string& s) {
  if (s.size() < 4 || (s[0] != 'L' && s[0] != 'l'))
    throw std::runtime_error("feature id: expected \"L<layer>:<index>\", got \"" + s + "\"");
  size_t colon = s.find(':');
  if (colon == std::string::npos)
    throw std::runtime_error("feature id: missing ':' in \"" + s + "\"");
  FeatureId f;
  try {
    f.layer = std::stoi(s.substr(1, colon - 1));
    f.index = std::stoi(s.substr(colon + 1));
  } catch (const std::exception&) {
    throw std::runtime_error("feature id: bad numbers in \"" + s + "\"");
  }
  if (f.layer < 0 || f.index < 0)
    throw std::runtime_error("feature id: negative fields in \"" + s + "\"");
  return f;
}

const Eigen::MatrixXf& CltShard::decoder_for(int target_layer) const {
  int j = target_layer - layer;
  if (j < 0 || j >= int(decoders.size()))
    throw std::runtime_error("clt shard L" + std::to_string(layer) + ": no decoder for layer " +
                             std::to_string(target_layer));
  return decoders[size_t(j)];
}

int64_t CltShard::byte_size() const {
  int64_t n = encoder.size() + encoder_bias.size();
  for (const auto& d : decoders) n += d.size();
  return n * int64_t(sizeof(float));
}

json FeatureEdit::to_json() const {
  return json{{"feature", feature.str()},
              {"mode", mode == EditMode::suppress ? "suppress" : "inject"},
              {"strength", strength},
              {"position", position},
              {"layers", {range_start, range_end}}};
}

FeatureEdit FeatureEdit::from_json(const json& j) {
  FeatureEdit e;
  e.feature = FeatureId::parse(j.at("feature").get<std::string>());
  std::string mode = j.at("mode").get<std::string>();
  if (mode == "suppress") {
    e.mode = EditMode::suppress;
  } else if (mode == "inject") {
    e.mode = EditMode::inject;
  } else {
    throw std::runtime_error("feature edit: unknown mode " + mode);
  }
  e.strength = j.at("strength").get<float>();
  e.position = j.at("position").get<int>();
  auto layers = j.at("layers").get<std::vector<int>>();
  if (layers.size() != 2)
    throw std::runtime_error("feature edit: \"layers\" must be [start, end]");
  e.range_start = layers[0];
  e.range_end = layers[1];
  return e;
}

std::vector<FeatureEdit> parse_edit_list(const json& j) {
  if (!j.is_array()) throw std::runtime_error("edit list: expected a JSON array");
  std::vector<FeatureEdit> out;
  for (const auto& item : j) out.push_back(FeatureEdit::from_json(item));
  return out;
}

namespace {

std::string shard_prefix(int layer) { return "clt.layers." + std::to_string(layer) + "."; }

Eigen::MatrixXf to_matrix(const HostTensor& t, const std::string& name) {
  if (t.shape.size() != 2) throw std::runtime_error("clt: tensor " + name + " is not 2-D");
  std::vector<float> v = t.to_f32();
  Eigen::MatrixXf m(t.shape[0], t.shape[1]);
  for (long i = 0; i < m.rows(); ++i)
    for (long j = 0; j < m.cols(); ++j) m(i, j) = v[size_t(i) * size_t(m.cols()) + size_t(j)];
  return m;
}

}  // namespace

CltShard load_shard(const TensorFileReader& reader, const CltSpec& spec, int layer) {
  CltShard shard;
  shard.layer = layer;
  shard.n_layers = spec.n_layers;
  std::string prefix = shard_prefix(layer);
  std::string enc_name = prefix + "encoder.weight";
  if (!reader.contains(enc_name))
    throw std::runtime_error("clt: missing shard for layer " + std::to_string(layer) + " (" +
                             enc_name + ")");
  HostTensor enc = reader.read(enc_name);
  if (enc.dtype == Dtype::f64)
    throw std::runtime_error("clt: dtype mismatch for " + enc_name + ": expected F32 or BF16");
  shard.encoder = to_matrix(enc, enc_name);
  if (shard.encoder.rows() != spec.features_per_layer)
    throw std::runtime_error("clt: encoder row count mismatch at layer " + std::to_string(layer));
  std::string bias_name = prefix + "encoder.bias";
  if (reader.contains(bias_name)) {
    std::vector<float> b = reader.read(bias_name).to_f32();
    shard.encoder_bias = Eigen::Map<const Eigen::VectorXf>(b.data(), long(b.size()));
  }
  shard.decoders.reserve(size_t(spec.n_layers - layer));
  for (int target = layer; target < spec.n_layers; ++target) {
    std::string dec_name = prefix + "decoder." + std::to_string(target) + ".weight";
    if (!reader.contains(dec_name))
      throw std::runtime_error("clt: missing decoder for layer " + std::to_string(layer) +
                               " -> " + std::to_string(target));
    shard.decoders.push_back(to_matrix(reader.read(dec_name), dec_name));
  }
  return shard;
}

CltSpec read_clt_spec(const std::string& path) {
  TensorFileReader reader(path);
  return CltSpec::from_json(json::parse(reader.metadata_value("clt_config")));
}

Clt::Clt(const std::string& path, MemoryMeter* meter) : path_(path), meter_(meter) {
  reader_ = std::make_unique<TensorFileReader>(path);
  spec_ = CltSpec::from_json(json::parse(reader_->metadata_value("clt_config")));
}

const CltShard& Clt::shard(int layer) const {
  if (layer < 0 || layer >= spec_.n_layers)
    throw std::runtime_error("clt: shard layer " + std::to_string(layer) + " out of range");
  auto it = cache_.find(layer);
  if (it != cache_.end()) return it->second;
  CltShard shard = load_shard(*reader_, spec_, layer);
  if (meter_) meter_->add(shard.byte_size());
  return cache_.emplace(layer, std::move(shard)).first->second;
}

void Clt::release_all() const {
  if (meter_) {
    for (const auto& [l, s] : cache_) meter_->sub(s.byte_size());
  }
  cache_.clear();
}

Eigen::VectorXf Clt::decoder_row(const FeatureId& feature, int target_layer) const {
  const CltShard& s = shard(feature.layer);
  if (feature.index < 0 || feature.index >= spec_.features_per_layer)
    throw std::runtime_error("clt: feature index out of range in " + feature.str());
  return s.decoder_for(target_layer).row(feature.index).transpose();
}

void Clt::accumulate_reconstruction(int layer, const Eigen::MatrixXf& residual,
                                    std::vector<Eigen::MatrixXf>& recon) const {
  const CltShard& s = shard(layer);
  Eigen::MatrixXf acts = residual * s.encoder.transpose();  // [T, F]
  if (s.encoder_bias.size() > 0) acts.rowwise() += s.encoder_bias.transpose();
  if (spec_.nonlinearity == CltNonlinearity::relu) acts = acts.cwiseMax(0.0f);
  for (int target = layer; target < spec_.n_layers; ++target) {
    recon[size_t(target)] += acts * s.decoder_for(target);
  }
}

void stream_shards(const std::string& path, const std::function<void(const CltShard&)>& visitor,
                   MemoryMeter* meter) {
  TensorFileReader reader(path);
  CltSpec spec = CltSpec::from_json(json::parse(reader.metadata_value("clt_config")));
  for (int layer = 0; layer < spec.n_layers; ++layer) {
    CltShard shard = load_shard(reader, spec, layer);
    int64_t bytes = shard.byte_size();
    if (meter) meter->add(bytes);
    visitor(shard);
    if (meter) meter->sub(bytes);
    // shard destructs here, before the next layer loads
  }
}

Eigen::VectorXf encode(const CltShard& shard, const Eigen::VectorXf& residual,
                       CltNonlinearity nonlinearity) {
  if (residual.size() != shard.encoder.cols())
    throw std::runtime_error("clt encode: residual size " + std::to_string(residual.size()) +
                             " does not match encoder width " +
                             std::to_string(shard.encoder.cols()));
  Eigen::VectorXf acts = shard.encoder * residual;
  if (shard.encoder_bias.size() > 0) acts += shard.encoder_bias;
  if (nonlinearity == CltNonlinearity::relu) acts = acts.cwiseMax(0.0f);
  return acts;
}

std::vector<ResidualEdit> compile_edits(std::span<const FeatureEdit> edits, const Clt& clt) {
  std::vector<ResidualEdit> out;
  for (const FeatureEdit& e : edits) {
    if (e.feature.layer < 0 || e.feature.layer >= clt.spec().n_layers)
      throw std::runtime_error("compile_edits: feature layer out of range in " + e.feature.str());
    if (e.feature.index < 0 || e.feature.index >= clt.spec().features_per_layer)
      throw std::runtime_error("compile_edits: feature index out of range in " + e.feature.str());
    if (e.range_start < e.feature.layer)
      throw std::runtime_error("compile_edits: layer range starts below home layer of " +
                               e.feature.str());
    if (e.range_end < e.range_start || e.range_end >= clt.spec().n_layers)
      throw std::runtime_error("compile_edits: bad layer range for " + e.feature.str());
    float signed_strength = e.mode == EditMode::suppress ? -e.strength : e.strength;
    const char* mode_name = e.mode == EditMode::suppress ? "suppress" : "inject";
    for (int target = e.range_start; target <= e.range_end; ++target) {
      ResidualEdit r;
      r.layer = target;
      r.position = e.position;
      r.delta = signed_strength * clt.decoder_row(e.feature, target);
      r.tag = std::string(mode_name) + " " + e.feature.str() + " @L" + std::to_string(target);
      out.push_back(std::move(r));
    }
  }
  return out;
}

CltValidationReport validate_against_reference(const Model& model, const Clt& clt,
                                               const json& reference) {
  const auto& prompts = reference.at("prompts");
  if (!prompts.is_array() || prompts.empty())
    throw std::runtime_error("clt validation: reference has no prompts");
  CltValidationReport report;
  report.prompts_total = int(prompts.size());

  double kl_sum = 0.0;
  for (const auto& entry : prompts) {
    std::vector<int> tokens = entry.at("tokens").get<std::vector<int>>();
    int layer = entry.at("layer").get<int>();
    const auto& ref_top = entry.at("top");

    ForwardOptions opt;
    opt.capture.residual_mid = true;
    opt.capture.residual_post = true;
    ForwardTrace trace = forward(model, tokens, opt);
    const Eigen::MatrixXf& resid = clt.spec().read_point == ReadPoint::post_attention_pre_mlp
                                       ? trace.residual_mid[size_t(layer)]
                                       : trace.residual_post[size_t(layer)];
    Eigen::VectorXf acts =
        encode(clt.shard(layer), resid.row(resid.rows() - 1).transpose(), clt.spec().nonlinearity);

    size_t k = ref_top.size();
    std::vector<int> order(size_t(acts.size()));
    for (size_t i = 0; i < order.size(); ++i) order[i] = int(i);
    std::partial_sort(order.begin(), order.begin() + long(k), order.end(),
                      [&](int a, int b) { return acts[a] > acts[b] || (acts[a] == acts[b] && a < b); });

    std::set<int> ours(order.begin(), order.begin() + long(k));
    bool matched = true;
    double rel_err = 0.0;
    for (const auto& rt : ref_top) {
      FeatureId f = FeatureId::parse(rt.at("feature").get<std::string>());
      if (f.layer != layer || ours.count(f.index) == 0) {
        matched = false;
        continue;
      }
      double want = rt.at("value").get<double>();
      double got = double(acts[f.index]);
      double denom = std::max(std::abs(want), 1e-12);
      rel_err = std::max(rel_err, std::abs(got - want) / denom);
    }
    if (matched) {
      report.prompts_matched += 1;
      report.max_rel_err = std::max(report.max_rel_err, rel_err);
    }

    ForwardTrace clean = forward(model, tokens, {});
    ForwardOptions injected;
    injected.clt_reconstruction = &clt;
    ForwardTrace with_clt = forward(model, tokens, injected);
    kl_sum += kl_divergence(next_token_distribution(with_clt), next_token_distribution(clean));
  }
  report.top10_match_rate = double(report.prompts_matched) / report.prompts_total;
  report.kl_under_injection = kl_sum / report.prompts_total;
  return report;
}

}  // namespace clens
