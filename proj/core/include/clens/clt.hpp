#pragma once

#include <Eigen/Dense>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "clens/forward.hpp"
#include "clens/model.hpp"
#include "clens/tensor_file.hpp"

namespace clens {

enum class ReadPoint { post_attention_pre_mlp, post_block };
enum class CltNonlinearity { relu, identity };

struct CltSpec {
  int features_per_layer = 0;
  int n_layers = 0;
  ReadPoint read_point = ReadPoint::post_attention_pre_mlp;
  CltNonlinearity nonlinearity = CltNonlinearity::relu;

  nlohmann::json to_json() const;
  static CltSpec from_json(const nlohmann::json& j);
};

struct FeatureId {
  int layer = 0;
  int index = 0;

  std::string str() const;                     // "L22:10243"
  static FeatureId parse(const std::string&);  // accepts the same form
  auto operator<=>(const FeatureId&) const = default;
};

// One layer's slice of a cross-layer transcoder: the encoder plus one decoder
// row set per downstream layer (home layer through the final layer).
struct CltShard {
  int layer = 0;
  int n_layers = 0;
  Eigen::MatrixXf encoder;                 // [features, d_model]
  Eigen::VectorXf encoder_bias;            // size 0 when absent
  std::vector<Eigen::MatrixXf> decoders;   // decoders[j] targets layer `layer + j`

  const Eigen::MatrixXf& decoder_for(int target_layer) const;
  int64_t byte_size() const;
};

enum class EditMode { suppress, inject };

struct FeatureEdit {
  FeatureId feature;
  EditMode mode = EditMode::inject;
  float strength = 0.0f;
  int position = 0;
  int range_start = 0;  // inclusive downstream layer span
  int range_end = 0;

  nlohmann::json to_json() const;
  static FeatureEdit from_json(const nlohmann::json& j);
};

std::vector<FeatureEdit> parse_edit_list(const nlohmann::json& j);

// Lazily loads shards from a named-tensor archive and caches them.
// Loaded shards are immutable; release_all() drops the cache.
class Clt {
 public:
  explicit Clt(const std::string& path, MemoryMeter* meter = nullptr);

  const CltSpec& spec() const { return spec_; }
  const std::string& path() const { return path_; }
  const CltShard& shard(int layer) const;
  void release_all() const;

  Eigen::VectorXf decoder_row(const FeatureId& feature, int target_layer) const;

  // Used by forward() in CLT-reconstruction mode: encodes `residual` rows with
  // layer `layer`'s shard and adds each downstream decoder product into
  // recon[target].
  void accumulate_reconstruction(int layer, const Eigen::MatrixXf& residual,
                                 std::vector<Eigen::MatrixXf>& recon) const;

 private:
  std::string path_;
  CltSpec spec_;
  std::unique_ptr<TensorFileReader> reader_;
  MemoryMeter* meter_ = nullptr;
  mutable std::map<int, CltShard> cache_;
};

CltShard load_shard(const TensorFileReader& reader, const CltSpec& spec, int layer);

// Visits shards one layer at a time in ascending order, releasing each before
// the next loads; peak resident tensor memory stays within one shard plus a
// fixed workspace.
void stream_shards(const std::string& path, const std::function<void(const CltShard&)>& visitor,
                   MemoryMeter* meter = nullptr);

CltSpec read_clt_spec(const std::string& path);

Eigen::VectorXf encode(const CltShard& shard, const Eigen::VectorXf& residual,
                       CltNonlinearity nonlinearity);

// Expands feature edits into per-layer residual additions: one ResidualEdit
// per layer of the edit's range, delta = signed strength x decoder row.
// Suppress mode negates the strength.
std::vector<ResidualEdit> compile_edits(std::span<const FeatureEdit> edits, const Clt& clt);

struct CltValidationReport {
  int prompts_total = 0;
  int prompts_matched = 0;
  double top10_match_rate = 0.0;
  double max_rel_err = 0.0;
  double kl_under_injection = 0.0;
};

// Reference JSON: {"prompts":[{"tokens":[...],"layer":L,"top":[{"feature":"L3:7","value":x},...]}]}
CltValidationReport validate_against_reference(const Model& model, const Clt& clt,
                                               const nlohmann::json& reference);

}  // namespace clens
