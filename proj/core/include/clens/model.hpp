#pragma once

#include <Eigen/Dense>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace clens {

enum class Activation { identity, relu, gelu, relu_glu, silu_glu };

Activation parse_activation(const std::string& name);
const char* activation_name(Activation a);
bool is_gated(Activation a);

struct ModelSpec {
  int n_layers = 0;
  int n_heads = 0;
  int n_kv_heads = 0;
  int d_model = 0;
  int d_head = 0;
  int vocab_size = 0;
  int d_ff = 0;
  Activation activation = Activation::relu_glu;
  bool tie_embeddings = false;
  bool rope = false;
  double rope_theta = 10000.0;
  double norm_eps = 1e-6;
  double embedding_scale = 1.0;
  std::string norm_placement = "pre";

  void validate() const;
  nlohmann::json to_json() const;
  static ModelSpec from_json(const nlohmann::json& j);
};

// Maps token ids to surface strings; greedy longest-prefix tokenizer for
// fixture vocabularies. Spaces separate tokens and are not tokens themselves,
// except a literal "\n" surface.
struct TokenTable {
  std::vector<std::string> surfaces;

  bool empty() const { return surfaces.empty(); }
  const std::string& surface(int id) const;
  std::optional<int> find(const std::string& surface) const;
  std::vector<int> encode(const std::string& text) const;
  std::string decode(const std::vector<int>& ids) const;
};

struct LayerWeights {
  Eigen::MatrixXf wq, wk, wv;  // [n_heads*d_head, d_model], [n_kv*d_head, d_model] x2
  Eigen::MatrixXf wo;          // [d_model, n_heads*d_head]
  Eigen::VectorXf attn_norm, mlp_norm;      // rmsnorm gains
  Eigen::MatrixXf w_up, w_gate, w_down;     // [d_ff,d], [d_ff,d] (gated only), [d,d_ff]
  Eigen::VectorXf up_bias, gate_bias;       // optional pre-activation biases (size 0 = absent)
};

struct Model {
  ModelSpec spec;
  Eigen::MatrixXf embedding;    // [vocab, d_model]
  std::vector<LayerWeights> layers;
  Eigen::VectorXf final_norm;
  Eigen::MatrixXf unembedding;  // [vocab, d_model]; shares values with embedding when tied
  TokenTable tokens;
  std::map<std::string, std::string> extra_metadata;  // carried through load/save

  void validate_shapes() const;
};

Model load_model(const std::string& path);
void save_model(const Model& model, const std::string& path);

}  // namespace clens
