#include "clens/model.hpp"

#include <stdexcept>

#include "clens/tensor_file.hpp"

namespace clens {

using nlohmann::json;

Activation parse_activation(const std::string& name) {
  if (name == "identity") return Activation::identity;
  if (name == "relu") return Activation::relu;
  if (name == "gelu") return Activation::gelu;
  if (name == "relu_glu") return Activation::relu_glu;
  if (name == "silu_glu") return Activation::silu_glu;
  throw std::runtime_error("unknown activation: " + name);
}

const char* activation_name(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::relu: return "relu";
    case Activation::gelu: return "gelu";
    case Activation::relu_glu: return "relu_glu";
    case Activation::silu_glu: return "silu_glu";
  }
  throw std::logic_error("bad activation");
}

bool is_gated(Activation a) {
  return a == Activation::relu_glu || a == Activation::silu_glu;
}

void ModelSpec::validate() const {
  if (n_layers < 1) throw std::runtime_error("model spec: n_layers must be >= 1");
  if (n_heads < 1 || n_kv_heads < 1) throw std::runtime_error("model spec: head counts must be >= 1");
  if (n_heads % n_kv_heads != 0)
    throw std::runtime_error("model spec: n_kv_heads must divide n_heads");
  if (d_model < 1 || d_head < 1 || vocab_size < 1 || d_ff < 1)
    throw std::runtime_error("model spec: dimensions must be >= 1");
  if (norm_placement != "pre")
    throw std::runtime_error("model spec: only pre-norm placement is supported");
}

json ModelSpec::to_json() const {
  return json{{"n_layers", n_layers},
              {"n_heads", n_heads},
              {"n_kv_heads", n_kv_heads},
              {"d_model", d_model},
              {"d_head", d_head},
              {"vocab_size", vocab_size},
              {"d_ff", d_ff},
              {"activation", activation_name(activation)},
              {"tie_embeddings", tie_embeddings},
              {"rope", rope},
              {"rope_theta", rope_theta},
              {"norm_eps", norm_eps},
              {"embedding_scale", embedding_scale},
              {"norm_placement", norm_placement}};
}

ModelSpec ModelSpec::from_json(const json& j) {
  ModelSpec s;
  s.n_layers = j.at("n_layers").get<int>();
  s.n_heads = j.at("n_heads").get<int>();
  s.n_kv_heads = j.value("n_kv_heads", s.n_heads);
  s.d_model = j.at("d_model").get<int>();
  s.d_head = j.at("d_head").get<int>();
  s.vocab_size = j.at("vocab_size").get<int>();
  s.d_ff = j.at("d_ff").get<int>();
  s.activation = parse_activation(j.value("activation", std::string("relu_glu")));
  s.tie_embeddings = j.value("tie_embeddings", false);
  s.rope = j.value("rope", false);
  s.rope_theta = j.value("rope_theta", 10000.0);
  s.norm_eps = j.value("norm_eps", 1e-6);
  s.embedding_scale = j.value("embedding_scale", 1.0);
  s.norm_placement = j.value("norm_placement", std::string("pre"));
  s.validate();
  return s;
}

const std::string& TokenTable::surface(int id) const {
  if (id < 0 || id >= int(surfaces.size()))
    throw std::out_of_range("token table: id " + std::to_string(id) + " out of range");
  return surfaces[size_t(id)];
}

std::optional<int> TokenTable::find(const std::string& s) const {
  for (size_t i = 0; i < surfaces.size(); ++i) {
    if (surfaces[i] == s) return int(i);
  }
  return std::nullopt;
}

std::vector<int> TokenTable::encode(const std::string& text) const {
  std::vector<int> ids;
  size_t pos = 0;
  while (pos < text.size()) {
    if (text[pos] == ' ') {
      ++pos;
      continue;
    }
    int best = -1;
    size_t best_len = 0;
    for (size_t i = 0; i < surfaces.size(); ++i) {
      const std::string& s = surfaces[i];
      if (s.empty() || s.size() < best_len) continue;
      if (text.compare(pos, s.size(), s) == 0 && s.size() > best_len) {
        best = int(i);
        best_len = s.size();
      }
    }
    if (best < 0)
      throw std::runtime_error("token table: no token matches text at \"" + text.substr(pos, 12) + "\"");
    ids.push_back(best);
    pos += best_len;
  }
  return ids;
}

std::string TokenTable::decode(const std::vector<int>& ids) const {
  std::string out;
  for (size_t i = 0; i < ids.size(); ++i) {
    const std::string& s = surface(ids[i]);
    if (!out.empty() && s != "\n" && out.back() != '\n') out += ' ';
    out += s;
  }
  return out;
}

void Model::validate_shapes() const {
  spec.validate();
  auto expect = [](const char* name, long rows, long cols, long er, long ec) {
    if (rows != er || cols != ec)
      throw std::runtime_error(std::string("model: bad shape for ") + name + ": got " +
                               std::to_string(rows) + "x" + std::to_string(cols) + ", want " +
                               std::to_string(er) + "x" + std::to_string(ec));
  };
  expect("embedding", embedding.rows(), embedding.cols(), spec.vocab_size, spec.d_model);
  expect("unembedding", unembedding.rows(), unembedding.cols(), spec.vocab_size, spec.d_model);
  if (final_norm.size() != spec.d_model) throw std::runtime_error("model: bad final_norm size");
  if (int(layers.size()) != spec.n_layers) throw std::runtime_error("model: layer count mismatch");
  long qd = long(spec.n_heads) * spec.d_head;
  long kvd = long(spec.n_kv_heads) * spec.d_head;
  for (int l = 0; l < spec.n_layers; ++l) {
    const LayerWeights& w = layers[size_t(l)];
    expect("wq", w.wq.rows(), w.wq.cols(), qd, spec.d_model);
    expect("wk", w.wk.rows(), w.wk.cols(), kvd, spec.d_model);
    expect("wv", w.wv.rows(), w.wv.cols(), kvd, spec.d_model);
    expect("wo", w.wo.rows(), w.wo.cols(), spec.d_model, qd);
    expect("w_up", w.w_up.rows(), w.w_up.cols(), spec.d_ff, spec.d_model);
    expect("w_down", w.w_down.rows(), w.w_down.cols(), spec.d_model, spec.d_ff);
    if (is_gated(spec.activation))
      expect("w_gate", w.w_gate.rows(), w.w_gate.cols(), spec.d_ff, spec.d_model);
    if (w.attn_norm.size() != spec.d_model || w.mlp_norm.size() != spec.d_model)
      throw std::runtime_error("model: bad norm gain size at layer " + std::to_string(l));
    if (w.up_bias.size() != 0 && w.up_bias.size() != spec.d_ff)
      throw std::runtime_error("model: bad up_bias size at layer " + std::to_string(l));
    if (w.gate_bias.size() != 0 && w.gate_bias.size() != spec.d_ff)
      throw std::runtime_error("model: bad gate_bias size at layer " + std::to_string(l));
  }
}

namespace {

Eigen::MatrixXf read_matrix(const TensorFileReader& r, const std::string& name) {
  HostTensor t = r.read(name);
  if (t.shape.size() != 2)
    throw std::runtime_error("model: tensor " + name + " is not 2-D");
  std::vector<float> v = t.to_f32();
  // archives store row-major
  Eigen::MatrixXf m(t.shape[0], t.shape[1]);
  for (long i = 0; i < m.rows(); ++i)
    for (long j = 0; j < m.cols(); ++j) m(i, j) = v[size_t(i) * size_t(m.cols()) + size_t(j)];
  return m;
}

Eigen::VectorXf read_vector(const TensorFileReader& r, const std::string& name) {
  HostTensor t = r.read(name);
  if (t.shape.size() != 1)
    throw std::runtime_error("model: tensor " + name + " is not 1-D");
  std::vector<float> v = t.to_f32();
  return Eigen::Map<const Eigen::VectorXf>(v.data(), long(v.size()));
}

HostTensor matrix_tensor(const Eigen::MatrixXf& m) {
  std::vector<float> v(size_t(m.rows()) * size_t(m.cols()));
  for (long i = 0; i < m.rows(); ++i)
    for (long j = 0; j < m.cols(); ++j) v[size_t(i) * size_t(m.cols()) + size_t(j)] = m(i, j);
  return HostTensor::from_f32({m.rows(), m.cols()}, v);
}

HostTensor vector_tensor(const Eigen::VectorXf& v) {
  std::vector<float> data(v.data(), v.data() + v.size());
  return HostTensor::from_f32({v.size()}, data);
}

std::string layer_name(int l, const char* suffix) {
  return "layers." + std::to_string(l) + "." + suffix;
}

}  // namespace

Model load_model(const std::string& path) {
  TensorFileReader r(path);
  Model m;
  m.spec = ModelSpec::from_json(json::parse(r.metadata_value("model_config")));
  m.embedding = read_matrix(r, "embed.weight");
  m.final_norm = read_vector(r, "final_norm.weight");
  m.layers.resize(size_t(m.spec.n_layers));
  for (int l = 0; l < m.spec.n_layers; ++l) {
    LayerWeights& w = m.layers[size_t(l)];
    w.wq = read_matrix(r, layer_name(l, "attn.q.weight"));
    w.wk = read_matrix(r, layer_name(l, "attn.k.weight"));
    w.wv = read_matrix(r, layer_name(l, "attn.v.weight"));
    w.wo = read_matrix(r, layer_name(l, "attn.o.weight"));
    w.attn_norm = read_vector(r, layer_name(l, "attn_norm.weight"));
    w.mlp_norm = read_vector(r, layer_name(l, "mlp_norm.weight"));
    w.w_up = read_matrix(r, layer_name(l, "mlp.up.weight"));
    w.w_down = read_matrix(r, layer_name(l, "mlp.down.weight"));
    if (is_gated(m.spec.activation)) w.w_gate = read_matrix(r, layer_name(l, "mlp.gate.weight"));
    if (r.contains(layer_name(l, "mlp.up.bias"))) w.up_bias = read_vector(r, layer_name(l, "mlp.up.bias"));
    if (r.contains(layer_name(l, "mlp.gate.bias"))) w.gate_bias = read_vector(r, layer_name(l, "mlp.gate.bias"));
  }
  m.unembedding = m.spec.tie_embeddings ? m.embedding : read_matrix(r, "unembed.weight");
  if (auto table = r.metadata_value_opt("token_table")) {
    m.tokens.surfaces = json::parse(*table).get<std::vector<std::string>>();
  }
  for (const auto& [k, v] : r.metadata()) {
    if (k != "model_config" && k != "token_table") m.extra_metadata[k] = v;
  }
  m.validate_shapes();
  return m;
}

void save_model(const Model& m, const std::string& path) {
  m.validate_shapes();
  TensorFileWriter w;
  w.set_metadata("model_config", m.spec.to_json().dump());
  if (!m.tokens.empty()) w.set_metadata("token_table", json(m.tokens.surfaces).dump());
  for (const auto& [k, v] : m.extra_metadata) w.set_metadata(k, v);
  w.add("embed.weight", matrix_tensor(m.embedding));
  w.add("final_norm.weight", vector_tensor(m.final_norm));
  if (!m.spec.tie_embeddings) w.add("unembed.weight", matrix_tensor(m.unembedding));
  for (int l = 0; l < m.spec.n_layers; ++l) {
    const LayerWeights& lw = m.layers[size_t(l)];
    w.add(layer_name(l, "attn.q.weight"), matrix_tensor(lw.wq));
    w.add(layer_name(l, "attn.k.weight"), matrix_tensor(lw.wk));
    w.add(layer_name(l, "attn.v.weight"), matrix_tensor(lw.wv));
    w.add(layer_name(l, "attn.o.weight"), matrix_tensor(lw.wo));
    w.add(layer_name(l, "attn_norm.weight"), vector_tensor(lw.attn_norm));
    w.add(layer_name(l, "mlp_norm.weight"), vector_tensor(lw.mlp_norm));
    w.add(layer_name(l, "mlp.up.weight"), matrix_tensor(lw.w_up));
    w.add(layer_name(l, "mlp.down.weight"), matrix_tensor(lw.w_down));
    if (is_gated(m.spec.activation)) w.add(layer_name(l, "mlp.gate.weight"), matrix_tensor(lw.w_gate));
    if (lw.up_bias.size() > 0) w.add(layer_name(l, "mlp.up.bias"), vector_tensor(lw.up_bias));
    if (lw.gate_bias.size() > 0) w.add(layer_name(l, "mlp.gate.bias"), vector_tensor(lw.gate_bias));
  }
  w.write(path);
}

}  // namespace clens
