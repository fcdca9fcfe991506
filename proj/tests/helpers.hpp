#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>

#include "clens/model.hpp"

namespace clens::test {

// Deterministic gaussian via Box-Muller so fixtures do not depend on the
// standard library's distribution internals.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  double uniform() {
    return double(gen_() >> 11) * (1.0 / 9007199254740992.0);
  }
  double gauss() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 1e-300);
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * M_PI * u2);
    have_spare_ = true;
    return r * std::cos(2.0 * M_PI * u2);
  }
  int uniform_int(int lo, int hi) {  // inclusive
    return lo + int(gen_() % uint64_t(hi - lo + 1));
  }

 private:
  std::mt19937_64 gen_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

inline Eigen::MatrixXf random_matrix(Rng& rng, long rows, long cols, double scale) {
  Eigen::MatrixXf m(rows, cols);
  for (long i = 0; i < rows; ++i)
    for (long j = 0; j < cols; ++j) m(i, j) = float(rng.gauss() * scale);
  return m;
}

// Small random transformer with tame scales; rmsnorm keeps activations O(1).
inline Model random_model(uint64_t seed, int n_layers = 3, int n_heads = 4, int n_kv_heads = 2,
                          int d_model = 24, int d_head = 6, int vocab = 32, int d_ff = 20,
                          Activation act = Activation::silu_glu, bool rope = true) {
  Rng rng(seed);
  Model m;
  m.spec.n_layers = n_layers;
  m.spec.n_heads = n_heads;
  m.spec.n_kv_heads = n_kv_heads;
  m.spec.d_model = d_model;
  m.spec.d_head = d_head;
  m.spec.vocab_size = vocab;
  m.spec.d_ff = d_ff;
  m.spec.activation = act;
  m.spec.rope = rope;
  double s = 0.5 / std::sqrt(double(d_model));
  m.embedding = random_matrix(rng, vocab, d_model, 1.0);
  m.unembedding = random_matrix(rng, vocab, d_model, 1.0);
  m.final_norm = Eigen::VectorXf::Ones(d_model);
  for (int l = 0; l < n_layers; ++l) {
    LayerWeights w;
    w.wq = random_matrix(rng, long(n_heads) * d_head, d_model, s);
    w.wk = random_matrix(rng, long(n_kv_heads) * d_head, d_model, s);
    w.wv = random_matrix(rng, long(n_kv_heads) * d_head, d_model, s);
    w.wo = random_matrix(rng, d_model, long(n_heads) * d_head, s);
    w.attn_norm = Eigen::VectorXf::Ones(d_model);
    w.mlp_norm = Eigen::VectorXf::Ones(d_model);
    w.w_up = random_matrix(rng, d_ff, d_model, s);
    w.w_down = random_matrix(rng, d_model, d_ff, s);
    if (is_gated(act)) w.w_gate = random_matrix(rng, d_ff, d_model, s);
    m.layers.push_back(std::move(w));
  }
  m.validate_shapes();
  return m;
}

inline std::vector<int> random_tokens(Rng& rng, int len, int vocab) {
  std::vector<int> out;
  for (int i = 0; i < len; ++i) out.push_back(rng.uniform_int(0, vocab - 1));
  return out;
}

class TempDir {
 public:
  explicit TempDir(const std::string& name) {
    path_ = std::filesystem::temp_directory_path() / ("clens_test_" + name + "_" + std::to_string(::getpid()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  std::string file(const std::string& name) const { return (path_ / name).string(); }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace clens::test
