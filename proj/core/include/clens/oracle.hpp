#pragma once

#include <span>
#include <vector>

#include "clens/forward.hpp"
#include "clens/model.hpp"

namespace clens {

// 64-bit brute-force reference forward. Plain nested loops over
// std::vector<double>, sharing no compute kernels with the engine; used as
// the independent oracle the float engine is checked against.
struct OracleTrace {
  int n_positions = 0;
  int d_model = 0;
  int vocab_size = 0;
  // [layer][position * d_model + i]
  std::vector<std::vector<double>> residual_pre, residual_mid, residual_post;
  // [layer][head][query * T + key]
  std::vector<std::vector<std::vector<double>>> attention;
  std::vector<double> logits;  // [position * vocab + v]

  std::vector<double> distribution_at(int position) const;
  std::vector<double> next_token_distribution() const;
};

OracleTrace oracle_forward(const Model& model, std::span<const int> tokens,
                           const ForwardOptions& options = {});

// max_i |a_i - b_i| / max(1e-12, max_i |b_i|)
double normalized_max_error(std::span<const float> a, std::span<const double> b);

}  // namespace clens
