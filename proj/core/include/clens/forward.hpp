#pragma once

#include <Eigen/Dense>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "clens/model.hpp"

namespace clens {

struct CaptureFlags {
  bool residual_pre = false;
  bool residual_mid = false;  // post-attention, pre-MLP
  bool residual_post = false;
  bool attention = false;
  bool logits = true;

  static CaptureFlags all() { return {true, true, true, true, true}; }
};

enum class EditOp { add, replace };

// Compiled form of any steering or patching intervention. Applied to the
// residual stream immediately after the named layer's block output at one
// position: `add` sums the delta in, `replace` overwrites the vector.
struct ResidualEdit {
  int layer = 0;
  int position = 0;
  Eigen::VectorXf delta;
  std::string tag;
  EditOp op = EditOp::add;
};

struct LayerMask {
  std::set<int> skipped;

  bool contains(int layer) const { return skipped.count(layer) != 0; }
  bool empty() const { return skipped.empty(); }
};

struct ForwardTrace {
  CaptureFlags captured;
  int n_positions = 0;
  std::vector<Eigen::MatrixXf> residual_pre;   // per layer, [T, d_model]
  std::vector<Eigen::MatrixXf> residual_mid;   // per layer, [T, d_model]
  std::vector<Eigen::MatrixXf> residual_post;  // per layer, [T, d_model]
  std::vector<std::vector<Eigen::MatrixXf>> attention;  // [layer][query head] -> [T, T]
  Eigen::MatrixXf logits;  // [T, vocab]

  // Asserts causality and row normalization on every captured layer.
  void check_attention_invariants(double tol = 1e-5) const;
};

class Clt;  // forward-declared; defined in clt.hpp

struct ForwardOptions {
  std::vector<ResidualEdit> edits;
  LayerMask mask;
  CaptureFlags capture;
  // When set, each layer's MLP output is replaced by the transcoder
  // reconstruction accumulated from this and all earlier layers' features.
  const Clt* clt_reconstruction = nullptr;
};

ForwardTrace forward(const Model& model, std::span<const int> tokens,
                     const ForwardOptions& options = {});

// Projects an intermediate residual through final normalization and the
// unembedding; returns a probability distribution over the vocabulary.
Eigen::VectorXd logit_lens(const ForwardTrace& trace, int layer, int position, const Model& model);

Eigen::VectorXd next_token_distribution(const ForwardTrace& trace);
Eigen::VectorXd distribution_at(const ForwardTrace& trace, int position);

Eigen::VectorXd softmax64(const Eigen::VectorXf& logits);

// Sum over p of p * ln(p/q), in nats. Terms with p == 0 contribute zero;
// q is floored at 1e-12 before division.
double kl_divergence(const Eigen::VectorXd& p, const Eigen::VectorXd& q);

// Greedy decode: appends argmax tokens (lowest index wins ties) until
// `stop_token` or `max_new_tokens`. The mask applies at every step.
std::vector<int> greedy_generate(const Model& model, std::vector<int> tokens, int max_new_tokens,
                                 int stop_token = -1, const LayerMask& mask = {});

int argmax_token(const Eigen::VectorXd& dist);

}  // namespace clens
