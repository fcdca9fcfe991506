#include "clens/forward.hpp"

#include <cmath>
#include <stdexcept>

#include "clens/clt.hpp"

namespace clens {

namespace {

Eigen::MatrixXf rmsnorm_rows(const Eigen::MatrixXf& x, const Eigen::VectorXf& gain, float eps) {
  Eigen::MatrixXf out(x.rows(), x.cols());
  for (long t = 0; t < x.rows(); ++t) {
    float ms = x.row(t).squaredNorm() / float(x.cols());
    float inv = 1.0f / std::sqrt(ms + eps);
    out.row(t) = x.row(t).cwiseProduct(gain.transpose()) * inv;
  }
  return out;
}

void apply_rope(Eigen::MatrixXf& qk, int d_head, double theta) {
  // half-split convention: dims [0, d/2) pair with [d/2, d)
  long n_heads = qk.cols() / d_head;
  int half = d_head / 2;
  for (long t = 0; t < qk.rows(); ++t) {
    for (long h = 0; h < n_heads; ++h) {
      long base = h * d_head;
      for (int j = 0; j < half; ++j) {
        double freq = std::pow(theta, -2.0 * j / double(d_head));
        float c = float(std::cos(double(t) * freq));
        float s = float(std::sin(double(t) * freq));
        float a = qk(t, base + j);
        float b = qk(t, base + half + j);
        qk(t, base + j) = a * c - b * s;
        qk(t, base + half + j) = a * s + b * c;
      }
    }
  }
}

Eigen::MatrixXf mlp_forward(const LayerWeights& w, const Eigen::MatrixXf& xn, Activation act) {
  Eigen::MatrixXf up = xn * w.w_up.transpose();  // [T, d_ff]
  if (w.up_bias.size() > 0) up.rowwise() += w.up_bias.transpose();
  switch (act) {
    case Activation::identity:
      break;
    case Activation::relu:
      up = up.cwiseMax(0.0f);
      break;
    case Activation::gelu:
      up = up.unaryExpr([](float v) {
        return 0.5f * v * (1.0f + std::erf(v * 0.70710678118654752440f));
      });
      break;
    case Activation::relu_glu:
    case Activation::silu_glu: {
      Eigen::MatrixXf gate = xn * w.w_gate.transpose();
      if (w.gate_bias.size() > 0) gate.rowwise() += w.gate_bias.transpose();
      if (act == Activation::relu_glu) {
        gate = gate.cwiseMax(0.0f);
      } else {
        gate = gate.unaryExpr([](float v) { return v / (1.0f + std::exp(-v)); });
      }
      up = gate.cwiseProduct(up);
      break;
    }
  }
  return up * w.w_down.transpose();  // [T, d_model]
}

void validate_edits(const Model& model, long n_positions, const std::vector<ResidualEdit>& edits) {
  for (const ResidualEdit& e : edits) {
    auto reject = [&](const std::string& why) {
      throw std::runtime_error("forward: rejected edit \"" + e.tag + "\": " + why);
    };
    if (e.layer < 0 || e.layer >= model.spec.n_layers)
      reject("layer " + std::to_string(e.layer) + " out of range");
    if (e.position < 0 || e.position >= n_positions)
      reject("position " + std::to_string(e.position) + " out of range");
    if (e.delta.size() != model.spec.d_model) reject("delta size mismatch");
    if (!e.delta.allFinite()) reject("non-finite delta");
  }
}

}  // namespace

void ForwardTrace::check_attention_invariants(double tol) const {
  if (!captured.attention) return;
  for (size_t l = 0; l < attention.size(); ++l) {
    for (size_t h = 0; h < attention[l].size(); ++h) {
      const Eigen::MatrixXf& a = attention[l][h];
      for (long t = 0; t < a.rows(); ++t) {
        double row_sum = 0.0;
        for (long s = 0; s < a.cols(); ++s) {
          if (s > t && a(t, s) != 0.0f)
            throw std::runtime_error("attention: non-causal weight at layer " + std::to_string(l));
          row_sum += double(a(t, s));
        }
        if (std::abs(row_sum - 1.0) > tol)
          throw std::runtime_error("attention: row " + std::to_string(t) + " of layer " +
                                   std::to_string(l) + " head " + std::to_string(h) +
                                   " sums to " + std::to_string(row_sum));
      }
    }
  }
}

ForwardTrace forward(const Model& model, std::span<const int> tokens, const ForwardOptions& options) {
  const ModelSpec& spec = model.spec;
  long T = long(tokens.size());
  if (T < 1) throw std::runtime_error("forward: empty token sequence");
  for (int id : tokens) {
    if (id < 0 || id >= spec.vocab_size)
      throw std::runtime_error("forward: token id " + std::to_string(id) + " out of range");
  }
  validate_edits(model, T, options.edits);
  for (int l : options.mask.skipped) {
    if (l < 0 || l >= spec.n_layers)
      throw std::runtime_error("forward: masked layer " + std::to_string(l) + " out of range");
  }

  ForwardTrace trace;
  trace.captured = options.capture;
  trace.n_positions = int(T);
  if (options.capture.residual_pre) trace.residual_pre.resize(size_t(spec.n_layers));
  if (options.capture.residual_mid) trace.residual_mid.resize(size_t(spec.n_layers));
  if (options.capture.residual_post) trace.residual_post.resize(size_t(spec.n_layers));
  if (options.capture.attention) trace.attention.resize(size_t(spec.n_layers));

  const Clt* clt = options.clt_reconstruction;
  std::vector<Eigen::MatrixXf> recon;
  if (clt) {
    recon.assign(size_t(spec.n_layers), Eigen::MatrixXf::Zero(T, spec.d_model));
  }

  Eigen::MatrixXf x(T, spec.d_model);
  for (long t = 0; t < T; ++t)
    x.row(t) = model.embedding.row(tokens[size_t(t)]) * float(spec.embedding_scale);

  const float eps = float(spec.norm_eps);
  const int group = spec.n_heads / spec.n_kv_heads;
  const float att_scale = 1.0f / std::sqrt(float(spec.d_head));

  for (int l = 0; l < spec.n_layers; ++l) {
    const LayerWeights& w = model.layers[size_t(l)];
    if (options.capture.residual_pre) trace.residual_pre[size_t(l)] = x;

    if (!options.mask.contains(l)) {
      Eigen::MatrixXf xn = rmsnorm_rows(x, w.attn_norm, eps);
      Eigen::MatrixXf q = xn * w.wq.transpose();
      Eigen::MatrixXf k = xn * w.wk.transpose();
      Eigen::MatrixXf v = xn * w.wv.transpose();
      if (spec.rope) {
        apply_rope(q, spec.d_head, spec.rope_theta);
        apply_rope(k, spec.d_head, spec.rope_theta);
      }
      Eigen::MatrixXf heads_out(T, long(spec.n_heads) * spec.d_head);
      if (options.capture.attention) trace.attention[size_t(l)].resize(size_t(spec.n_heads));
      for (int h = 0; h < spec.n_heads; ++h) {
        long qoff = long(h) * spec.d_head;
        long koff = long(h / group) * spec.d_head;
        Eigen::MatrixXf att = Eigen::MatrixXf::Zero(T, T);
        for (long t = 0; t < T; ++t) {
          float row_max = -std::numeric_limits<float>::infinity();
          for (long s = 0; s <= t; ++s) {
            float score = q.row(t).segment(qoff, spec.d_head)
                              .dot(k.row(s).segment(koff, spec.d_head)) * att_scale;
            att(t, s) = score;
            row_max = std::max(row_max, score);
          }
          float denom = 0.0f;
          for (long s = 0; s <= t; ++s) {
            att(t, s) = std::exp(att(t, s) - row_max);
            denom += att(t, s);
          }
          for (long s = 0; s <= t; ++s) att(t, s) /= denom;
        }
        for (long t = 0; t < T; ++t) {
          Eigen::RowVectorXf acc = Eigen::RowVectorXf::Zero(spec.d_head);
          for (long s = 0; s <= t; ++s)
            acc += att(t, s) * v.row(s).segment(koff, spec.d_head);
          heads_out.row(t).segment(qoff, spec.d_head) = acc;
        }
        if (options.capture.attention) trace.attention[size_t(l)][size_t(h)] = std::move(att);
      }
      x += heads_out * w.wo.transpose();
      if (options.capture.residual_mid) trace.residual_mid[size_t(l)] = x;

      if (clt && clt->spec().read_point == ReadPoint::post_attention_pre_mlp)
        clt->accumulate_reconstruction(l, x, recon);

      Eigen::MatrixXf xn2 = rmsnorm_rows(x, w.mlp_norm, eps);
      if (clt) {
        x += recon[size_t(l)];
      } else {
        x += mlp_forward(w, xn2, spec.activation);
      }
    } else {
      // skipped layer: whole block contributes identity
      if (options.capture.residual_mid) trace.residual_mid[size_t(l)] = x;
      if (options.capture.attention) trace.attention[size_t(l)].clear();
    }

    for (const ResidualEdit& e : options.edits) {
      if (e.layer != l) continue;
      if (e.op == EditOp::add) {
        x.row(e.position) += e.delta.transpose();
      } else {
        x.row(e.position) = e.delta.transpose();
      }
    }

    if (clt && clt->spec().read_point == ReadPoint::post_block && !options.mask.contains(l))
      clt->accumulate_reconstruction(l, x, recon);

    if (options.capture.residual_post) trace.residual_post[size_t(l)] = x;
    if (!x.allFinite())
      throw std::runtime_error("forward: non-finite activation after layer " + std::to_string(l));
  }

  if (options.capture.logits) {
    Eigen::MatrixXf xn = rmsnorm_rows(x, model.final_norm, eps);
    trace.logits.resize(T, spec.vocab_size);
    for (long t = 0; t < T; ++t)
      trace.logits.row(t) = xn.row(t) * model.unembedding.transpose();
    if (!trace.logits.allFinite()) throw std::runtime_error("forward: non-finite logits");
  }
  return trace;
}

Eigen::VectorXd softmax64(const Eigen::VectorXf& logits) {
  Eigen::VectorXd out(logits.size());
  double mx = -std::numeric_limits<double>::infinity();
  for (long i = 0; i < logits.size(); ++i) mx = std::max(mx, double(logits[i]));
  double denom = 0.0;
  for (long i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(double(logits[i]) - mx);
    denom += out[i];
  }
  out /= denom;
  return out;
}

Eigen::VectorXd logit_lens(const ForwardTrace& trace, int layer, int position, const Model& model) {
  if (!trace.captured.residual_post)
    throw std::runtime_error("logit_lens: residual_post was not captured (capture flag residual_post)");
  if (layer < 0 || layer >= int(trace.residual_post.size()))
    throw std::runtime_error("logit_lens: layer out of range");
  const Eigen::MatrixXf& resid = trace.residual_post[size_t(layer)];
  if (position < 0 || position >= resid.rows())
    throw std::runtime_error("logit_lens: position out of range");

  // same per-row expression as the engine's output path, so the final layer
  // reproduces trace.logits bit for bit
  Eigen::MatrixXf row = resid.row(position);
  Eigen::MatrixXf xn = rmsnorm_rows(row, model.final_norm, float(model.spec.norm_eps));
  Eigen::RowVectorXf logits = xn.row(0) * model.unembedding.transpose();
  return softmax64(logits.transpose());
}

Eigen::VectorXd distribution_at(const ForwardTrace& trace, int position) {
  if (!trace.captured.logits || trace.logits.size() == 0)
    throw std::runtime_error("next_token_distribution: logits were not captured (capture flag logits)");
  if (position < 0 || position >= trace.logits.rows())
    throw std::runtime_error("next_token_distribution: position out of range");
  return softmax64(trace.logits.row(position).transpose());
}

Eigen::VectorXd next_token_distribution(const ForwardTrace& trace) {
  return distribution_at(trace, int(trace.logits.rows()) - 1);
}

double kl_divergence(const Eigen::VectorXd& p, const Eigen::VectorXd& q) {
  if (p.size() != q.size()) throw std::runtime_error("kl_divergence: length mismatch");
  double sum = 0.0;
  for (long i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    sum += p[i] * std::log(p[i] / std::max(q[i], 1e-12));
  }
  return sum;
}

int argmax_token(const Eigen::VectorXd& dist) {
  int best = 0;
  for (long i = 1; i < dist.size(); ++i) {
    if (dist[i] > dist[best]) best = int(i);
  }
  return best;
}

std::vector<int> greedy_generate(const Model& model, std::vector<int> tokens, int max_new_tokens,
                                 int stop_token, const LayerMask& mask) {
  ForwardOptions opt;
  opt.mask = mask;
  for (int step = 0; step < max_new_tokens; ++step) {
    ForwardTrace trace = forward(model, tokens, opt);
    int next = argmax_token(next_token_distribution(trace));
    tokens.push_back(next);
    if (next == stop_token) break;
  }
  return tokens;
}

}  // namespace clens
