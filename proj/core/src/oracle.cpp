#include "clens/oracle.hpp"

#include <cmath>
#include <stdexcept>

namespace clens {

namespace {

using Vec = std::vector<double>;

Vec to_f64(const Eigen::MatrixXf& m) {
  Vec out(size_t(m.rows()) * size_t(m.cols()));
  for (long i = 0; i < m.rows(); ++i)
    for (long j = 0; j < m.cols(); ++j) out[size_t(i) * size_t(m.cols()) + size_t(j)] = double(m(i, j));
  return out;
}

Vec to_f64(const Eigen::VectorXf& v) {
  Vec out(size_t(v.size()), 0.0);
  for (long i = 0; i < v.size(); ++i) out[size_t(i)] = double(v[i]);
  return out;
}

// y = W x for row-major W [rows, cols]
void matvec(const Vec& w, long rows, long cols, const double* x, double* y) {
  for (long r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (long c = 0; c < cols; ++c) acc += w[size_t(r) * size_t(cols) + size_t(c)] * x[c];
    y[r] = acc;
  }
}

void rmsnorm(const double* x, const Vec& gain, long d, double eps, double* out) {
  double ms = 0.0;
  for (long i = 0; i < d; ++i) ms += x[i] * x[i];
  ms /= double(d);
  double inv = 1.0 / std::sqrt(ms + eps);
  for (long i = 0; i < d; ++i) out[i] = x[i] * gain[size_t(i)] * inv;
}

double activation_value(Activation act, double v) {
  switch (act) {
    case Activation::identity: return v;
    case Activation::relu: return v > 0.0 ? v : 0.0;
    case Activation::gelu: return 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)));
    default: throw std::logic_error("gated activation handled separately");
  }
}

}  // namespace

std::vector<double> OracleTrace::distribution_at(int position) const {
  std::vector<double> out(size_t(vocab_size), 0.0);
  const double* row = logits.data() + size_t(position) * size_t(vocab_size);
  double mx = row[0];
  for (int i = 1; i < vocab_size; ++i) mx = std::max(mx, row[i]);
  double denom = 0.0;
  for (int i = 0; i < vocab_size; ++i) {
    out[size_t(i)] = std::exp(row[i] - mx);
    denom += out[size_t(i)];
  }
  for (double& p : out) p /= denom;
  return out;
}

std::vector<double> OracleTrace::next_token_distribution() const {
  return distribution_at(n_positions - 1);
}

OracleTrace oracle_forward(const Model& model, std::span<const int> tokens,
                           const ForwardOptions& options) {
  const ModelSpec& spec = model.spec;
  const long T = long(tokens.size());
  const long D = spec.d_model;
  const long H = spec.n_heads;
  const long KV = spec.n_kv_heads;
  const long DH = spec.d_head;
  const long FF = spec.d_ff;
  const int group = spec.n_heads / spec.n_kv_heads;
  if (T < 1) throw std::runtime_error("oracle: empty token sequence");

  Vec embed = to_f64(model.embedding);
  Vec unembed = to_f64(model.unembedding);
  Vec fnorm = to_f64(model.final_norm);

  OracleTrace trace;
  trace.n_positions = int(T);
  trace.d_model = int(D);
  trace.vocab_size = spec.vocab_size;
  trace.residual_pre.resize(size_t(spec.n_layers));
  trace.residual_mid.resize(size_t(spec.n_layers));
  trace.residual_post.resize(size_t(spec.n_layers));
  trace.attention.resize(size_t(spec.n_layers));

  Vec x(size_t(T) * size_t(D));
  for (long t = 0; t < T; ++t)
    for (long i = 0; i < D; ++i)
      x[size_t(t) * size_t(D) + size_t(i)] =
          embed[size_t(tokens[size_t(t)]) * size_t(D) + size_t(i)] * spec.embedding_scale;

  for (int l = 0; l < spec.n_layers; ++l) {
    const LayerWeights& lw = model.layers[size_t(l)];
    trace.residual_pre[size_t(l)] = x;

    if (!options.mask.contains(l)) {
      Vec wq = to_f64(lw.wq), wk = to_f64(lw.wk), wv = to_f64(lw.wv), wo = to_f64(lw.wo);
      Vec attn_norm = to_f64(lw.attn_norm);

      Vec q(size_t(T) * size_t(H * DH)), k(size_t(T) * size_t(KV * DH)), v(size_t(T) * size_t(KV * DH));
      Vec xn(size_t(D), 0.0);
      for (long t = 0; t < T; ++t) {
        rmsnorm(&x[size_t(t) * size_t(D)], attn_norm, D, spec.norm_eps, xn.data());
        matvec(wq, H * DH, D, xn.data(), &q[size_t(t) * size_t(H * DH)]);
        matvec(wk, KV * DH, D, xn.data(), &k[size_t(t) * size_t(KV * DH)]);
        matvec(wv, KV * DH, D, xn.data(), &v[size_t(t) * size_t(KV * DH)]);
      }
      if (spec.rope) {
        long half = DH / 2;
        auto rotate = [&](Vec& m, long heads) {
          for (long t = 0; t < T; ++t) {
            for (long h = 0; h < heads; ++h) {
              double* base = &m[size_t(t) * size_t(heads * DH) + size_t(h * DH)];
              for (long j = 0; j < half; ++j) {
                double freq = std::pow(spec.rope_theta, -2.0 * double(j) / double(DH));
                double c = std::cos(double(t) * freq), s = std::sin(double(t) * freq);
                double a = base[j], b = base[half + j];
                base[j] = a * c - b * s;
                base[half + j] = a * s + b * c;
              }
            }
          }
        };
        rotate(q, H);
        rotate(k, KV);
      }

      trace.attention[size_t(l)].assign(size_t(H), Vec(size_t(T) * size_t(T), 0.0));
      Vec heads_out(size_t(T) * size_t(H * DH), 0.0);
      double scale = 1.0 / std::sqrt(double(DH));
      for (long h = 0; h < H; ++h) {
        long kvh = h / group;
        Vec& att = trace.attention[size_t(l)][size_t(h)];
        for (long t = 0; t < T; ++t) {
          double mx = -1e300;
          for (long s = 0; s <= t; ++s) {
            double score = 0.0;
            for (long j = 0; j < DH; ++j)
              score += q[size_t(t) * size_t(H * DH) + size_t(h * DH + j)] *
                       k[size_t(s) * size_t(KV * DH) + size_t(kvh * DH + j)];
            score *= scale;
            att[size_t(t) * size_t(T) + size_t(s)] = score;
            mx = std::max(mx, score);
          }
          double denom = 0.0;
          for (long s = 0; s <= t; ++s) {
            double e = std::exp(att[size_t(t) * size_t(T) + size_t(s)] - mx);
            att[size_t(t) * size_t(T) + size_t(s)] = e;
            denom += e;
          }
          for (long s = 0; s <= t; ++s) att[size_t(t) * size_t(T) + size_t(s)] /= denom;
          for (long j = 0; j < DH; ++j) {
            double acc = 0.0;
            for (long s = 0; s <= t; ++s)
              acc += att[size_t(t) * size_t(T) + size_t(s)] *
                     v[size_t(s) * size_t(KV * DH) + size_t(kvh * DH + j)];
            heads_out[size_t(t) * size_t(H * DH) + size_t(h * DH + j)] = acc;
          }
        }
      }
      for (long t = 0; t < T; ++t) {
        Vec proj(size_t(D), 0.0);
        matvec(wo, D, H * DH, &heads_out[size_t(t) * size_t(H * DH)], proj.data());
        for (long i = 0; i < D; ++i) x[size_t(t) * size_t(D) + size_t(i)] += proj[size_t(i)];
      }
      trace.residual_mid[size_t(l)] = x;

      Vec mlp_norm = to_f64(lw.mlp_norm);
      Vec w_up = to_f64(lw.w_up), w_down = to_f64(lw.w_down);
      Vec w_gate = is_gated(spec.activation) ? to_f64(lw.w_gate) : Vec{};
      Vec up_bias = lw.up_bias.size() > 0 ? to_f64(lw.up_bias) : Vec{};
      Vec gate_bias = lw.gate_bias.size() > 0 ? to_f64(lw.gate_bias) : Vec{};
      for (long t = 0; t < T; ++t) {
        Vec xn2(size_t(D), 0.0);
        rmsnorm(&x[size_t(t) * size_t(D)], mlp_norm, D, spec.norm_eps, xn2.data());
        Vec hidden(size_t(FF), 0.0);
        matvec(w_up, FF, D, xn2.data(), hidden.data());
        if (!up_bias.empty())
          for (long f = 0; f < FF; ++f) hidden[size_t(f)] += up_bias[size_t(f)];
        if (is_gated(spec.activation)) {
          Vec gate(size_t(FF), 0.0);
          matvec(w_gate, FF, D, xn2.data(), gate.data());
          if (!gate_bias.empty())
            for (long f = 0; f < FF; ++f) gate[size_t(f)] += gate_bias[size_t(f)];
          for (long f = 0; f < FF; ++f) {
            double g = gate[size_t(f)];
            if (spec.activation == Activation::relu_glu) {
              g = g > 0.0 ? g : 0.0;
            } else {
              g = g / (1.0 + std::exp(-g));
            }
            hidden[size_t(f)] *= g;
          }
        } else {
          for (long f = 0; f < FF; ++f) hidden[size_t(f)] = activation_value(spec.activation, hidden[size_t(f)]);
        }
        Vec down(size_t(D), 0.0);
        matvec(w_down, D, FF, hidden.data(), down.data());
        for (long i = 0; i < D; ++i) x[size_t(t) * size_t(D) + size_t(i)] += down[size_t(i)];
      }
    } else {
      trace.residual_mid[size_t(l)] = x;
    }

    for (const ResidualEdit& e : options.edits) {
      if (e.layer != l) continue;
      double* row = &x[size_t(e.position) * size_t(D)];
      if (e.op == EditOp::add) {
        for (long i = 0; i < D; ++i) row[i] += double(e.delta[i]);
      } else {
        for (long i = 0; i < D; ++i) row[i] = double(e.delta[i]);
      }
    }
    trace.residual_post[size_t(l)] = x;
  }

  trace.logits.resize(size_t(T) * size_t(spec.vocab_size));
  for (long t = 0; t < T; ++t) {
    Vec xn(size_t(D), 0.0);
    rmsnorm(&x[size_t(t) * size_t(D)], fnorm, D, spec.norm_eps, xn.data());
    matvec(unembed, spec.vocab_size, D, xn.data(), &trace.logits[size_t(t) * size_t(spec.vocab_size)]);
  }
  return trace;
}

double normalized_max_error(std::span<const float> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::runtime_error("normalized_max_error: length mismatch");
  double scale = 1e-12;
  for (double v : b) scale = std::max(scale, std::abs(v));
  double err = 0.0;
  for (size_t i = 0; i < a.size(); ++i) err = std::max(err, std::abs(double(a[i]) - b[i]));
  return err / scale;
}

}  // namespace clens
