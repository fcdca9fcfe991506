#include <doctest.h>

#include <cmath>

#include "clens/forward.hpp"
#include "clens/oracle.hpp"
#include "helpers.hpp"

using namespace clens;

namespace {

ForwardOptions capture_everything() {
  ForwardOptions opt;
  opt.capture = CaptureFlags::all();
  return opt;
}

bool traces_bit_identical(const ForwardTrace& a, const ForwardTrace& b) {
  if (a.logits.rows() != b.logits.rows()) return false;
  if ((a.logits.array() != b.logits.array()).any()) return false;
  for (size_t l = 0; l < a.residual_post.size(); ++l)
    if ((a.residual_post[l].array() != b.residual_post[l].array()).any()) return false;
  return true;
}

}  // namespace

TEST_CASE("forward is pure: identical inputs give bit-identical traces") {
  Model m = test::random_model(11);
  test::Rng rng(3);
  std::vector<int> toks = test::random_tokens(rng, 9, m.spec.vocab_size);
  ForwardTrace a = forward(m, toks, capture_everything());
  ForwardTrace b = forward(m, toks, capture_everything());
  CHECK(traces_bit_identical(a, b));
}

TEST_CASE("empty edits and empty mask equal a plain forward") {
  Model m = test::random_model(12);
  test::Rng rng(4);
  std::vector<int> toks = test::random_tokens(rng, 7, m.spec.vocab_size);
  ForwardOptions opt = capture_everything();
  opt.edits = {};
  opt.mask = {};
  CHECK(traces_bit_identical(forward(m, toks, capture_everything()), forward(m, toks, opt)));
}

TEST_CASE("attention is causal and row-normalized on every captured layer") {
  for (uint64_t seed : {21, 22, 23}) {
    Model m = test::random_model(seed);
    test::Rng rng(seed + 100);
    std::vector<int> toks = test::random_tokens(rng, 11, m.spec.vocab_size);
    ForwardTrace t = forward(m, toks, capture_everything());
    CHECK_NOTHROW(t.check_attention_invariants(1e-5));
  }
}

TEST_CASE("engine agrees with the 64-bit oracle") {
  for (uint64_t seed : {31, 32, 33, 34}) {
    Model m = test::random_model(seed);
    test::Rng rng(seed);
    std::vector<int> toks = test::random_tokens(rng, 10, m.spec.vocab_size);
    ForwardTrace e = forward(m, toks, capture_everything());
    OracleTrace o = oracle_forward(m, toks, capture_everything());
    for (long t = 0; t < e.logits.rows(); ++t) {
      std::vector<float> row(e.logits.cols());
      for (long v = 0; v < e.logits.cols(); ++v) row[size_t(v)] = e.logits(t, v);
      std::span<const double> oref(o.logits.data() + size_t(t) * size_t(o.vocab_size),
                                   size_t(o.vocab_size));
      CHECK(normalized_max_error(row, oref) < 1e-5);
    }
  }
}

TEST_CASE("edit additivity: post-layer residual differs by exactly the delta") {
  Model m = test::random_model(41);
  test::Rng rng(41);
  std::vector<int> toks = test::random_tokens(rng, 8, m.spec.vocab_size);

  ResidualEdit e;
  e.layer = 1;
  e.position = 3;
  e.delta = Eigen::VectorXf::Zero(m.spec.d_model);
  for (int i = 0; i < m.spec.d_model; ++i) e.delta[i] = float(rng.gauss());
  e.tag = "probe";

  ForwardOptions base = capture_everything();
  ForwardOptions edited = capture_everything();
  edited.edits = {e};

  ForwardTrace tb = forward(m, toks, base);
  ForwardTrace te = forward(m, toks, edited);
  Eigen::VectorXf diff =
      (te.residual_post[1].row(3) - tb.residual_post[1].row(3)).transpose();
  for (int i = 0; i < m.spec.d_model; ++i)
    CHECK(diff[i] == doctest::Approx(e.delta[i]).epsilon(1e-6));
  // earlier positions and layers untouched
  CHECK((te.residual_post[0].array() == tb.residual_post[0].array()).all());
  CHECK((te.residual_post[1].row(2).array() == tb.residual_post[1].row(2).array()).all());
}

TEST_CASE("replace edits overwrite the residual row") {
  Model m = test::random_model(42);
  std::vector<int> toks = {1, 2, 3, 4};
  ResidualEdit e;
  e.layer = 0;
  e.position = 2;
  e.delta = Eigen::VectorXf::Constant(m.spec.d_model, 0.25f);
  e.op = EditOp::replace;
  e.tag = "patch";
  ForwardOptions opt = capture_everything();
  opt.edits = {e};
  ForwardTrace t = forward(m, toks, opt);
  CHECK((t.residual_post[0].row(2).array() == 0.25f).all());
}

TEST_CASE("out-of-range edits are rejected with the offending tag") {
  Model m = test::random_model(43);
  std::vector<int> toks = {1, 2, 3};
  ResidualEdit e;
  e.layer = 99;
  e.position = 0;
  e.delta = Eigen::VectorXf::Zero(m.spec.d_model);
  e.tag = "bad-edit";
  ForwardOptions opt;
  opt.edits = {e};
  CHECK_THROWS_WITH_AS(forward(m, toks, opt), doctest::Contains("bad-edit"), std::runtime_error);
}

TEST_CASE("non-finite activations raise a diagnostic naming the layer") {
  Model m = test::random_model(44);
  m.layers[1].wo(0, 0) = std::numeric_limits<float>::infinity();
  std::vector<int> toks = {1, 2, 3};
  CHECK_THROWS_WITH_AS(forward(m, toks, {}), doctest::Contains("layer 1"), std::runtime_error);
}

TEST_CASE("skipping a zero-output layer leaves logits unchanged") {
  Model m = test::random_model(45);
  // zero out layer 1's block contribution
  m.layers[1].wo.setZero();
  m.layers[1].w_down.setZero();
  std::vector<int> toks = {3, 1, 4, 1, 5};
  ForwardOptions skip;
  skip.mask.skipped = {1};
  ForwardTrace a = forward(m, toks, {});
  ForwardTrace b = forward(m, toks, skip);
  CHECK((a.logits.array() == b.logits.array()).all());
}

TEST_CASE("masked layers also agree with the oracle") {
  Model m = test::random_model(46);
  test::Rng rng(46);
  std::vector<int> toks = test::random_tokens(rng, 9, m.spec.vocab_size);
  ForwardOptions opt = capture_everything();
  opt.mask.skipped = {0, 2};
  ForwardTrace e = forward(m, toks, opt);
  OracleTrace o = oracle_forward(m, toks, opt);
  std::vector<float> last(e.logits.cols());
  for (long v = 0; v < e.logits.cols(); ++v) last[size_t(v)] = e.logits(e.logits.rows() - 1, v);
  std::span<const double> oref(o.logits.data() + size_t(o.n_positions - 1) * size_t(o.vocab_size),
                               size_t(o.vocab_size));
  CHECK(normalized_max_error(last, oref) < 1e-5);
}

TEST_CASE("logit lens at the final layer equals the output distribution exactly") {
  Model m = test::random_model(47);
  test::Rng rng(47);
  std::vector<int> toks = test::random_tokens(rng, 6, m.spec.vocab_size);
  ForwardTrace t = forward(m, toks, capture_everything());
  Eigen::VectorXd lens = logit_lens(t, m.spec.n_layers - 1, int(toks.size()) - 1, m);
  Eigen::VectorXd dist = next_token_distribution(t);
  for (long i = 0; i < lens.size(); ++i) CHECK(lens[i] == dist[i]);
}

TEST_CASE("logit lens requires the residual capture") {
  Model m = test::random_model(48);
  std::vector<int> toks = {1, 2};
  ForwardOptions opt;  // logits only
  ForwardTrace t = forward(m, toks, opt);
  CHECK_THROWS_WITH_AS(logit_lens(t, 0, 0, m), doctest::Contains("residual_post"),
                       std::runtime_error);
}

TEST_CASE("next_token_distribution basics") {
  SUBCASE("uniform logits give a uniform distribution") {
    Eigen::VectorXf logits = Eigen::VectorXf::Constant(8, 3.0f);
    Eigen::VectorXd p = softmax64(logits);
    for (long i = 0; i < p.size(); ++i) CHECK(p[i] == doctest::Approx(0.125).epsilon(1e-12));
  }
  SUBCASE("logits (0, ln 3) give (0.25, 0.75)") {
    Eigen::VectorXf logits(2);
    logits << 0.0f, float(std::log(3.0));
    Eigen::VectorXd p = softmax64(logits);
    CHECK(p[0] == doctest::Approx(0.25).epsilon(1e-6));
    CHECK(p[1] == doctest::Approx(0.75).epsilon(1e-6));
  }
  SUBCASE("sums to one") {
    Model m = test::random_model(49);
    ForwardTrace t = forward(m, std::vector<int>{1, 2, 3}, {});
    CHECK(next_token_distribution(t).sum() == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("kl divergence") {
  Eigen::VectorXd p(2), q(2);
  p << 0.5, 0.5;
  q << 0.25, 0.75;
  CHECK(kl_divergence(p, p) == 0.0);
  CHECK(kl_divergence(p, q) == doctest::Approx(0.143841).epsilon(1e-5));
  Eigen::VectorXd r(3);
  CHECK_THROWS_AS(kl_divergence(p, r), std::runtime_error);
  // zero p terms contribute nothing
  Eigen::VectorXd pz(2), qz(2);
  pz << 1.0, 0.0;
  qz << 0.5, 0.5;
  CHECK(kl_divergence(pz, qz) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("greedy generation is deterministic and respects the stop token") {
  Model m = test::random_model(50);
  std::vector<int> prompt = {1, 2, 3};
  std::vector<int> a = greedy_generate(m, prompt, 5, -1);
  std::vector<int> b = greedy_generate(m, prompt, 5, -1);
  CHECK(a == b);
  CHECK(a.size() == prompt.size() + 5);
  std::vector<int> c = greedy_generate(m, prompt, 5, a[3]);
  CHECK(c.size() <= a.size());
}
