#include <doctest.h>

#include <set>

#include "clens/clt.hpp"
#include "clens/oracle.hpp"
#include "bundles.hpp"
#include "helpers.hpp"

using namespace clens;

namespace {

// small synthetic archive with n_layers shards; shard sizes grow with depth
// remaining so the peak-memory check has an uneven profile
std::string write_synthetic_clt(const std::string& path, int n_layers, int features, int d_model,
                                uint64_t seed) {
  test::Rng rng(seed);
  TensorFileWriter w;
  CltSpec spec;
  spec.features_per_layer = features;
  spec.n_layers = n_layers;
  spec.nonlinearity = CltNonlinearity::identity;
  w.set_metadata("clt_config", spec.to_json().dump());
  for (int l = 0; l < n_layers; ++l) {
    std::string prefix = "clt.layers." + std::to_string(l) + ".";
    Eigen::MatrixXf enc = test::random_matrix(rng, features, d_model, 0.5);
    std::vector<float> rm(size_t(features) * size_t(d_model));
    for (int i = 0; i < features; ++i)
      for (int j = 0; j < d_model; ++j) rm[size_t(i) * size_t(d_model) + size_t(j)] = enc(i, j);
    w.add(prefix + "encoder.weight", HostTensor::from_f32({features, d_model}, rm));
    for (int t = l; t < n_layers; ++t) {
      Eigen::MatrixXf dec = test::random_matrix(rng, features, d_model, 0.5);
      std::vector<float> dm(size_t(features) * size_t(d_model));
      for (int i = 0; i < features; ++i)
        for (int j = 0; j < d_model; ++j) dm[size_t(i) * size_t(d_model) + size_t(j)] = dec(i, j);
      w.add(prefix + "decoder." + std::to_string(t) + ".weight",
            HostTensor::from_f32({features, d_model}, dm));
    }
  }
  w.write(path);
  return path;
}

}  // namespace

TEST_CASE("feature id round-trips the L<layer>:<index> form") {
  FeatureId f = FeatureId::parse("L22:10243");
  CHECK(f.layer == 22);
  CHECK(f.index == 10243);
  CHECK(f.str() == "L22:10243");
  CHECK_THROWS(FeatureId::parse("22:10243"));
  CHECK_THROWS(FeatureId::parse("L22-10243"));
}

TEST_CASE("stream_shards visits every layer once, ascending") {
  test::TempDir tmp("clt_stream");
  std::string path = write_synthetic_clt(tmp.file("c.nt"), 6, 4, 8, 1);
  std::vector<int> visited;
  stream_shards(path, [&](const CltShard& s) { visited.push_back(s.layer); });
  CHECK(visited == std::vector<int>{0, 1, 2, 3, 4, 5});
}

TEST_CASE("missing shard names the layer") {
  test::TempDir tmp("clt_missing");
  std::string path = write_synthetic_clt(tmp.file("c.nt"), 3, 4, 8, 2);
  // rewrite with layer 1 dropped
  TensorFileReader r(path);
  TensorFileWriter w;
  for (const auto& [name, entry] : r.entries()) {
    if (name.rfind("clt.layers.1.", 0) == 0) continue;
    w.add(name, r.read(name));
  }
  w.set_metadata("clt_config", r.metadata_value("clt_config"));
  std::string broken = tmp.file("broken.nt");
  w.write(broken);
  CHECK_THROWS_WITH_AS(stream_shards(broken, [](const CltShard&) {}),
                       doctest::Contains("layer 1"), std::runtime_error);
}

TEST_CASE("streaming peak memory stays within 1.1x the largest shard") {
  test::TempDir tmp("clt_peak");
  // 8 layers, large-scale-style profile: early shards carry many decoders
  std::string path = write_synthetic_clt(tmp.file("c.nt"), 8, 96, 48, 3);
  int64_t largest = 0;
  {
    TensorFileReader r(path);
    CltSpec spec = read_clt_spec(path);
    for (int l = 0; l < spec.n_layers; ++l) {
      CltShard s = load_shard(r, spec, l);
      largest = std::max(largest, s.byte_size());
    }
  }
  MemoryMeter meter;
  stream_shards(path, [](const CltShard&) {}, &meter);
  CHECK(meter.peak() <= int64_t(1.1 * double(largest)));
  CHECK(meter.current() == 0);
}

TEST_CASE("encode basics") {
  CltShard shard;
  shard.layer = 0;
  shard.n_layers = 1;
  shard.encoder = Eigen::MatrixXf::Zero(3, 4);
  shard.encoder.row(0) << 1, 0, 0, 0;
  shard.encoder.row(1) << 0, 1, 0, 0;
  shard.encoder.row(2) << 0, 0, 1, 0;
  shard.decoders.push_back(Eigen::MatrixXf::Zero(3, 4));

  SUBCASE("zero residual, zero bias gives zero activations") {
    Eigen::VectorXf acts = encode(shard, Eigen::VectorXf::Zero(4), CltNonlinearity::identity);
    CHECK(acts.norm() == 0.0f);
  }
  SUBCASE("orthonormal rows recover the coefficient") {
    Eigen::VectorXf r = Eigen::VectorXf::Zero(4);
    r[1] = 3.0f;
    Eigen::VectorXf acts = encode(shard, r, CltNonlinearity::identity);
    CHECK(acts[0] == 0.0f);
    CHECK(acts[1] == 3.0f);
    CHECK(acts[2] == 0.0f);
  }
  SUBCASE("relu clamps negative preactivations") {
    Eigen::VectorXf r = Eigen::VectorXf::Zero(4);
    r[1] = -3.0f;
    Eigen::VectorXf acts = encode(shard, r, CltNonlinearity::relu);
    CHECK(acts[1] == 0.0f);
  }
  SUBCASE("shape mismatch throws") {
    CHECK_THROWS(encode(shard, Eigen::VectorXf::Zero(5), CltNonlinearity::identity));
  }
}

TEST_CASE("compile_edits expands one residual edit per layer in range") {
  test::TempDir tmp("clt_compile");
  // 26-layer geometry: a feature at L22 over range [22, 25] compiles to 4 edits
  std::string path = write_synthetic_clt(tmp.file("c.nt"), 26, 2, 8, 4);
  Clt clt(path);
  FeatureEdit e;
  e.feature = FeatureId{22, 1};
  e.mode = EditMode::inject;
  e.strength = 10.0f;
  e.position = 23;
  e.range_start = 22;
  e.range_end = 25;
  std::vector<FeatureEdit> edits = {e};
  std::vector<ResidualEdit> compiled = compile_edits(edits, clt);
  CHECK(compiled.size() == 4);
  for (int i = 0; i < 4; ++i) {
    CHECK(compiled[size_t(i)].layer == 22 + i);
    CHECK(compiled[size_t(i)].position == 23);
  }

  SUBCASE("linearity: doubling strength doubles every delta exactly") {
    e.strength = 20.0f;
    std::vector<FeatureEdit> doubled = {e};
    std::vector<ResidualEdit> compiled2 = compile_edits(doubled, clt);
    for (size_t i = 0; i < compiled.size(); ++i)
      CHECK((compiled2[i].delta.array() == (2.0f * compiled[i].delta).array()).all());
  }
  SUBCASE("suppress(f, s) compiles identically to inject(f, -s)") {
    FeatureEdit sup = e;
    sup.mode = EditMode::suppress;
    FeatureEdit neg = e;
    neg.strength = -e.strength;
    std::vector<FeatureEdit> a = {sup}, b = {neg};
    std::vector<ResidualEdit> ca = compile_edits(a, clt), cb = compile_edits(b, clt);
    REQUIRE(ca.size() == cb.size());
    for (size_t i = 0; i < ca.size(); ++i)
      CHECK((ca[i].delta.array() == cb[i].delta.array()).all());
  }
  SUBCASE("range below the home layer is rejected") {
    FeatureEdit bad = e;
    bad.range_start = 21;
    std::vector<FeatureEdit> edits_bad = {bad};
    CHECK_THROWS_WITH_AS(compile_edits(edits_bad, clt), doctest::Contains("below home layer"),
                         std::runtime_error);
  }
}

TEST_CASE("strength zero leaves the forward bit-identical to baseline") {
  const FixtureBundle& bundle = test::planted_bundle();
  Clt clt(bundle.clt_path);
  std::vector<int> prompt = bundle.experiment_defaults["sweep"]["tokens"].get<std::vector<int>>();

  FeatureEdit e;
  e.feature = FeatureId::parse("L2:1");
  e.mode = EditMode::inject;
  e.strength = 0.0f;
  e.position = int(prompt.size()) - 1;
  e.range_start = 2;
  e.range_end = clt.spec().n_layers - 1;
  ForwardOptions opt;
  std::vector<FeatureEdit> edits = {e};
  opt.edits = compile_edits(edits, clt);

  ForwardTrace base = forward(bundle.model, prompt, {});
  ForwardTrace zeroed = forward(bundle.model, prompt, opt);
  CHECK((base.logits.array() == zeroed.logits.array()).all());
}

TEST_CASE("edit lists parse from the wire JSON form") {
  auto edits = parse_edit_list(nlohmann::json::parse(
      R"([{"feature":"L22:10243","mode":"inject","strength":10.0,"position":23,"layers":[22,25]}])"));
  REQUIRE(edits.size() == 1);
  CHECK(edits[0].feature.str() == "L22:10243");
  CHECK(edits[0].mode == EditMode::inject);
  CHECK(edits[0].strength == 10.0f);
  CHECK(edits[0].position == 23);
  CHECK(edits[0].range_start == 22);
  CHECK(edits[0].range_end == 25);
  CHECK(edits[0].to_json()["feature"] == "L22:10243");
  CHECK_THROWS(parse_edit_list(nlohmann::json::parse(R"({"feature":"L0:0"})")));
}

namespace {

// reference top-k activations computed with a test-side double-precision path
nlohmann::json oracle_reference(const Model& model, const std::string& clt_path,
                                const std::vector<std::vector<int>>& prompts, int layer) {
  TensorFileReader reader(clt_path);
  CltSpec spec = read_clt_spec(clt_path);
  CltShard shard = load_shard(reader, spec, layer);
  nlohmann::json out;
  out["prompts"] = nlohmann::json::array();
  for (const auto& prompt : prompts) {
    ForwardOptions opt;
    opt.capture.residual_mid = true;
    OracleTrace trace = oracle_forward(model, prompt, opt);
    const auto& resid = trace.residual_mid[size_t(layer)];
    int last = trace.n_positions - 1;
    std::vector<std::pair<double, int>> acts;
    for (long f = 0; f < shard.encoder.rows(); ++f) {
      double acc = 0.0;
      for (int i = 0; i < trace.d_model; ++i)
        acc += double(shard.encoder(f, i)) * resid[size_t(last) * size_t(trace.d_model) + size_t(i)];
      acts.push_back({acc, int(f)});
    }
    std::sort(acts.begin(), acts.end(), [](auto& a, auto& b) {
      return a.first > b.first || (a.first == b.first && a.second < b.second);
    });
    nlohmann::json top = nlohmann::json::array();
    for (int i = 0; i < 5; ++i)
      top.push_back({{"feature", FeatureId{layer, acts[size_t(i)].second}.str()},
                     {"value", acts[size_t(i)].first}});
    out["prompts"].push_back({{"tokens", prompt}, {"layer", layer}, {"top", top}});
  }
  return out;
}

}  // namespace

TEST_CASE("validation against a self-generated reference") {
  const FixtureBundle& bundle = test::planted_bundle();
  Clt clt(bundle.clt_path);
  std::vector<int> base = bundle.experiment_defaults["sweep"]["tokens"].get<std::vector<int>>();
  std::vector<std::vector<int>> prompts;
  for (int k = 0; k < 5; ++k) {
    std::vector<int> p = base;
    p[1] = 2 + k;  // vary one filler token
    prompts.push_back(p);
  }
  nlohmann::json reference = oracle_reference(bundle.model, bundle.clt_path, prompts, 1);

  SUBCASE("engine matches its own 64-bit reference") {
    CltValidationReport report = validate_against_reference(bundle.model, clt, reference);
    CHECK(report.prompts_total == 5);
    CHECK(report.top10_match_rate == 1.0);
    CHECK(report.max_rel_err < 1e-5);
    CHECK(report.kl_under_injection >= 0.0);
    CHECK(std::isfinite(report.kl_under_injection));
  }
  SUBCASE("a planted discrepancy is detected") {
    // swap one feature index in the first prompt's reference list
    reference["prompts"][0]["top"][0]["feature"] = "L1:7";
    bool was_top5 = false;
    for (const auto& t : reference["prompts"][0]["top"])
      if (t["feature"] == "L1:7" && &t != &reference["prompts"][0]["top"][0]) was_top5 = true;
    CltValidationReport report = validate_against_reference(bundle.model, clt, reference);
    if (!was_top5) CHECK(report.prompts_matched == 4);
  }
  SUBCASE("length mismatch style errors") {
    nlohmann::json empty;
    empty["prompts"] = nlohmann::json::array();
    CHECK_THROWS(validate_against_reference(bundle.model, clt, empty));
  }
}
