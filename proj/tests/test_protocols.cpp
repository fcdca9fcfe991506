#include <doctest.h>

#include "clens/protocols.hpp"
#include "bundles.hpp"

using namespace clens;

namespace {

SweepConfig canonical_sweep(const FixtureBundle& bundle) {
  const auto& d = bundle.experiment_defaults["sweep"];
  SweepConfig cfg;
  cfg.prompt = d["tokens"].get<std::vector<int>>();
  for (const auto& f : d["suppress"]) cfg.suppress_group.push_back(FeatureId::parse(f));
  cfg.inject_feature = FeatureId::parse(d["inject"].get<std::string>());
  cfg.strength = d["strength"].get<double>();
  cfg.target_word = d["target_word"].get<std::string>();
  cfg.planning_site = d["planning_site"].get<int>();
  cfg.suppress_range_start = d["suppress_range"][0].get<int>();
  cfg.inject_range_start = d["inject_range"][0].get<int>();
  return cfg;
}

CorrectionConfig canonical_correction(const FixtureBundle& bundle) {
  const auto& d = bundle.experiment_defaults["correction"];
  CorrectionConfig cfg;
  cfg.prompt = bundle.experiment_defaults["sweep"]["tokens"].get<std::vector<int>>();
  for (const auto& f : d["suppress"]) cfg.suppress_group.push_back(FeatureId::parse(f));
  cfg.commit_feature = FeatureId::parse(d["inject"].get<std::string>());
  cfg.commit_strength = d["strength"].get<double>();
  cfg.commit_range_start = d["inject_range"][0].get<int>();
  cfg.suppress_range_start = d["suppress_range"][0].get<int>();
  cfg.correct_feature = FeatureId::parse(d["correct_feature"].get<std::string>());
  cfg.correct_range_start = d["correct_range"][0].get<int>();
  cfg.correct_range_end = d["correct_range"][1].get<int>();
  cfg.strength_grid = d["grid"].get<std::vector<double>>();
  cfg.commit_word = d["commit_word"].get<std::string>();
  cfg.correct_word = d["correct_word"].get<std::string>();
  cfg.key_head_layer = bundle.manifest["routing"]["layer"].get<int>();
  cfg.key_head = bundle.manifest["routing"]["head"].get<int>();
  return cfg;
}

}  // namespace

TEST_CASE("strength zero sweeps are flat at baseline and never localize") {
  const FixtureBundle& bundle = test::planted_bundle();
  Clt clt(bundle.clt_path);
  SweepConfig cfg = canonical_sweep(bundle);
  cfg.strength = 0.0;
  SweepResult r = position_sweep(cfg, bundle.model, clt);
  for (double p : r.p_by_position) CHECK(p == r.baseline_p);
  CHECK_FALSE(r.localized);  // flat series has no strict argmax
}

TEST_CASE("planted circuit localizes with the oracle-predicted spike") {
  const FixtureBundle& bundle = test::planted_bundle();
  Clt clt(bundle.clt_path);
  SweepConfig cfg = canonical_sweep(bundle);
  SweepResult r = position_sweep(cfg, bundle.model, clt);

  CHECK(r.localized);
  CHECK(r.peak_position == cfg.planning_site);
  CHECK(r.ratio >= 1e3);
  double baseline = r.baseline_p;
  for (int pos = 0; pos < cfg.planning_site; ++pos)
    CHECK(r.p_by_position[size_t(pos)] <= 10.0 * baseline);

  // engine values match the 64-bit oracle manifest
  std::vector<double> oracle_p = bundle.manifest["p_by_position"].get<std::vector<double>>();
  REQUIRE(oracle_p.size() == r.p_by_position.size());
  for (size_t i = 0; i < oracle_p.size(); ++i)
    CHECK(r.p_by_position[i] ==
          doctest::Approx(oracle_p[i]).epsilon(1e-4).scale(std::max(oracle_p[i], 1e-12)));
}

TEST_CASE("sweep input validation") {
  const FixtureBundle& bundle = test::planted_bundle();
  Clt clt(bundle.clt_path);
  SweepConfig cfg = canonical_sweep(bundle);
  cfg.target_word = "nonexistentword";
  CHECK_THROWS_WITH_AS(position_sweep(cfg, bundle.model, clt),
                       doctest::Contains("does not tokenize"), std::runtime_error);
  SweepConfig tiny = canonical_sweep(bundle);
  tiny.prompt = {1};
  CHECK_THROWS(position_sweep(tiny, bundle.model, clt));
}

TEST_CASE("localization rate statistics") {
  BinomialCi paper = localization_rate(95, 136);
  CHECK(paper.fraction == doctest::Approx(0.699).epsilon(1e-3));
  CHECK(paper.lo == doctest::Approx(0.62).epsilon(0.009));
  CHECK(paper.hi == doctest::Approx(0.78).epsilon(0.007));

  BinomialCi zero = localization_rate(0, 10);
  CHECK(zero.hi == doctest::Approx(0.26).epsilon(0.04));
  CHECK(zero.one_sided);

  std::vector<SweepResult> all_hit(4);
  for (auto& r : all_hit) r.localized = true;
  CHECK(localization_rate(all_hit).fraction == 1.0);
  CHECK_THROWS(localization_rate(std::span<const SweepResult>{}));
}

TEST_CASE("strength sweep starts clean and rises monotonically to saturation") {
  const FixtureBundle& bundle = test::planted_bundle();
  Clt clt(bundle.clt_path);
  SweepConfig cfg = canonical_sweep(bundle);
  std::vector<double> grid = {0.0, 2.0, 4.0, 6.0, 8.0, 10.0, 14.0, 20.0};
  std::vector<StrengthPoint> curve = strength_sweep(cfg, grid, bundle.model, clt);
  REQUIRE(curve.size() == grid.size());

  CHECK(curve[0].top_head_delta == 0.0);
  CHECK(curve[0].total_shift == 0.0);
  CHECK(curve[0].p_target == doctest::Approx(bundle.manifest["clean_p_target"].get<double>())
                                 .epsilon(1e-3));
  for (size_t i = 1; i < curve.size(); ++i)
    CHECK(curve[i].p_target >= curve[i - 1].p_target * (1.0 - 1e-9));
  CHECK(curve.back().p_target > 0.9);

  std::vector<double> bad = {1.0, 2.0};
  CHECK_THROWS(strength_sweep(cfg, bad, bundle.model, clt));
}

TEST_CASE("layer ablation scores couplets against the phoneme dictionary") {
  const FixtureBundle& bundle = test::planted_bundle();
  PhonemeDict dict = PhonemeDict::from_strings(bundle.phoneme_dict);

  AblationConfig cfg;
  for (const auto& prompt : bundle.experiment_defaults["couplets"])
    cfg.couplet_prompts.push_back(bundle.model.tokens.encode(prompt.get<std::string>()));

  SUBCASE("planted model always rhymes with an empty mask") {
    AblationResult r = layer_ablation(cfg, bundle.model, dict);
    CHECK(r.total == int(cfg.couplet_prompts.size()));
    CHECK(r.rhymed == r.total);
    CHECK(r.rhyme_rate == 1.0);
  }
  SUBCASE("masking the commitment span drops the rate to the floor") {
    for (const auto& l : bundle.experiment_defaults["ablation_mask"])
      cfg.mask.skipped.insert(l.get<int>());
    AblationResult r = layer_ablation(cfg, bundle.model, dict);
    CHECK(r.rhyme_rate == 0.0);
  }
  SUBCASE("empty mask generation is bit-identical to unmasked generation") {
    for (const auto& prompt : cfg.couplet_prompts) {
      std::vector<int> a = greedy_generate(bundle.model, prompt, 8, 1, LayerMask{});
      std::vector<int> b = greedy_generate(bundle.model, prompt, 8, 1);
      CHECK(a == b);
    }
  }
}

TEST_CASE("correction verdicts separate the planted and control circuits") {
  const FixtureBundle& bundle = test::planted_bundle();
  Clt clt(bundle.clt_path);
  CorrectionConfig cfg = canonical_correction(bundle);

  CorrectionResult r = correction_test(cfg, bundle.model, clt);
  REQUIRE(r.points.size() == cfg.strength_grid.size());
  CHECK(r.verdict == CorrectionVerdict::irrevocable);

  // the zero-strength point reproduces commit-only numbers exactly
  CorrectionConfig only = cfg;
  only.strength_grid = {0.0, 20.0};
  CorrectionResult commit_only = correction_test(only, bundle.model, clt);
  CHECK(commit_only.points[0].p_commit == r.points[0].p_commit);
  CHECK(commit_only.points[0].p_correct == r.points[0].p_correct);
  CHECK(commit_only.points[0].key_head_delta == r.points[0].key_head_delta);

  // p_correct stays within 10x of its floor across the grid
  double floor = std::max(r.points[0].p_correct, 1e-30);
  for (const CorrectionPoint& p : r.points) CHECK(p.p_correct <= 10.0 * floor);
  // the routing head stays locked
  for (const CorrectionPoint& p : r.points)
    CHECK(p.key_head_delta == doctest::Approx(r.points[0].key_head_delta).epsilon(0.05));

  SUBCASE("overridable control flips the verdict") {
    const FixtureBundle& control = test::overridable_bundle();
    Clt control_clt(control.clt_path);
    CorrectionConfig ccfg = canonical_correction(control);
    CorrectionResult cr = correction_test(ccfg, control.model, control_clt);
    CHECK(cr.verdict == CorrectionVerdict::overridable);
  }
  SUBCASE("correction range must sit above the commit feature") {
    CorrectionConfig bad = cfg;
    bad.correct_range_start = bad.commit_feature.layer;
    CHECK_THROWS_WITH_AS(correction_test(bad, bundle.model, clt),
                         doctest::Contains("strictly above"), std::runtime_error);
  }
  SUBCASE("grid must start at zero") {
    CorrectionConfig bad = cfg;
    bad.strength_grid = {1.0, 2.0};
    CHECK_THROWS(correction_test(bad, bundle.model, clt));
  }
}

TEST_CASE("word probability uses the best single-token variant") {
  const FixtureBundle& bundle = test::planted_bundle();
  Eigen::VectorXd dist = Eigen::VectorXd::Zero(64);
  auto around = bundle.model.tokens.find("around");
  REQUIRE(around.has_value());
  dist[*around] = 0.25;
  CHECK(word_probability(dist, bundle.model.tokens, "around") == 0.25);
  CHECK_THROWS(word_probability(dist, bundle.model.tokens, "zzz"));
}
