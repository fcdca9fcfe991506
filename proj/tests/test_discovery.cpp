#include <doctest.h>

#include <sstream>

#include "clens/discovery.hpp"
#include "clens/tensor_file.hpp"
#include "helpers.hpp"

using namespace clens;

namespace {

const char* kMiniCmu = R"(;;; mini dictionary for unit tests
ABOUT  AH0 B AW1 T
OUT  AW1 T
SHOUT  SH AW1 T
FOUND  F AW1 N D
ROUND  R AW1 N D
AROUND  ER0 AW1 N D
GROUND  G R AW1 N D
TREE  T R IY1
TREE(2)  T R IY2
)";

PhonemeDict mini_dict() {
  std::istringstream ss(kMiniCmu);
  return PhonemeDict::parse_cmu(ss);
}

// CLT archive whose final-layer decoder rows are copies of chosen embedding
// rows, so each feature's top-1 token is known with cosine 1
void write_aligned_clt(const std::string& path, const Eigen::MatrixXf& embeddings,
                       const std::vector<int>& aligned_tokens, int n_layers) {
  int features = int(aligned_tokens.size());
  int d = int(embeddings.cols());
  TensorFileWriter w;
  CltSpec spec;
  spec.features_per_layer = features;
  spec.n_layers = n_layers;
  spec.nonlinearity = CltNonlinearity::identity;
  w.set_metadata("clt_config", spec.to_json().dump());
  test::Rng rng(99);
  for (int l = 0; l < n_layers; ++l) {
    std::string prefix = "clt.layers." + std::to_string(l) + ".";
    Eigen::MatrixXf enc = test::random_matrix(rng, features, d, 0.1);
    std::vector<float> rm(size_t(features) * size_t(d));
    for (int i = 0; i < features; ++i)
      for (int j = 0; j < d; ++j) rm[size_t(i) * size_t(d) + size_t(j)] = enc(i, j);
    w.add(prefix + "encoder.weight", HostTensor::from_f32({features, d}, rm));
    for (int t = l; t < n_layers; ++t) {
      Eigen::MatrixXf dec = test::random_matrix(rng, features, d, 0.05);
      if (t == n_layers - 1) {
        for (int f = 0; f < features; ++f) dec.row(f) = embeddings.row(aligned_tokens[size_t(f)]);
      }
      std::vector<float> dm(size_t(features) * size_t(d));
      for (int i = 0; i < features; ++i)
        for (int j = 0; j < d; ++j) dm[size_t(i) * size_t(d) + size_t(j)] = dec(i, j);
      w.add(prefix + "decoder." + std::to_string(t) + ".weight",
            HostTensor::from_f32({features, d}, dm));
    }
  }
  w.write(path);
}

}  // namespace

TEST_CASE("clean token filter") {
  CHECK(is_clean_token(" about"));
  CHECK(is_clean_token("about"));
  CHECK(is_clean_token("ou"));
  CHECK(is_clean_token("\xE2\x96\x81word"));  // sentencepiece marker
  CHECK(is_clean_token("\xC4\xA0word"));      // GPT-style marker
  CHECK_FALSE(is_clean_token("##ing"));
  CHECK_FALSE(is_clean_token("word7"));
  CHECK_FALSE(is_clean_token("don't"));
  CHECK_FALSE(is_clean_token(""));
  CHECK_FALSE(is_clean_token(" "));
  CHECK_FALSE(is_clean_token("  about"));  // only one marker is stripped
  CHECK(clean_word(" About") == "ABOUT");
}

TEST_CASE("rhyme endings") {
  std::vector<std::string> about = {"AH0", "B", "AW1", "T"};
  CHECK(rhyme_ending(about) == "AW1 T");
  std::vector<std::string> found = {"F", "AW1", "N", "D"};
  CHECK(rhyme_ending(found) == "AW1 N D");
  std::vector<std::string> schwa = {"AH0"};
  CHECK(rhyme_ending(schwa) == "AH0");  // no primary stress falls back to the last vowel
  std::vector<std::string> none = {"SH", "T"};
  CHECK(rhyme_ending(none) == "");
  // later primary stress wins
  std::vector<std::string> two = {"AW1", "T", "IY1", "Z"};
  CHECK(rhyme_ending(two) == "IY1 Z");
}

TEST_CASE("rhyme_ending is idempotent on its own output") {
  PhonemeDict dict = mini_dict();
  for (const auto& [word, phones] : dict.entries) {
    std::string ending = rhyme_ending(phones);
    if (ending.empty()) continue;
    std::istringstream ss(ending);
    std::vector<std::string> parts;
    std::string p;
    while (ss >> p) parts.push_back(p);
    CHECK(rhyme_ending(parts) == ending);
  }
}

TEST_CASE("cmu parser handles comments and alternates") {
  PhonemeDict dict = mini_dict();
  CHECK(dict.entries.size() == 8);
  auto tree = dict.lookup("tree");
  REQUIRE(tree.has_value());
  CHECK((*tree)[2] == "IY1");  // primary pronunciation, not the (2) alternate
  CHECK_FALSE(dict.lookup("missing").has_value());
}

TEST_CASE("mini fixture yields exactly the AW1 T and AW1 N D groups") {
  test::TempDir tmp("discovery");
  // vocabulary: the eight dictionary words plus dirty tokens
  TokenTable tokens;
  tokens.surfaces = {"about", "out", "shout", "found", "round", "around", "ground", "tree",
                     "##ing", "w9", "x7", "the"};
  test::Rng rng(5);
  Eigen::MatrixXf embeddings = test::random_matrix(rng, long(tokens.surfaces.size()), 16, 1.0);

  std::vector<int> aligned = {0, 1, 2, 3, 4, 5, 6, 7, 8};  // includes the dirty "##ing"
  std::string clt_path = tmp.file("aligned.nt");
  write_aligned_clt(clt_path, embeddings, aligned, 2);

  ScanConfig config;
  config.chunk_size = 4;
  std::vector<VocabScanEntry> scan = scan_vocabulary(clt_path, embeddings, tokens, config);

  // one entry per aligned clean feature; the ##ing-aligned feature is filtered
  int clean_hits = 0;
  for (const VocabScanEntry& e : scan) {
    if (e.feature.layer != 1) continue;
    ++clean_hits;
    CHECK(e.top.front().cosine == doctest::Approx(1.0).epsilon(1e-5));
  }
  CHECK(clean_hits == 8);

  std::vector<RhymeGroup> groups = build_rhyme_groups(scan, mini_dict(), 0.3, 2);
  REQUIRE(groups.size() == 2);
  CHECK(groups[0].ending == "AW1 N D");  // 4 members sorts first
  CHECK(groups[0].members.size() == 4);
  CHECK(groups[1].ending == "AW1 T");
  CHECK(groups[1].members.size() == 3);
  for (const RhymeMember& m : groups[0].members)
    CHECK((m.word == "FOUND" || m.word == "ROUND" || m.word == "AROUND" || m.word == "GROUND"));
  // "tree" has no second IY1 word, so no IY1 group

  SUBCASE("empty scan gives an empty group list") {
    CHECK(build_rhyme_groups({}, mini_dict()).empty());
  }
}

TEST_CASE("chunked scan output is independent of chunk size") {
  test::TempDir tmp("discovery_chunks");
  TokenTable tokens;
  for (int i = 0; i < 24; ++i) tokens.surfaces.push_back("tok" + std::string(1, char('a' + i)));
  test::Rng rng(6);
  Eigen::MatrixXf embeddings = test::random_matrix(rng, 24, 12, 1.0);
  std::string clt_path = tmp.file("rand.nt");
  std::vector<int> aligned;
  for (int i = 0; i < 9; ++i) aligned.push_back(i);
  write_aligned_clt(clt_path, embeddings, aligned, 3);

  std::vector<std::vector<VocabScanEntry>> runs;
  for (int chunk : {1, 3, 7, 64}) {
    ScanConfig config;
    config.chunk_size = chunk;
    runs.push_back(scan_vocabulary(clt_path, embeddings, tokens, config));
  }
  for (size_t r = 1; r < runs.size(); ++r) {
    REQUIRE(runs[r].size() == runs[0].size());
    for (size_t i = 0; i < runs[r].size(); ++i) {
      CHECK(runs[r][i].feature == runs[0][i].feature);
      REQUIRE(runs[r][i].top.size() == runs[0][i].top.size());
      for (size_t k = 0; k < runs[r][i].top.size(); ++k) {
        CHECK(runs[r][i].top[k].token == runs[0][i].top[k].token);
        // engine precision: blocked matmul rounding may differ per chunk shape
        CHECK(runs[r][i].top[k].cosine ==
              doctest::Approx(runs[0][i].top[k].cosine).epsilon(1e-5));
      }
    }
  }
  CHECK_THROWS(scan_vocabulary(clt_path, embeddings, tokens, ScanConfig{0, 5, -1}));
}

TEST_CASE("scan top-1 cosines match a 64-bit brute-force matmul") {
  test::TempDir tmp("discovery_oracle");
  TokenTable tokens;
  for (int i = 0; i < 64; ++i) {
    std::string name;
    int v = i;
    do {
      name += char('a' + v % 26);
      v /= 26;
    } while (v > 0);
    tokens.surfaces.push_back(name);
  }
  test::Rng rng(7);
  Eigen::MatrixXf embeddings = test::random_matrix(rng, 64, 16, 1.0);
  std::string clt_path = tmp.file("gauss.nt");
  std::vector<int> aligned;
  for (int i = 0; i < 6; ++i) aligned.push_back(i * 3);
  write_aligned_clt(clt_path, embeddings, aligned, 2);

  ScanConfig config;
  config.chunk_size = 5;
  std::vector<VocabScanEntry> scan = scan_vocabulary(clt_path, embeddings, tokens, config);
  REQUIRE(!scan.empty());

  // brute force in double, full matrix
  TensorFileReader reader(clt_path);
  CltSpec spec = read_clt_spec(clt_path);
  for (const VocabScanEntry& e : scan) {
    CltShard shard = load_shard(reader, spec, e.feature.layer);
    const Eigen::MatrixXf& dec = shard.decoder_for(spec.n_layers - 1);
    double best = -2.0;
    int best_tok = -1;
    for (long t = 0; t < embeddings.rows(); ++t) {
      double dot = 0.0, dn = 0.0, en = 0.0;
      for (long j = 0; j < embeddings.cols(); ++j) {
        dot += double(dec(e.feature.index, j)) * double(embeddings(t, j));
        dn += double(dec(e.feature.index, j)) * double(dec(e.feature.index, j));
        en += double(embeddings(t, j)) * double(embeddings(t, j));
      }
      double cos = dot / std::max(std::sqrt(dn) * std::sqrt(en), 1e-12);
      if (cos > best) {
        best = cos;
        best_tok = int(t);
      }
    }
    CHECK(e.top.front().token == best_tok);
    CHECK(e.top.front().cosine == doctest::Approx(best).epsilon(1e-5));
  }
}

TEST_CASE("keyword scan reports hits with their full context") {
  VocabScanEntry planted;
  planted.feature = FeatureId{3, 7};
  planted.top = {{10, " long", 0.9}, {11, "Long", 0.8}, {12, "LONG", 0.7}, {13, "dolgo", 0.6},
                 {14, "longa", 0.5}};
  VocabScanEntry other;
  other.feature = FeatureId{2, 1};
  other.top = {{20, "tree", 0.95}};
  std::vector<VocabScanEntry> scan = {planted, other};

  std::vector<std::string> keywords = {"long", "int"};
  std::vector<KeywordHit> hits = keyword_domain_scan(scan, keywords);
  REQUIRE(hits.size() == 2);
  CHECK(hits[0].keyword == "long");
  REQUIRE(hits[0].features.size() == 1);
  CHECK(hits[0].features[0].feature == planted.feature);
  CHECK(hits[0].features[0].top.size() == 5);  // full audit context preserved
  CHECK(hits[1].keyword == "int");
  CHECK(hits[1].features.empty());  // absent keyword: zero hits

  CHECK_THROWS(keyword_domain_scan(scan, {}));
}

TEST_CASE("scan entries round-trip through JSON") {
  VocabScanEntry e;
  e.feature = FeatureId{3, 7};
  e.top = {{10, " long", 0.9}, {11, "tree", 0.8}};
  VocabScanEntry back = VocabScanEntry::from_json(e.to_json());
  CHECK(back.feature == e.feature);
  REQUIRE(back.top.size() == 2);
  CHECK(back.top[0].surface == " long");
  CHECK(back.top[1].cosine == 0.8);
}
