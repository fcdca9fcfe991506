#pragma once

#include <Eigen/Dense>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "clens/clt.hpp"

namespace clens {

struct TokenScore {
  int token = 0;
  std::string surface;
  double cosine = 0.0;
};

struct VocabScanEntry {
  FeatureId feature;
  std::vector<TokenScore> top;  // descending cosine

  nlohmann::json to_json() const;
  static VocabScanEntry from_json(const nlohmann::json& j);
};

struct ScanConfig {
  int chunk_size = 4096;
  int top_k = 5;
  // decoder row used for the scan; -1 means the final layer's row, the one
  // feeding the unembedding-adjacent residual
  int target_layer = -1;
};

// Scans every feature's decoder vector against the token embeddings in
// feature chunks, never materializing the full features x vocab matrix.
// Keeps entries whose top-1 token is a clean word.
std::vector<VocabScanEntry> scan_vocabulary(const std::string& clt_path,
                                            const Eigen::MatrixXf& embeddings,
                                            const TokenTable& tokens, const ScanConfig& config,
                                            MemoryMeter* meter = nullptr);

// True iff, after stripping one leading whitespace marker, the surface is
// purely ASCII alphabetic.
bool is_clean_token(const std::string& surface);
// Stripped, uppercased form for dictionary lookup.
std::string clean_word(const std::string& surface);

struct PhonemeDict {
  // first pronunciation per word, uppercase keys
  std::map<std::string, std::vector<std::string>> entries;

  static PhonemeDict parse_cmu(std::istream& in);
  static PhonemeDict parse_cmu_file(const std::string& path);
  static PhonemeDict from_strings(const std::map<std::string, std::string>& word_to_phones);
  std::optional<std::vector<std::string>> lookup(const std::string& word) const;
};

// Suffix from the last primary-stressed vowel; falls back to the last vowel
// of any stress; empty when the word has no vowel.
std::string rhyme_ending(std::span<const std::string> phonemes);

struct RhymeMember {
  std::string word;
  FeatureId feature;
  double cosine = 0.0;
};

struct RhymeGroup {
  std::string ending;
  std::vector<RhymeMember> members;
};

std::vector<RhymeGroup> build_rhyme_groups(std::span<const VocabScanEntry> scan,
                                           const PhonemeDict& dict, double min_cosine = 0.3,
                                           int min_words = 2);

struct KeywordHit {
  std::string keyword;
  std::vector<VocabScanEntry> features;  // full top-k context for audit
};

std::vector<KeywordHit> keyword_domain_scan(std::span<const VocabScanEntry> scan,
                                            std::span<const std::string> keywords);

nlohmann::json scan_to_json(std::span<const VocabScanEntry> scan);
std::vector<VocabScanEntry> scan_from_json(const nlohmann::json& j);
nlohmann::json rhyme_groups_to_json(std::span<const RhymeGroup> groups);

}  // namespace clens
