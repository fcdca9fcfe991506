#include "clens/discovery.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

namespace clens {

using nlohmann::json;

json VocabScanEntry::to_json() const {
  json tokens = json::array();
  for (const TokenScore& t : top)
    tokens.push_back({{"token", t.token}, {"surface", t.surface}, {"cosine", t.cosine}});
  return json{{"feature", feature.str()}, {"top_tokens", tokens}};
}

VocabScanEntry VocabScanEntry::from_json(const json& j) {
  VocabScanEntry e;
  e.feature = FeatureId::parse(j.at("feature").get<std::string>());
  for (const auto& t : j.at("top_tokens")) {
    TokenScore s;
    s.token = t.at("token").get<int>();
    s.surface = t.at("surface").get<std::string>();
    s.cosine = t.at("cosine").get<double>();
    e.top.push_back(std::move(s));
  }
  return e;
}

bool is_clean_token(const std::string& surface) {
  std::string_view s = surface;
  // strip one leading whitespace marker: ' ', sentencepiece U+2581, or GPT-style U+0120
  if (!s.empty() && s.front() == ' ') {
    s.remove_prefix(1);
  } else if (s.size() >= 3 && uint8_t(s[0]) == 0xE2 && uint8_t(s[1]) == 0x96 && uint8_t(s[2]) == 0x81) {
    s.remove_prefix(3);
  } else if (s.size() >= 2 && uint8_t(s[0]) == 0xC4 && uint8_t(s[1]) == 0xA0) {
    s.remove_prefix(2);
  }
  if (s.empty()) return false;
  for (char c : s) {
    if (!std::isalpha(static_cast<unsigned char>(c))) return false;
  }
  return true;
}

std::string clean_word(const std::string& surface) {
  std::string_view s = surface;
  if (!s.empty() && s.front() == ' ') {
    s.remove_prefix(1);
  } else if (s.size() >= 3 && uint8_t(s[0]) == 0xE2 && uint8_t(s[1]) == 0x96 && uint8_t(s[2]) == 0x81) {
    s.remove_prefix(3);
  } else if (s.size() >= 2 && uint8_t(s[0]) == 0xC4 && uint8_t(s[1]) == 0xA0) {
    s.remove_prefix(2);
  }
  std::string out(s);
  for (char& c : out) c = char(std::toupper(static_cast<unsigned char>(c)));
  return out;
}

std::vector<VocabScanEntry> scan_vocabulary(const std::string& clt_path,
                                            const Eigen::MatrixXf& embeddings,
                                            const TokenTable& tokens, const ScanConfig& config,
                                            MemoryMeter* meter) {
  if (config.chunk_size < 1) throw std::runtime_error("scan_vocabulary: chunk_size must be >= 1");
  if (config.top_k < 1) throw std::runtime_error("scan_vocabulary: top_k must be >= 1");
  if (!tokens.empty() && long(tokens.surfaces.size()) != embeddings.rows())
    throw std::runtime_error("scan_vocabulary: token table size does not match embedding rows");

  // L2-normalized embedding rows, shared across chunks (fixed workspace)
  Eigen::MatrixXf unit_embed = embeddings;
  for (long r = 0; r < unit_embed.rows(); ++r) {
    float n = unit_embed.row(r).norm();
    unit_embed.row(r) /= std::max(n, 1e-12f);
  }
  if (meter) meter->add(int64_t(unit_embed.size()) * 4);

  std::vector<VocabScanEntry> out;
  stream_shards(
      clt_path,
      [&](const CltShard& shard) {
        int target = config.target_layer < 0 ? shard.n_layers - 1 : config.target_layer;
        const Eigen::MatrixXf& decoder = shard.decoder_for(target);
        long features = decoder.rows();
        for (long begin = 0; begin < features; begin += config.chunk_size) {
          long count = std::min<long>(config.chunk_size, features - begin);
          Eigen::MatrixXf chunk = decoder.middleRows(begin, count);
          for (long r = 0; r < count; ++r) {
            float n = chunk.row(r).norm();
            chunk.row(r) /= std::max(n, 1e-12f);
          }
          Eigen::MatrixXf scores = chunk * unit_embed.transpose();  // [count, vocab]
          for (long r = 0; r < count; ++r) {
            std::vector<int> order(size_t(scores.cols()));
            for (size_t i = 0; i < order.size(); ++i) order[i] = int(i);
            long k = std::min<long>(config.top_k, scores.cols());
            std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](int a, int b) {
              float sa = scores(r, a), sb = scores(r, b);
              return sa > sb || (sa == sb && a < b);
            });
            std::string top_surface =
                tokens.empty() ? std::string() : tokens.surface(order[0]);
            if (!tokens.empty() && !is_clean_token(top_surface)) continue;
            VocabScanEntry entry;
            entry.feature = FeatureId{shard.layer, int(begin + r)};
            for (long i = 0; i < k; ++i) {
              TokenScore ts;
              ts.token = order[size_t(i)];
              ts.surface = tokens.empty() ? std::string() : tokens.surface(ts.token);
              ts.cosine = double(scores(r, ts.token));
              entry.top.push_back(std::move(ts));
            }
            out.push_back(std::move(entry));
          }
        }
      },
      meter);
  if (meter) meter->sub(int64_t(unit_embed.size()) * 4);
  return out;
}

PhonemeDict PhonemeDict::parse_cmu(std::istream& in) {
  PhonemeDict dict;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line.rfind(";;;", 0) == 0) continue;
    std::istringstream ss(line);
    std::string word;
    ss >> word;
    if (word.empty()) continue;
    // alternate pronunciations "WORD(2)": keep the primary entry only
    size_t paren = word.find('(');
    bool alternate = paren != std::string::npos;
    if (alternate) word = word.substr(0, paren);
    for (char& c : word) c = char(std::toupper(static_cast<unsigned char>(c)));
    if (alternate && dict.entries.count(word)) continue;
    std::vector<std::string> phones;
    std::string p;
    while (ss >> p) phones.push_back(p);
    if (phones.empty()) continue;
    if (!dict.entries.count(word)) dict.entries[word] = std::move(phones);
  }
  return dict;
}

PhonemeDict PhonemeDict::parse_cmu_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("phoneme dict: cannot open " + path);
  return parse_cmu(in);
}

PhonemeDict PhonemeDict::from_strings(const std::map<std::string, std::string>& word_to_phones) {
  PhonemeDict dict;
  for (const auto& [word, phones] : word_to_phones) {
    std::istringstream ss(phones);
    std::vector<std::string> list;
    std::string p;
    while (ss >> p) list.push_back(p);
    if (list.empty()) continue;
    std::string key = word;
    for (char& c : key) c = char(std::toupper(static_cast<unsigned char>(c)));
    dict.entries[key] = std::move(list);
  }
  return dict;
}

std::optional<std::vector<std::string>> PhonemeDict::lookup(const std::string& word) const {
  std::string key = word;
  for (char& c : key) c = char(std::toupper(static_cast<unsigned char>(c)));
  auto it = entries.find(key);
  if (it == entries.end()) return std::nullopt;
  return it->second;
}

namespace {

bool is_vowel_phone(const std::string& p) {
  // CMU convention: vowels carry a stress digit
  return !p.empty() && std::isdigit(static_cast<unsigned char>(p.back()));
}

}  // namespace

std::string rhyme_ending(std::span<const std::string> phonemes) {
  long start = -1;
  for (long i = long(phonemes.size()) - 1; i >= 0; --i) {
    if (is_vowel_phone(phonemes[size_t(i)]) && phonemes[size_t(i)].back() == '1') {
      start = i;
      break;
    }
  }
  if (start < 0) {
    for (long i = long(phonemes.size()) - 1; i >= 0; --i) {
      if (is_vowel_phone(phonemes[size_t(i)])) {
        start = i;
        break;
      }
    }
  }
  if (start < 0) return "";
  std::string out;
  for (size_t i = size_t(start); i < phonemes.size(); ++i) {
    if (!out.empty()) out += ' ';
    out += phonemes[i];
  }
  return out;
}

std::vector<RhymeGroup> build_rhyme_groups(std::span<const VocabScanEntry> scan,
                                           const PhonemeDict& dict, double min_cosine,
                                           int min_words) {
  // one member per word, best cosine wins
  std::map<std::string, RhymeMember> best_by_word;
  for (const VocabScanEntry& e : scan) {
    if (e.top.empty()) continue;
    const TokenScore& top = e.top.front();
    if (top.cosine < min_cosine) continue;
    std::string word = clean_word(top.surface);
    if (word.empty() || !dict.lookup(word)) continue;
    auto it = best_by_word.find(word);
    if (it == best_by_word.end() || top.cosine > it->second.cosine)
      best_by_word[word] = RhymeMember{word, e.feature, top.cosine};
  }

  std::map<std::string, RhymeGroup> by_ending;
  for (const auto& [word, member] : best_by_word) {
    std::string ending = rhyme_ending(*dict.lookup(word));
    if (ending.empty()) continue;
    RhymeGroup& g = by_ending[ending];
    g.ending = ending;
    g.members.push_back(member);
  }

  std::vector<RhymeGroup> out;
  for (auto& [ending, group] : by_ending) {
    if (int(group.members.size()) < min_words) continue;
    std::sort(group.members.begin(), group.members.end(), [](const RhymeMember& a, const RhymeMember& b) {
      return a.cosine > b.cosine || (a.cosine == b.cosine && a.word < b.word);
    });
    out.push_back(std::move(group));
  }
  std::sort(out.begin(), out.end(), [](const RhymeGroup& a, const RhymeGroup& b) {
    if (a.members.size() != b.members.size()) return a.members.size() > b.members.size();
    return a.ending < b.ending;
  });
  return out;
}

std::vector<KeywordHit> keyword_domain_scan(std::span<const VocabScanEntry> scan,
                                            std::span<const std::string> keywords) {
  if (keywords.empty()) throw std::runtime_error("keyword_domain_scan: keyword list is empty");
  std::vector<KeywordHit> out;
  for (const std::string& keyword : keywords) {
    std::string want = keyword;
    for (char& c : want) c = char(std::toupper(static_cast<unsigned char>(c)));
    KeywordHit hit;
    hit.keyword = keyword;
    for (const VocabScanEntry& e : scan) {
      for (const TokenScore& t : e.top) {
        if (clean_word(t.surface) == want) {
          hit.features.push_back(e);
          break;
        }
      }
    }
    out.push_back(std::move(hit));
  }
  return out;
}

json scan_to_json(std::span<const VocabScanEntry> scan) {
  json arr = json::array();
  for (const VocabScanEntry& e : scan) arr.push_back(e.to_json());
  return arr;
}

std::vector<VocabScanEntry> scan_from_json(const json& j) {
  std::vector<VocabScanEntry> out;
  for (const auto& item : j) out.push_back(VocabScanEntry::from_json(item));
  return out;
}

json rhyme_groups_to_json(std::span<const RhymeGroup> groups) {
  json arr = json::array();
  for (const RhymeGroup& g : groups) {
    json members = json::array();
    for (const RhymeMember& m : g.members)
      members.push_back({{"word", m.word}, {"feature", m.feature.str()}, {"cosine", m.cosine}});
    arr.push_back({{"ending", g.ending}, {"members", members}});
  }
  return arr;
}

}  // namespace clens
