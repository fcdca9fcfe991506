#pragma once

#include <map>
#include <string>

#include <nlohmann/json.hpp>

namespace clens {

// Uniform wrapper around every CLI result: schema version, config echo,
// timing, module payload, and provenance (engine version plus checkpoint
// content digests). Timing sits outside the payload so determinism checks can
// compare payloads byte for byte.
struct ResultEnvelope {
  int schema_version = 1;
  std::string subcommand;
  nlohmann::json config;
  double timing_ms = 0.0;
  nlohmann::json payload;
  std::map<std::string, std::string> checkpoint_digests;

  nlohmann::json to_json() const;
  static ResultEnvelope parse(const nlohmann::json& j);
};

void write_envelope(const ResultEnvelope& envelope, const std::string& path);
ResultEnvelope read_envelope(const std::string& path);

}  // namespace clens
