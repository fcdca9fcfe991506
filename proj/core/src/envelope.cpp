#include "clens/envelope.hpp"

#include <fstream>
#include <stdexcept>

#include "clens/version.hpp"

namespace clens {

using nlohmann::json;

json ResultEnvelope::to_json() const {
  json j;
  j["schema_version"] = schema_version;
  j["subcommand"] = subcommand;
  j["config"] = config;
  j["timing_ms"] = timing_ms;
  j["payload"] = payload;
  j["provenance"] = {{"engine_version", kEngineVersion},
                     {"checkpoint_digests", checkpoint_digests}};
  return j;
}

ResultEnvelope ResultEnvelope::parse(const json& j) {
  ResultEnvelope e;
  e.schema_version = j.at("schema_version").get<int>();
  e.subcommand = j.at("subcommand").get<std::string>();
  e.config = j.at("config");
  e.timing_ms = j.at("timing_ms").get<double>();
  e.payload = j.at("payload");
  if (j.contains("provenance") && j["provenance"].contains("checkpoint_digests"))
    e.checkpoint_digests =
        j["provenance"]["checkpoint_digests"].get<std::map<std::string, std::string>>();
  return e;
}

void write_envelope(const ResultEnvelope& envelope, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("envelope: cannot write " + path);
  out << envelope.to_json().dump(2) << "\n";
}

ResultEnvelope read_envelope(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("envelope: cannot open " + path);
  json j;
  in >> j;
  return ResultEnvelope::parse(j);
}

}  // namespace clens
