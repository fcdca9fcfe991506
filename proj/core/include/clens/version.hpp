#pragma once

namespace clens {

inline constexpr const char* kEngineVersion = "0.1.0";
inline constexpr int kResultSchemaVersion = 1;

}  // namespace clens
