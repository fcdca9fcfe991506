#pragma once

#include <filesystem>

#include "clens/fixtures.hpp"
#include "helpers.hpp"

namespace clens::test {

// Fixture bundles are deterministic and somewhat costly to self-check, so the
// suite builds each variant once.
inline const std::string& bundle_dir() {
  static TempDir dir("bundles");
  static std::string path = dir.path().string();
  return path;
}

inline const FixtureBundle& planted_bundle() {
  static FixtureBundle bundle = build_planted_model({}, bundle_dir());
  return bundle;
}

inline const FixtureBundle& overridable_bundle() {
  static FixtureBundle bundle = [] {
    PlantedCircuitSpec spec;
    spec.late_write_access = true;
    return build_planted_model(spec, bundle_dir());
  }();
  return bundle;
}

inline const FixtureBundle& fact_bundle() {
  static FixtureBundle bundle = build_fact_fixture({}, bundle_dir());
  return bundle;
}

}  // namespace clens::test
