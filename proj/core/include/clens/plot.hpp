#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace clens {

enum class PlotKind { position_sweep, strength_curves, routing_bars };

PlotKind parse_plot_kind(const std::string& name);

// One set of series drives both renderings, so the SVG and CSV cannot diverge.
struct PlotSeries {
  std::string title, x_label, y_label;
  bool log_y = false;
  std::vector<std::string> series_names;
  std::vector<std::vector<double>> x;  // per series
  std::vector<std::vector<double>> y;
  std::vector<std::string> bar_labels;  // routing bars only
  std::vector<double> bar_values;
};

// Extracts plottable series from a result envelope payload of the matching
// subcommand; throws on a payload/kind mismatch.
PlotSeries series_from_payload(const nlohmann::json& payload, PlotKind kind);

std::string render_svg(const PlotSeries& series, PlotKind kind);
std::string render_csv(const PlotSeries& series, PlotKind kind);

}  // namespace clens
