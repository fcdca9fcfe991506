#include "clens/plot.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace clens {

using nlohmann::json;

PlotKind parse_plot_kind(const std::string& name) {
  if (name == "position-sweep" || name == "sweep") return PlotKind::position_sweep;
  if (name == "strength-curves" || name == "strength") return PlotKind::strength_curves;
  if (name == "routing-bars" || name == "routing") return PlotKind::routing_bars;
  throw std::runtime_error("unknown plot kind: " + name);
}

PlotSeries series_from_payload(const json& payload, PlotKind kind) {
  PlotSeries s;
  switch (kind) {
    case PlotKind::position_sweep: {
      if (!payload.contains("p_by_position"))
        throw std::runtime_error("plot: payload has no p_by_position series (kind mismatch?)");
      s.title = "Position sweep";
      s.x_label = "token position";
      s.y_label = "P(target)";
      s.log_y = true;
      std::vector<double> p = payload.at("p_by_position").get<std::vector<double>>();
      std::vector<double> x(p.size());
      for (size_t i = 0; i < p.size(); ++i) x[i] = double(i);
      s.series_names = {"P(target)"};
      s.x = {x};
      s.y = {p};
      if (payload.contains("baseline_p")) {
        double b = payload.at("baseline_p").get<double>();
        s.series_names.push_back("baseline");
        s.x.push_back(x);
        s.y.push_back(std::vector<double>(p.size(), b));
      }
      break;
    }
    case PlotKind::strength_curves: {
      if (!payload.contains("points"))
        throw std::runtime_error("plot: payload has no strength points (kind mismatch?)");
      s.title = "Strength sweep";
      s.x_label = "strength";
      s.y_label = "value";
      std::vector<double> strengths, p_target, top_delta, total;
      for (const auto& point : payload.at("points")) {
        strengths.push_back(point.at("strength").get<double>());
        if (point.contains("p_target")) p_target.push_back(point.at("p_target").get<double>());
        if (point.contains("top_head_delta"))
          top_delta.push_back(point.at("top_head_delta").get<double>());
        if (point.contains("total_shift")) total.push_back(point.at("total_shift").get<double>());
      }
      if (!p_target.empty()) {
        s.series_names.push_back("p_target");
        s.x.push_back(strengths);
        s.y.push_back(p_target);
      }
      if (!top_delta.empty()) {
        s.series_names.push_back("top_head_delta");
        s.x.push_back(strengths);
        s.y.push_back(top_delta);
      }
      if (!total.empty()) {
        s.series_names.push_back("total_shift");
        s.x.push_back(strengths);
        s.y.push_back(total);
      }
      if (s.series_names.empty()) throw std::runtime_error("plot: no strength series in payload");
      break;
    }
    case PlotKind::routing_bars: {
      if (!payload.contains("top10"))
        throw std::runtime_error("plot: payload has no routing top10 (kind mismatch?)");
      s.title = "Top routing heads";
      s.x_label = "head";
      s.y_label = "attention delta";
      for (const auto& head : payload.at("top10")) {
        s.bar_labels.push_back("L" + std::to_string(head.at("layer").get<int>()) + ":H" +
                               std::to_string(head.at("head").get<int>()));
        s.bar_values.push_back(head.at("delta").get<double>());
      }
      break;
    }
  }
  return s;
}

namespace {

constexpr double kW = 640, kH = 400, kMargin = 56;

std::string fmt(double v) {
  std::ostringstream ss;
  ss << v;
  return ss.str();
}

double map_x(double v, double lo, double hi) {
  if (hi <= lo) hi = lo + 1;
  return kMargin + (v - lo) / (hi - lo) * (kW - 2 * kMargin);
}

double map_y(double v, double lo, double hi) {
  if (hi <= lo) hi = lo + 1;
  return kH - kMargin - (v - lo) / (hi - lo) * (kH - 2 * kMargin);
}

const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"};

}  // namespace

std::string render_svg(const PlotSeries& s, PlotKind kind) {
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH
      << "\" viewBox=\"0 0 " << kW << " " << kH << "\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<text x=\"" << kW / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">"
      << s.title << "</text>\n";

  if (kind == PlotKind::routing_bars) {
    double max_abs = 1e-12;
    for (double v : s.bar_values) max_abs = std::max(max_abs, std::abs(v));
    double zero_y = map_y(0.0, -max_abs, max_abs);
    svg << "<line x1=\"" << kMargin << "\" y1=\"" << zero_y << "\" x2=\"" << kW - kMargin
        << "\" y2=\"" << zero_y << "\" stroke=\"#888\"/>\n";
    double n = double(std::max<size_t>(1, s.bar_values.size()));
    double band = (kW - 2 * kMargin) / n;
    for (size_t i = 0; i < s.bar_values.size(); ++i) {
      double v = s.bar_values[i];
      double y = map_y(std::max(v, 0.0), -max_abs, max_abs);
      double h = std::abs(map_y(v, -max_abs, max_abs) - zero_y);
      double x = kMargin + double(i) * band + band * 0.15;
      const char* fill = v >= 0 ? "#2ca02c" : "#d62728";
      svg << "<rect x=\"" << x << "\" y=\"" << std::min(y, zero_y) << "\" width=\"" << band * 0.7
          << "\" height=\"" << h << "\" fill=\"" << fill << "\"/>\n";
      svg << "<text x=\"" << x + band * 0.35 << "\" y=\"" << kH - kMargin + 16
          << "\" text-anchor=\"middle\" font-size=\"10\">" << s.bar_labels[i] << "</text>\n";
    }
    svg << "</svg>\n";
    return svg.str();
  }

  double x_lo = 1e300, x_hi = -1e300, y_lo = 1e300, y_hi = -1e300;
  auto y_value = [&](double v) {
    if (!s.log_y) return v;
    return std::log10(std::max(v, 1e-30));
  };
  for (size_t k = 0; k < s.x.size(); ++k) {
    for (size_t i = 0; i < s.x[k].size(); ++i) {
      x_lo = std::min(x_lo, s.x[k][i]);
      x_hi = std::max(x_hi, s.x[k][i]);
      y_lo = std::min(y_lo, y_value(s.y[k][i]));
      y_hi = std::max(y_hi, y_value(s.y[k][i]));
    }
  }
  // axes
  svg << "<line x1=\"" << kMargin << "\" y1=\"" << kH - kMargin << "\" x2=\"" << kW - kMargin
      << "\" y2=\"" << kH - kMargin << "\" stroke=\"black\"/>\n";
  svg << "<line x1=\"" << kMargin << "\" y1=\"" << kMargin << "\" x2=\"" << kMargin << "\" y2=\""
      << kH - kMargin << "\" stroke=\"black\"/>\n";
  svg << "<text x=\"" << kW / 2 << "\" y=\"" << kH - 12 << "\" text-anchor=\"middle\" font-size=\"12\">"
      << s.x_label << "</text>\n";
  svg << "<text x=\"16\" y=\"" << kH / 2 << "\" font-size=\"12\" transform=\"rotate(-90 16 "
      << kH / 2 << ")\" text-anchor=\"middle\">" << (s.log_y ? "log10 " : "") << s.y_label
      << "</text>\n";

  for (size_t k = 0; k < s.x.size(); ++k) {
    svg << "<polyline fill=\"none\" stroke=\"" << kColors[k % 5] << "\" stroke-width=\"1.5\" points=\"";
    for (size_t i = 0; i < s.x[k].size(); ++i) {
      svg << map_x(s.x[k][i], x_lo, x_hi) << "," << map_y(y_value(s.y[k][i]), y_lo, y_hi) << " ";
    }
    svg << "\"/>\n";
    svg << "<text x=\"" << kW - kMargin + 4 << "\" y=\"" << kMargin + 16.0 * double(k)
        << "\" font-size=\"10\" fill=\"" << kColors[k % 5] << "\">" << s.series_names[k]
        << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

std::string render_csv(const PlotSeries& s, PlotKind kind) {
  std::ostringstream csv;
  if (kind == PlotKind::routing_bars) {
    csv << "head,delta\n";
    for (size_t i = 0; i < s.bar_values.size(); ++i)
      csv << s.bar_labels[i] << "," << fmt(s.bar_values[i]) << "\n";
    return csv.str();
  }
  csv << s.x_label;
  for (const std::string& name : s.series_names) csv << "," << name;
  csv << "\n";
  size_t rows = s.x.empty() ? 0 : s.x[0].size();
  for (size_t i = 0; i < rows; ++i) {
    csv << fmt(s.x[0][i]);
    for (size_t k = 0; k < s.y.size(); ++k) csv << "," << fmt(s.y[k][i]);
    csv << "\n";
  }
  return csv.str();
}

}  // namespace clens
