// SPDX-License-Identifier: Apache-2.0
#pragma once

// Accuracy-under-parallelism scoring over (parallelism, accuracy) curves.
//
// A curve is a set of (rho, acc) pairs, rho in tokens-per-forward, acc in
// percent. The score is the area under the curve where every accuracy above
// the first point is discounted by an exponential penalty on its shortfall
// from the best accuracy, and points that fall more than `margin` percentage
// points below the lowest-parallelism accuracy are dropped entirely. The
// leading rho1*y1 rectangle is deliberately unweighted.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dlab/common.hpp"

namespace dlab::aup {

struct CurvePoint {
  double rho = 0.0;  // tokens per forward, > 0
  double acc = 0.0;  // percent, [0, 100]
};

struct AupConfig {
  double alpha = 3.0;
  std::optional<double> y_max_override;  // task-level best accuracy, percent
  double margin = 5.0;                   // y_min = first acc - margin

  void validate() const {
    if (alpha <= 0) throw ConfigError("aup: alpha must be > 0");
    if (margin < 0) throw ConfigError("aup: margin must be >= 0");
    if (y_max_override && (*y_max_override <= 0 || *y_max_override > 100))
      throw ConfigError("aup: y_max override must lie in (0, 100]");
  }
};

struct AupResult {
  double score = 0.0;
  std::vector<CurvePoint> included;
  std::vector<CurvePoint> excluded;
  double y_max_used = 0.0;
  std::vector<std::string> warnings;
};

// W(y) = min(exp(-alpha * (1 - y / y_max)), 1)
inline double weight(double y, double alpha, double y_max) {
  if (y_max <= 0) throw ConfigError("weight: y_max must be > 0");
  if (alpha <= 0) throw ConfigError("weight: alpha must be > 0");
  return std::min(std::exp(-alpha * (1.0 - y / y_max)), 1.0);
}

// Points must arrive sorted by rho ascending (compute_aup's duty). The
// lowest-rho point sets y_min and is always kept.
inline std::pair<std::vector<CurvePoint>, std::vector<CurvePoint>> filter_curve(
    const std::vector<CurvePoint>& points, double margin) {
  if (points.empty()) throw DataError("aup: empty curve");
  const double y_min = points.front().acc - margin;
  std::vector<CurvePoint> included, excluded;
  for (const auto& p : points)
    (p.acc >= y_min ? included : excluded).push_back(p);
  return {std::move(included), std::move(excluded)};
}

inline AupResult compute_aup(std::vector<CurvePoint> points, const AupConfig& config) {
  config.validate();
  if (points.empty()) throw DataError("aup: empty curve");
  for (const auto& p : points) {
    if (!(p.rho > 0)) throw DataError("aup: rho must be > 0, got " + format_double(p.rho));
    if (!(p.acc >= 0 && p.acc <= 100))
      throw DataError("aup: acc must lie in [0, 100], got " + format_double(p.acc));
  }

  AupResult result;
  std::sort(points.begin(), points.end(), [](const CurvePoint& a, const CurvePoint& b) {
    if (a.rho != b.rho) return a.rho < b.rho;
    return a.acc < b.acc;
  });

  // Collapse duplicate rho to the higher-accuracy point; the loser is
  // reported in `excluded` so included + excluded always covers the input.
  std::vector<CurvePoint> dedup;
  for (const auto& p : points) {
    if (!dedup.empty() && dedup.back().rho == p.rho) {
      result.excluded.push_back(dedup.back().acc <= p.acc ? dedup.back() : p);
      if (p.acc > dedup.back().acc) dedup.back() = p;
      result.warnings.push_back("duplicate rho " + format_double(p.rho) +
                                " collapsed to the higher accuracy");
    } else {
      dedup.push_back(p);
    }
  }

  auto [included, cut] = filter_curve(dedup, config.margin);
  result.included = std::move(included);
  for (const auto& p : cut) result.excluded.push_back(p);

  double y_max = 0.0;
  if (config.y_max_override) {
    y_max = *config.y_max_override;
  } else {
    for (const auto& p : result.included) y_max = std::max(y_max, p.acc);
  }
  if (y_max <= 0) {
    // All-zero accuracies: W is undefined but every term is zero anyway.
    y_max = 100.0;
    result.warnings.push_back("curve has no positive accuracy; y_max defaulted to 100");
  }
  result.y_max_used = y_max;

  const auto& pts = result.included;
  double score = pts[0].rho * pts[0].acc;
  for (std::size_t i = 1; i < pts.size(); ++i) {
    const double a = pts[i - 1].acc * weight(pts[i - 1].acc, config.alpha, y_max);
    const double b = pts[i].acc * weight(pts[i].acc, config.alpha, y_max);
    score += (pts[i].rho - pts[i - 1].rho) * (a + b) / 2.0;
  }
  result.score = score;
  return result;
}

inline std::vector<std::pair<double, double>> alpha_sweep(
    const std::vector<CurvePoint>& points, const std::vector<double>& alphas,
    AupConfig config) {
  if (alphas.empty()) throw ConfigError("alpha_sweep: no alpha values given");
  std::vector<std::pair<double, double>> table;
  for (double alpha : alphas) {
    if (alpha <= 0) throw ConfigError("alpha_sweep: alpha must be > 0");
    config.alpha = alpha;
    table.emplace_back(alpha, compute_aup(points, config).score);
  }
  return table;
}

// CSV with header `rho,acc`, one decimal pair per line. File order preserved.
inline std::vector<CurvePoint> parse_curve(const std::string& text) {
  std::vector<CurvePoint> points;
  std::size_t pos = 0;
  int line_no = 0;
  bool saw_header = false;
  while (pos <= text.size()) {
    std::size_t eol = text.find('\n', pos);
    std::string line = text.substr(pos, eol == std::string::npos ? eol : eol - pos);
    pos = eol == std::string::npos ? text.size() + 1 : eol + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) {
      if (eol == std::string::npos) break;
      continue;
    }
    if (!saw_header) {
      if (line != "rho,acc")
        throw DataError("curve csv: expected header 'rho,acc' at line 1");
      saw_header = true;
      continue;
    }
    const auto comma = line.find(',');
    if (comma == std::string::npos)
      throw DataError("curve csv: missing comma at line " + std::to_string(line_no));
    const auto parse_field = [&](const std::string& s) {
      std::size_t used = 0;
      double v = 0;
      try {
        v = std::stod(s, &used);
      } catch (const std::exception&) {
        throw DataError("curve csv: non-numeric field at line " + std::to_string(line_no));
      }
      if (used != s.size())
        throw DataError("curve csv: non-numeric field at line " + std::to_string(line_no));
      return v;
    };
    CurvePoint p{parse_field(line.substr(0, comma)), parse_field(line.substr(comma + 1))};
    if (!(p.rho > 0) || !(p.acc >= 0 && p.acc <= 100))
      throw DataError("curve csv: value out of range at line " + std::to_string(line_no));
    points.push_back(p);
  }
  if (!saw_header) throw DataError("curve csv: empty input");
  return points;
}

inline std::string to_csv(const std::vector<CurvePoint>& points) {
  std::string out = "rho,acc\n";
  for (const auto& p : points)
    out += format_double(p.rho) + "," + format_double(p.acc) + "\n";
  return out;
}

inline nlohmann::ordered_json to_json(const AupResult& r, double alpha) {
  nlohmann::ordered_json j;
  j["score"] = r.score;
  j["alpha"] = alpha;
  j["y_max_used"] = r.y_max_used;
  auto pts = [](const std::vector<CurvePoint>& v) {
    nlohmann::ordered_json a = nlohmann::ordered_json::array();
    for (const auto& p : v) a.push_back({{"rho", p.rho}, {"acc", p.acc}});
    return a;
  };
  j["points_included"] = pts(r.included);
  j["points_excluded"] = pts(r.excluded);
  j["warnings"] = r.warnings;
  return j;
}

}  // namespace dlab::aup
