// SPDX-License-Identifier: Apache-2.0
#pragma once

// File plumbing: atomic whole-file writes, JSONL helpers, content hashing
// for manifests, and the SVG curve renderer.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dlab/aup.hpp"
#include "dlab/common.hpp"

namespace dlab::io {

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Write-then-rename so readers never observe a partial file.
inline void write_file_atomic(const std::string& path, const std::string& content) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  const fs::path tmp = target.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write file: " + tmp.string());
    out << content;
    if (!out) throw DataError("short write: " + tmp.string());
  }
  fs::rename(tmp, target);
}

inline nlohmann::json read_json(const std::string& path) {
  try {
    return nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError("invalid json in " + path + ": " + e.what());
  }
}

inline std::vector<nlohmann::json> read_jsonl(const std::string& path) {
  std::istringstream in(read_file(path));
  std::vector<nlohmann::json> lines;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      lines.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError(path + " line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return lines;
}

inline std::string file_digest_hex(const std::string& path) {
  const std::string bytes = read_file(path);
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a64(bytes.data(), bytes.size())));
  return buf;
}

// Minimal standalone SVG of an accuracy-parallelism curve, fixed viewport.
inline std::string svg_curve(const std::vector<aup::CurvePoint>& points) {
  const int W = 640, H = 480, ML = 60, MR = 20, MT = 20, MB = 50;
  double rho_max = 1.0;
  for (const auto& p : points) rho_max = std::max(rho_max, p.rho);
  const auto x = [&](double rho) { return ML + (W - ML - MR) * rho / rho_max; };
  const auto y = [&](double acc) { return H - MB - (H - MT - MB) * acc / 100.0; };
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
    << "\" viewBox=\"0 0 " << W << " " << H << "\">\n";
  s << "<rect width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n";
  s << "<line x1=\"" << ML << "\" y1=\"" << (H - MB) << "\" x2=\"" << (W - MR) << "\" y2=\""
    << (H - MB) << "\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << ML << "\" y1=\"" << MT << "\" x2=\"" << ML << "\" y2=\"" << (H - MB)
    << "\" stroke=\"black\"/>\n";
  s << "<text x=\"" << (W / 2) << "\" y=\"" << (H - 12)
    << "\" text-anchor=\"middle\" font-size=\"14\">parallelism (tokens/forward)</text>\n";
  s << "<text x=\"16\" y=\"" << (H / 2)
    << "\" text-anchor=\"middle\" font-size=\"14\" transform=\"rotate(-90 16 " << (H / 2)
    << ")\">accuracy (%)</text>\n";
  if (!points.empty()) {
    s << "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\" points=\"";
    for (const auto& p : points) s << x(p.rho) << "," << y(p.acc) << " ";
    s << "\"/>\n";
    for (const auto& p : points)
      s << "<circle cx=\"" << x(p.rho) << "\" cy=\"" << y(p.acc)
        << "\" r=\"3.5\" fill=\"#1f77b4\"/>\n";
  }
  s << "</svg>\n";
  return s.str();
}

}  // namespace dlab::io
