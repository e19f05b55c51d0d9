// Copyright 2026 The monoloc Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef MONOLOC_DETECT_HPP_
#define MONOLOC_DETECT_HPP_

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "monoloc/common.hpp"
#include "monoloc/geometry.hpp"

namespace monoloc {

struct Detection {
  double xp = 0, yp = 0;
  double depth = 0;
  double confidence = 0;
  int row = 0, col = 0;
};

struct DetectionConfig {
  double threshold = 0.33;
  bool suppress = true;  // keep only strict 3x3 local maxima

  void validate() const {
    if (!(threshold > 0 && threshold < 1)) throw ConfigError("confidence threshold must lie in (0, 1)");
  }
};

/// Default thresholds for synthetic and real-world imagery.
inline constexpr double kSyntheticThreshold = 0.33;
inline constexpr double kRealWorldThreshold = 0.23;

/// True when `(r, c)` beats every 3x3 neighbor. Equal values are broken in
/// row-major order: the earlier cell wins.
inline bool is_local_max(const GridMap& g, int r, int c) {
  const double v = g.conf(r, c);
  for (int dr = -1; dr <= 1; ++dr) {
    for (int dc = -1; dc <= 1; ++dc) {
      if (dr == 0 && dc == 0) continue;
      const int rr = r + dr, cc = c + dc;
      if (rr < 0 || cc < 0 || rr >= g.shape.rows || cc >= g.shape.cols) continue;
      const double n = g.conf(rr, cc);
      const bool earlier = dr < 0 || (dr == 0 && dc < 0);
      if (n > v || (n == v && earlier)) return false;
    }
  }
  return true;
}

/// Cells above threshold become (stride*col, stride*row, depth) detections,
/// sorted by descending confidence (row-major among equals).
inline std::vector<Detection> extract_detections(const GridMap& pred, const DetectionConfig& cfg = {}) {
  cfg.validate();
  std::vector<Detection> out;
  for (int r = 0; r < pred.shape.rows; ++r) {
    for (int c = 0; c < pred.shape.cols; ++c) {
      const double v = pred.conf(r, c);
      if (!(v > cfg.threshold)) continue;
      if (cfg.suppress && !is_local_max(pred, r, c)) continue;
      out.push_back({static_cast<double>(pred.shape.stride * c), static_cast<double>(pred.shape.stride * r),
                     pred.dep(r, c), v, r, c});
    }
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const Detection& a, const Detection& b) { return a.confidence > b.confidence; });
  return out;
}

// ---------------------------------------------------------------------------
// Scoring

inline constexpr double kMatchGatePx = 40.0;

struct EvalMetrics {
  double pixel_p50 = 0, pixel_p80 = 0, pixel_p95 = 0;
  double depth_mean = 0, depth_median = 0, depth_std = 0;
  double depth_abs_median = 0;
  double tp_rate = 0;
  double fp_per_image = 0;
  std::size_t images = 0, truths = 0, matched = 0, false_positives = 0;
  std::vector<double> pixel_errs;  // per matched pair
  std::vector<double> depth_errs;  // signed, predicted - true
  std::vector<std::size_t> pair_image;  // image index of each matched pair
};

/// Linear-interpolation percentile (q in [0, 100]) of unsorted values.
inline double percentile(std::vector<double> v, double q) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const double pos = q / 100.0 * (v.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - lo) * (v[hi] - v[lo]);
}

struct MatchPair {
  std::size_t detection, truth;
  double distance;
};

/// Greedy globally-nearest matching within the gate.
inline std::vector<MatchPair> match_detections(const std::vector<Detection>& dets,
                                               const std::vector<RelativeLabel>& truths,
                                               double gate = kMatchGatePx) {
  std::vector<MatchPair> cand;
  for (std::size_t d = 0; d < dets.size(); ++d)
    for (std::size_t t = 0; t < truths.size(); ++t) {
      const double dist = std::hypot(dets[d].xp - truths[t].xp, dets[d].yp - truths[t].yp);
      if (dist <= gate) cand.push_back({d, t, dist});
    }
  std::stable_sort(cand.begin(), cand.end(),
                   [](const MatchPair& a, const MatchPair& b) { return a.distance < b.distance; });
  std::vector<bool> dused(dets.size()), tused(truths.size());
  std::vector<MatchPair> out;
  for (const auto& m : cand) {
    if (dused[m.detection] || tused[m.truth]) continue;
    dused[m.detection] = tused[m.truth] = true;
    out.push_back(m);
  }
  return out;
}

inline void finalize_metrics(EvalMetrics& m) {
  m.pixel_p50 = percentile(m.pixel_errs, 50);
  m.pixel_p80 = percentile(m.pixel_errs, 80);
  m.pixel_p95 = percentile(m.pixel_errs, 95);
  const std::size_t n = m.depth_errs.size();
  if (n > 0) {
    m.depth_mean = std::accumulate(m.depth_errs.begin(), m.depth_errs.end(), 0.0) / n;
    double ss = 0;
    for (double e : m.depth_errs) ss += (e - m.depth_mean) * (e - m.depth_mean);
    m.depth_std = std::sqrt(ss / n);
    m.depth_median = percentile(m.depth_errs, 50);
    std::vector<double> a(m.depth_errs);
    for (auto& e : a) e = std::abs(e);
    m.depth_abs_median = percentile(a, 50);
  } else {
    m.depth_mean = m.depth_median = m.depth_std = m.depth_abs_median = 0;
  }
  m.tp_rate = m.truths ? static_cast<double>(m.matched) / m.truths : 0.0;
  m.fp_per_image = m.images ? static_cast<double>(m.false_positives) / m.images : 0.0;
}

inline EvalMetrics match_and_score(const std::vector<std::vector<Detection>>& detections,
                                   const std::vector<std::vector<RelativeLabel>>& truths) {
  if (detections.size() != truths.size()) throw Error("match_and_score: image count mismatch");
  EvalMetrics m;
  m.images = detections.size();
  for (std::size_t i = 0; i < detections.size(); ++i) {
    const auto pairs = match_detections(detections[i], truths[i]);
    m.truths += truths[i].size();
    m.matched += pairs.size();
    m.false_positives += detections[i].size() - pairs.size();
    for (const auto& p : pairs) {
      m.pixel_errs.push_back(p.distance);
      m.depth_errs.push_back(detections[i][p.detection].depth - truths[i][p.truth].depth);
      m.pair_image.push_back(i);
    }
  }
  finalize_metrics(m);
  return m;
}

/// Fraction of matched pairs with pixel error <= limit.
inline double pixel_compliance(const EvalMetrics& m, double limit_px) {
  if (m.pixel_errs.empty()) return 0.0;
  const auto ok = std::count_if(m.pixel_errs.begin(), m.pixel_errs.end(), [&](double e) { return e <= limit_px; });
  return static_cast<double>(ok) / m.pixel_errs.size();
}

inline nlohmann::json to_json(const EvalMetrics& m) {
  return {{"pixel_err", {{"p50", m.pixel_p50}, {"p80", m.pixel_p80}, {"p95", m.pixel_p95}}},
          {"depth_err",
           {{"mean", m.depth_mean}, {"median", m.depth_median}, {"std", m.depth_std}, {"abs_median", m.depth_abs_median}}},
          {"tp_rate", m.tp_rate},
          {"fp_per_image", m.fp_per_image},
          {"counts",
           {{"images", m.images}, {"truths", m.truths}, {"matched", m.matched}, {"false_positives", m.false_positives}}},
          {"raw", {{"pixel_errs", m.pixel_errs}, {"depth_errs", m.depth_errs}, {"pair_image", m.pair_image}}}};
}

inline EvalMetrics metrics_from_json(const nlohmann::json& j) {
  EvalMetrics m;
  m.pixel_p50 = j.at("pixel_err").at("p50");
  m.pixel_p80 = j.at("pixel_err").at("p80");
  m.pixel_p95 = j.at("pixel_err").at("p95");
  m.depth_mean = j.at("depth_err").at("mean");
  m.depth_median = j.at("depth_err").at("median");
  m.depth_std = j.at("depth_err").at("std");
  m.depth_abs_median = j.at("depth_err").value("abs_median", 0.0);
  m.tp_rate = j.at("tp_rate");
  m.fp_per_image = j.at("fp_per_image");
  const auto& c = j.at("counts");
  m.images = c.at("images");
  m.truths = c.at("truths");
  m.matched = c.at("matched");
  m.false_positives = c.at("false_positives");
  m.pixel_errs = j.at("raw").at("pixel_errs").get<std::vector<double>>();
  m.depth_errs = j.at("raw").at("depth_errs").get<std::vector<double>>();
  m.pair_image = j.at("raw").value("pair_image", std::vector<std::size_t>{});
  return m;
}

inline void error_report(const EvalMetrics& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << to_json(m).dump(2) << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

inline EvalMetrics read_error_report(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  try {
    return metrics_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": bad metrics file: " + e.what());
  }
}

}  // namespace monoloc

#endif  // MONOLOC_DETECT_HPP_
