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

// Frame transforms between the observer's horizontal frame, the camera
// frame and the image, plus construction of the 28x40 grid labels.
//
// Horizontal frame: x forward, y left, z up. Camera frame: x along the
// optical axis (depth). Pixels have a top-left origin.

#ifndef MONOLOC_GEOMETRY_HPP_
#define MONOLOC_GEOMETRY_HPP_

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "monoloc/common.hpp"

namespace monoloc {

inline constexpr int kImageWidth = 320;
inline constexpr int kImageHeight = 224;

struct HorizontalCoord {
  double xh = 0, yh = 0, zh = 0;
  Eigen::Vector3d vec() const { return {xh, yh, zh}; }
};

struct CameraCoord {
  double xc = 0, yc = 0, zc = 0;
  Eigen::Vector3d vec() const { return {xc, yc, zc}; }
};

struct PixelPoint {
  double xp = 0, yp = 0;
};

struct Attitude {
  double roll = 0;   // about the camera x axis
  double pitch = 0;  // about the camera y axis
};

struct CameraIntrinsics {
  double fx = 183.73;
  double fy = 184.12;
  double cx = 166.90;
  double cy = 77.51;

  Eigen::Matrix3d matrix() const {
    Eigen::Matrix3d m;
    m << fx, 0, cx, 0, fy, cy, 0, 0, 1;
    return m;
  }
};

/// Fixed permutation taking the horizontal-style axes (x forward, y left,
/// z up) onto image-style axes (right, down, forward).
inline Eigen::Matrix3d camera_axis_permutation() {
  Eigen::Matrix3d r;
  r << 0, -1, 0, 0, 0, -1, 1, 0, 0;
  return r;
}

/// Intrinsics times the axis permutation; maps camera coordinates to
/// homogeneous pixels scaled by depth.
inline Eigen::Matrix3d pixel_from_camera(const CameraIntrinsics& k) {
  return k.matrix() * camera_axis_permutation();
}

/// Roll-then-pitch rotation from the horizontal frame into the camera frame.
inline Eigen::Matrix3d rotation_from_attitude(const Attitude& att) {
  const double cr = std::cos(att.roll), sr = std::sin(att.roll);
  const double cp = std::cos(att.pitch), sp = std::sin(att.pitch);
  Eigen::Matrix3d r;
  r << cp, 0, sp,
       sr * sp, cr, -cp * sr,
       -cr * sp, sr, cp * cr;
  return r;
}

inline CameraCoord horizontal_to_camera(const HorizontalCoord& p, const Attitude& att) {
  const Eigen::Vector3d c = rotation_from_attitude(att) * p.vec();
  return {c.x(), c.y(), c.z()};
}

inline HorizontalCoord camera_to_horizontal(const CameraCoord& p, const Attitude& att) {
  const Eigen::Vector3d h = rotation_from_attitude(att).transpose() * p.vec();
  return {h.x(), h.y(), h.z()};
}

inline bool in_image(const PixelPoint& px) {
  return px.xp >= 0 && px.xp < kImageWidth && px.yp >= 0 && px.yp < kImageHeight;
}

/// Pixel position of the peer center plus its depth along the optical axis.
struct RelativeLabel {
  double xp = 0, yp = 0;
  double depth = 0;
  PixelPoint pixel() const { return {xp, yp}; }
};

/// Pinhole projection without the image-bounds test. Needs xc > 0.
inline PixelPoint project(const CameraCoord& p, const CameraIntrinsics& k) {
  const Eigen::Vector3d s = pixel_from_camera(k) * p.vec();
  return {s.x() / p.xc, s.y() / p.xc};
}

/// Inverse of project() for a given depth.
inline CameraCoord back_project(const PixelPoint& px, double depth, const CameraIntrinsics& k) {
  return {depth, -(px.xp - k.cx) * depth / k.fx, -(px.yp - k.cy) * depth / k.fy};
}

/// nullopt when the point is behind the camera or lands outside the image.
inline std::optional<RelativeLabel> camera_to_pixel(const CameraCoord& p,
                                                    const CameraIntrinsics& k = {}) {
  if (!(p.xc > 0)) return std::nullopt;
  const PixelPoint px = project(p, k);
  if (!in_image(px)) return std::nullopt;
  return RelativeLabel{px.xp, px.yp, p.xc};
}

inline std::optional<RelativeLabel> label_from_horizontal(const HorizontalCoord& p,
                                                          const Attitude& att,
                                                          const CameraIntrinsics& k = {}) {
  return camera_to_pixel(horizontal_to_camera(p, att), k);
}

// ---------------------------------------------------------------------------
// Grid labels

struct GridShape {
  int rows = kImageHeight / 8;
  int cols = kImageWidth / 8;
  int stride = 8;
  bool operator==(const GridShape&) const = default;
};

struct GridCell {
  int row = 0, col = 0;
  bool operator==(const GridCell&) const = default;
};

/// Cell holding a pixel; the right and bottom edges clamp into the last cell.
inline GridCell cell_of(const PixelPoint& px, const GridShape& shape = {}) {
  int col = static_cast<int>(std::floor(px.xp / shape.stride));
  int row = static_cast<int>(std::floor(px.yp / shape.stride));
  col = std::clamp(col, 0, shape.cols - 1);
  row = std::clamp(row, 0, shape.rows - 1);
  return {row, col};
}

/// Confidence and depth planes, row-major, plus K class-probability planes.
struct GridMap {
  GridShape shape;
  int num_classes = 0;
  std::vector<double> confidence;
  std::vector<double> depth;
  std::vector<double> class_prob;  // [k][row][col]

  GridMap() : GridMap(GridShape{}) {}
  explicit GridMap(GridShape s, int classes = 0)
      : shape(s),
        num_classes(classes),
        confidence(cells(), 0.0),
        depth(cells(), 0.0),
        class_prob(cells() * classes, 0.0) {}

  std::size_t cells() const { return static_cast<std::size_t>(shape.rows) * shape.cols; }
  std::size_t idx(int row, int col) const {
    return static_cast<std::size_t>(row) * shape.cols + col;
  }
  double& conf(int row, int col) { return confidence[idx(row, col)]; }
  double conf(int row, int col) const { return confidence[idx(row, col)]; }
  double& dep(int row, int col) { return depth[idx(row, col)]; }
  double dep(int row, int col) const { return depth[idx(row, col)]; }
  double& prob(int k, int row, int col) { return class_prob[k * cells() + idx(row, col)]; }
  double prob(int k, int row, int col) const { return class_prob[k * cells() + idx(row, col)]; }
};

class CellCollisionError : public Error {
 public:
  using Error::Error;
};

/// Label-form grid: confidence 1 and the label depth in each robot's cell.
/// With classes > 0 every robot is one-hot class 0. Throws
/// CellCollisionError when two robots share a cell.
inline GridMap grid_labels(std::span<const RelativeLabel> labels, const GridShape& shape = {},
                           int classes = 0) {
  GridMap g(shape, classes);
  for (const auto& l : labels) {
    if (!in_image(l.pixel()) || !(l.depth > 0))
      throw Error("grid_labels: label outside the image or with non-positive depth");
    const GridCell c = cell_of(l.pixel(), shape);
    if (g.conf(c.row, c.col) != 0.0)
      throw CellCollisionError("two robots fall in grid cell (" + std::to_string(c.row) + "," +
                               std::to_string(c.col) + ")");
    g.conf(c.row, c.col) = 1.0;
    g.dep(c.row, c.col) = l.depth;
    if (classes > 0) g.prob(0, c.row, c.col) = 1.0;
  }
  return g;
}

}  // namespace monoloc

#endif  // MONOLOC_GEOMETRY_HPP_
