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

// Synthetic multi-robot scenes: drone billboards composited onto
// background images at sampled poses, written as an image directory
// plus a labels.jsonl file.

#ifndef MONOLOC_DATAGEN_HPP_
#define MONOLOC_DATAGEN_HPP_

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "monoloc/common.hpp"
#include "monoloc/geometry.hpp"
#include "monoloc/image.hpp"

namespace monoloc {

namespace fs = std::filesystem;

/// Straight-alpha RGBA raster in [0, 1], square texel grid. The sprite's
/// full width spans physical_width meters; its center is the robot center.
struct DroneSprite {
  int width = 0;
  int height = 0;
  std::vector<float> rgba;
  double physical_width = 0.125;

  const float* texel(int x, int y) const {
    return rgba.data() + (static_cast<std::size_t>(y) * width + x) * 4;
  }
};

/// Side view of a small quadrotor: two propeller discs, motors, arms, a
/// central body with battery and an underslung camera deck.
inline DroneSprite default_drone_sprite(int size = 64) {
  DroneSprite s;
  s.width = s.height = size;
  s.rgba.assign(static_cast<std::size_t>(size) * size * 4, 0.0f);
  const double u = size / 64.0;  // design units are for a 64 px sprite
  struct Part {
    enum Kind { Ellipse, Box } kind;
    double cx, cy, rx, ry;  // center and half extents, design units
    float r, g, b, a;
  };
  const Part parts[] = {
      // arms
      {Part::Box, 0, 1.5, 22, 1.5, 0.15f, 0.15f, 0.15f, 1.0f},
      // motors
      {Part::Box, -22, 0, 2.5, 4.5, 0.08f, 0.08f, 0.08f, 1.0f},
      {Part::Box, 22, 0, 2.5, 4.5, 0.08f, 0.08f, 0.08f, 1.0f},
      // propeller blur
      {Part::Ellipse, -22, -5.5, 10, 2.2, 0.85f, 0.85f, 0.82f, 0.75f},
      {Part::Ellipse, 22, -5.5, 10, 2.2, 0.85f, 0.85f, 0.82f, 0.75f},
      // body and battery
      {Part::Box, 0, 2, 10, 3.5, 0.05f, 0.25f, 0.1f, 1.0f},
      {Part::Box, 0, -2.5, 7, 2, 0.75f, 0.75f, 0.78f, 1.0f},
      // camera deck
      {Part::Box, 0, 8, 7, 3, 0.1f, 0.1f, 0.35f, 1.0f},
      {Part::Ellipse, 0, 8.5, 1.8, 1.8, 0.9f, 0.9f, 0.95f, 1.0f},
      // LEDs
      {Part::Ellipse, -9, 3, 1.5, 1.5, 0.95f, 0.1f, 0.1f, 1.0f},
      {Part::Ellipse, 9, 3, 1.5, 1.5, 0.1f, 0.3f, 0.95f, 1.0f},
  };
  constexpr int kSub = 4;
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      float acc[4] = {0, 0, 0, 0};  // premultiplied
      for (int j = 0; j < kSub; ++j) {
        for (int i = 0; i < kSub; ++i) {
          const double px = (x + (i + 0.5) / kSub) / u - 32.0;
          const double py = (y + (j + 0.5) / kSub) / u - 32.0;
          float c[4] = {0, 0, 0, 0};
          for (const auto& p : parts) {
            const double dx = (px - p.cx) / p.rx, dy = (py - p.cy) / p.ry;
            const bool inside = p.kind == Part::Ellipse ? dx * dx + dy * dy <= 1.0
                                                        : std::abs(dx) <= 1.0 && std::abs(dy) <= 1.0;
            if (!inside) continue;
            // "over" compositing in premultiplied form
            const float k = 1.0f - p.a;
            c[0] = p.r * p.a + c[0] * k;
            c[1] = p.g * p.a + c[1] * k;
            c[2] = p.b * p.a + c[2] * k;
            c[3] = p.a + c[3] * k;
          }
          for (int q = 0; q < 4; ++q) acc[q] += c[q];
        }
      }
      float* t = s.rgba.data() + (static_cast<std::size_t>(y) * size + x) * 4;
      const float n = kSub * kSub;
      const float a = acc[3] / n;
      t[3] = a;
      for (int q = 0; q < 3; ++q) t[q] = a > 0 ? acc[q] / n / a : 0.0f;
    }
  }
  return s;
}

inline DroneSprite load_sprite(const fs::path& path, double physical_width) {
  const Image img = read_png(path, /*keep_alpha=*/true);
  DroneSprite s;
  s.width = img.width;
  s.height = img.height;
  s.physical_width = physical_width;
  s.rgba.resize(img.pixels.size());
  for (std::size_t i = 0; i < img.pixels.size(); ++i) s.rgba[i] = img.pixels[i] / 255.0f;
  if (physical_width <= 0) throw ConfigError("sprite physical width must be positive");
  return s;
}

// ---------------------------------------------------------------------------
// Scene sampling

struct SceneConfig {
  double depth_min = 0.5;
  double depth_max = 3.5;
  /// Fraction of the admissible pixel range used around the principal
  /// point; 0 puts every robot on the optical axis.
  double lateral_fraction = 1.0;
  double vertical_fraction = 1.0;
  double roll_max = 0.35;
  double pitch_max = 0.35;
  int min_robots = 1;
  int max_robots = 3;
  double rotation_max = 0.35;
  double brightness_min = 0.7;
  double brightness_max = 1.3;
  double physical_width = 0.125;
  CameraIntrinsics intrinsics;

  void validate() const {
    if (!(depth_min > 0) || depth_max < depth_min)
      throw ConfigError("scene depth range must satisfy 0 < min <= max");
    if (min_robots < 0 || max_robots < min_robots) throw ConfigError("bad robot count range");
    if (lateral_fraction < 0 || lateral_fraction > 1 || vertical_fraction < 0 || vertical_fraction > 1)
      throw ConfigError("lateral/vertical fractions must lie in [0, 1]");
    if (roll_max < 0 || roll_max >= M_PI / 2 || pitch_max < 0 || pitch_max >= M_PI / 2)
      throw ConfigError("attitude bounds must lie in [0, pi/2)");
    if (brightness_min <= 0 || brightness_max < brightness_min)
      throw ConfigError("bad brightness range");
    if (!(physical_width > 0)) throw ConfigError("physical width must be positive");
  }
};

struct RobotPlacement {
  HorizontalCoord position;
  double rotation = 0;    // in-plane sprite rotation, radians
  double brightness = 1;  // RGB gain
};

struct SceneSpec {
  std::size_t background = 0;
  std::vector<RobotPlacement> robots;
  Attitude attitude;
};

class SamplingExhaustedError : public Error {
 public:
  using Error::Error;
};

/// Width in pixels of a sprite at the given depth.
inline double sprite_width_px(const SceneConfig& cfg, double depth) {
  return cfg.intrinsics.fx * cfg.physical_width / depth;
}

/// Rejection-samples a scene whose robots all project into the image,
/// sprite fully in view, with no two robots in the same grid cell.
inline SceneSpec sample_scene(const SceneConfig& cfg, std::size_t num_backgrounds, Rng& rng) {
  cfg.validate();
  constexpr int kMaxRejections = 1000;
  const auto& k = cfg.intrinsics;
  for (int attempt = 0; attempt <= kMaxRejections; ++attempt) {
    SceneSpec scene;
    scene.background = num_backgrounds > 0 ? rng.below(num_backgrounds) : 0;
    scene.attitude = {rng.uniform(-cfg.roll_max, cfg.roll_max),
                      rng.uniform(-cfg.pitch_max, cfg.pitch_max)};
    const int n = cfg.min_robots + static_cast<int>(rng.below(cfg.max_robots - cfg.min_robots + 1));
    bool ok = true;
    std::vector<GridCell> used;
    for (int r = 0; r < n && ok; ++r) {
      const double depth = rng.uniform(cfg.depth_min, cfg.depth_max);
      const double half = sprite_width_px(cfg, depth) / 2;
      const double ux = rng.uniform(half, kImageWidth - half);
      const double uy = rng.uniform(half, kImageHeight - half);
      const PixelPoint px{k.cx + cfg.lateral_fraction * (ux - k.cx),
                          k.cy + cfg.vertical_fraction * (uy - k.cy)};
      RobotPlacement rp;
      rp.position = camera_to_horizontal(back_project(px, depth, k), scene.attitude);
      rp.rotation = rng.uniform(-cfg.rotation_max, cfg.rotation_max);
      rp.brightness = rng.uniform(cfg.brightness_min, cfg.brightness_max);
      const auto label = label_from_horizontal(rp.position, scene.attitude, k);
      if (half * 2 > std::min(kImageWidth, kImageHeight) || !label) {
        ok = false;
        break;
      }
      const GridCell cell = cell_of(label->pixel());
      if (std::find(used.begin(), used.end(), cell) != used.end()) ok = false;
      used.push_back(cell);
      scene.robots.push_back(rp);
    }
    if (ok) return scene;
  }
  throw SamplingExhaustedError("scene sampling exhausted after 1000 rejections; config ranges infeasible");
}

// ---------------------------------------------------------------------------
// Compositing

struct PixelBox {
  int x0 = 0, y0 = 0, x1 = -1, y1 = -1;  // inclusive; empty when x1 < x0
  bool contains(const PixelPoint& p) const {
    return p.xp >= x0 && p.xp < x1 + 1 && p.yp >= y0 && p.yp < y1 + 1;
  }
};

struct CompositeResult {
  Image image;
  std::vector<RelativeLabel> labels;  // scene order
  std::vector<PixelBox> boxes;        // drawn extent per robot, scene order
};

namespace detail {

inline void sample_sprite(const DroneSprite& s, double u, double v, float out[4]) {
  // bilinear on straight alpha, with premultiplied colors; outside is transparent
  const double fx = u - 0.5, fy = v - 0.5;
  const int ix = static_cast<int>(std::floor(fx)), iy = static_cast<int>(std::floor(fy));
  const double ax = fx - ix, ay = fy - iy;
  for (int q = 0; q < 4; ++q) out[q] = 0;
  const double wts[4] = {(1 - ax) * (1 - ay), ax * (1 - ay), (1 - ax) * ay, ax * ay};
  const int xs[4] = {ix, ix + 1, ix, ix + 1}, ys[4] = {iy, iy, iy + 1, iy + 1};
  for (int t = 0; t < 4; ++t) {
    if (xs[t] < 0 || ys[t] < 0 || xs[t] >= s.width || ys[t] >= s.height) continue;
    const float* p = s.texel(xs[t], ys[t]);
    const float w = static_cast<float>(wts[t]) * p[3];
    out[0] += w * p[0];
    out[1] += w * p[1];
    out[2] += w * p[2];
    out[3] += w;
  }
}

}  // namespace detail

/// Draws each robot centered at its projection, scaled to fx*width/depth
/// pixels, farther robots first. The background must be 320x224 RGB.
inline CompositeResult composite(const Image& background, const DroneSprite& sprite,
                                 const SceneSpec& scene, const CameraIntrinsics& k = {}) {
  if (background.width != kImageWidth || background.height != kImageHeight || background.channels != 3)
    throw ShapeError("composite: background must be 320x224 RGB");
  CompositeResult res;
  res.image = background;
  const std::size_t n = scene.robots.size();
  res.labels.resize(n);
  res.boxes.resize(n);
  if (n == 0) return res;

  for (std::size_t i = 0; i < n; ++i) {
    auto l = label_from_horizontal(scene.robots[i].position, scene.attitude, k);
    if (!l) throw Error("composite: robot " + std::to_string(i) + " is out of view");
    res.labels[i] = *l;
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return res.labels[a].depth > res.labels[b].depth;
  });

  std::vector<float> canvas(res.image.pixels.begin(), res.image.pixels.end());
  for (std::size_t i : order) {
    const auto& rp = scene.robots[i];
    const auto& l = res.labels[i];
    const double width_px = k.fx * sprite.physical_width / l.depth;
    const double texel_per_px = sprite.width / width_px;
    const double ca = std::cos(rp.rotation), sa = std::sin(rp.rotation);
    const double radius = 0.5 * width_px * std::sqrt(1.0 + double(sprite.height * sprite.height) /
                                                               (sprite.width * sprite.width));
    const int sub = std::clamp(static_cast<int>(std::ceil(texel_per_px)), 2, 16);
    const int x0 = std::max(0, static_cast<int>(std::floor(l.xp - radius)));
    const int x1 = std::min(kImageWidth - 1, static_cast<int>(std::ceil(l.xp + radius)));
    const int y0 = std::max(0, static_cast<int>(std::floor(l.yp - radius)));
    const int y1 = std::min(kImageHeight - 1, static_cast<int>(std::ceil(l.yp + radius)));
    PixelBox box;
    box.x0 = kImageWidth;
    box.y0 = kImageHeight;
    const float gain = static_cast<float>(rp.brightness);
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        float acc[4] = {0, 0, 0, 0};
        for (int j = 0; j < sub; ++j) {
          for (int i2 = 0; i2 < sub; ++i2) {
            const double dx = x + (i2 + 0.5) / sub - l.xp;
            const double dy = y + (j + 0.5) / sub - l.yp;
            // rotate by -angle into sprite axes
            const double rx = ca * dx + sa * dy, ry = -sa * dx + ca * dy;
            float t[4];
            detail::sample_sprite(sprite, rx * texel_per_px + sprite.width / 2.0,
                                  ry * texel_per_px + sprite.height / 2.0, t);
            for (int q = 0; q < 4; ++q) acc[q] += t[q];
          }
        }
        const float inv = 1.0f / static_cast<float>(sub * sub);
        const float a = acc[3] * inv;
        if (a <= 0) continue;
        float* px = canvas.data() + (static_cast<std::size_t>(y) * kImageWidth + x) * 3;
        for (int q = 0; q < 3; ++q)
          px[q] = std::min(255.0f, acc[q] * inv * gain * 255.0f) + px[q] * (1 - a);
        box.x0 = std::min(box.x0, x);
        box.y0 = std::min(box.y0, y);
        box.x1 = std::max(box.x1, x);
        box.y1 = std::max(box.y1, y);
      }
    }
    res.boxes[i] = box;
  }
  for (std::size_t i = 0; i < canvas.size(); ++i)
    res.image.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(canvas[i], 0.0f, 255.0f)));
  return res;
}

// ---------------------------------------------------------------------------
// Procedural backgrounds, for runs without a user-supplied image set.

inline Image procedural_background(std::uint64_t seed, int width = kImageWidth,
                                   int height = kImageHeight) {
  Rng rng(seed);
  Image img(width, height, 3);
  std::vector<float> buf(static_cast<std::size_t>(width) * height * 3);
  float top[3], bottom[3];
  for (int c = 0; c < 3; ++c) {
    top[c] = static_cast<float>(rng.uniform(0, 255));
    bottom[c] = static_cast<float>(rng.uniform(0, 255));
  }
  for (int y = 0; y < height; ++y) {
    const float t = static_cast<float>(y) / (height - 1);
    for (int x = 0; x < width; ++x)
      for (int c = 0; c < 3; ++c) buf[(y * width + x) * 3 + c] = top[c] * (1 - t) + bottom[c] * t;
  }
  const int shapes = 15 + static_cast<int>(rng.below(50));
  for (int s = 0; s < shapes; ++s) {
    const int kind = static_cast<int>(rng.below(3));
    const double cx = rng.uniform(0, width), cy = rng.uniform(0, height);
    const double rx = rng.uniform(3, width / 3.0), ry = rng.uniform(3, height / 3.0);
    const double angle = rng.uniform(0, M_PI);
    float col[3];
    for (float& c : col) c = static_cast<float>(rng.uniform(0, 255));
    const float alpha = static_cast<float>(rng.uniform(0.3, 1.0));
    const double ca = std::cos(angle), sa = std::sin(angle);
    const double thick = rng.uniform(1, 4);
    for (int y = 0; y < height; ++y) {
      for (int x = 0; x < width; ++x) {
        const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
        const double u = (ca * dx + sa * dy) / rx, v = (-sa * dx + ca * dy) / ry;
        bool inside = false;
        if (kind == 0) inside = u * u + v * v <= 1;
        else if (kind == 1) inside = std::abs(u) <= 1 && std::abs(v) <= 1;
        else inside = std::abs(u) <= 1 && std::abs(-sa * dx + ca * dy) <= thick;
        if (!inside) continue;
        float* p = &buf[(y * width + x) * 3];
        for (int c = 0; c < 3; ++c) p[c] = col[c] * alpha + p[c] * (1 - alpha);
      }
    }
  }
  const double noise = rng.uniform(2, 12);
  for (std::size_t i = 0; i < buf.size(); ++i) {
    const double v = buf[i] + noise * rng.normal();
    img.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
  }
  return img;
}

/// Writes `count` procedural backgrounds as bg_%05d.png.
inline void write_procedural_backgrounds(const fs::path& dir, std::size_t count, std::uint64_t seed) {
  fs::create_directories(dir);
  for (std::size_t i = 0; i < count; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "bg_%05zu.png", i);
    write_png(procedural_background(mix_seed(seed, i)), dir / name);
  }
}

// ---------------------------------------------------------------------------
// Dataset records (labels.jsonl)

struct DatasetRecord {
  std::string image;  // relative to the dataset directory
  Attitude attitude;
  std::vector<HorizontalCoord> robots;
  bool operator==(const DatasetRecord& o) const {
    if (image != o.image || attitude.roll != o.attitude.roll || attitude.pitch != o.attitude.pitch ||
        robots.size() != o.robots.size())
      return false;
    for (std::size_t i = 0; i < robots.size(); ++i)
      if (robots[i].xh != o.robots[i].xh || robots[i].yh != o.robots[i].yh || robots[i].zh != o.robots[i].zh)
        return false;
    return true;
  }
};

inline nlohmann::json to_json(const DatasetRecord& r) {
  nlohmann::json robots = nlohmann::json::array();
  for (const auto& p : r.robots) robots.push_back({{"xh", p.xh}, {"yh", p.yh}, {"zh", p.zh}});
  return {{"image", r.image}, {"roll", r.attitude.roll}, {"pitch", r.attitude.pitch}, {"robots", robots}};
}

inline DatasetRecord record_from_json(const nlohmann::json& j) {
  DatasetRecord r;
  r.image = j.at("image").get<std::string>();
  r.attitude = {j.at("roll").get<double>(), j.at("pitch").get<double>()};
  for (const auto& p : j.at("robots"))
    r.robots.push_back({p.at("xh").get<double>(), p.at("yh").get<double>(), p.at("zh").get<double>()});
  if (!std::isfinite(r.attitude.roll) || !std::isfinite(r.attitude.pitch))
    throw FormatError("non-finite attitude");
  return r;
}

inline void write_labels_jsonl(const std::vector<DatasetRecord>& records, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& r : records) out << to_json(r).dump() << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

/// Parse errors name the 1-based line number.
inline std::vector<DatasetRecord> read_labels_jsonl(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::vector<DatasetRecord> records;
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    if (line.empty()) continue;
    try {
      records.push_back(record_from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": bad label record: " + e.what());
    }
  }
  return records;
}

// ---------------------------------------------------------------------------
// Dataset generation

/// Sorted list of PNG/JPEG files in a directory.
inline std::vector<fs::path> list_images(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("backgrounds directory does not exist: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && is_supported_image(e.path())) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  return files;
}

/// Background images center-cropped and scaled to 320x224, decoded on
/// first use.
class BackgroundSet {
 public:
  explicit BackgroundSet(const fs::path& dir) : files_(list_images(dir)) {}

  std::size_t size() const { return files_.size(); }

  const Image& get(std::size_t i) {
    auto it = cache_.find(i);
    if (it != cache_.end()) return it->second;
    if (cache_.size() >= kMaxCached) cache_.clear();
    Image img = read_image(files_.at(i));
    if (img.width != kImageWidth || img.height != kImageHeight)
      img = crop_resize(img, kImageWidth, kImageHeight);
    return cache_.emplace(i, std::move(img)).first->second;
  }

 private:
  static constexpr std::size_t kMaxCached = 512;
  std::vector<fs::path> files_;
  std::map<std::size_t, Image> cache_;
};

struct DatagenConfig {
  SceneConfig scene;
  fs::path backgrounds;
  std::optional<fs::path> sprite;  // RGBA PNG; built-in drone otherwise
  std::size_t count = 800;
  std::uint64_t seed = 0;
};

struct Manifest {
  fs::path labels;
  std::vector<DatasetRecord> records;
};

inline std::string image_name(std::size_t i) {
  char name[32];
  std::snprintf(name, sizeof name, "images/%06zu.png", i);
  return name;
}

inline DroneSprite sprite_for(const DatagenConfig& cfg) {
  return cfg.sprite ? load_sprite(*cfg.sprite, cfg.scene.physical_width)
                    : [&] {
                        auto s = default_drone_sprite();
                        s.physical_width = cfg.scene.physical_width;
                        return s;
                      }();
}

/// Image i uses its own RNG stream derived from (seed, i).
inline Manifest generate_dataset(const DatagenConfig& cfg, const fs::path& out_dir) {
  cfg.scene.validate();
  BackgroundSet backgrounds(cfg.backgrounds);
  if (cfg.count > 0 && backgrounds.size() == 0)
    throw IoError("no background images in " + cfg.backgrounds.string());
  const DroneSprite sprite = sprite_for(cfg);
  fs::create_directories(out_dir / "images");
  Manifest m;
  m.labels = out_dir / "labels.jsonl";
  for (std::size_t i = 0; i < cfg.count; ++i) {
    Rng rng(mix_seed(cfg.seed, i));
    const SceneSpec scene = sample_scene(cfg.scene, backgrounds.size(), rng);
    const auto res = composite(backgrounds.get(scene.background), sprite, scene, cfg.scene.intrinsics);
    DatasetRecord rec;
    rec.image = image_name(i);
    rec.attitude = scene.attitude;
    for (const auto& r : scene.robots) rec.robots.push_back(r.position);
    write_png(res.image, out_dir / rec.image);
    m.records.push_back(std::move(rec));
  }
  write_labels_jsonl(m.records, m.labels);
  return m;
}

}  // namespace monoloc

#endif  // MONOLOC_DATAGEN_HPP_
