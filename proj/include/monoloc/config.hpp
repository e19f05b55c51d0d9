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

#ifndef MONOLOC_CONFIG_HPP_
#define MONOLOC_CONFIG_HPP_

#include <fstream>
#include <optional>
#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "monoloc/datagen.hpp"
#include "monoloc/detect.hpp"
#include "monoloc/ekf.hpp"
#include "monoloc/model.hpp"

namespace monoloc {

struct DatagenSection {
  DatagenConfig gen;
  std::optional<std::uint64_t> seed;
};

struct TrainSection {
  TrainConfig train;
  NetworkSpec network = NetworkSpec::default_spec();
  bool network_set = false;  // network or num_classes given explicitly
  std::optional<std::uint64_t> seed;
};

struct QuantizeSection {
  std::size_t max_calibration_images = 0;  // 0 = all
};

struct EkfSection {
  SimConfig sim;
  std::optional<std::uint64_t> seed;
  bool render = true;           // write images for the label stream
  fs::path backgrounds;         // used when render is set
  std::optional<fs::path> sprite;
  std::size_t procedural_backgrounds = 32;  // when no backgrounds dir is given
};

/// Every field is optional; absent fields keep the module defaults.
struct RunConfig {
  DatagenSection datagen;
  TrainSection train;
  DetectionConfig detect;
  QuantizeSection quantize;
  EkfSection ekf;
};

namespace detail {

/// Reads known keys of one JSON object and rejects the rest.
class StrictObject {
 public:
  StrictObject(const nlohmann::json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
  }

  template <typename V>
  void get(const char* key, V& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<V>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }

  void get(const char* key, fs::path& out) {
    std::string s = out.string();
    get(key, s);
    out = s;
  }

  template <typename V>
  void get(const char* key, std::optional<V>& out) {
    seen_.insert(key);
    if (!j_.contains(key) || j_.at(key).is_null()) return;
    V v{};
    if constexpr (std::is_same_v<V, fs::path>) {
      std::string s;
      get(key, s);
      v = s;
    } else {
      get(key, v);
    }
    out = v;
  }

  /// Sub-object, or nullptr when absent.
  const nlohmann::json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  std::string path(const char* key) const { return where_ + "." + key; }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError(where_ + ": unknown key '" + k + "'");
  }

 private:
  const nlohmann::json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

inline void read_intrinsics(const nlohmann::json& j, const std::string& where, CameraIntrinsics& k) {
  StrictObject o(j, where);
  o.get("fx", k.fx);
  o.get("fy", k.fy);
  o.get("cx", k.cx);
  o.get("cy", k.cy);
  o.finish();
}

inline void read_scene(const nlohmann::json& j, const std::string& where, SceneConfig& s) {
  StrictObject o(j, where);
  o.get("depth_min", s.depth_min);
  o.get("depth_max", s.depth_max);
  o.get("lateral_fraction", s.lateral_fraction);
  o.get("vertical_fraction", s.vertical_fraction);
  o.get("roll_max", s.roll_max);
  o.get("pitch_max", s.pitch_max);
  o.get("min_robots", s.min_robots);
  o.get("max_robots", s.max_robots);
  o.get("rotation_max", s.rotation_max);
  o.get("brightness_min", s.brightness_min);
  o.get("brightness_max", s.brightness_max);
  o.get("physical_width", s.physical_width);
  if (const auto* k = o.child("intrinsics")) read_intrinsics(*k, o.path("intrinsics"), s.intrinsics);
  o.finish();
  s.validate();
}

inline void read_noise(const nlohmann::json& j, const std::string& where, EkfNoise& n) {
  StrictObject o(j, where);
  o.get("velocity", n.velocity);
  o.get("yaw_rate", n.yaw_rate);
  o.get("range", n.range);
  o.get("height", n.height);
  o.get("position_walk", n.position_walk);
  o.get("yaw_walk", n.yaw_walk);
  o.finish();
  if (n.velocity < 0 || n.yaw_rate < 0 || n.range < 0 || n.height < 0 || n.position_walk < 0 || n.yaw_walk < 0)
    throw ConfigError(where + ": noise levels must be non-negative");
}

}  // namespace detail

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig rc;
  detail::StrictObject top(j, "config");
  if (const auto* d = top.child("datagen")) {
    detail::StrictObject o(*d, "datagen");
    o.get("backgrounds", rc.datagen.gen.backgrounds);
    o.get("sprite", rc.datagen.gen.sprite);
    o.get("count", rc.datagen.gen.count);
    o.get("seed", rc.datagen.seed);
    if (const auto* s = o.child("scene")) detail::read_scene(*s, "datagen.scene", rc.datagen.gen.scene);
    o.finish();
  }
  if (const auto* t = top.child("train")) {
    detail::StrictObject o(*t, "train");
    auto& tc = rc.train.train;
    o.get("epochs", tc.epochs);
    o.get("warm_epochs", tc.warm_epochs);
    o.get("batch", tc.batch);
    o.get("base_lr", tc.base_lr);
    o.get("class_loss", tc.class_loss);
    o.get("final_lr_fraction", tc.final_lr_fraction);
    o.get("seed", rc.train.seed);
    int classes = rc.train.network.num_classes;
    o.get("num_classes", classes);
    rc.train.network_set = t->contains("network") || t->contains("num_classes");
    if (const auto* n = o.child("network")) {
      try {
        rc.train.network = network_spec_from_json(*n);
      } catch (const Error& e) {
        throw ConfigError(std::string("train.network: ") + e.what());
      }
      if (t->contains("num_classes") && classes != rc.train.network.num_classes)
        throw ConfigError("train.num_classes disagrees with train.network");
    } else if (classes != rc.train.network.num_classes) {
      if (classes < 0) throw ConfigError("train.num_classes must be >= 0");
      rc.train.network = NetworkSpec::default_spec(classes);
    }
    o.finish();
    tc.validate();
  }
  if (const auto* d = top.child("detect")) {
    detail::StrictObject o(*d, "detect");
    o.get("threshold", rc.detect.threshold);
    o.get("suppress", rc.detect.suppress);
    o.finish();
    rc.detect.validate();
  }
  if (const auto* q = top.child("quantize")) {
    detail::StrictObject o(*q, "quantize");
    o.get("max_calibration_images", rc.quantize.max_calibration_images);
    o.finish();
  }
  if (const auto* e = top.child("ekf")) {
    detail::StrictObject o(*e, "ekf");
    auto& s = rc.ekf.sim;
    o.get("duration", s.duration);
    o.get("dt", s.dt);
    o.get("uwb_period", s.uwb_period);
    o.get("camera_period", s.camera_period);
    o.get("burn_in", s.burn_in);
    o.get("episodes", s.episodes);
    o.get("noise_free", s.noise_free);
    o.get("max_speed", s.max_speed);
    o.get("max_yaw_rate", s.max_yaw_rate);
    o.get("relative_yaw_amplitude", s.relative_yaw_amplitude);
    o.get("path_frequency_min", s.path_frequency_min);
    o.get("path_frequency_max", s.path_frequency_max);
    o.get("attitude_amplitude", s.attitude_amplitude);
    o.get("height", s.height);
    o.get("seed", rc.ekf.seed);
    o.get("render", rc.ekf.render);
    o.get("backgrounds", rc.ekf.backgrounds);
    o.get("sprite", rc.ekf.sprite);
    o.get("procedural_backgrounds", rc.ekf.procedural_backgrounds);
    if (const auto* n = o.child("sensor_noise")) detail::read_noise(*n, "ekf.sensor_noise", s.sensor_noise);
    if (const auto* n = o.child("filter_noise")) detail::read_noise(*n, "ekf.filter_noise", s.filter_noise);
    if (const auto* sc = o.child("scene")) detail::read_scene(*sc, "ekf.scene", s.scene);
    o.finish();
    s.validate();
  }
  top.finish();
  return rc;
}

inline RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  try {
    return run_config_from_json(j);
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

/// Command-line seed wins over the config; one of them must be present.
inline std::uint64_t require_seed(const std::optional<std::uint64_t>& cli, const std::optional<std::uint64_t>& cfg,
                                  const char* command) {
  if (cli) return *cli;
  if (cfg) return *cfg;
  throw ConfigError(std::string(command) + ": a seed is required (--seed or the config's seed field)");
}

}  // namespace monoloc

#endif  // MONOLOC_CONFIG_HPP_
