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

#ifndef MONOLOC_MODEL_HPP_
#define MONOLOC_MODEL_HPP_

#include <bit>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "monoloc/adam.hpp"
#include "monoloc/datagen.hpp"
#include "monoloc/geometry.hpp"
#include "monoloc/image.hpp"
#include "monoloc/loss.hpp"
#include "monoloc/network.hpp"

namespace monoloc {

struct Checkpoint {
  NetworkSpec spec;
  int epoch = 0;
  std::uint64_t seed = 0;
  ParamStore<float> params;

  static Checkpoint fresh(const NetworkSpec& spec, std::uint64_t seed) {
    return {spec, 0, seed, init_params<float>(spec, seed)};
  }
};

// ---------------------------------------------------------------------------
// Inference

/// Converts a raw head output for one image into a GridMap.
template <typename T>
GridMap head_to_grid(const Tensor<T>& raw, int b = 0) {
  const Shape s = raw.shape();
  GridMap g(GridShape{s.h, s.w, 8}, s.c - 2);
  for (std::size_t i = 0; i < g.cells(); ++i) {
    g.confidence[i] = sigmoid(raw.plane(b, 0)[i]);
    g.depth[i] = raw.plane(b, 1)[i];
  }
  for (int k = 0; k < g.num_classes; ++k)
    for (std::size_t i = 0; i < g.cells(); ++i)
      g.class_prob[k * g.cells() + i] = sigmoid(raw.plane(b, 2 + k)[i]);
  return g;
}

/// Evaluation-mode forward pass of a float model.
class Model {
 public:
  explicit Model(const Checkpoint& ckpt) : net_(ckpt.spec, ckpt.params) {}

  GridMap forward(const Image& image) {
    return head_to_grid(net_.forward(image_to_tensor<float>(image), false, false));
  }

  Network<float>& network() { return net_; }

 private:
  Network<float> net_;
};

// ---------------------------------------------------------------------------
// Training data

struct Sample {
  Image image;
  GridMap label;
  std::vector<RelativeLabel> robots;
};

struct LoadReport {
  std::size_t records = 0;
  std::size_t dropped_collisions = 0;
  std::size_t robots_out_of_view = 0;
};

/// Turns a record into in-view pixel labels; robots projecting outside the
/// image are skipped and counted.
inline std::vector<RelativeLabel> record_labels(const DatasetRecord& rec, const CameraIntrinsics& k,
                                                std::size_t* out_of_view = nullptr) {
  std::vector<RelativeLabel> labels;
  for (const auto& p : rec.robots) {
    if (auto l = label_from_horizontal(p, rec.attitude, k)) labels.push_back(*l);
    else if (out_of_view) ++*out_of_view;
  }
  return labels;
}

/// Loads a dataset directory (images/ + labels.jsonl). Frames with two
/// robots in one grid cell are dropped.
inline std::vector<Sample> load_dataset(const fs::path& dir, int num_classes = 0,
                                        LoadReport* report = nullptr, const CameraIntrinsics& k = {}) {
  const auto records = read_labels_jsonl(dir / "labels.jsonl");
  LoadReport rep;
  rep.records = records.size();
  std::vector<Sample> samples;
  for (const auto& rec : records) {
    Sample s;
    s.robots = record_labels(rec, k, &rep.robots_out_of_view);
    try {
      s.label = grid_labels(s.robots, GridShape{}, num_classes);
    } catch (const CellCollisionError&) {
      ++rep.dropped_collisions;
      continue;
    }
    s.image = read_image(dir / rec.image);
    if (s.image.width != kImageWidth || s.image.height != kImageHeight)
      throw FormatError(rec.image + ": dataset images must be 320x224");
    samples.push_back(std::move(s));
  }
  if (report) *report = rep;
  return samples;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  int epochs = 25;
  int warm_epochs = 2;
  int batch = 5;
  double base_lr = 1e-3;
  std::uint64_t seed = 0;
  bool class_loss = false;
  double final_lr_fraction = 1.0;  // 1 keeps the rate constant after warm-up

  void validate() const {
    if (epochs < 1 || warm_epochs < 0 || warm_epochs >= epochs)
      throw ConfigError("train: need epochs >= 1 and 0 <= warm_epochs < epochs");
    if (batch < 1) throw ConfigError("train: batch must be >= 1");
    if (!(base_lr > 0)) throw ConfigError("train: base_lr must be positive");
    if (!(final_lr_fraction > 0 && final_lr_fraction <= 1))
      throw ConfigError("train: final_lr_fraction must lie in (0, 1]");
  }
};

struct StepRecord {
  long step = 0;
  int epoch = 0;  // 1-based
  double lr = 0;
  LossBreakdown loss;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<StepRecord> curve;
};

/// Linear warm-up from 0.1 * base to base over the warm epochs, then a
/// cosine from base to final_lr_fraction * base at the last step.
inline double learning_rate(const TrainConfig& cfg, long step, long steps_per_epoch) {
  const long warm = cfg.warm_epochs * steps_per_epoch;
  const long total = cfg.epochs * steps_per_epoch;
  if (step < warm) return cfg.base_lr * (0.1 + 0.9 * static_cast<double>(step) / static_cast<double>(warm));
  const long span = total - warm - 1;
  const double progress = span > 0 ? std::min(1.0, static_cast<double>(step - warm) / span) : 0.0;
  const double f = cfg.final_lr_fraction;
  return cfg.base_lr * (f + (1.0 - f) * 0.5 * (1.0 + std::cos(M_PI * progress)));
}

inline Tensor<float> batch_tensor(const std::vector<Sample>& data, std::span<const std::size_t> idx) {
  Tensor<float> t({static_cast<int>(idx.size()), 3, kImageHeight, kImageWidth});
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const auto& img = data[idx[b]].image;
    for (int c = 0; c < 3; ++c) {
      float* p = t.plane(static_cast<int>(b), c);
      for (std::size_t i = 0; i < static_cast<std::size_t>(kImageWidth) * kImageHeight; ++i)
        p[i] = img.pixels[i * 3 + c] / 255.0f;
    }
  }
  return t;
}

/// Fisher-Yates shuffle with the library RNG.
inline void shuffle_indices(std::vector<std::size_t>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
}

using StepCallback = std::function<void(const StepRecord&)>;

/// Trains from `init` (or a fresh seeded network when absent). Runs
/// epochs * ceil(N / batch) Adam steps; the final batch of an epoch may be
/// smaller.
inline TrainResult train(const TrainConfig& cfg, const NetworkSpec& spec, const std::vector<Sample>& data,
                         const std::optional<Checkpoint>& init = std::nullopt,
                         const StepCallback& on_step = {}) {
  cfg.validate();
  if (data.empty()) throw Error("train: empty dataset");
  if (init && !(init->spec == spec)) throw FormatError("train: initial checkpoint does not match network spec");
  for (const auto& s : data)
    if (s.label.num_classes != spec.num_classes) throw ShapeError("train: label class count does not match spec");
  Network<float> net(spec, init ? init->params : init_params<float>(spec, cfg.seed));
  AdamState<float> adam(net.params());
  TrainResult result;
  const long n = static_cast<long>(data.size());
  const long steps_per_epoch = (n + cfg.batch - 1) / cfg.batch;
  std::vector<std::size_t> order(data.size());
  std::vector<GridMap> labels;
  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng rng(mix_seed(cfg.seed, 0x5eed0000ULL + epoch));
    shuffle_indices(order, rng);
    for (long s = 0; s < steps_per_epoch; ++s, ++step) {
      const std::size_t lo = s * cfg.batch, hi = std::min<std::size_t>(lo + cfg.batch, data.size());
      std::span<const std::size_t> idx(order.data() + lo, hi - lo);
      labels.clear();
      for (auto i : idx) labels.push_back(data[i].label);
      const double lr = learning_rate(cfg, step, steps_per_epoch);
      Tensor<float> grad;
      LossBreakdown loss;
      try {
        const Tensor<float> raw = net.forward(batch_tensor(data, idx), true);
        loss = grid_losses(raw, labels, cfg.class_loss, &grad);
        if (!std::isfinite(loss.total)) throw NonFiniteError("loss is not finite");
        net.backward(grad);
        adam_step(adam, net.params(), lr);
      } catch (const NonFiniteError& e) {
        std::ostringstream os;
        os << "training aborted at step " << step << " (epoch " << epoch + 1 << "): " << e.what()
           << "; batch samples:";
        for (auto i : idx) os << ' ' << i;
        throw NonFiniteError(os.str());
      }
      StepRecord rec{step, epoch + 1, lr, loss};
      result.curve.push_back(rec);
      if (on_step) on_step(rec);
    }
  }
  result.checkpoint = {spec, (init ? init->epoch : 0) + cfg.epochs, cfg.seed, net.params()};
  return result;
}

inline void write_loss_csv(const std::vector<StepRecord>& curve, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "step,epoch,lr,l_total,l_d,l_c\n";
  char line[256];
  for (const auto& r : curve) {
    std::snprintf(line, sizeof line, "%ld,%d,%.9g,%.9g,%.9g,%.9g\n", r.step, r.epoch, r.lr, r.loss.total,
                  r.loss.depth, r.loss.confidence);
    out << line;
  }
  if (!out) throw IoError("failed writing " + path.string());
}

// ---------------------------------------------------------------------------
// Checkpoint file
//
//   MONOLOC-CKPT 1\n
//   {json header}\n
//   little-endian float32 blob, parameters in layer order

inline constexpr const char* kCheckpointMagic = "MONOLOC-CKPT 1";

namespace detail {

template <typename U>
void append_le(std::string& out, U v) {
  static_assert(std::is_trivially_copyable_v<U>);
  char b[sizeof(U)];
  std::memcpy(b, &v, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(U));
  out.append(b, sizeof(U));
}

template <typename U>
U read_le(const char* p) {
  char b[sizeof(U)];
  std::memcpy(b, p, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(U));
  U v;
  std::memcpy(&v, b, sizeof(U));
  return v;
}

inline std::string hex64(std::uint64_t v) {
  char b[17];
  std::snprintf(b, sizeof b, "%016" PRIx64, v);
  return b;
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline void write_file(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

/// Splits "<magic>\n<json>\n<blob>" and checks the magic line.
inline std::pair<nlohmann::json, std::string_view> split_model_file(const std::string& bytes,
                                                                    const std::string& magic,
                                                                    const fs::path& path) {
  const auto nl1 = bytes.find('\n');
  if (nl1 == std::string::npos || bytes.compare(0, nl1, magic) != 0)
    throw FormatError(path.string() + ": not a " + magic + " file (bad magic or version)");
  const auto nl2 = bytes.find('\n', nl1 + 1);
  if (nl2 == std::string::npos) throw FormatError(path.string() + ": corrupt blob (truncated header)");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(nl1 + 1, nl2 - nl1 - 1));
  } catch (const std::exception& e) {
    throw FormatError(path.string() + ": bad header: " + e.what());
  }
  return {header, std::string_view(bytes).substr(nl2 + 1)};
}

inline nlohmann::json shape_json(const Shape& s) { return {s.n, s.c, s.h, s.w}; }

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ckpt, const fs::path& path) {
  std::string blob;
  blob.reserve(ckpt.params.scalar_count() * 4);
  nlohmann::json params = nlohmann::json::array();
  for (const auto& p : ckpt.params) {
    params.push_back({{"name", p.name}, {"shape", detail::shape_json(p.value.shape())}, {"trainable", p.trainable}});
    for (float v : p.value.values()) detail::append_le(blob, v);
  }
  const nlohmann::json header = {{"network", to_json(ckpt.spec)},
                                 {"epoch", ckpt.epoch},
                                 {"seed", ckpt.seed},
                                 {"params", params},
                                 {"blob_bytes", blob.size()},
                                 {"blob_fnv1a64", detail::hex64(fnv1a64(blob))}};
  detail::write_file(path, std::string(kCheckpointMagic) + "\n" + header.dump() + "\n" + blob);
}

/// Reads a checkpoint; when `expected` is given the stored spec must equal it.
inline Checkpoint load_checkpoint(const fs::path& path, const std::optional<NetworkSpec>& expected = std::nullopt) {
  const std::string bytes = detail::read_file(path);
  auto [header, blob] = detail::split_model_file(bytes, kCheckpointMagic, path);
  Checkpoint ckpt;
  try {
    ckpt.spec = network_spec_from_json(header.at("network"));
    ckpt.epoch = header.at("epoch").get<int>();
    ckpt.seed = header.at("seed").get<std::uint64_t>();
    const auto blob_bytes = header.at("blob_bytes").get<std::size_t>();
    if (blob.size() != blob_bytes) throw FormatError(path.string() + ": corrupt blob (length mismatch)");
    if (detail::hex64(fnv1a64(blob)) != header.at("blob_fnv1a64").get<std::string>())
      throw FormatError(path.string() + ": corrupt blob (digest mismatch)");
    std::size_t off = 0;
    for (const auto& pj : header.at("params")) {
      const auto sh = pj.at("shape");
      const Shape shape{sh.at(0).get<int>(), sh.at(1).get<int>(), sh.at(2).get<int>(), sh.at(3).get<int>()};
      const auto i = ckpt.params.add(pj.at("name").get<std::string>(), shape, 0.0f, pj.at("trainable").get<bool>());
      auto& v = ckpt.params[i].value;
      if (off + v.size() * 4 > blob.size()) throw FormatError(path.string() + ": corrupt blob (short)");
      for (std::size_t j = 0; j < v.size(); ++j, off += 4) v[j] = detail::read_le<float>(blob.data() + off);
    }
    if (off != blob.size()) throw FormatError(path.string() + ": corrupt blob (trailing bytes)");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": bad header: " + e.what());
  }
  // binds parameter names and shapes to the spec
  Network<float> check(ckpt.spec, ckpt.params);
  if (expected && !(*expected == ckpt.spec))
    throw FormatError(path.string() + ": checkpoint network does not match the expected spec");
  return ckpt;
}

}  // namespace monoloc

#endif  // MONOLOC_MODEL_HPP_
