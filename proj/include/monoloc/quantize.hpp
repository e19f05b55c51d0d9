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

// Post-training int8 quantization.
//
// Scheme: symmetric per-tensor scales, zero-point 0, max-abs calibration.
// A conv computes  acc = bias_q + sum(w_q * x_q)  in integers, with
// bias_q = round(b / (s_in * s_w)). Hidden convs requantize to their
// output scale with a float multiply; relu and maxpool run on int8 codes
// and keep the scale. The head accumulator is dequantized directly.

#ifndef MONOLOC_QUANTIZE_HPP_
#define MONOLOC_QUANTIZE_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include <nlohmann/json.hpp>

#include "monoloc/image.hpp"
#include "monoloc/model.hpp"

namespace monoloc {

inline constexpr int kQuantMax = 127;
inline constexpr double kScaleFloor = 1e-8;

/// Max-abs scale with the floor applied.
inline double scale_for(double max_abs) { return std::max(max_abs / kQuantMax, kScaleFloor); }

inline std::int32_t quantize_value(double x, double scale) {
  const double q = std::round(x / scale);
  return static_cast<std::int32_t>(std::clamp(q, double(-kQuantMax), double(kQuantMax)));
}

inline double dequantize_value(std::int32_t q, double scale) { return q * scale; }

// ---------------------------------------------------------------------------
// Batchnorm folding

/// Folds every conv -> batchnorm pair into the conv. The result has no
/// batchnorm layers; its parameters are renamed to the new layer indices.
inline Checkpoint fold_batchnorm(const Checkpoint& ckpt) {
  ckpt.spec.validate();
  Checkpoint out;
  out.spec = ckpt.spec;
  out.spec.layers.clear();
  out.epoch = ckpt.epoch;
  out.seed = ckpt.seed;
  const auto& L = ckpt.spec.layers;
  auto param = [&](std::size_t i, const char* what) -> const Tensor<float>& {
    const auto* p = ckpt.params.find(param_name(i, what));
    if (!p) throw FormatError("checkpoint lacks " + param_name(i, what));
    return p->value;
  };
  for (std::size_t i = 0; i < L.size(); ++i) {
    const auto& l = L[i];
    if (l.kind == LayerKind::BatchNorm) throw ShapeError("batchnorm at layer " + std::to_string(i) + " does not follow a conv");
    const std::size_t j = out.spec.layers.size();
    out.spec.layers.push_back(l);
    if (l.kind != LayerKind::Conv) continue;
    Tensor<float> w = param(i, "weight");
    Tensor<float> b = param(i, "bias");
    if (i + 1 < L.size() && L[i + 1].kind == LayerKind::BatchNorm) {
      const auto& gamma = param(i + 1, "gamma");
      const auto& beta = param(i + 1, "beta");
      const auto& mean = param(i + 1, "running_mean");
      const auto& var = param(i + 1, "running_var");
      const Shape ws = w.shape();
      const std::size_t per = static_cast<std::size_t>(ws.c) * ws.h * ws.w;
      for (int o = 0; o < ws.n; ++o) {
        if (!(var[o] > 0)) throw Error("fold_batchnorm: zero running variance in layer " + std::to_string(i + 1));
        const double f = gamma[o] / std::sqrt(static_cast<double>(var[o]) + kBatchNormEps);
        float* wp = w.data() + o * per;
        for (std::size_t k = 0; k < per; ++k) wp[k] = static_cast<float>(wp[k] * f);
        b[o] = static_cast<float>((static_cast<double>(b[o]) - mean[o]) * f + beta[o]);
      }
      ++i;
    }
    out.params[out.params.add(param_name(j, "weight"), w.shape(), 0.0f, true)].value = std::move(w);
    out.params[out.params.add(param_name(j, "bias"), b.shape(), 0.0f, true)].value = std::move(b);
  }
  out.spec.validate();
  return out;
}

// ---------------------------------------------------------------------------
// Calibration

/// One scale per input and per conv. activation[i] belongs to the output
/// of conv i (after its relu when one follows).
struct QuantParams {
  double input_scale = 1.0 / kQuantMax;
  std::vector<double> weight_scales;
  std::vector<double> activation_scales;

  bool operator==(const QuantParams&) const = default;
};

namespace detail {

inline bool has_batchnorm(const NetworkSpec& s) {
  return std::any_of(s.layers.begin(), s.layers.end(), [](const LayerSpec& l) { return l.kind == LayerKind::BatchNorm; });
}

inline bool relu_follows(const NetworkSpec& s, std::size_t i) {
  return i + 1 < s.layers.size() && s.layers[i + 1].kind == LayerKind::Relu;
}

inline double max_abs(std::span<const float> v) {
  double m = 0;
  for (float x : v) m = std::max(m, static_cast<double>(std::abs(x)));
  return m;
}

}  // namespace detail

/// Max-abs calibration of a folded checkpoint over `images`.
inline QuantParams calibrate(const Checkpoint& folded, const std::vector<Image>& images) {
  if (images.empty()) throw Error("calibrate: need at least one calibration image");
  if (detail::has_batchnorm(folded.spec)) throw Error("calibrate: fold batchnorm first");
  folded.spec.validate();
  const auto& L = folded.spec.layers;
  QuantParams qp;
  std::vector<std::size_t> convs;
  for (std::size_t i = 0; i < L.size(); ++i)
    if (L[i].kind == LayerKind::Conv) {
      convs.push_back(i);
      qp.weight_scales.push_back(scale_for(detail::max_abs(folded.params.find(param_name(i, "weight"))->value.values())));
    }
  std::vector<double> act(convs.size(), 0.0);
  double in_max = 0;
  for (const auto& img : images) {
    Tensor<float> x = image_to_tensor<float>(img);
    in_max = std::max(in_max, detail::max_abs(x.values()));
    std::size_t c = 0;
    for (std::size_t i = 0; i < L.size(); ++i) {
      switch (L[i].kind) {
        case LayerKind::Conv: {
          x = conv_forward(x, folded.params.find(param_name(i, "weight"))->value,
                           folded.params.find(param_name(i, "bias"))->value);
          double m = 0;
          const bool pos = detail::relu_follows(folded.spec, i);
          for (float v : x.values()) m = std::max(m, static_cast<double>(pos ? std::max(v, 0.0f) : std::abs(v)));
          act[c] = std::max(act[c], m);
          ++c;
          break;
        }
        case LayerKind::Relu: x = relu_forward(x); break;
        case LayerKind::MaxPool: x = maxpool_forward<float>(x, nullptr); break;
        case LayerKind::BatchNorm: break;
      }
    }
  }
  qp.input_scale = scale_for(in_max);
  for (double m : act) qp.activation_scales.push_back(scale_for(m));
  return qp;
}

// ---------------------------------------------------------------------------
// Quantized model

struct QuantizedConv {
  std::size_t layer = 0;          // index in the folded spec
  Tensor<std::int8_t> weight;     // [out, in, k, k]
  std::vector<std::int32_t> bias;
  double input_scale = 0, weight_scale = 0, output_scale = 0;
};

struct QuantizedModel {
  NetworkSpec spec;  // folded: conv / relu / maxpool only
  QuantParams params;
  std::vector<QuantizedConv> convs;
  int epoch = 0;
  std::uint64_t seed = 0;
};

/// Quantizes a folded checkpoint. Throws when a conv's worst-case
/// accumulator could leave the int32 range.
inline QuantizedModel quantize_model(const Checkpoint& folded, const QuantParams& qp) {
  if (detail::has_batchnorm(folded.spec)) throw Error("quantize: fold batchnorm first");
  folded.spec.validate();
  QuantizedModel qm{folded.spec, qp, {}, folded.epoch, folded.seed};
  double s_in = qp.input_scale;
  std::size_t c = 0;
  for (std::size_t i = 0; i < folded.spec.layers.size(); ++i) {
    if (folded.spec.layers[i].kind != LayerKind::Conv) continue;
    if (c >= qp.weight_scales.size() || c >= qp.activation_scales.size())
      throw ShapeError("quantize: scales do not cover every conv");
    const auto& w = folded.params.find(param_name(i, "weight"))->value;
    const auto& b = folded.params.find(param_name(i, "bias"))->value;
    QuantizedConv qc;
    qc.layer = i;
    qc.input_scale = s_in;
    qc.weight_scale = qp.weight_scales[c];
    qc.output_scale = qp.activation_scales[c];
    qc.weight = Tensor<std::int8_t>(w.shape());
    for (std::size_t k = 0; k < w.size(); ++k)
      qc.weight[k] = static_cast<std::int8_t>(quantize_value(w[k], qc.weight_scale));
    const double bs = qc.input_scale * qc.weight_scale;
    const Shape ws = w.shape();
    const double fan_in = static_cast<double>(ws.c) * ws.h * ws.w;
    for (std::size_t o = 0; o < b.size(); ++o) {
      const double q = std::round(b[o] / bs);
      const double worst = std::abs(q) + fan_in * kQuantMax * kQuantMax;
      if (!(worst <= std::numeric_limits<std::int32_t>::max()))
        throw Error("quantize: int32 accumulator overflow at layer " + std::to_string(i) +
                    " (bias " + std::to_string(b[o]) + " with scale " + std::to_string(bs) + "); bad calibration");
      qc.bias.push_back(static_cast<std::int32_t>(q));
    }
    qm.convs.push_back(std::move(qc));
    s_in = qp.activation_scales[c];
    ++c;
  }
  return qm;
}

inline QuantizedModel quantize_checkpoint(const Checkpoint& ckpt, const std::vector<Image>& calibration) {
  const Checkpoint folded = fold_batchnorm(ckpt);
  return quantize_model(folded, calibrate(folded, calibration));
}

/// Raw head output [1, 2+K, H/8, W/8] of the integer pipeline, dequantized.
inline Tensor<float> quantized_head(const QuantizedModel& qm, const Image& image) {
  Tensor<float> xf = image_to_tensor<float>(image);
  const Shape is = xf.shape();
  if (is.c != qm.spec.in_channels || is.h != qm.spec.in_height || is.w != qm.spec.in_width)
    throw ShapeError("quantized model input " + is.str() + " does not match spec");
  Tensor<std::int32_t> x(is);
  for (std::size_t i = 0; i < xf.size(); ++i) x[i] = quantize_value(xf[i], qm.params.input_scale);
  const auto& L = qm.spec.layers;
  std::size_t c = 0;
  for (std::size_t i = 0; i < L.size(); ++i) {
    switch (L[i].kind) {
      case LayerKind::Conv: {
        const auto& qc = qm.convs.at(c++);
        Tensor<std::int32_t> bias({1, static_cast<int>(qc.bias.size()), 1, 1});
        std::copy(qc.bias.begin(), qc.bias.end(), bias.data());
        Tensor<std::int32_t> acc = conv_forward(x, qc.weight.cast<std::int32_t>(), bias);
        const double m = qc.input_scale * qc.weight_scale;
        if (i + 1 == L.size()) {
          Tensor<float> out(acc.shape());
          for (std::size_t k = 0; k < acc.size(); ++k) out[k] = static_cast<float>(acc[k] * m);
          return out;
        }
        const double r = m / qc.output_scale;
        for (auto& v : acc.values()) v = quantize_value(v * r, 1.0);
        x = std::move(acc);
        break;
      }
      case LayerKind::Relu: x = relu_forward(x); break;
      case LayerKind::MaxPool: x = maxpool_forward<std::int32_t>(x, nullptr); break;
      case LayerKind::BatchNorm: throw Error("quantized model contains batchnorm");
    }
  }
  throw ShapeError("quantized model has no head conv");
}

/// Sigmoid is applied to the dequantized confidence logits.
inline GridMap quantized_forward(const QuantizedModel& qm, const Image& image) {
  return head_to_grid(quantized_head(qm, image));
}

// ---------------------------------------------------------------------------
// Model file
//
//   MONOLOC-QMODEL 1\n
//   {json header: folded spec, scales, tensor layout}\n
//   int8 weights of every conv, then little-endian int32 biases

inline constexpr const char* kQuantMagic = "MONOLOC-QMODEL 1";

inline void save_qmodel(const QuantizedModel& qm, const fs::path& path) {
  std::string w8, b32;
  nlohmann::json convs = nlohmann::json::array();
  for (const auto& qc : qm.convs) {
    convs.push_back({{"layer", qc.layer},
                     {"weight_shape", detail::shape_json(qc.weight.shape())},
                     {"input_scale", qc.input_scale},
                     {"weight_scale", qc.weight_scale},
                     {"output_scale", qc.output_scale}});
    for (std::int8_t v : qc.weight.values()) w8.push_back(static_cast<char>(v));
    for (std::int32_t v : qc.bias) detail::append_le(b32, v);
  }
  const std::string blob = w8 + b32;
  const nlohmann::json header = {{"network", to_json(qm.spec)},
                                 {"epoch", qm.epoch},
                                 {"seed", qm.seed},
                                 {"input_scale", qm.params.input_scale},
                                 {"convs", convs},
                                 {"int8_bytes", w8.size()},
                                 {"int32_bytes", b32.size()},
                                 {"blob_fnv1a64", detail::hex64(fnv1a64(blob))}};
  detail::write_file(path, std::string(kQuantMagic) + "\n" + header.dump() + "\n" + blob);
}

inline QuantizedModel load_qmodel(const fs::path& path) {
  const std::string bytes = detail::read_file(path);
  auto [header, blob] = detail::split_model_file(bytes, kQuantMagic, path);
  QuantizedModel qm;
  try {
    qm.spec = network_spec_from_json(header.at("network"));
    if (detail::has_batchnorm(qm.spec)) throw FormatError(path.string() + ": quantized network contains batchnorm");
    qm.epoch = header.at("epoch").get<int>();
    qm.seed = header.at("seed").get<std::uint64_t>();
    qm.params.input_scale = header.at("input_scale").get<double>();
    const auto n8 = header.at("int8_bytes").get<std::size_t>();
    const auto n32 = header.at("int32_bytes").get<std::size_t>();
    if (blob.size() != n8 + n32) throw FormatError(path.string() + ": corrupt blob (length mismatch)");
    if (detail::hex64(fnv1a64(blob)) != header.at("blob_fnv1a64").get<std::string>())
      throw FormatError(path.string() + ": corrupt blob (digest mismatch)");
    std::size_t o8 = 0, o32 = n8;
    for (const auto& cj : header.at("convs")) {
      QuantizedConv qc;
      qc.layer = cj.at("layer").get<std::size_t>();
      const auto sh = cj.at("weight_shape");
      qc.weight = Tensor<std::int8_t>({sh.at(0).get<int>(), sh.at(1).get<int>(), sh.at(2).get<int>(), sh.at(3).get<int>()});
      qc.input_scale = cj.at("input_scale").get<double>();
      qc.weight_scale = cj.at("weight_scale").get<double>();
      qc.output_scale = cj.at("output_scale").get<double>();
      if (!(qc.input_scale > 0 && qc.weight_scale > 0 && qc.output_scale > 0))
        throw FormatError(path.string() + ": scales must be positive");
      if (o8 + qc.weight.size() > n8 || o32 + 4 * std::size_t(qc.weight.shape().n) > blob.size())
        throw FormatError(path.string() + ": corrupt blob (short)");
      for (std::size_t k = 0; k < qc.weight.size(); ++k) {
        qc.weight[k] = static_cast<std::int8_t>(blob[o8++]);
        if (qc.weight[k] < -kQuantMax) throw FormatError(path.string() + ": weight code -128 not allowed");
      }
      for (int k = 0; k < qc.weight.shape().n; ++k, o32 += 4) qc.bias.push_back(detail::read_le<std::int32_t>(blob.data() + o32));
      qm.params.weight_scales.push_back(qc.weight_scale);
      qm.params.activation_scales.push_back(qc.output_scale);
      qm.convs.push_back(std::move(qc));
    }
    if (o8 != n8 || o32 != blob.size()) throw FormatError(path.string() + ": corrupt blob (trailing bytes)");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": bad header: " + e.what());
  }
  // layout check against the spec
  int ch = qm.spec.in_channels;
  std::size_t c = 0;
  for (std::size_t i = 0; i < qm.spec.layers.size(); ++i) {
    const auto& l = qm.spec.layers[i];
    if (l.kind != LayerKind::Conv) continue;
    if (c >= qm.convs.size() || qm.convs[c].layer != i ||
        qm.convs[c].weight.shape() != Shape{l.out_channels, ch, l.kernel, l.kernel})
      throw FormatError(path.string() + ": conv tensors do not match the network");
    ch = l.out_channels;
    ++c;
  }
  if (c != qm.convs.size()) throw FormatError(path.string() + ": extra conv tensors");
  return qm;
}

// ---------------------------------------------------------------------------
// Float vs quantized comparison

struct GridComparison {
  double conf_max_abs_diff = 0;
  double conf_within_fraction = 0;  // cells with |diff| <= tolerance
  int argmax_a = 0, argmax_b = 0;   // row-major cell indices
  bool argmax_agree = false;
  double depth_diff_at_argmax = 0;  // b - a at a's argmax cell
};

struct ComparisonReport {
  double tolerance = 0.15;
  std::vector<GridComparison> images;
  double argmax_agreement = 0;   // fraction of images
  double depth_within = 0;       // fraction of agreeing images with |depth diff| <= depth_tolerance
  double depth_tolerance = 0.2;
  double conf_within_fraction = 0;  // over all cells
};

inline int confidence_argmax(const GridMap& g) {
  return static_cast<int>(std::max_element(g.confidence.begin(), g.confidence.end()) - g.confidence.begin());
}

inline GridComparison compare_grids(const GridMap& a, const GridMap& b, double tolerance = 0.15) {
  if (!(a.shape == b.shape)) throw ShapeError("compare_grids: grid shapes differ");
  GridComparison c;
  std::size_t within = 0;
  for (std::size_t i = 0; i < a.cells(); ++i) {
    const double d = std::abs(a.confidence[i] - b.confidence[i]);
    c.conf_max_abs_diff = std::max(c.conf_max_abs_diff, d);
    within += d <= tolerance;
  }
  c.conf_within_fraction = static_cast<double>(within) / a.cells();
  c.argmax_a = confidence_argmax(a);
  c.argmax_b = confidence_argmax(b);
  c.argmax_agree = c.argmax_a == c.argmax_b;
  c.depth_diff_at_argmax = b.depth[c.argmax_a] - a.depth[c.argmax_a];
  return c;
}

inline ComparisonReport compare_grid_sets(const std::vector<GridMap>& a, const std::vector<GridMap>& b,
                                          double tolerance = 0.15, double depth_tolerance = 0.2) {
  if (a.size() != b.size()) throw ShapeError("compare: image count mismatch");
  ComparisonReport r;
  r.tolerance = tolerance;
  r.depth_tolerance = depth_tolerance;
  std::size_t agree = 0, depth_ok = 0;
  double within = 0, cells = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    r.images.push_back(compare_grids(a[i], b[i], tolerance));
    const auto& c = r.images.back();
    if (c.argmax_agree) {
      ++agree;
      depth_ok += std::abs(c.depth_diff_at_argmax) <= depth_tolerance;
    }
    within += c.conf_within_fraction * a[i].cells();
    cells += a[i].cells();
  }
  r.argmax_agreement = a.empty() ? 0.0 : static_cast<double>(agree) / a.size();
  r.depth_within = agree ? static_cast<double>(depth_ok) / agree : 0.0;
  r.conf_within_fraction = cells > 0 ? within / cells : 0.0;
  return r;
}

/// Runs the float checkpoint (folded or not) and the quantized model on
/// every image.
inline ComparisonReport compare_float_quant(const Checkpoint& ckpt, const QuantizedModel& qm,
                                            const std::vector<Image>& images) {
  Model fm(ckpt);
  std::vector<GridMap> a, b;
  for (const auto& img : images) {
    a.push_back(fm.forward(img));
    b.push_back(quantized_forward(qm, img));
  }
  return compare_grid_sets(a, b);
}

inline nlohmann::json to_json(const ComparisonReport& r) {
  nlohmann::json max_diff = nlohmann::json::array(), within = nlohmann::json::array(), agree = nlohmann::json::array(),
                 depth = nlohmann::json::array(), am_a = nlohmann::json::array(), am_b = nlohmann::json::array();
  for (const auto& c : r.images) {
    max_diff.push_back(c.conf_max_abs_diff);
    within.push_back(c.conf_within_fraction);
    agree.push_back(c.argmax_agree);
    depth.push_back(c.depth_diff_at_argmax);
    am_a.push_back(c.argmax_a);
    am_b.push_back(c.argmax_b);
  }
  return {{"images", r.images.size()},
          {"argmax_agreement", r.argmax_agreement},
          {"depth_within", r.depth_within},
          {"depth_tolerance", r.depth_tolerance},
          {"conf_tolerance", r.tolerance},
          {"conf_within_fraction", r.conf_within_fraction},
          {"per_image",
           {{"conf_max_abs_diff", max_diff},
            {"conf_within_fraction", within},
            {"argmax_agree", agree},
            {"depth_diff_at_argmax", depth},
            {"argmax_float", am_a},
            {"argmax_quant", am_b}}}};
}

}  // namespace monoloc

#endif  // MONOLOC_QUANTIZE_HPP_
