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

#ifndef MONOLOC_NETWORK_HPP_
#define MONOLOC_NETWORK_HPP_

#include <cmath>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "monoloc/layers.hpp"

namespace monoloc {

/// Layer sequence plus input geometry. The last layer is a conv whose
/// channels are [confidence logit, depth, class logits...].
struct NetworkSpec {
  std::vector<LayerSpec> layers;
  int in_channels = 3;
  int in_height = 224;
  int in_width = 320;
  int num_classes = 0;

  /// conv3x3(3->8)-bn-relu-pool, (8->16), (16->32) likewise, then
  /// conv3x3(32->32)-bn-relu and a 1x1 head.
  static NetworkSpec default_spec(int num_classes = 0) {
    NetworkSpec s;
    s.num_classes = num_classes;
    for (int ch : {8, 16, 32}) {
      s.layers.push_back(LayerSpec::conv(ch, 3));
      s.layers.push_back(LayerSpec::batchnorm());
      s.layers.push_back(LayerSpec::relu());
      s.layers.push_back(LayerSpec::maxpool());
    }
    s.layers.push_back(LayerSpec::conv(32, 3));
    s.layers.push_back(LayerSpec::batchnorm());
    s.layers.push_back(LayerSpec::relu());
    s.layers.push_back(LayerSpec::conv(2 + num_classes, 1));
    return s;
  }

  int output_channels() const { return 2 + num_classes; }
  int output_height() const { return in_height / 8; }
  int output_width() const { return in_width / 8; }

  void validate() const {
    if (layers.empty()) throw ShapeError("network has no layers");
    int pools = 0, ch = in_channels;
    for (const auto& l : layers) {
      switch (l.kind) {
        case LayerKind::Conv:
          if (l.kernel < 1 || l.kernel % 2 == 0 || l.out_channels < 1 || l.stride != 1)
            throw ShapeError("conv layer needs odd kernel, stride 1, channels > 0");
          ch = l.out_channels;
          break;
        case LayerKind::MaxPool: ++pools; break;
        default: break;
      }
    }
    if (pools != 3) throw ShapeError("network must downsample exactly 8x (three maxpools)");
    if (in_height % 8 != 0 || in_width % 8 != 0)
      throw ShapeError("input size must be divisible by 8");
    if (layers.back().kind != LayerKind::Conv || ch != output_channels())
      throw ShapeError("last layer must be a conv with 2 + num_classes channels");
  }

  bool operator==(const NetworkSpec&) const = default;
};

inline nlohmann::json to_json(const NetworkSpec& spec) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : spec.layers) {
    nlohmann::json j = {{"kind", to_string(l.kind)}};
    if (l.kind == LayerKind::Conv) {
      j["out_channels"] = l.out_channels;
      j["kernel"] = l.kernel;
      j["stride"] = l.stride;
    }
    layers.push_back(j);
  }
  return {{"layers", layers},
          {"in_channels", spec.in_channels},
          {"in_height", spec.in_height},
          {"in_width", spec.in_width},
          {"num_classes", spec.num_classes}};
}

inline NetworkSpec network_spec_from_json(const nlohmann::json& j) {
  NetworkSpec s;
  try {
    s.in_channels = j.at("in_channels").get<int>();
    s.in_height = j.at("in_height").get<int>();
    s.in_width = j.at("in_width").get<int>();
    s.num_classes = j.at("num_classes").get<int>();
    for (const auto& lj : j.at("layers")) {
      const auto kind = lj.at("kind").get<std::string>();
      if (kind == "conv") {
        auto l = LayerSpec::conv(lj.at("out_channels").get<int>(), lj.at("kernel").get<int>());
        l.stride = lj.value("stride", 1);
        s.layers.push_back(l);
      } else if (kind == "maxpool") {
        s.layers.push_back(LayerSpec::maxpool());
      } else if (kind == "relu") {
        s.layers.push_back(LayerSpec::relu());
      } else if (kind == "batchnorm") {
        s.layers.push_back(LayerSpec::batchnorm());
      } else {
        throw FormatError("unknown layer kind '" + kind + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad network description: ") + e.what());
  }
  s.validate();
  return s;
}

/// Parameter names for layer `i`.
inline std::string param_name(std::size_t layer, const char* what) {
  return "layer" + std::to_string(layer) + "." + what;
}

/// He-normal conv weights (std sqrt(2 / fan_in)), zero biases, identity
/// batchnorm. Each layer draws from its own seeded stream.
template <typename T>
ParamStore<T> init_params(const NetworkSpec& spec, std::uint64_t seed) {
  spec.validate();
  ParamStore<T> store;
  int ch = spec.in_channels;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& l = spec.layers[i];
    if (l.kind == LayerKind::Conv) {
      const auto wi = store.add(param_name(i, "weight"),
                                {l.out_channels, ch, l.kernel, l.kernel}, T(0), true);
      store.add(param_name(i, "bias"), {1, l.out_channels, 1, 1}, T(0), true);
      Rng rng(mix_seed(seed, i));
      const double stddev = std::sqrt(2.0 / (ch * l.kernel * l.kernel));
      for (auto& w : store[wi].value.values()) w = static_cast<T>(rng.normal(0.0, stddev));
      ch = l.out_channels;
    } else if (l.kind == LayerKind::BatchNorm) {
      store.add(param_name(i, "gamma"), {1, ch, 1, 1}, T(1), true);
      store.add(param_name(i, "beta"), {1, ch, 1, 1}, T(0), true);
      store.add(param_name(i, "running_mean"), {1, ch, 1, 1}, T(0), false);
      store.add(param_name(i, "running_var"), {1, ch, 1, 1}, T(1), false);
    }
  }
  return store;
}

/// Sequential network over a ParamStore. Caches from the latest forward
/// call feed backward().
template <typename T>
class Network {
 public:
  Network(NetworkSpec spec, ParamStore<T> params)
      : spec_(std::move(spec)), params_(std::move(params)) {
    spec_.validate();
    bind();
  }

  const NetworkSpec& spec() const { return spec_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

  /// Raw head output [N, 2+K, H/8, W/8]: confidence logits, depth, class logits.
  Tensor<T> forward(const Tensor<T>& input, bool training, bool keep_cache = true) {
    const Shape is = input.shape();
    if (is.c != spec_.in_channels || is.h != spec_.in_height || is.w != spec_.in_width)
      throw ShapeError("network input " + is.str() + " does not match spec");
    caches_.assign(keep_cache ? spec_.layers.size() : 0, {});
    Tensor<T> x = input;
    for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
      LayerCache<T>* cache = keep_cache ? &caches_[i] : nullptr;
      if (cache) cache->input_shape = x.shape();
      x = layer_forward(i, std::move(x), training, cache);
      require_finite(x, "output of layer " + std::to_string(i));
    }
    return x;
  }

  /// Zeroes parameter grads, then back-propagates `grad_output`.
  Tensor<T> backward(const Tensor<T>& grad_output) {
    if (caches_.size() != spec_.layers.size())
      throw Error("backward called without a cached forward pass");
    params_.zero_grad();
    Tensor<T> g = grad_output;
    for (std::size_t i = spec_.layers.size(); i-- > 0;) {
      g = layer_backward(i, g);
      require_finite(g, "gradient of layer " + std::to_string(i));
    }
    return g;
  }

 private:
  struct Slots {
    std::size_t first = 0;  // index of the layer's first parameter
  };

  void bind() {
    slots_.assign(spec_.layers.size(), {});
    std::size_t next = 0;
    int ch = spec_.in_channels;
    for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
      const auto& l = spec_.layers[i];
      slots_[i].first = next;
      auto expect = [&](const char* what, Shape shape) {
        if (next >= params_.size() || params_[next].name != param_name(i, what) ||
            params_[next].value.shape() != shape)
          throw ShapeError("parameters do not match network spec at " + param_name(i, what));
        ++next;
      };
      if (l.kind == LayerKind::Conv) {
        expect("weight", {l.out_channels, ch, l.kernel, l.kernel});
        expect("bias", {1, l.out_channels, 1, 1});
        ch = l.out_channels;
      } else if (l.kind == LayerKind::BatchNorm) {
        for (const char* w : {"gamma", "beta", "running_mean", "running_var"})
          expect(w, {1, ch, 1, 1});
      }
    }
    if (next != params_.size()) throw ShapeError("extra parameters beyond network spec");
  }

  Tensor<T> layer_forward(std::size_t i, Tensor<T> x, bool training, LayerCache<T>* cache) {
    const auto& l = spec_.layers[i];
    const std::size_t p = slots_[i].first;
    switch (l.kind) {
      case LayerKind::Conv: {
        auto y = conv_forward(x, params_[p].value, params_[p + 1].value);
        if (cache) cache->input = std::move(x);
        return y;
      }
      case LayerKind::MaxPool:
        return maxpool_forward(x, cache ? &cache->argmax : nullptr);
      case LayerKind::Relu: {
        auto y = relu_forward(x);
        if (cache) cache->output = y;
        return y;
      }
      case LayerKind::BatchNorm:
        return batchnorm_forward<T>(
            x, {params_[p].value, params_[p + 1].value, params_[p + 2].value, params_[p + 3].value},
            training, cache);
    }
    return x;
  }

  Tensor<T> layer_backward(std::size_t i, const Tensor<T>& g) {
    const auto& l = spec_.layers[i];
    const std::size_t p = slots_[i].first;
    auto& cache = caches_[i];
    switch (l.kind) {
      case LayerKind::Conv:
        return conv_backward(cache.input, params_[p].value, g, params_[p].grad,
                             params_[p + 1].grad);
      case LayerKind::MaxPool:
        return maxpool_backward(cache.input_shape, cache.argmax, g);
      case LayerKind::Relu:
        return relu_backward(cache.output, g);
      case LayerKind::BatchNorm:
        return batchnorm_backward(cache, params_[p].value, g, params_[p].grad,
                                  params_[p + 1].grad);
    }
    return g;
  }

  NetworkSpec spec_;
  ParamStore<T> params_;
  std::vector<Slots> slots_;
  std::vector<LayerCache<T>> caches_;
};

}  // namespace monoloc

#endif  // MONOLOC_NETWORK_HPP_
