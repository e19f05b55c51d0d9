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

// Forward and backward kernels for the four layer kinds used by the
// localization network: same-size convolution, 2x2 max pooling, ReLU and
// batch normalization. All kernels are templated on the scalar so the
// 64-bit instantiation can be checked against finite differences.

#ifndef MONOLOC_LAYERS_HPP_
#define MONOLOC_LAYERS_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "monoloc/tensor.hpp"

namespace monoloc {

enum class LayerKind { Conv, MaxPool, Relu, BatchNorm };

inline const char* to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::Conv: return "conv";
    case LayerKind::MaxPool: return "maxpool";
    case LayerKind::Relu: return "relu";
    case LayerKind::BatchNorm: return "batchnorm";
  }
  return "?";
}

struct LayerSpec {
  LayerKind kind = LayerKind::Relu;
  int out_channels = 0;  // conv only
  int kernel = 0;        // conv only, odd
  int stride = 1;        // conv only, always 1

  static LayerSpec conv(int out_channels, int kernel) {
    return {LayerKind::Conv, out_channels, kernel, 1};
  }
  static LayerSpec maxpool() { return {LayerKind::MaxPool}; }
  static LayerSpec relu() { return {LayerKind::Relu}; }
  static LayerSpec batchnorm() { return {LayerKind::BatchNorm}; }

  int padding() const { return (kernel - 1) / 2; }
  bool operator==(const LayerSpec&) const = default;
};

/// Batchnorm constants; momentum is the weight on the previous running value.
inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.9;

template <typename T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool trainable = true;
};

/// Ordered named parameters; order follows the layer order.
template <typename T>
class ParamStore {
 public:
  std::size_t add(std::string name, Shape shape, T fill, bool trainable) {
    for (const auto& p : params_)
      if (p.name == name) throw Error("duplicate parameter name " + name);
    params_.push_back(
        {std::move(name), Tensor<T>(shape, fill), Tensor<T>(shape), trainable});
    return params_.size() - 1;
  }

  std::size_t size() const { return params_.size(); }
  Param<T>& operator[](std::size_t i) { return params_[i]; }
  const Param<T>& operator[](std::size_t i) const { return params_[i]; }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  const Param<T>* find(const std::string& name) const {
    for (const auto& p : params_)
      if (p.name == name) return &p;
    return nullptr;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.grad.fill(T(0));
  }

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& p : params_) {
      auto i = out.add(p.name, p.value.shape(), U(0), p.trainable);
      out[i].value = p.value.template cast<U>();
    }
    return out;
  }

 private:
  std::vector<Param<T>> params_;
};

/// Values needed by the backward pass of one layer.
template <typename T>
struct LayerCache {
  Tensor<T> input;                  // conv
  Tensor<T> output;                 // relu
  std::vector<std::int32_t> argmax; // maxpool
  Shape input_shape;
  Tensor<T> normalized;             // batchnorm, x-hat
  std::vector<T> inv_std;           // batchnorm
  bool training = false;
};

// ---------------------------------------------------------------------------
// Convolution: cross-correlation, stride 1, zero padding (k-1)/2.
// weight shape [out, in, k, k], bias shape [1, out, 1, 1].

template <typename T>
Tensor<T> conv_forward(const Tensor<T>& in, const Tensor<T>& weight,
                       const Tensor<T>& bias) {
  const Shape is = in.shape();
  const Shape ws = weight.shape();
  if (ws.c != is.c || ws.h != ws.w || ws.h % 2 == 0 || bias.size() != std::size_t(ws.n))
    throw ShapeError("conv: input " + is.str() + " incompatible with weight " +
                     ws.str());
  const int k = ws.h, pad = (k - 1) / 2, H = is.h, W = is.w;
  Tensor<T> out({is.n, ws.n, H, W});
  for (int n = 0; n < is.n; ++n) {
    for (int o = 0; o < ws.n; ++o) {
      T* op = out.plane(n, o);
      std::fill(op, op + out.shape().plane(), bias[o]);
      for (int y = 0; y < H; ++y) {
        T* orow = op + static_cast<std::size_t>(y) * W;
        for (int c = 0; c < is.c; ++c) {
          const T* ip = in.plane(n, c);
          const T* wp = weight.data() + weight.index(o, c, 0, 0);
          for (int ky = 0; ky < k; ++ky) {
            const int sy = y + ky - pad;
            if (sy < 0 || sy >= H) continue;
            const T* irow = ip + static_cast<std::size_t>(sy) * W;
            for (int kx = 0; kx < k; ++kx) {
              const int dx = kx - pad;
              const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
              const T wv = wp[ky * k + kx];
              const T* src = irow + dx;
              for (int x = x0; x < x1; ++x) orow[x] += wv * src[x];
            }
          }
        }
      }
    }
  }
  return out;
}

/// Returns grad w.r.t. input; accumulates weight/bias grads into the outputs.
template <typename T>
Tensor<T> conv_backward(const Tensor<T>& in, const Tensor<T>& weight,
                        const Tensor<T>& grad_out, Tensor<T>& grad_weight,
                        Tensor<T>& grad_bias) {
  const Shape is = in.shape();
  const Shape ws = weight.shape();
  if (grad_out.shape() != Shape{is.n, ws.n, is.h, is.w})
    throw ShapeError("conv backward: grad shape " + grad_out.shape().str());
  const int k = ws.h, pad = (k - 1) / 2, H = is.h, W = is.w;

  for (int o = 0; o < ws.n; ++o) {
    T b = 0;
    for (int n = 0; n < is.n; ++n)
      b += detail::lane_sum(grad_out.plane(n, o), H * W);
    grad_bias[o] += b;
  }

  for (int o = 0; o < ws.n; ++o) {
    for (int c = 0; c < is.c; ++c) {
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          const int dy = ky - pad, dx = kx - pad;
          const int y0 = std::max(0, -dy), y1 = std::min(H, H - dy);
          const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
          T acc = 0;
          for (int n = 0; n < is.n; ++n) {
            const T* gp = grad_out.plane(n, o);
            const T* ip = in.plane(n, c);
            for (int y = y0; y < y1; ++y) {
              acc += detail::lane_dot(
                  gp + static_cast<std::size_t>(y) * W + x0,
                  ip + static_cast<std::size_t>(y + dy) * W + x0 + dx, x1 - x0);
            }
          }
          grad_weight.at(o, c, ky, kx) += acc;
        }
      }
    }
  }

  Tensor<T> grad_in(is);
  for (int n = 0; n < is.n; ++n) {
    for (int c = 0; c < is.c; ++c) {
      T* gip = grad_in.plane(n, c);
      for (int sy = 0; sy < H; ++sy) {
        T* grow = gip + static_cast<std::size_t>(sy) * W;
        for (int o = 0; o < ws.n; ++o) {
          const T* gp = grad_out.plane(n, o);
          const T* wp = weight.data() + weight.index(o, c, 0, 0);
          for (int ky = 0; ky < k; ++ky) {
            const int y = sy - (ky - pad);
            if (y < 0 || y >= H) continue;
            const T* gorow = gp + static_cast<std::size_t>(y) * W;
            for (int kx = 0; kx < k; ++kx) {
              const int dx = kx - pad;
              const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
              const T wv = wp[ky * k + kx];
              T* dst = grow + dx;
              for (int x = x0; x < x1; ++x) dst[x] += wv * gorow[x];
            }
          }
        }
      }
    }
  }
  return grad_in;
}

// ---------------------------------------------------------------------------
// 2x2 max pooling with stride 2. Ties go to the first element in row-major
// window order.

template <typename T>
Tensor<T> maxpool_forward(const Tensor<T>& in, std::vector<std::int32_t>* argmax) {
  const Shape is = in.shape();
  if (is.h % 2 != 0 || is.w % 2 != 0)
    throw ShapeError("maxpool: odd spatial size " + is.str());
  const int OH = is.h / 2, OW = is.w / 2;
  Tensor<T> out({is.n, is.c, OH, OW});
  if (argmax) argmax->assign(out.size(), 0);
  std::size_t oi = 0;
  for (int n = 0; n < is.n; ++n) {
    for (int c = 0; c < is.c; ++c) {
      const std::size_t base = in.index(n, c, 0, 0);
      for (int y = 0; y < OH; ++y) {
        for (int x = 0; x < OW; ++x, ++oi) {
          std::size_t best = base + static_cast<std::size_t>(2 * y) * is.w + 2 * x;
          const std::size_t cand[3] = {best + 1, best + is.w, best + is.w + 1};
          for (std::size_t j : cand)
            if (in[j] > in[best]) best = j;
          out[oi] = in[best];
          if (argmax) (*argmax)[oi] = static_cast<std::int32_t>(best);
        }
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> maxpool_backward(const Shape& in_shape,
                           const std::vector<std::int32_t>& argmax,
                           const Tensor<T>& grad_out) {
  if (argmax.size() != grad_out.size())
    throw ShapeError("maxpool backward: cache mismatch");
  Tensor<T> grad_in(in_shape);
  for (std::size_t i = 0; i < argmax.size(); ++i) grad_in[argmax[i]] += grad_out[i];
  return grad_in;
}

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> relu_forward(const Tensor<T>& in) {
  Tensor<T> out(in.shape());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] > T(0) ? in[i] : T(0);
  return out;
}

/// Uses the forward output: gradient passes where the output is positive.
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& out, const Tensor<T>& grad_out) {
  if (out.shape() != grad_out.shape()) throw ShapeError("relu backward: shape");
  Tensor<T> grad_in(out.shape());
  for (std::size_t i = 0; i < out.size(); ++i)
    grad_in[i] = out[i] > T(0) ? grad_out[i] : T(0);
  return grad_in;
}

// ---------------------------------------------------------------------------
// Batch normalization over (N, H, W) per channel.

template <typename T>
struct BatchNormParams {
  const Tensor<T>& gamma;
  const Tensor<T>& beta;
  Tensor<T>& running_mean;
  Tensor<T>& running_var;
};

template <typename T>
Tensor<T> batchnorm_forward(const Tensor<T>& in, BatchNormParams<T> p,
                            bool training, LayerCache<T>* cache) {
  const Shape is = in.shape();
  if (p.gamma.size() != std::size_t(is.c))
    throw ShapeError("batchnorm: channel mismatch for " + is.str());
  const int plane = static_cast<int>(is.plane());
  const T count = static_cast<T>(static_cast<std::size_t>(is.n) * plane);
  Tensor<T> out(is);
  Tensor<T> xhat;
  std::vector<T> inv_std(is.c);
  if (cache) xhat = Tensor<T>(is);

  for (int c = 0; c < is.c; ++c) {
    T mean, var;
    if (training) {
      T s = 0;
      for (int n = 0; n < is.n; ++n) s += detail::lane_sum(in.plane(n, c), plane);
      mean = s / count;
      T ss = 0;
      for (int n = 0; n < is.n; ++n) {
        const T* xp = in.plane(n, c);
        for (int i = 0; i < plane; ++i) {
          const T d = xp[i] - mean;
          ss += d * d;
        }
      }
      var = ss / count;
      const T m = static_cast<T>(kBatchNormMomentum);
      const T unbiased = count > 1 ? var * count / (count - 1) : var;
      p.running_mean[c] = m * p.running_mean[c] + (1 - m) * mean;
      p.running_var[c] = m * p.running_var[c] + (1 - m) * unbiased;
    } else {
      mean = p.running_mean[c];
      var = p.running_var[c];
    }
    const T istd = T(1) / std::sqrt(var + static_cast<T>(kBatchNormEps));
    inv_std[c] = istd;
    const T g = p.gamma[c], b = p.beta[c];
    for (int n = 0; n < is.n; ++n) {
      const T* xp = in.plane(n, c);
      T* yp = out.plane(n, c);
      T* hp = cache ? xhat.plane(n, c) : nullptr;
      for (int i = 0; i < plane; ++i) {
        const T h = (xp[i] - mean) * istd;
        if (hp) hp[i] = h;
        yp[i] = g * h + b;
      }
    }
  }
  if (cache) {
    cache->normalized = std::move(xhat);
    cache->inv_std = std::move(inv_std);
    cache->training = training;
    cache->input_shape = is;
  }
  return out;
}

template <typename T>
Tensor<T> batchnorm_backward(const LayerCache<T>& cache, const Tensor<T>& gamma,
                             const Tensor<T>& grad_out, Tensor<T>& grad_gamma,
                             Tensor<T>& grad_beta) {
  const Shape is = cache.input_shape;
  if (grad_out.shape() != is) throw ShapeError("batchnorm backward: shape");
  const int plane = static_cast<int>(is.plane());
  const T count = static_cast<T>(static_cast<std::size_t>(is.n) * plane);
  Tensor<T> grad_in(is);
  for (int c = 0; c < is.c; ++c) {
    T sum_dy = 0, sum_dy_h = 0;
    for (int n = 0; n < is.n; ++n) {
      sum_dy += detail::lane_sum(grad_out.plane(n, c), plane);
      sum_dy_h += detail::lane_dot(grad_out.plane(n, c),
                                   cache.normalized.plane(n, c), plane);
    }
    grad_gamma[c] += sum_dy_h;
    grad_beta[c] += sum_dy;
    const T g = gamma[c], istd = cache.inv_std[c];
    for (int n = 0; n < is.n; ++n) {
      const T* dy = grad_out.plane(n, c);
      const T* h = cache.normalized.plane(n, c);
      T* dx = grad_in.plane(n, c);
      if (cache.training) {
        const T scale = g * istd / count;
        for (int i = 0; i < plane; ++i)
          dx[i] = scale * (count * dy[i] - sum_dy - h[i] * sum_dy_h);
      } else {
        for (int i = 0; i < plane; ++i) dx[i] = g * istd * dy[i];
      }
    }
  }
  return grad_in;
}

}  // namespace monoloc

#endif  // MONOLOC_LAYERS_HPP_
