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

// Grid losses. Each is averaged over the batch of the per-image sum over
// grid cells:
//
//   depth       c * (d_hat - d)^2
//   confidence  (c - c_hat)^2 * BCE(c, c_hat)
//   class       c * sum_k BCE(p_k, p_hat_k)
//
// Probabilities are clamped to [1e-7, 1 - 1e-7] before the logs.

#ifndef MONOLOC_LOSS_HPP_
#define MONOLOC_LOSS_HPP_

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "monoloc/geometry.hpp"
#include "monoloc/tensor.hpp"

namespace monoloc {

inline constexpr double kProbClamp = 1e-7;

struct LossBreakdown {
  double total = 0;
  double depth = 0;
  double confidence = 0;
  double cls = 0;
};

inline double sigmoid(double z) {
  return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

inline double clamp_prob(double p) { return std::clamp(p, kProbClamp, 1.0 - kProbClamp); }

inline double bce(double target, double p) {
  p = clamp_prob(p);
  return -target * std::log(p) - (1.0 - target) * std::log(1.0 - p);
}

/// Per-cell confidence term.
inline double confidence_term(double c, double c_hat) {
  const double p = clamp_prob(c_hat);
  return (c - p) * (c - p) * bce(c, p);
}

/// d(confidence_term)/d(logit) where c_hat = sigmoid(logit). Zero where
/// the clamp is active.
inline double confidence_term_grad_logit(double c, double z) {
  const double s = sigmoid(z);
  if (s < kProbClamp || s > 1.0 - kProbClamp) return 0.0;
  const double d_dp = -2.0 * (c - s) * bce(c, s) + (c - s) * (c - s) * (-c / s + (1.0 - c) / (1.0 - s));
  return d_dp * s * (1.0 - s);
}

/// Cross entropy for class probabilities: each log argument is floored at
/// kProbClamp instead of clamping p, so a one-hot match costs exactly zero.
inline double class_bce(double target, double p) {
  const double a = target > 0 ? -target * std::log(std::max(p, kProbClamp)) : 0.0;
  const double b = target < 1 ? -(1.0 - target) * std::log(std::max(1.0 - p, kProbClamp)) : 0.0;
  return a + b;
}

/// d(class_bce)/d(logit) where p = sigmoid(logit).
inline double class_bce_grad_logit(double target, double z) {
  const double s = sigmoid(z);
  double g = 0;
  if (target > 0 && s > kProbClamp) g -= target * (1.0 - s);
  if (target < 1 && 1.0 - s > kProbClamp) g += (1.0 - target) * s;
  return g;
}

namespace detail {
inline void require_same_grid(const GridMap& a, const GridMap& b) {
  if (!(a.shape == b.shape)) throw ShapeError("grid shapes differ");
}
}  // namespace detail

inline double depth_loss(std::span<const GridMap> pred, std::span<const GridMap> label) {
  if (pred.size() != label.size() || pred.empty()) throw ShapeError("depth_loss: batch size mismatch");
  double total = 0;
  for (std::size_t b = 0; b < pred.size(); ++b) {
    detail::require_same_grid(pred[b], label[b]);
    for (std::size_t i = 0; i < pred[b].cells(); ++i) {
      const double e = pred[b].depth[i] - label[b].depth[i];
      total += label[b].confidence[i] * e * e;
    }
  }
  return total / static_cast<double>(pred.size());
}

inline double confidence_loss(std::span<const GridMap> pred, std::span<const GridMap> label) {
  if (pred.size() != label.size() || pred.empty()) throw ShapeError("confidence_loss: batch size mismatch");
  double total = 0;
  for (std::size_t b = 0; b < pred.size(); ++b) {
    detail::require_same_grid(pred[b], label[b]);
    for (std::size_t i = 0; i < pred[b].cells(); ++i)
      total += confidence_term(label[b].confidence[i], pred[b].confidence[i]);
  }
  return total / static_cast<double>(pred.size());
}

inline double class_loss(std::span<const GridMap> pred, std::span<const GridMap> label) {
  if (pred.size() != label.size() || pred.empty()) throw ShapeError("class_loss: batch size mismatch");
  double total = 0;
  for (std::size_t b = 0; b < pred.size(); ++b) {
    detail::require_same_grid(pred[b], label[b]);
    if (pred[b].num_classes < 1 || label[b].num_classes != pred[b].num_classes)
      throw ShapeError("class_loss: class channels missing");
    const std::size_t cells = pred[b].cells();
    for (int k = 0; k < pred[b].num_classes; ++k)
      for (std::size_t i = 0; i < cells; ++i)
        total += label[b].confidence[i] *
                 class_bce(label[b].class_prob[k * cells + i], pred[b].class_prob[k * cells + i]);
  }
  return total / static_cast<double>(pred.size());
}

/// Losses straight from the raw head output [B, 2+K, rows, cols]
/// (confidence logit, depth, class logits). When `grad` is non-null it
/// receives d(total)/d(raw).
template <typename T>
LossBreakdown grid_losses(const Tensor<T>& raw, std::span<const GridMap> labels, bool use_class_loss,
                          Tensor<T>* grad) {
  const Shape s = raw.shape();
  if (labels.size() != std::size_t(s.n) || s.n == 0) throw ShapeError("grid_losses: batch mismatch");
  const int K = s.c - 2;
  if (K < 0) throw ShapeError("grid_losses: head needs at least two channels");
  if (use_class_loss && K < 1) throw ShapeError("class loss enabled but the head has no class channels");
  if (grad) *grad = Tensor<T>(s);
  const double inv_b = 1.0 / s.n;
  LossBreakdown out;
  for (int b = 0; b < s.n; ++b) {
    const GridMap& lab = labels[b];
    if (lab.shape.rows != s.h || lab.shape.cols != s.w) throw ShapeError("label grid does not match head");
    if (use_class_loss && lab.num_classes != K) throw ShapeError("label class count does not match head");
    const T* zc = raw.plane(b, 0);
    const T* zd = raw.plane(b, 1);
    for (std::size_t i = 0; i < lab.cells(); ++i) {
      const double c = lab.confidence[i];
      const double z = zc[i];
      out.confidence += confidence_term(c, sigmoid(z));
      const double e = static_cast<double>(zd[i]) - lab.depth[i];
      out.depth += c * e * e;
      if (grad) {
        grad->plane(b, 0)[i] = static_cast<T>(confidence_term_grad_logit(c, z) * inv_b);
        grad->plane(b, 1)[i] = static_cast<T>(2.0 * c * e * inv_b);
      }
      if (use_class_loss) {
        for (int k = 0; k < K; ++k) {
          const double zk = raw.plane(b, 2 + k)[i];
          const double p = lab.class_prob[k * lab.cells() + i];
          out.cls += c * class_bce(p, sigmoid(zk));
          if (grad) grad->plane(b, 2 + k)[i] = static_cast<T>(c * class_bce_grad_logit(p, zk) * inv_b);
        }
      }
    }
  }
  out.depth *= inv_b;
  out.confidence *= inv_b;
  out.cls *= inv_b;
  out.total = out.depth + out.confidence + (use_class_loss ? out.cls : 0.0);
  return out;
}

}  // namespace monoloc

#endif  // MONOLOC_LOSS_HPP_
