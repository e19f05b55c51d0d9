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

#ifndef MONOLOC_ADAM_HPP_
#define MONOLOC_ADAM_HPP_

#include <cmath>
#include <vector>

#include "monoloc/layers.hpp"

namespace monoloc {

template <typename T>
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step = 0;
  std::vector<Tensor<T>> first;   // one per parameter, empty for frozen ones
  std::vector<Tensor<T>> second;

  explicit AdamState(const ParamStore<T>& params) {
    for (const auto& p : params) {
      first.emplace_back(p.trainable ? p.value.shape() : Shape{});
      second.emplace_back(p.trainable ? p.value.shape() : Shape{});
    }
  }
};

/// One bias-corrected Adam update using the grads stored in `params`.
template <typename T>
void adam_step(AdamState<T>& state, ParamStore<T>& params, double lr) {
  if (state.first.size() != params.size()) throw ShapeError("adam: state does not match parameters");
  for (const auto& p : params)
    if (p.trainable) require_finite(p.grad, "gradient of " + p.name);
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  const T b1 = static_cast<T>(state.beta1), b2 = static_cast<T>(state.beta2);
  const T step_size = static_cast<T>(lr / c1);
  const T inv_c2 = static_cast<T>(1.0 / c2);
  const T eps = static_cast<T>(state.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (!p.trainable) continue;
    auto& m = state.first[i];
    auto& v = state.second[i];
    if (m.shape() != p.value.shape()) throw ShapeError("adam: moment shape mismatch for " + p.name);
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      const T g = p.grad[j];
      m[j] = b1 * m[j] + (T(1) - b1) * g;
      v[j] = b2 * v[j] + (T(1) - b2) * g * g;
      p.value[j] -= step_size * m[j] / (std::sqrt(v[j] * inv_c2) + eps);
    }
  }
}

}  // namespace monoloc

#endif  // MONOLOC_ADAM_HPP_
