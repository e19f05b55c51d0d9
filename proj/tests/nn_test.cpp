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


#include <cmath>
#include <set>

#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "monoloc/adam.hpp"
#include "monoloc/network.hpp"

namespace monoloc {
namespace {

using gradcheck::random_tensor;

// Direct six-loop cross-correlation with zero padding.
Tensor<double> naive_conv(const Tensor<double>& in, const Tensor<double>& w, const Tensor<double>& b) {
  const Shape is = in.shape(), ws = w.shape();
  const int pad = (ws.h - 1) / 2;
  Tensor<double> out({is.n, ws.n, is.h, is.w});
  for (int n = 0; n < is.n; ++n)
    for (int o = 0; o < ws.n; ++o)
      for (int y = 0; y < is.h; ++y)
        for (int x = 0; x < is.w; ++x) {
          double acc = b[o];
          for (int c = 0; c < is.c; ++c)
            for (int ky = 0; ky < ws.h; ++ky)
              for (int kx = 0; kx < ws.w; ++kx) {
                const int sy = y + ky - pad, sx = x + kx - pad;
                if (sy >= 0 && sy < is.h && sx >= 0 && sx < is.w) acc += w.at(o, c, ky, kx) * in.at(n, c, sy, sx);
              }
          out.at(n, o, y, x) = acc;
        }
  return out;
}

TEST(Conv, CenterDeltaKernelIsIdentity) {
  Rng rng(1);
  const auto in = random_tensor({1, 1, 7, 9}, rng);
  Tensor<double> w({1, 1, 3, 3}), b({1, 1, 1, 1});
  w.at(0, 0, 1, 1) = 1;
  const auto out = conv_forward(in, w, b);
  for (std::size_t i = 0; i < in.size(); ++i) EXPECT_EQ(out[i], in[i]);
}

TEST(Conv, MatchesNaiveLoops) {
  Rng rng(2);
  for (int k : {1, 3, 5}) {
    const auto in = random_tensor({1, 2, 8, 8}, rng);
    const auto w = random_tensor({3, 2, k, k}, rng);
    const auto b = random_tensor({1, 3, 1, 1}, rng);
    const auto got = conv_forward(in, w, b), want = naive_conv(in, w, b);
    for (std::size_t i = 0; i < got.size(); ++i) ASSERT_NEAR(got[i], want[i], 1e-12);
    // float path against the double oracle
    const auto gotf = conv_forward(in.cast<float>(), w.cast<float>(), b.cast<float>());
    for (std::size_t i = 0; i < got.size(); ++i) ASSERT_NEAR(gotf[i], want[i], 1e-5);
  }
}

TEST(Conv, RejectsChannelMismatch) {
  Tensor<double> in({1, 2, 4, 4}), w({1, 3, 3, 3}), b({1, 1, 1, 1});
  EXPECT_THROW(conv_forward(in, w, b), ShapeError);
}

TEST(MaxPool, ConstantInputHalvesSize) {
  Tensor<float> in({2, 3, 6, 8});
  in.fill(2.5f);
  const auto out = maxpool_forward<float>(in, nullptr);
  EXPECT_EQ(out.shape(), (Shape{2, 3, 3, 4}));
  for (float v : out.values()) EXPECT_EQ(v, 2.5f);
}

TEST(MaxPool, OddSizeIsAnError) {
  EXPECT_THROW(maxpool_forward<float>(Tensor<float>({1, 1, 5, 4}), nullptr), ShapeError);
}

TEST(MaxPool, BackwardRoutesToArgmaxPerWindow) {
  Rng rng(3);
  const auto in = random_tensor({2, 2, 6, 6}, rng);
  std::vector<std::int32_t> argmax;
  const auto out = maxpool_forward(in, &argmax);
  const auto g = random_tensor(out.shape(), rng);
  const auto gi = maxpool_backward(in.shape(), argmax, g);
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 2; ++c)
      for (int y = 0; y < 3; ++y)
        for (int x = 0; x < 3; ++x) {
          int nonzero = 0;
          double sum = 0, best = -1e300;
          int by = 0, bx = 0;
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
              const double v = in.at(n, c, 2 * y + dy, 2 * x + dx);
              if (v > best) best = v, by = dy, bx = dx;
              const double gv = gi.at(n, c, 2 * y + dy, 2 * x + dx);
              sum += gv;
              nonzero += gv != 0;
            }
          EXPECT_EQ(out.at(n, c, y, x), best);
          EXPECT_EQ(nonzero, 1);
          EXPECT_EQ(sum, g.at(n, c, y, x));
          EXPECT_EQ(gi.at(n, c, 2 * y + by, 2 * x + bx), g.at(n, c, y, x));
        }
}

TEST(Relu, PositiveInputsPassGradientThrough) {
  Rng rng(4);
  const auto in = random_tensor({1, 2, 4, 4}, rng, 0.1, 1);
  const auto g = random_tensor(in.shape(), rng);
  const auto gi = relu_backward(relu_forward(in), g);
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_EQ(gi[i], g[i]);
}

TEST(BatchNorm, TrainingNormalizesPerChannel) {
  Rng rng(5);
  const auto in = random_tensor({3, 4, 6, 6}, rng, -3, 7);
  Tensor<double> gamma({1, 4, 1, 1}), beta({1, 4, 1, 1}), mean({1, 4, 1, 1}), var({1, 4, 1, 1});
  gamma.fill(1);
  var.fill(1);
  const auto out = batchnorm_forward<double>(in, {gamma, beta, mean, var}, true, nullptr);
  for (int c = 0; c < 4; ++c) {
    double s = 0, ss = 0;
    for (int n = 0; n < 3; ++n)
      for (int i = 0; i < 36; ++i) s += out.plane(n, c)[i];
    const double m = s / 108;
    for (int n = 0; n < 3; ++n)
      for (int i = 0; i < 36; ++i) ss += (out.plane(n, c)[i] - m) * (out.plane(n, c)[i] - m);
    EXPECT_NEAR(m, 0, 1e-5);
    EXPECT_NEAR(ss / 108, 1, 1e-5);
  }
}

TEST(BatchNorm, RunningStatisticsUseMomentum) {
  Tensor<double> in({1, 1, 1, 2});
  in[0] = 1;
  in[1] = 3;
  Tensor<double> gamma({1, 1, 1, 1}), beta({1, 1, 1, 1}), mean({1, 1, 1, 1}), var({1, 1, 1, 1});
  gamma.fill(1);
  var.fill(1);
  batchnorm_forward<double>(in, {gamma, beta, mean, var}, true, nullptr);
  EXPECT_NEAR(mean[0], 0.1 * 2, 1e-15);
  EXPECT_NEAR(var[0], 0.9 + 0.1 * 2, 1e-15);  // unbiased batch variance is 2
}

TEST(BatchNorm, EvalUsesRunningStatistics) {
  Tensor<double> in({1, 1, 1, 2});
  in[0] = 1;
  in[1] = 3;
  Tensor<double> gamma({1, 1, 1, 1}), beta({1, 1, 1, 1}), mean({1, 1, 1, 1}), var({1, 1, 1, 1});
  gamma.fill(2);
  beta.fill(0.5);
  mean.fill(1);
  var.fill(4 - kBatchNormEps);
  const auto out = batchnorm_forward<double>(in, {gamma, beta, mean, var}, false, nullptr);
  EXPECT_NEAR(out[0], 0.5, 1e-12);
  EXPECT_NEAR(out[1], 2.5, 1e-12);
}

TEST(GradientCheck, EveryLayerAndLossMatchesCentralDifferences) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    for (const auto& r : gradcheck::all(seed, 3)) {
      EXPECT_LT(r.max_rel_error, gradcheck::kTolerance) << r.name << " seed " << seed;
      EXPECT_GT(r.checked, 0u) << r.name;
    }
  }
}

TEST(Adam, ZeroGradientsLeaveParametersUnchanged) {
  ParamStore<float> ps;
  ps.add("w", {1, 1, 2, 2}, 0.75f, true);
  AdamState<float> st(ps);
  for (int i = 0; i < 5; ++i) adam_step(st, ps, 0.1);
  for (float v : ps[0].value.values()) EXPECT_EQ(v, 0.75f);
}

TEST(Adam, FirstStepIsBiasCorrectedUnitStep) {
  ParamStore<double> ps;
  ps.add("w", {1, 1, 1, 1}, 0.0, true);
  ps[0].grad[0] = 1;
  AdamState<double> st(ps);
  adam_step(st, ps, 0.1);
  // m-hat = 1, v-hat = 1, so the step is lr / (1 + eps)
  EXPECT_NEAR(ps[0].value[0], -0.1 / (1 + 1e-8), 1e-15);
}

TEST(Adam, FrozenParametersAreSkipped) {
  ParamStore<double> ps;
  ps.add("frozen", {1, 1, 1, 1}, 2.0, false);
  ps[0].grad[0] = 1;
  AdamState<double> st(ps);
  adam_step(st, ps, 0.1);
  EXPECT_EQ(ps[0].value[0], 2.0);
}

TEST(Adam, NonFiniteGradientIsAnError) {
  ParamStore<float> ps;
  ps.add("w", {1, 1, 1, 1}, 0.f, true);
  ps[0].grad[0] = std::nanf("");
  AdamState<float> st(ps);
  EXPECT_THROW(adam_step(st, ps, 0.1), NonFiniteError);
}

TEST(Adam, HundredStepsAreBitIdentical) {
  auto run = [] {
    ParamStore<float> ps;
    ps.add("w", {1, 2, 3, 3}, 0.5f, true);
    AdamState<float> st(ps);
    Rng rng(8);
    for (int s = 0; s < 100; ++s) {
      for (auto& g : ps[0].grad.values()) g = static_cast<float>(rng.normal());
      adam_step(st, ps, 1e-2);
    }
    return std::vector<float>(ps[0].value.values().begin(), ps[0].value.values().end());
  };
  EXPECT_EQ(run(), run());
}

TEST(Init, HeScaledStandardDeviation) {
  NetworkSpec spec = NetworkSpec::default_spec();
  std::vector<double> draws;
  for (std::uint64_t seed = 0; draws.size() < 10000; ++seed) {
    const auto ps = init_params<double>(spec, seed);
    for (double v : ps.find("layer0.weight")->value.values()) draws.push_back(v);
  }
  double s = 0, ss = 0;
  for (double v : draws) s += v;
  const double m = s / draws.size();
  for (double v : draws) ss += (v - m) * (v - m);
  const double sd = std::sqrt(ss / draws.size());
  EXPECT_NEAR(sd, std::sqrt(2.0 / 27), 0.2 * std::sqrt(2.0 / 27));
}

TEST(Init, SameSeedSameStoreAndIdentityBatchNorm) {
  const auto spec = NetworkSpec::default_spec();
  const auto a = init_params<float>(spec, 3), b = init_params<float>(spec, 3), c = init_params<float>(spec, 4);
  ASSERT_EQ(a.size(), b.size());
  bool differs = false;
  std::set<std::string> names;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_TRUE(names.insert(a[i].name).second);
    for (std::size_t j = 0; j < a[i].value.size(); ++j) {
      EXPECT_EQ(a[i].value[j], b[i].value[j]);
      differs |= a[i].value[j] != c[i].value[j];
    }
    if (a[i].name.ends_with("gamma")) {
      for (float v : a[i].value.values()) EXPECT_EQ(v, 1.0f);
    }
    if (a[i].name.ends_with("bias") || a[i].name.ends_with("beta")) {
      for (float v : a[i].value.values()) EXPECT_EQ(v, 0.0f);
    }
  }
  EXPECT_TRUE(differs);
}

TEST(Network, DefaultSpecShapes) {
  const auto spec = NetworkSpec::default_spec();
  Network<float> net(spec, init_params<float>(spec, 0));
  Tensor<float> in({1, 3, 224, 320});
  const auto out = net.forward(in, false, false);
  EXPECT_EQ(out.shape(), (Shape{1, 2, 28, 40}));
}

TEST(Network, SpecValidationAndJsonRoundTrip) {
  auto spec = NetworkSpec::default_spec(2);
  EXPECT_EQ(network_spec_from_json(to_json(spec)), spec);
  spec.layers.pop_back();
  EXPECT_THROW(spec.validate(), ShapeError);
  auto even = NetworkSpec::default_spec();
  even.layers[0].kernel = 2;
  EXPECT_THROW(even.validate(), ShapeError);
}

TEST(Network, NonFiniteInputIsAnError) {
  const auto spec = NetworkSpec::default_spec();
  Network<float> net(spec, init_params<float>(spec, 0));
  Tensor<float> in({1, 3, 224, 320});
  in[5] = INFINITY;
  EXPECT_THROW(net.forward(in, false), NonFiniteError);
}

TEST(Network, ParametersMustMatchSpec) {
  const auto spec = NetworkSpec::default_spec();
  EXPECT_THROW(Network<float>(spec, init_params<float>(NetworkSpec::default_spec(1), 0)), ShapeError);
}

}  // namespace
}  // namespace monoloc
