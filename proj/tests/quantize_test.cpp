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

#include <gtest/gtest.h>

#include "monoloc/quantize.hpp"
#include "support.hpp"

namespace monoloc {
namespace {

using testing::TempDir;

// A trained-looking checkpoint: He init plus non-trivial batchnorm state.
Checkpoint perturbed_checkpoint(std::uint64_t seed) {
  Checkpoint ckpt = Checkpoint::fresh(NetworkSpec::default_spec(), seed);
  Rng rng(seed + 100);
  for (auto& p : ckpt.params) {
    for (auto& v : p.value.values()) {
      if (p.name.ends_with("gamma")) v = static_cast<float>(rng.uniform(0.5, 1.5));
      else if (p.name.ends_with("beta")) v = static_cast<float>(rng.uniform(-0.3, 0.3));
      else if (p.name.ends_with("running_mean")) v = static_cast<float>(rng.uniform(-0.5, 0.5));
      else if (p.name.ends_with("running_var")) v = static_cast<float>(rng.uniform(0.2, 3.0));
      else if (p.name.ends_with("bias")) v = static_cast<float>(rng.uniform(-0.1, 0.1));
    }
  }
  return ckpt;
}

std::vector<Image> images(std::size_t n, std::uint64_t seed) {
  std::vector<Image> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(procedural_background(mix_seed(seed, i)));
  return out;
}

TEST(Quantizer, ScaleFromMaxAbs) {
  EXPECT_NEAR(scale_for(0.635), 0.005, 1e-15);
  EXPECT_EQ(scale_for(0.0), kScaleFloor);
  EXPECT_EQ(quantize_value(0.0, 0.01), 0);
  EXPECT_EQ(quantize_value(0.635, 0.005), 127);
  EXPECT_EQ(quantize_value(10.0, 0.005), 127);
  EXPECT_EQ(quantize_value(-10.0, 0.005), -127);
}

TEST(Quantizer, SymmetricAndRoundingBound) {
  Rng rng(1);
  for (int i = 0; i < 100000; ++i) {
    const double s = std::exp(rng.uniform(-10, 2));
    const double x = rng.uniform(-127, 127) * s;
    const auto q = quantize_value(x, s);
    ASSERT_EQ(quantize_value(-x, s), -q);
    ASSERT_LE(std::abs(x - dequantize_value(q, s)), s / 2 * (1 + 1e-12));
    const double big = (130 + rng.uniform(0, 100)) * s;
    ASSERT_EQ(quantize_value(big, s), 127);
    ASSERT_EQ(quantize_value(-big, s), -127);
  }
}

TEST(Fold, IdentityBatchNormKeepsWeights) {
  const Checkpoint ckpt = Checkpoint::fresh(NetworkSpec::default_spec(), 3);
  const Checkpoint folded = fold_batchnorm(ckpt);
  EXPECT_FALSE(detail::has_batchnorm(folded.spec));
  EXPECT_EQ(folded.spec.layers.size(), ckpt.spec.layers.size() - 4);
  const auto* w0 = ckpt.params.find("layer0.weight");
  const auto* f0 = folded.params.find("layer0.weight");
  ASSERT_TRUE(w0 && f0);
  const double f = 1 / std::sqrt(1 + kBatchNormEps);
  for (std::size_t i = 0; i < w0->value.size(); ++i) EXPECT_NEAR(f0->value[i], w0->value[i] * f, 1e-7);
}

TEST(Fold, ForwardOutputsUnchanged) {
  const Checkpoint ckpt = perturbed_checkpoint(4);
  const Checkpoint folded = fold_batchnorm(ckpt);
  Model a(ckpt), b(folded);
  double worst = 0;
  for (const auto& img : images(20, 4)) {
    const auto ra = a.network().forward(image_to_tensor<float>(img), false, false);
    const auto rb = b.network().forward(image_to_tensor<float>(img), false, false);
    for (std::size_t i = 0; i < ra.size(); ++i) worst = std::max(worst, double(std::abs(ra[i] - rb[i])));
  }
  EXPECT_LT(worst, 1e-4);
}

TEST(Fold, ZeroVarianceIsAnError) {
  Checkpoint ckpt = Checkpoint::fresh(NetworkSpec::default_spec(), 1);
  for (auto& p : ckpt.params)
    if (p.name == "layer5.running_var") p.value[2] = 0;
  EXPECT_THROW(fold_batchnorm(ckpt), Error);
}

TEST(Calibrate, ScalesFromMaxima) {
  const Checkpoint folded = fold_batchnorm(perturbed_checkpoint(5));
  const auto imgs = images(3, 5);
  const QuantParams qp = calibrate(folded, imgs);
  ASSERT_EQ(qp.weight_scales.size(), 5u);
  ASSERT_EQ(qp.activation_scales.size(), 5u);
  const auto& w = folded.params.find("layer0.weight")->value;
  double m = 0;
  for (float v : w.values()) m = std::max(m, double(std::abs(v)));
  EXPECT_DOUBLE_EQ(qp.weight_scales[0], m / 127);
  for (double s : qp.activation_scales) EXPECT_GT(s, 0);
  EXPECT_THROW(calibrate(folded, {}), Error);
  EXPECT_THROW(calibrate(perturbed_checkpoint(5), imgs), Error);
}

TEST(Calibrate, MoreImagesOnlyGrowScales) {
  const Checkpoint folded = fold_batchnorm(perturbed_checkpoint(6));
  const auto few = images(2, 6), many = images(4, 6);
  const auto a = calibrate(folded, few), b = calibrate(folded, many);
  EXPECT_LE(a.input_scale, b.input_scale);
  for (std::size_t i = 0; i < a.activation_scales.size(); ++i) EXPECT_LE(a.activation_scales[i], b.activation_scales[i]);
}

TEST(Calibrate, ZeroActivationsGetTheFloor) {
  Checkpoint ckpt = Checkpoint::fresh(NetworkSpec::default_spec(), 2);
  for (auto& p : ckpt.params)
    if (p.name == "layer0.weight") p.value.fill(0);
  const auto qp = calibrate(fold_batchnorm(ckpt), images(1, 2));
  EXPECT_EQ(qp.weight_scales[0], kScaleFloor);
}

TEST(Quantized, WeightsInRangeAndBiasScale) {
  const Checkpoint folded = fold_batchnorm(perturbed_checkpoint(7));
  const auto qp = calibrate(folded, images(2, 7));
  const auto qm = quantize_model(folded, qp);
  ASSERT_EQ(qm.convs.size(), 5u);
  double s_in = qp.input_scale;
  for (std::size_t c = 0; c < qm.convs.size(); ++c) {
    const auto& qc = qm.convs[c];
    for (auto v : qc.weight.values()) {
      EXPECT_GE(v, -127);
      EXPECT_LE(v, 127);
    }
    EXPECT_EQ(qc.input_scale, s_in);
    const auto& b = folded.params.find(param_name(qc.layer, "bias"))->value;
    for (std::size_t o = 0; o < qc.bias.size(); ++o)
      EXPECT_EQ(qc.bias[o], static_cast<std::int32_t>(std::round(b[o] / (qc.input_scale * qc.weight_scale))));
    s_in = qc.output_scale;
  }
}

TEST(Quantized, ZeroWeightConvGivesZeroOutput) {
  Tensor<std::int32_t> in({1, 2, 6, 6});
  Rng rng(1);
  for (auto& v : in.values()) v = static_cast<std::int32_t>(rng.below(255)) - 127;
  Tensor<std::int32_t> w({3, 2, 3, 3}), b({1, 3, 1, 1});
  const auto out = conv_forward(in, w, b);
  for (auto v : out.values()) EXPECT_EQ(v, 0);

  Checkpoint ckpt = Checkpoint::fresh(NetworkSpec::default_spec(), 1);
  for (auto& p : ckpt.params)
    if (p.name.ends_with("weight") || p.name.ends_with("bias")) p.value.fill(0);
  const auto qm = quantize_checkpoint(ckpt, images(1, 1));
  const auto raw = quantized_head(qm, images(1, 9)[0]);
  for (float v : raw.values()) EXPECT_EQ(v, 0.0f);
}

TEST(Quantized, OverflowRiskIsRejected) {
  const Checkpoint folded = fold_batchnorm(perturbed_checkpoint(8));
  auto qp = calibrate(folded, images(1, 8));
  qp.input_scale = 1e-12;  // bias codes explode
  EXPECT_THROW(quantize_model(folded, qp), Error);
}

// Every weight and activation lands exactly on its grid, so the integer
// pipeline and the float network agree to within one head-output step.
TEST(Quantized, ExactFixtureAgreesWithinOneStep) {
  NetworkSpec spec;
  spec.layers = {LayerSpec::conv(1, 1), LayerSpec::relu(), LayerSpec::maxpool(), LayerSpec::maxpool(),
                 LayerSpec::maxpool(), LayerSpec::conv(2, 1)};
  spec.in_height = 16;
  spec.in_width = 16;
  Checkpoint ckpt{spec, 0, 0, init_params<float>(spec, 0)};
  auto& w0 = ckpt.params[0].value;
  w0[0] = 127 / 64.0f;
  w0[1] = 64 / 64.0f;
  w0[2] = -32 / 64.0f;
  auto& w1 = ckpt.params[2].value;
  w1[0] = 127 / 128.0f;
  w1[1] = -64 / 128.0f;
  Image img(16, 16, 3, 0);
  Rng rng(3);
  for (auto& p : img.pixels) p = rng.below(2) ? 255 : 0;
  for (int c = 0; c < 3; ++c) img.at(0, 0)[c] = c == 0 ? 255 : 0;  // reaches the activation maximum
  const auto qm = quantize_checkpoint(ckpt, {img});
  EXPECT_EQ(qm.convs[0].weight_scale, 1 / 64.0);
  EXPECT_EQ(qm.convs[1].weight_scale, 1 / 128.0);
  const auto fq = quantized_head(qm, img);
  Model fm(ckpt);
  const auto ff = fm.network().forward(image_to_tensor<float>(img), false, false);
  const double step = qm.convs[1].input_scale * qm.convs[1].weight_scale;
  for (std::size_t i = 0; i < ff.size(); ++i) EXPECT_LE(std::abs(fq[i] - ff[i]), step) << i;
}

TEST(Quantized, FreshNetworkTracksFloatConfidence) {
  const Checkpoint ckpt = perturbed_checkpoint(9);
  const auto calib = images(6, 9);
  const auto qm = quantize_checkpoint(ckpt, calib);
  const auto rep = compare_float_quant(ckpt, qm, calib);
  EXPECT_EQ(rep.images.size(), calib.size());
  EXPECT_GE(rep.conf_within_fraction, 0.95);
}

TEST(Compare, SelfComparisonIsExact) {
  const Checkpoint ckpt = perturbed_checkpoint(10);
  Model m(ckpt);
  std::vector<GridMap> a;
  for (const auto& img : images(3, 10)) a.push_back(m.forward(img));
  const auto rep = compare_grid_sets(a, a);
  EXPECT_EQ(rep.argmax_agreement, 1.0);
  EXPECT_EQ(rep.depth_within, 1.0);
  EXPECT_EQ(rep.conf_within_fraction, 1.0);
  for (const auto& c : rep.images) {
    EXPECT_EQ(c.conf_max_abs_diff, 0.0);
    EXPECT_EQ(c.depth_diff_at_argmax, 0.0);
  }
  const auto j = to_json(rep);
  EXPECT_EQ(j.at("per_image").at("argmax_agree").size(), 3u);
}

TEST(Compare, ArgmaxAndDepthDisagreement) {
  GridMap a, b;
  a.conf(1, 1) = 0.9;
  a.dep(1, 1) = 2.0;
  b.conf(1, 1) = 0.8;
  b.dep(1, 1) = 2.5;
  b.conf(3, 3) = 0.95;
  const auto c = compare_grids(a, b);
  EXPECT_FALSE(c.argmax_agree);
  EXPECT_DOUBLE_EQ(c.depth_diff_at_argmax, 0.5);
  EXPECT_NEAR(c.conf_max_abs_diff, 0.95, 1e-15);
}

TEST(QModelFile, RoundTripAndCorruption) {
  TempDir dir;
  const Checkpoint ckpt = perturbed_checkpoint(11);
  const auto qm = quantize_checkpoint(ckpt, images(2, 11));
  save_qmodel(qm, dir / "m.qmodel");
  const auto back = load_qmodel(dir / "m.qmodel");
  ASSERT_EQ(back.convs.size(), qm.convs.size());
  for (std::size_t c = 0; c < qm.convs.size(); ++c) {
    EXPECT_EQ(back.convs[c].bias, qm.convs[c].bias);
    EXPECT_EQ(back.convs[c].output_scale, qm.convs[c].output_scale);
    for (std::size_t k = 0; k < qm.convs[c].weight.size(); ++k) ASSERT_EQ(back.convs[c].weight[k], qm.convs[c].weight[k]);
  }
  const Image img = images(1, 12)[0];
  EXPECT_EQ(quantized_forward(back, img).confidence, quantized_forward(qm, img).confidence);

  const std::string bytes = testing::read_file(dir / "m.qmodel");
  testing::write_file(dir / "short.qmodel", bytes.substr(0, bytes.size() - 1));
  EXPECT_THROW(load_qmodel(dir / "short.qmodel"), FormatError);
  std::string flipped = bytes;
  flipped[bytes.size() - 100] ^= 1;
  testing::write_file(dir / "flip.qmodel", flipped);
  EXPECT_THROW(load_qmodel(dir / "flip.qmodel"), FormatError);
  save_checkpoint(ckpt, dir / "float.ckpt");
  EXPECT_THROW(load_qmodel(dir / "float.ckpt"), FormatError);
}

}  // namespace
}  // namespace monoloc
