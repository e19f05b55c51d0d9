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

// monoloc command-line tool. Human-readable output goes to stdout,
// diagnostics to stderr. Exit status: 0 success, 1 runtime failure,
// 2 bad configuration or arguments.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "monoloc/config.hpp"
#include "monoloc/datagen.hpp"
#include "monoloc/detect.hpp"
#include "monoloc/ekf.hpp"
#include "monoloc/model.hpp"
#include "monoloc/quantize.hpp"

namespace {

using namespace monoloc;

RunConfig config_or_default(const std::string& path) {
  return path.empty() ? RunConfig{} : load_run_config(path);
}

void print_breakdown(const char* what, const LossBreakdown& l) {
  std::printf("%s: l_total %.6g  l_d %.6g  l_c %.6g\n", what, l.total, l.depth, l.confidence);
}

void print_metrics(const EvalMetrics& m) {
  std::printf("images %zu  truths %zu  matched %zu  false positives %zu\n", m.images, m.truths, m.matched,
              m.false_positives);
  std::printf("pixel error p50 %.2f  p80 %.2f  p95 %.2f px\n", m.pixel_p50, m.pixel_p80, m.pixel_p95);
  std::printf("depth error mean %.4f  median %.4f  std %.4f  |median| %.4f m\n", m.depth_mean, m.depth_median,
              m.depth_std, m.depth_abs_median);
  std::printf("tp rate %.4f  fp/image %.4f  within 20 px %.4f\n", m.tp_rate, m.fp_per_image,
              pixel_compliance(m, 20.0));
}

bool is_qmodel(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::string line;
  std::getline(in, line);
  return line == kQuantMagic;
}

/// Float checkpoint or quantized model behind one interface.
struct AnyModel {
  std::optional<Model> float_model;
  std::optional<QuantizedModel> quant_model;

  explicit AnyModel(const fs::path& path) {
    if (is_qmodel(path)) quant_model = load_qmodel(path);
    else float_model.emplace(load_checkpoint(path));
  }
  GridMap forward(const Image& img) { return quant_model ? quantized_forward(*quant_model, img) : float_model->forward(img); }
  int num_classes() { return quant_model ? quant_model->spec.num_classes : float_model->network().spec().num_classes; }
};

int cmd_make_backgrounds(const std::string& out, std::size_t count, std::uint64_t seed) {
  write_procedural_backgrounds(out, count, seed);
  std::printf("wrote %zu backgrounds to %s\n", count, out.c_str());
  return 0;
}

int cmd_gen_data(const std::string& config, const std::string& out, std::optional<std::uint64_t> seed,
                 std::optional<std::size_t> count, const std::string& backgrounds) {
  RunConfig rc = config_or_default(config);
  DatagenConfig gen = rc.datagen.gen;
  gen.seed = require_seed(seed, rc.datagen.seed, "gen-data");
  if (count) gen.count = *count;
  if (!backgrounds.empty()) gen.backgrounds = backgrounds;
  if (gen.backgrounds.empty()) throw ConfigError("gen-data: no backgrounds directory (--backgrounds or datagen.backgrounds)");
  const Manifest m = generate_dataset(gen, out);
  std::size_t robots = 0;
  for (const auto& r : m.records) robots += r.robots.size();
  std::printf("dataset %s\n  labels %s\n  images %zu\n  robots %zu\n  seed %llu\n", out.c_str(),
              m.labels.string().c_str(), m.records.size(), robots, static_cast<unsigned long long>(gen.seed));
  return 0;
}

fs::path default_loss_csv(const fs::path& ckpt) {
  fs::path p = ckpt;
  p.replace_extension();
  return p.string() + "_loss.csv";
}

int cmd_train(const std::string& config, const std::string& data, const std::string& out,
              const std::string& init_path, std::optional<std::uint64_t> seed, std::string loss_csv) {
  RunConfig rc = config_or_default(config);
  TrainConfig tc = rc.train.train;
  tc.seed = require_seed(seed, rc.train.seed, "train");
  std::optional<Checkpoint> init;
  NetworkSpec spec = rc.train.network;
  if (!init_path.empty()) {
    init = load_checkpoint(init_path);
    if (!rc.train.network_set) spec = init->spec;
    else if (!(init->spec == spec)) throw ConfigError("train: --init checkpoint does not match train.network");
  }
  LoadReport rep;
  const auto samples = load_dataset(data, spec.num_classes, &rep);
  std::printf("loaded %zu samples (%zu records, %zu collision frames dropped, %zu robots out of view)\n",
              samples.size(), rep.records, rep.dropped_collisions, rep.robots_out_of_view);
  if (samples.empty()) throw Error("train: dataset " + data + " has no usable samples");
  int last_epoch = 0;
  double acc_c = 0, acc_d = 0;
  long n = 0;
  const auto res = train(tc, spec, samples, init, [&](const StepRecord& r) {
    if (r.epoch != last_epoch && n > 0) {
      std::printf("epoch %d  mean l_c %.6g  mean l_d %.6g\n", last_epoch, acc_c / n, acc_d / n);
      std::fflush(stdout);
      acc_c = acc_d = 0;
      n = 0;
    }
    last_epoch = r.epoch;
    acc_c += r.loss.confidence;
    acc_d += r.loss.depth;
    ++n;
  });
  if (n > 0) std::printf("epoch %d  mean l_c %.6g  mean l_d %.6g\n", last_epoch, acc_c / n, acc_d / n);
  save_checkpoint(res.checkpoint, out);
  if (loss_csv.empty()) loss_csv = default_loss_csv(out).string();
  write_loss_csv(res.curve, loss_csv);
  print_breakdown("final step", res.curve.back().loss);
  std::printf("checkpoint %s (epoch %d)\nloss curve %s (%zu steps)\n", out.c_str(), res.checkpoint.epoch,
              loss_csv.c_str(), res.curve.size());
  return 0;
}

int cmd_eval(const std::string& config, const std::string& ckpt, const std::string& qmodel, const std::string& data,
             std::optional<double> tc, const std::string& out) {
  RunConfig rc = config_or_default(config);
  DetectionConfig dc = rc.detect;
  if (tc) dc.threshold = *tc;
  dc.validate();
  if (ckpt.empty() == qmodel.empty()) throw ConfigError("eval: give exactly one of --ckpt or --qmodel");
  AnyModel model(ckpt.empty() ? qmodel : ckpt);
  const int classes = model.num_classes();
  LoadReport rep;
  const auto samples = load_dataset(data, classes, &rep);
  std::vector<std::vector<Detection>> dets;
  std::vector<std::vector<RelativeLabel>> truths;
  for (const auto& s : samples) {
    dets.push_back(extract_detections(model.forward(s.image), dc));
    truths.push_back(s.robots);
  }
  const EvalMetrics m = match_and_score(dets, truths);
  error_report(m, out);
  std::printf("%s model, threshold %.3f, %zu images (%zu collision frames dropped)\n",
              model.quant_model ? "int8" : "float", dc.threshold, samples.size(), rep.dropped_collisions);
  print_metrics(m);
  std::printf("metrics %s\n", out.c_str());
  return 0;
}

int cmd_quantize(const std::string& config, const std::string& ckpt_path, const std::string& data,
                 const std::string& out, std::string report) {
  RunConfig rc = config_or_default(config);
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const auto records = read_labels_jsonl(fs::path(data) / "labels.jsonl");
  std::vector<Image> images;
  for (const auto& r : records) {
    if (rc.quantize.max_calibration_images && images.size() >= rc.quantize.max_calibration_images) break;
    images.push_back(read_image(fs::path(data) / r.image));
  }
  if (images.empty()) throw Error("quantize: no calibration images in " + data);
  const Checkpoint folded = fold_batchnorm(ckpt);
  const QuantParams qp = calibrate(folded, images);
  const QuantizedModel qm = quantize_model(folded, qp);
  save_qmodel(qm, out);
  const ComparisonReport cmp = compare_float_quant(ckpt, qm, images);
  if (report.empty()) {
    fs::path p = out;
    p.replace_extension();
    report = p.string() + "_compare.json";
  }
  std::ofstream(report) << to_json(cmp).dump(2) << '\n';
  std::printf("calibrated on %zu images; input scale %.6g\n", images.size(), qp.input_scale);
  for (std::size_t i = 0; i < qm.convs.size(); ++i)
    std::printf("  conv %zu (layer %zu): weight scale %.6g  activation scale %.6g\n", i, qm.convs[i].layer,
                qm.convs[i].weight_scale, qm.convs[i].output_scale);
  std::printf("argmax agreement %.4f  depth within 0.2 m %.4f  cells within 0.15 %.4f\n", cmp.argmax_agreement,
              cmp.depth_within, cmp.conf_within_fraction);
  std::printf("qmodel %s\ncomparison %s\n", out.c_str(), report.c_str());
  return 0;
}

int cmd_infer(const std::string& config, const std::string& model_path, const std::string& image,
              std::optional<double> tc) {
  RunConfig rc = config_or_default(config);
  DetectionConfig dc = rc.detect;
  if (tc) dc.threshold = *tc;
  dc.validate();
  AnyModel model(model_path);
  Image img = read_image(image);
  if (img.width != kImageWidth || img.height != kImageHeight) img = crop_resize(img, kImageWidth, kImageHeight);
  nlohmann::json out = nlohmann::json::array();
  for (const auto& d : extract_detections(model.forward(img), dc))
    out.push_back({{"xp", d.xp}, {"yp", d.yp}, {"depth", d.depth}, {"confidence", d.confidence}, {"row", d.row},
                   {"col", d.col}});
  std::cout << out.dump(2) << '\n';
  return 0;
}

int cmd_sim_ekf(const std::string& config, const std::string& out, std::optional<std::uint64_t> seed_opt) {
  RunConfig rc = config_or_default(config);
  const std::uint64_t seed = require_seed(seed_opt, rc.ekf.seed, "sim-ekf");
  const auto& ec = rc.ekf;
  std::optional<BackgroundSet> backgrounds;
  fs::path bg_dir = ec.backgrounds;
  if (ec.render && bg_dir.empty()) {
    bg_dir = fs::path(out) / "backgrounds";
    write_procedural_backgrounds(bg_dir, ec.procedural_backgrounds, mix_seed(seed, 0xb6));
  }
  if (ec.render) backgrounds.emplace(bg_dir);
  const std::size_t nbg = backgrounds ? backgrounds->size() : 0;
  if (ec.render && nbg == 0) throw IoError("sim-ekf: no background images in " + bg_dir.string());
  const auto [traj, stream] = simulate_and_label(ec.sim, seed, nbg);
  DatagenConfig gen;
  gen.sprite = ec.sprite;
  gen.scene = ec.sim.scene;
  const DroneSprite sprite = sprite_for(gen);
  write_label_stream(stream, out, backgrounds ? &*backgrounds : nullptr, &sprite, ec.sim.scene.intrinsics);

  std::ofstream csv(fs::path(out) / "trajectory.csv", std::ios::binary);
  csv << "episode,t,x,y,psi,x_hat,y_hat,psi_hat,cov_trace\n";
  char line[256];
  double ss = 0;
  long n = 0;
  for (std::size_t i = 0; i < traj.samples.size(); ++i) {
    const auto& s = traj.samples[i];
    std::snprintf(line, sizeof line, "%d,%.4f,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n", traj.episode[i], s.t,
                  s.truth.x(), s.truth.y(), s.truth.z(), s.estimate.x(), s.estimate.y(), s.estimate.z(), s.cov_trace);
    csv << line;
    if (s.t >= ec.sim.burn_in) {
      const double e = traj.position_error(i);
      ss += e * e;
      ++n;
    }
  }
  if (!csv) throw IoError("failed writing trajectory.csv");
  double label_ss = 0;
  for (std::size_t i = 0; i < stream.labels.size(); ++i) {
    const auto& a = stream.labels[i].robots[0];
    const auto& b = stream.ground_truth[i].robots[0];
    label_ss += (a.xh - b.xh) * (a.xh - b.xh) + (a.yh - b.yh) * (a.yh - b.yh);
  }
  std::printf("episodes %d  steps %zu  skipped updates %zu\n", ec.sim.episodes, traj.samples.size(),
              traj.skipped_updates);
  std::printf("position RMSE after burn-in %.4f m\n", n ? std::sqrt(ss / n) : 0.0);
  std::printf("frames %zu (dropped out of view %zu)  label RMSE %.4f m\n", stream.labels.size(),
              stream.dropped_out_of_view,
              stream.labels.empty() ? 0.0 : std::sqrt(label_ss / stream.labels.size()));
  std::printf("label stream %s\n", out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"monoloc: monocular relative localization pipeline"};
  app.require_subcommand(1);

  std::string config, out, data, ckpt, qmodel, init, image, backgrounds, loss_csv, report, model;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> count;
  std::optional<double> tc;
  std::size_t bg_count = 64;
  std::uint64_t bg_seed = 0;

  auto* bg = app.add_subcommand("make-backgrounds", "write procedural background images");
  bg->add_option("--out", out, "output directory")->required();
  bg->add_option("--count", bg_count, "number of images");
  bg->add_option("--seed", bg_seed, "seed");

  auto* gen = app.add_subcommand("gen-data", "render a labeled synthetic dataset");
  gen->add_option("--config", config, "JSON run config");
  gen->add_option("--out", out, "dataset directory")->required();
  gen->add_option("--seed", seed, "seed (overrides datagen.seed)");
  gen->add_option("--count", count, "number of images (overrides datagen.count)");
  gen->add_option("--backgrounds", backgrounds, "background image directory (overrides datagen.backgrounds)");

  auto* tr = app.add_subcommand("train", "train a network on a dataset");
  tr->add_option("--config", config, "JSON run config");
  tr->add_option("--data", data, "dataset directory")->required();
  tr->add_option("--out", out, "checkpoint path")->required();
  tr->add_option("--init", init, "checkpoint to refine");
  tr->add_option("--seed", seed, "seed (overrides train.seed)");
  tr->add_option("--loss-csv", loss_csv, "loss curve path (default <out>_loss.csv)");

  auto* ev = app.add_subcommand("eval", "score a model on a dataset");
  ev->add_option("--config", config, "JSON run config");
  auto* ev_ckpt = ev->add_option("--ckpt", ckpt, "float checkpoint");
  auto* ev_q = ev->add_option("--qmodel", qmodel, "quantized model");
  ev_ckpt->excludes(ev_q);
  ev->add_option("--data", data, "dataset directory")->required();
  ev->add_option("--tc", tc, "confidence threshold");
  ev->add_option("--out", out, "metrics JSON path")->default_val("metrics.json");

  auto* qu = app.add_subcommand("quantize", "int8-quantize a checkpoint");
  qu->add_option("--config", config, "JSON run config");
  qu->add_option("--ckpt", ckpt, "float checkpoint")->required();
  qu->add_option("--data", data, "calibration dataset directory")->required();
  qu->add_option("--out", out, "quantized model path")->required();
  qu->add_option("--report", report, "comparison report path (default <out>_compare.json)");

  auto* inf = app.add_subcommand("infer", "print detections for one image as JSON");
  inf->add_option("--config", config, "JSON run config");
  inf->add_option("--model", model, "checkpoint or quantized model")->required();
  inf->add_option("--image", image, "PNG or JPEG image")->required();
  inf->add_option("--tc", tc, "confidence threshold");

  auto* sim = app.add_subcommand("sim-ekf", "simulate two robots and emit EKF labels");
  sim->add_option("--config", config, "JSON run config");
  sim->add_option("--out", out, "output directory")->required();
  sim->add_option("--seed", seed, "seed (overrides ekf.seed)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*bg) return cmd_make_backgrounds(out, bg_count, bg_seed);
    if (*gen) return cmd_gen_data(config, out, seed, count, backgrounds);
    if (*tr) return cmd_train(config, data, out, init, seed, loss_csv);
    if (*ev) return cmd_eval(config, ckpt, qmodel, data, tc, out);
    if (*qu) return cmd_quantize(config, ckpt, data, out, report);
    if (*inf) return cmd_infer(config, model, image, tc);
    if (*sim) return cmd_sim_ekf(config, out, seed);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "monoloc: config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "monoloc: %s\n", e.what());
    return 1;
  }
  return 2;
}
