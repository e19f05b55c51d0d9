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


#include <sys/wait.h>

#include <cstdio>
#include <string>

#include <gtest/gtest.h>

#include "monoloc/config.hpp"
#include "support.hpp"

namespace monoloc {
namespace {

using testing::TempDir;

struct CliResult {
  int code;
  std::string output;
};

CliResult run_cli(const std::string& args) {
  const std::string cmd = std::string(MONOLOC_CLI_PATH) + " " + args + " 2>&1";
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) throw std::runtime_error("popen failed");
  std::string out;
  char buf[4096];
  while (std::size_t n = std::fread(buf, 1, sizeof buf, p)) out.append(buf, n);
  const int status = pclose(p);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

RunConfig parse(const char* text) { return run_config_from_json(nlohmann::json::parse(text)); }

TEST(RunConfig, EmptyObjectKeepsDefaults) {
  const RunConfig rc = parse("{}");
  EXPECT_EQ(rc.train.train.epochs, TrainConfig{}.epochs);
  EXPECT_EQ(rc.train.network, NetworkSpec::default_spec());
  EXPECT_DOUBLE_EQ(rc.detect.threshold, DetectionConfig{}.threshold);
  EXPECT_FALSE(rc.datagen.seed);
  EXPECT_FALSE(rc.train.network_set);
}

TEST(RunConfig, ReadsNestedFields) {
  const RunConfig rc = parse(R"({"datagen": {"count": 12, "seed": 4, "scene": {"depth_max": 3.0,
      "intrinsics": {"fx": 170.0}}}, "train": {"epochs": 3, "num_classes": 2},
      "detect": {"threshold": 0.23}, "ekf": {"duration": 40, "sensor_noise": {"range": 0.2}}})");
  EXPECT_EQ(rc.datagen.gen.count, 12u);
  EXPECT_EQ(*rc.datagen.seed, 4u);
  EXPECT_DOUBLE_EQ(rc.datagen.gen.scene.depth_max, 3.0);
  EXPECT_DOUBLE_EQ(rc.datagen.gen.scene.intrinsics.fx, 170.0);
  EXPECT_DOUBLE_EQ(rc.datagen.gen.scene.intrinsics.fy, CameraIntrinsics{}.fy);
  EXPECT_EQ(rc.train.train.epochs, 3);
  EXPECT_EQ(rc.train.network.num_classes, 2);
  EXPECT_TRUE(rc.train.network_set);
  EXPECT_DOUBLE_EQ(rc.detect.threshold, 0.23);
  EXPECT_DOUBLE_EQ(rc.ekf.sim.duration, 40);
  EXPECT_DOUBLE_EQ(rc.ekf.sim.sensor_noise.range, 0.2);
  EXPECT_DOUBLE_EQ(rc.ekf.sim.filter_noise.range, EkfNoise{}.range);
}

TEST(RunConfig, UnknownKeysAreRejected) {
  for (const char* text : {R"({"datagen": {"cont": 3}})", R"({"trian": {}})", R"({"detect": {"tc": 0.3}})",
                           R"({"ekf": {"sensor_noise": {"rnage": 1}}})",
                           R"({"datagen": {"scene": {"intrinsics": {"f": 1}}}})"}) {
    try {
      parse(text);
      ADD_FAILURE() << text;
    } catch (const ConfigError& e) {
      EXPECT_NE(std::string(e.what()).find("unknown key"), std::string::npos) << e.what();
    }
  }
}

TEST(RunConfig, RejectsBadValues) {
  EXPECT_THROW(parse(R"({"detect": {"threshold": 1.1}})"), ConfigError);
  EXPECT_THROW(parse(R"({"detect": {"threshold": 0}})"), ConfigError);
  EXPECT_THROW(parse(R"({"train": {"batch": 0}})"), ConfigError);
  EXPECT_THROW(parse(R"({"train": {"epochs": "many"}})"), ConfigError);
  EXPECT_THROW(parse(R"({"ekf": {"filter_noise": {"velocity": -1}}})"), ConfigError);
  EXPECT_THROW(parse(R"({"datagen": {"scene": {"depth_min": 5, "depth_max": 1}}})"), ConfigError);
  EXPECT_THROW(parse("[]"), ConfigError);
}

TEST(RunConfig, NumClassesMustAgreeWithNetwork) {
  nlohmann::json j;
  j["train"]["network"] = to_json(NetworkSpec::default_spec(2));
  j["train"]["num_classes"] = 3;
  EXPECT_THROW(run_config_from_json(j), ConfigError);
  j["train"]["num_classes"] = 2;
  EXPECT_EQ(run_config_from_json(j).train.network.num_classes, 2);
}

TEST(RunConfig, SeedPrecedence) {
  EXPECT_EQ(require_seed(3, 5, "x"), 3u);
  EXPECT_EQ(require_seed(std::nullopt, 5, "x"), 5u);
  EXPECT_THROW(require_seed(std::nullopt, std::nullopt, "x"), ConfigError);
}

TEST(RunConfig, FileErrorsNameThePath) {
  TempDir dir;
  testing::write_file(dir / "bad.json", "{\"train\": ");
  try {
    load_run_config(dir / "bad.json");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("bad.json"), std::string::npos);
  }
  EXPECT_THROW(load_run_config(dir / "missing.json"), IoError);
}

TEST(Cli, GenDataWithZeroCountWritesEmptyDataset) {
  TempDir dir;
  ASSERT_EQ(run_cli("make-backgrounds --out " + (dir / "bg").string() + " --count 2").code, 0);
  const auto r = run_cli("gen-data --out " + (dir / "ds").string() + " --seed 1 --count 0 --backgrounds " +
                         (dir / "bg").string());
  EXPECT_EQ(r.code, 0) << r.output;
  EXPECT_TRUE(read_labels_jsonl(dir / "ds/labels.jsonl").empty());
}

TEST(Cli, GenDataWritesRequestedCount) {
  TempDir dir;
  ASSERT_EQ(run_cli("make-backgrounds --out " + (dir / "bg").string() + " --count 2").code, 0);
  const auto r = run_cli("gen-data --out " + (dir / "ds").string() + " --seed 1 --count 3 --backgrounds " +
                         (dir / "bg").string());
  ASSERT_EQ(r.code, 0) << r.output;
  const auto recs = read_labels_jsonl(dir / "ds/labels.jsonl");
  ASSERT_EQ(recs.size(), 3u);
  for (const auto& rec : recs) EXPECT_TRUE(fs::exists(dir / "ds" / rec.image));
}

TEST(Cli, SeedIsRequired) {
  TempDir dir;
  const auto r = run_cli("gen-data --out " + (dir / "ds").string() + " --count 1 --backgrounds /nonexistent");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("seed"), std::string::npos) << r.output;
  EXPECT_EQ(run_cli("sim-ekf --out " + (dir / "sim").string()).code, 2);
  EXPECT_EQ(run_cli("train --data " + dir.path().string() + " --out " + (dir / "m.ckpt").string()).code, 2);
}

TEST(Cli, MissingBackgroundsDirIsNamed) {
  TempDir dir;
  const std::string missing = (dir / "no_such_backgrounds").string();
  const auto r = run_cli("gen-data --out " + (dir / "ds").string() + " --seed 1 --count 2 --backgrounds " + missing);
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.output.find(missing), std::string::npos) << r.output;
}

TEST(Cli, UnknownConfigKeyFails) {
  TempDir dir;
  testing::write_file(dir / "c.json", R"({"datagen": {"seeds": 3}})");
  const auto r = run_cli("gen-data --config " + (dir / "c.json").string() + " --out " + (dir / "ds").string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("seeds"), std::string::npos) << r.output;
}

TEST(Cli, ThresholdOutOfRangeIsConfigError) {
  TempDir dir;
  const auto r = run_cli("eval --ckpt " + (dir / "none.ckpt").string() + " --data " + dir.path().string() +
                         " --tc 1.1");
  EXPECT_EQ(r.code, 2) << r.output;
}

TEST(Cli, CorruptLabelLineIsNamed) {
  TempDir dir;
  ASSERT_EQ(run_cli("make-backgrounds --out " + (dir / "bg").string() + " --count 1").code, 0);
  ASSERT_EQ(run_cli("gen-data --out " + (dir / "ds").string() + " --seed 2 --count 3 --backgrounds " +
                    (dir / "bg").string()).code, 0);
  std::string text = testing::read_file(dir / "ds/labels.jsonl");
  const auto second = text.find('\n') + 1;
  text.insert(second, "{not json\n");
  testing::write_file(dir / "ds/labels.jsonl", text);
  const auto r = run_cli("train --data " + (dir / "ds").string() + " --out " + (dir / "m.ckpt").string() +
                         " --seed 1");
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.output.find("labels.jsonl:2:"), std::string::npos) << r.output;
}

TEST(Cli, QuantizeWithoutCalibrationImagesFails) {
  TempDir dir;
  ASSERT_EQ(run_cli("make-backgrounds --out " + (dir / "bg").string() + " --count 1").code, 0);
  ASSERT_EQ(run_cli("gen-data --out " + (dir / "ds").string() + " --seed 2 --count 0 --backgrounds " +
                    (dir / "bg").string()).code, 0);
  save_checkpoint(Checkpoint::fresh(NetworkSpec::default_spec(), 1), dir / "m.ckpt");
  const auto r = run_cli("quantize --ckpt " + (dir / "m.ckpt").string() + " --data " + (dir / "ds").string() +
                         " --out " + (dir / "m.qmodel").string());
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.output.find("calibration"), std::string::npos) << r.output;
}

TEST(Cli, SimEkfNoiseFreeLabelsTrackTruth) {
  TempDir dir;
  testing::write_file(dir / "c.json", R"({"ekf": {"noise_free": true, "render": false, "seed": 2}})");
  const auto r = run_cli("sim-ekf --config " + (dir / "c.json").string() + " --out " + (dir / "sim").string());
  ASSERT_EQ(r.code, 0) << r.output;
  const auto labels = read_labels_jsonl(dir / "sim/labels.jsonl");
  const auto truth = read_labels_jsonl(dir / "sim/ground_truth.jsonl");
  ASSERT_EQ(labels.size(), truth.size());
  ASSERT_FALSE(labels.empty());
  const auto& a = labels.back().robots[0];
  const auto& b = truth.back().robots[0];
  EXPECT_LT(std::hypot(a.xh - b.xh, a.yh - b.yh), 0.1);
  EXPECT_TRUE(fs::exists(dir / "sim/trajectory.csv"));
}

TEST(Cli, UnknownSubcommandFails) { EXPECT_NE(run_cli("frobnicate").code, 0); }

}  // namespace
}  // namespace monoloc
