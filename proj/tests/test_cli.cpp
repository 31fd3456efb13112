// Copyright 2026 The slmkit Authors.
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


#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "cli.hpp"
#include "slm/config.hpp"
#include "slm/strings.hpp"
#include "support.hpp"

namespace slm::cli {
namespace {

namespace fs = std::filesystem;

class CliTest : public ::testing::Test {
 protected:
  int run(std::vector<std::string> args) {
    out.str("");
    err.str("");
    return cli::run(args, out, err);
  }
  std::string toy(const std::string& name) const { return (slm::testing::toy_dir() / name).string(); }
  std::string tmp(const std::string& name) const { return (dir / name).string(); }

  // clean -> dedup -> tokenizer train on the toy corpus.
  void prepare_vocab() {
    ASSERT_EQ(run({"clean", "--config", toy("config.json"), "--in", toy("corpus.jsonl"), "--out",
                   tmp("clean.jsonl")}),
              kExitOk)
        << err.str();
    ASSERT_EQ(run({"dedup", "--config", toy("config.json"), "--in", tmp("clean.jsonl"), "--out",
                   tmp("dedup.jsonl")}),
              kExitOk)
        << err.str();
    ASSERT_EQ(run({"tokenizer", "train", "--config", toy("config.json"), "--in", tmp("dedup.jsonl"),
                   "--out", tmp("vocab.txt")}),
              kExitOk)
        << err.str();
  }

  slm::testing::TempDir dir{"cli"};
  std::ostringstream out, err;
};

TEST_F(CliTest, UsageErrorsAreConfigErrors) {
  EXPECT_EQ(run({}), kExitConfig);
  EXPECT_EQ(run({"frobnicate"}), kExitConfig);
  EXPECT_EQ(run({"clean", "--in", toy("corpus.jsonl")}), kExitConfig);
}

TEST_F(CliTest, BadConfigExitsTwo) {
  std::ofstream(tmp("c.json")) << R"({"schema_version": 1, "modle": {}})";
  EXPECT_EQ(run({"clean", "--config", tmp("c.json"), "--in", toy("corpus.jsonl"), "--out",
                 tmp("o.jsonl")}),
            kExitConfig);
  EXPECT_NE(err.str().find("model"), std::string::npos) << err.str();
}

TEST_F(CliTest, MissingInputExitsThree) {
  EXPECT_EQ(run({"clean", "--in", tmp("absent.jsonl"), "--out", tmp("o.jsonl")}), kExitData);
}

TEST_F(CliTest, CleanWritesReportAndManifest) {
  ASSERT_EQ(run({"clean", "--config", toy("config.json"), "--in", toy("corpus.jsonl"), "--out",
                 tmp("clean.jsonl"), "--report", tmp("report.txt")}),
            kExitOk)
      << err.str();
  EXPECT_TRUE(fs::exists(tmp("report.txt")));
  const auto m = Manifest::load(tmp("clean.jsonl.manifest.json"));
  EXPECT_EQ(m.seed, 1234u);
  EXPECT_EQ(m.outputs.size(), 2u);
  EXPECT_EQ(read_clean_documents(tmp("clean.jsonl")).size(), 63u);
}

TEST_F(CliTest, ToyVocabularyMatchesGoldenDigest) {
  prepare_vocab();
  std::ifstream golden(slm::testing::source_dir() / "tests" / "fixtures" / "toy_vocab.sha256");
  std::string want;
  golden >> want;
  EXPECT_EQ(sha256_file(tmp("vocab.txt")), want);
  EXPECT_EQ(tok::Vocabulary::load(tmp("vocab.txt")).size(), 160);
}

TEST_F(CliTest, EncodeDecodeRoundTrip) {
  prepare_vocab();
  std::ofstream(tmp("in.txt")) << "腎不全ではメトホルミンの投与量を調整する必要がある。\n";
  ASSERT_EQ(run({"tokenizer", "encode", "--config", toy("config.json"), "--vocab", tmp("vocab.txt"),
                 "--in", tmp("in.txt"), "--out", tmp("ids.txt")}),
            kExitOk)
      << err.str();
  ASSERT_EQ(run({"tokenizer", "decode", "--config", toy("config.json"), "--vocab", tmp("vocab.txt"),
                 "--in", tmp("ids.txt"), "--out", tmp("back.txt")}),
            kExitOk)
      << err.str();
  std::ifstream back(tmp("back.txt"));
  std::string line;
  std::getline(back, line);
  EXPECT_EQ(line, "腎不全ではメトホルミンの投与量を調整する必要がある。");
}

TEST_F(CliTest, PretrainWritesOneCheckpointAndReplays) {
  prepare_vocab();
  ASSERT_EQ(run({"pretrain", "--config", toy("config.json"), "--vocab", tmp("vocab.txt"), "--in",
                 tmp("dedup.jsonl"), "--out", tmp("pre"), "--steps", "20"}),
            kExitOk)
      << err.str();
  int ckpts = 0;
  for (const auto& e : fs::directory_iterator(tmp("pre"))) ckpts += e.path().extension() == ".ckpt";
  EXPECT_EQ(ckpts, 1);
  EXPECT_EQ(run({"replay", tmp("pre/manifest.json")}), kExitOk) << err.str();
}

TEST_F(CliTest, ReplayDetectsChangedInput) {
  std::ifstream src(toy("corpus.jsonl"));
  std::ofstream(tmp("corpus.jsonl")) << src.rdbuf();
  ASSERT_EQ(run({"clean", "--in", tmp("corpus.jsonl"), "--out", tmp("c.jsonl")}), kExitOk) << err.str();
  std::ofstream(tmp("corpus.jsonl"), std::ios::app) << R"({"id": "new", "text": "追加。"})" << "\n";
  EXPECT_EQ(run({"replay", tmp("c.jsonl.manifest.json")}), kExitData);
  EXPECT_NE(err.str().find("input_changed"), std::string::npos) << err.str();
}

TEST_F(CliTest, EvalReportsTasks) {
  ASSERT_EQ(run({"eval", "--task", "exam=exam:" + toy("exam_gold.jsonl") + ":" + toy("exam_pred.jsonl"),
                 "--task", "cls=classification:" + toy("cls_gold.jsonl") + ":" + toy("cls_pred.jsonl"),
                 "--no-manifest"}),
            kExitOk)
      << err.str();
  EXPECT_NE(out.str().find("50.0"), std::string::npos) << out.str();
  EXPECT_EQ(run({"eval", "--task", "broken"}), kExitConfig);
}

}  // namespace
}  // namespace slm::cli
