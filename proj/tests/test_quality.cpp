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

#include <random>

#include "slm/error.hpp"
#include "slm/quality.hpp"
#include "support.hpp"

namespace slm::quality {
namespace {

void toy_data(int n, std::vector<FeatureVector>& x, std::vector<Label>& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (int i = 0; i < n; ++i) {
    FeatureVector f(6);
    for (auto& v : f) v = noise(rng);
    x.push_back(f);
    y.push_back(f[0] + 0.5 * f[3] > 0 ? Label::kHigh : Label::kLow);
  }
}

TEST(Gini, Values) {
  EXPECT_DOUBLE_EQ(gini(5, 5), 0.5);
  EXPECT_DOUBLE_EQ(gini(4, 0), 0.0);
  EXPECT_DOUBLE_EQ(gini(1, 3), 1.0 - (1.0 / 16 + 9.0 / 16));
}

TEST(Forest, SingleUnbaggedTreeFitsTrainingSet) {
  std::vector<FeatureVector> x;
  std::vector<Label> y;
  toy_data(120, x, y, 1);
  ForestParams p;
  p.n_trees = 1;
  p.bootstrap = false;
  p.features_per_split = 6;
  const auto f = rf_train(x, y, p);
  for (size_t i = 0; i < x.size(); ++i) ASSERT_EQ(rf_predict(f, x[i]).label, y[i]);
}

TEST(Forest, GeneralizesOnHeldOutData) {
  std::vector<FeatureVector> x, xt;
  std::vector<Label> y, yt;
  toy_data(300, x, y, 2);
  toy_data(200, xt, yt, 3);
  ForestParams p;
  p.n_trees = 25;
  p.seed = 4;
  const auto f = rf_train(x, y, p);
  int ok = 0;
  for (size_t i = 0; i < xt.size(); ++i) ok += rf_predict(f, xt[i]).label == yt[i];
  EXPECT_GT(ok, 160);
}

TEST(Forest, DeterministicAcrossWorkersAndSerializable) {
  std::vector<FeatureVector> x;
  std::vector<Label> y;
  toy_data(80, x, y, 5);
  ForestParams p;
  p.n_trees = 8;
  p.seed = 6;
  const auto a = rf_train(x, y, p);
  p.workers = 3;
  auto b = rf_train(x, y, p);
  b.params.workers = 1;
  EXPECT_EQ(a.serialize(), b.serialize());
  EXPECT_EQ(RandomForest::parse(a.serialize()), a);
  slm::testing::TempDir dir("rf");
  a.save(dir / "f.json");
  EXPECT_EQ(RandomForest::load(dir / "f.json"), a);
}

TEST(Forest, TiesGoHigh) {
  DecisionTree leaf;
  leaf.nodes.push_back(TreeNode{-1, 0.0, -1, -1, {3, 3}});
  const double x[] = {0.0};
  EXPECT_EQ(leaf.predict(x), Label::kHigh);
  RandomForest f;
  f.dim = 1;
  f.trees = {leaf};
  f.trees.push_back(DecisionTree{{TreeNode{-1, 0.0, -1, -1, {5, 0}}}});
  EXPECT_EQ(rf_predict(f, x).label, Label::kHigh);
  EXPECT_EQ(rf_predict(f, x).votes_high, 1);
}

TEST(Forest, SingleClassIsDegenerate) {
  std::vector<FeatureVector> x = {{1.0}, {2.0}, {3.0}};
  std::vector<Label> y(3, Label::kLow);
  ForestParams p;
  p.n_trees = 4;
  const auto f = rf_train(x, y, p);
  EXPECT_TRUE(f.degenerate);
  const double q[] = {9.0};
  EXPECT_EQ(rf_predict(f, q).label, Label::kLow);
}

TEST(Forest, RejectsBadInput) {
  std::vector<FeatureVector> x = {{1.0}, {2.0, 3.0}};
  std::vector<Label> y = {Label::kLow, Label::kHigh};
  EXPECT_THROW(rf_train(x, y, ForestParams{}), Error);
  ForestParams p;
  p.n_trees = 0;
  EXPECT_THROW(p.validate(), Error);
  const double q[] = {1.0, 2.0, 3.0};
  std::vector<FeatureVector> ok = {{1.0}, {2.0}};
  const auto f = rf_train(ok, y, ForestParams{});
  EXPECT_THROW(rf_predict(f, q), Error);
}

TEST(Features, LastPositionFinalHidden) {
  const auto c = slm::testing::tiny_config();
  const auto p = model::init_params<double>(c, 3);
  const std::vector<int> tokens = {0, 4, 8, 9};
  const auto f = extract_feature<double>(p, tokens);
  const auto out = model::forward<double>(p, tokens);
  ASSERT_EQ(static_cast<int>(f.size()), c.d_model);
  for (int j = 0; j < c.d_model; ++j) EXPECT_EQ(f[j], out.final_hidden(3, j));
  std::vector<int> long_input(40, 5);
  EXPECT_EQ(extract_feature<double>(p, long_input).size(), f.size());
}

TEST(Labels, LoadToyLabels) {
  const auto labels = load_labels(slm::testing::toy_dir() / "labels.jsonl");
  EXPECT_FALSE(labels.empty());
  EXPECT_EQ(label_from_string("high"), Label::kHigh);
  EXPECT_THROW(label_from_string("medium"), Error);
}

}  // namespace
}  // namespace slm::quality
