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

// Document quality classification: last-position hidden state features and
// a CART random forest.

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "slm/model.hpp"

namespace slm::quality {

enum class Label : std::uint8_t { kLow = 0, kHigh = 1 };

std::string_view to_string(Label label);
Label label_from_string(std::string_view name);

using FeatureVector = std::vector<double>;

// Final-norm hidden state at the last position. Inputs longer than max_seq
// are cut to their final max_seq tokens.
template <typename Scalar>
FeatureVector extract_feature(const model::Parameters<Scalar>& params,
                              std::span<const int> tokens);

struct ForestParams {
  int n_trees = 100;
  int max_depth = -1;          // -1: grow until pure
  int features_per_split = 0;  // 0: ceil(sqrt(dim))
  bool bootstrap = true;
  std::uint64_t seed = 0;
  int workers = 1;

  void validate() const;
};

struct TreeNode {
  int feature = -1;  // -1 marks a leaf
  double threshold = 0.0;  // go left when x[feature] <= threshold
  int left = -1;
  int right = -1;
  std::array<std::int64_t, 2> counts{};  // training samples by label
};

struct DecisionTree {
  std::vector<TreeNode> nodes;  // nodes[0] is the root

  const TreeNode& leaf(std::span<const double> x) const;
  // Majority class of the leaf; ties go to kHigh.
  Label predict(std::span<const double> x) const;
  int depth() const;
};

struct RandomForest {
  std::vector<DecisionTree> trees;
  ForestParams params;
  int dim = 0;
  // Trained on a single class; every tree is a single leaf.
  bool degenerate = false;

  std::string serialize() const;
  static RandomForest parse(std::string_view text);
  void save(const std::filesystem::path& path) const;
  static RandomForest load(const std::filesystem::path& path);

  friend bool operator==(const RandomForest& a, const RandomForest& b);
};

struct Prediction {
  Label label = Label::kLow;
  double probability = 0.0;  // fraction of trees voting for `label`
  int votes_high = 0;
  int n_trees = 0;
};

// Each tree sees a seeded bootstrap of positional indices and grows greedy
// Gini splits over ceil(sqrt(dim)) random features per node.
RandomForest rf_train(std::span<const FeatureVector> features, std::span<const Label> labels,
                      const ForestParams& params);

// Majority vote (ties go to kHigh).
Prediction rf_predict(const RandomForest& forest, std::span<const double> x);

// Gini impurity of a two-class count pair.
double gini(std::int64_t low, std::int64_t high);

// Line records {"id": ..., "label": "high"|"low"}.
std::map<std::string, Label> load_labels(const std::filesystem::path& path);

}  // namespace slm::quality
