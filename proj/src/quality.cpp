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

#include "slm/quality.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "slm/parallel.hpp"
#include "slm/random.hpp"

namespace slm::quality {

namespace {

constexpr const char* kForestFormat = "slm-forest";
constexpr int kForestVersion = 1;

struct Split {
  int feature = -1;
  double threshold = 0.0;
  double impurity = 0.0;
};

class TreeBuilder {
 public:
  TreeBuilder(std::span<const FeatureVector> x, std::span<const Label> y, const ForestParams& p,
              int features_per_split, std::uint64_t seed)
      : x_(x), y_(y), params_(p), k_(features_per_split), rng_(seed) {}

  DecisionTree build(std::vector<size_t> samples) {
    DecisionTree tree;
    tree.nodes.emplace_back();
    grow(tree, 0, std::move(samples), 0);
    return tree;
  }

 private:
  void grow(DecisionTree& tree, int node, std::vector<size_t> samples, int depth) {
    std::array<std::int64_t, 2> counts{};
    for (size_t i : samples) ++counts[static_cast<int>(y_[i])];
    tree.nodes[node].counts = counts;
    const bool pure = counts[0] == 0 || counts[1] == 0;
    if (pure || samples.size() < 2 || (params_.max_depth >= 0 && depth >= params_.max_depth)) return;

    const Split split = best_split(samples, counts);
    if (split.feature < 0) return;

    std::vector<size_t> left, right;
    for (size_t i : samples) {
      (x_[i][split.feature] <= split.threshold ? left : right).push_back(i);
    }
    samples.clear();
    samples.shrink_to_fit();
    const int l = static_cast<int>(tree.nodes.size());
    tree.nodes.emplace_back();
    const int r = static_cast<int>(tree.nodes.size());
    tree.nodes.emplace_back();
    tree.nodes[node].feature = split.feature;
    tree.nodes[node].threshold = split.threshold;
    tree.nodes[node].left = l;
    tree.nodes[node].right = r;
    grow(tree, l, std::move(left), depth + 1);
    grow(tree, r, std::move(right), depth + 1);
  }

  // Candidate features come from a per-node partial shuffle. If all k drawn
  // features are constant on the node, drawing continues until a varying one
  // turns up or the features run out.
  Split best_split(const std::vector<size_t>& samples, const std::array<std::int64_t, 2>& total) {
    const int dim = static_cast<int>(x_[samples[0]].size());
    std::vector<int> order(dim);
    std::iota(order.begin(), order.end(), 0);
    Split best;
    double best_score = std::numeric_limits<double>::infinity();
    int drawn = 0;
    std::vector<std::pair<double, int>> values(samples.size());
    for (int pos = 0; pos < dim; ++pos) {
      if (drawn >= k_ && best.feature >= 0) break;
      const int pick = pos + static_cast<int>(rng_.below(static_cast<std::uint64_t>(dim - pos)));
      std::swap(order[pos], order[pick]);
      const int f = order[pos];
      ++drawn;
      for (size_t i = 0; i < samples.size(); ++i) {
        values[i] = {x_[samples[i]][f], static_cast<int>(y_[samples[i]])};
      }
      std::sort(values.begin(), values.end());
      if (values.front().first == values.back().first) continue;
      std::array<std::int64_t, 2> left{};
      const auto n = static_cast<double>(samples.size());
      for (size_t i = 0; i + 1 < values.size(); ++i) {
        ++left[values[i].second];
        if (values[i].first == values[i + 1].first) continue;
        const std::int64_t nl = left[0] + left[1];
        const std::int64_t nr = static_cast<std::int64_t>(samples.size()) - nl;
        const double score = (static_cast<double>(nl) * gini(left[0], left[1]) +
                              static_cast<double>(nr) *
                                  gini(total[0] - left[0], total[1] - left[1])) / n;
        if (score < best_score) {
          best_score = score;
          best.feature = f;
          best.threshold = values[i].first + (values[i + 1].first - values[i].first) / 2.0;
          // Guard against the midpoint rounding onto the upper value.
          if (!(best.threshold < values[i + 1].first)) best.threshold = values[i].first;
          best.impurity = score;
        }
      }
    }
    return best;
  }

  std::span<const FeatureVector> x_;
  std::span<const Label> y_;
  const ForestParams& params_;
  int k_;
  Rng rng_;
};

nlohmann::json tree_to_json(const DecisionTree& t) {
  std::vector<int> feature, left, right;
  std::vector<double> threshold;
  std::vector<std::array<std::int64_t, 2>> counts;
  for (const auto& n : t.nodes) {
    feature.push_back(n.feature);
    threshold.push_back(n.threshold);
    left.push_back(n.left);
    right.push_back(n.right);
    counts.push_back(n.counts);
  }
  return {{"feature", feature}, {"threshold", threshold}, {"left", left},
          {"right", right},     {"counts", counts}};
}

DecisionTree tree_from_json(const nlohmann::json& j) {
  const auto feature = j.at("feature").get<std::vector<int>>();
  const auto threshold = j.at("threshold").get<std::vector<double>>();
  const auto left = j.at("left").get<std::vector<int>>();
  const auto right = j.at("right").get<std::vector<int>>();
  const auto counts = j.at("counts").get<std::vector<std::array<std::int64_t, 2>>>();
  const size_t n = feature.size();
  if (threshold.size() != n || left.size() != n || right.size() != n || counts.size() != n || n == 0) {
    throw data_error("bad_forest", "tree arrays have inconsistent lengths");
  }
  DecisionTree t;
  t.nodes.resize(n);
  for (size_t i = 0; i < n; ++i) {
    auto& node = t.nodes[i];
    node = {feature[i], threshold[i], left[i], right[i], counts[i]};
    const bool leaf = node.feature < 0;
    if (!leaf && (node.left <= 0 || node.right <= 0 || node.left >= static_cast<int>(n) ||
                  node.right >= static_cast<int>(n))) {
      throw data_error("bad_forest", "internal node without two valid children");
    }
    if (leaf && node.counts[0] + node.counts[1] <= 0) {
      throw data_error("bad_forest", "leaf with no training samples");
    }
  }
  return t;
}

}  // namespace

std::string_view to_string(Label label) { return label == Label::kHigh ? "high" : "low"; }

Label label_from_string(std::string_view name) {
  if (name == "high") return Label::kHigh;
  if (name == "low") return Label::kLow;
  throw data_error("bad_label", "quality label must be high or low, got " + std::string(name));
}

double gini(std::int64_t low, std::int64_t high) {
  const double n = static_cast<double>(low + high);
  if (n == 0) return 0.0;
  const double p = static_cast<double>(low) / n;
  const double q = static_cast<double>(high) / n;
  return 1.0 - p * p - q * q;
}

template <typename S>
FeatureVector extract_feature(const model::Parameters<S>& params, std::span<const int> tokens) {
  if (tokens.empty()) throw data_error("empty_document", "cannot extract a feature from no tokens");
  const size_t max_seq = static_cast<size_t>(params.config.max_seq);
  if (tokens.size() > max_seq) tokens = tokens.subspan(tokens.size() - max_seq);
  const auto out = model::forward<S>(params, tokens);
  const auto last = out.final_hidden.row(out.final_hidden.rows() - 1);
  FeatureVector v(last.size());
  for (Eigen::Index i = 0; i < last.size(); ++i) v[i] = static_cast<double>(last(i));
  return v;
}

template FeatureVector extract_feature<float>(const model::Parameters<float>&, std::span<const int>);
template FeatureVector extract_feature<double>(const model::Parameters<double>&, std::span<const int>);

void ForestParams::validate() const {
  if (n_trees < 1) throw config_error("invalid_forest_params", "n_trees must be >= 1");
  if (max_depth < -1) throw config_error("invalid_forest_params", "max_depth must be >= -1");
  if (features_per_split < 0) throw config_error("invalid_forest_params", "features_per_split must be >= 0");
  if (workers < 1) throw config_error("invalid_forest_params", "workers must be >= 1");
}

const TreeNode& DecisionTree::leaf(std::span<const double> x) const {
  int i = 0;
  while (nodes[i].feature >= 0) {
    const TreeNode& n = nodes[i];
    i = x[n.feature] <= n.threshold ? n.left : n.right;
  }
  return nodes[i];
}

Label DecisionTree::predict(std::span<const double> x) const {
  const auto& c = leaf(x).counts;
  return c[1] >= c[0] ? Label::kHigh : Label::kLow;
}

int DecisionTree::depth() const {
  std::vector<int> d(nodes.size(), 0);
  int best = 0;
  for (size_t i = 0; i < nodes.size(); ++i) {
    best = std::max(best, d[i]);
    if (nodes[i].feature >= 0) {
      d[nodes[i].left] = d[i] + 1;
      d[nodes[i].right] = d[i] + 1;
    }
  }
  return best;
}

RandomForest rf_train(std::span<const FeatureVector> x, std::span<const Label> y,
                      const ForestParams& params) {
  params.validate();
  if (x.size() != y.size()) throw data_error("shape_mismatch", "features and labels differ in count");
  if (x.size() < 2) throw data_error("too_few_samples", "need at least two training examples");
  const size_t dim = x[0].size();
  if (dim == 0) throw data_error("shape_mismatch", "feature vectors are empty");
  for (const auto& v : x) {
    if (v.size() != dim) throw data_error("shape_mismatch", "feature vectors differ in length");
    for (double e : v) {
      if (!std::isfinite(e)) throw data_error("nonfinite_feature", "feature vectors must be finite");
    }
  }

  RandomForest forest;
  forest.params = params;
  forest.dim = static_cast<int>(dim);
  const bool has_low = std::find(y.begin(), y.end(), Label::kLow) != y.end();
  const bool has_high = std::find(y.begin(), y.end(), Label::kHigh) != y.end();
  forest.degenerate = !(has_low && has_high);
  if (forest.degenerate) {
    std::cerr << "warning: quality training set has a single class; the forest always predicts "
              << to_string(y[0]) << "\n";
  }

  const int k = params.features_per_split > 0
                    ? std::min<int>(params.features_per_split, static_cast<int>(dim))
                    : static_cast<int>(std::ceil(std::sqrt(static_cast<double>(dim))));
  forest.trees.resize(params.n_trees);
  parallel_tasks(static_cast<size_t>(params.n_trees), params.workers, [&](size_t t) {
    Rng rng(mix_seed(params.seed, t));
    std::vector<size_t> samples(x.size());
    if (params.bootstrap) {
      for (auto& s : samples) s = rng.below(x.size());
    } else {
      std::iota(samples.begin(), samples.end(), size_t{0});
    }
    TreeBuilder builder(x, y, params, k, rng.next_u64());
    forest.trees[t] = builder.build(std::move(samples));
  });
  return forest;
}

Prediction rf_predict(const RandomForest& forest, std::span<const double> x) {
  if (static_cast<int>(x.size()) != forest.dim) {
    throw data_error("dimension_mismatch", "feature has " + std::to_string(x.size()) +
                                               " values, forest expects " +
                                               std::to_string(forest.dim));
  }
  if (forest.trees.empty()) throw data_error("bad_forest", "forest has no trees");
  Prediction p;
  p.n_trees = static_cast<int>(forest.trees.size());
  for (const auto& t : forest.trees) p.votes_high += t.predict(x) == Label::kHigh ? 1 : 0;
  const int votes_low = p.n_trees - p.votes_high;
  p.label = p.votes_high >= votes_low ? Label::kHigh : Label::kLow;
  p.probability = static_cast<double>(std::max(p.votes_high, votes_low)) / p.n_trees;
  return p;
}

std::string RandomForest::serialize() const {
  nlohmann::json j;
  j["format"] = kForestFormat;
  j["version"] = kForestVersion;
  j["dim"] = dim;
  j["degenerate"] = degenerate;
  j["params"] = {{"n_trees", params.n_trees},
                 {"max_depth", params.max_depth},
                 {"features_per_split", params.features_per_split},
                 {"bootstrap", params.bootstrap},
                 {"seed", params.seed},
                 {"workers", params.workers}};
  nlohmann::json trees_json = nlohmann::json::array();
  for (const auto& t : trees) trees_json.push_back(tree_to_json(t));
  j["trees"] = std::move(trees_json);
  return j.dump() + "\n";
}

RandomForest RandomForest::parse(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw data_error("bad_forest", e.what());
  }
  if (j.value("format", std::string()) != kForestFormat) {
    throw data_error("bad_forest", "not a forest file");
  }
  if (j.value("version", -1) != kForestVersion) {
    throw data_error("unsupported_version", "forest version " + j.value("version", nlohmann::json()).dump());
  }
  RandomForest f;
  try {
    f.dim = j.at("dim").get<int>();
    f.degenerate = j.value("degenerate", false);
    const auto& p = j.at("params");
    f.params.n_trees = p.at("n_trees").get<int>();
    f.params.max_depth = p.at("max_depth").get<int>();
    f.params.features_per_split = p.at("features_per_split").get<int>();
    f.params.bootstrap = p.at("bootstrap").get<bool>();
    f.params.seed = p.at("seed").get<std::uint64_t>();
    f.params.workers = p.value("workers", 1);
    for (const auto& t : j.at("trees")) f.trees.push_back(tree_from_json(t));
  } catch (const nlohmann::json::exception& e) {
    throw data_error("bad_forest", e.what());
  }
  for (const auto& t : f.trees) {
    for (const auto& n : t.nodes) {
      if (n.feature >= f.dim) throw data_error("bad_forest", "split feature out of range");
    }
  }
  return f;
}

void RandomForest::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("io", "cannot write " + path.string());
  out << serialize();
}

RandomForest RandomForest::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("io", "cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

bool operator==(const RandomForest& a, const RandomForest& b) { return a.serialize() == b.serialize(); }

std::map<std::string, Label> load_labels(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw data_error("io", "cannot open " + path.string());
  std::map<std::string, Label> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      out[j.at("id").get<std::string>()] = label_from_string(j.at("label").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
      throw data_error("bad_record", path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace slm::quality
