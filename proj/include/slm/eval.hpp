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

// Perplexity, exam scoring, agreement statistics and span F1.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "slm/model.hpp"

namespace slm::eval {

// exp(mean -log p(token[i] | tokens[<i])) over i >= 1.
template <typename Scalar>
double perplexity(const model::Parameters<Scalar>& params, std::span<const int> tokens);

// Same, from precomputed logits where row i scores token i+1.
template <typename Scalar>
double perplexity_from_logits(const model::Matrix<Scalar>& logits, std::span<const int> tokens);

// ---------------------------------------------------------------------------
// Exams

struct ExamQuestion {
  std::string id;
  std::string stem;
  std::vector<std::string> choices;
  std::vector<int> gold;  // one or more correct choice indices
  int points = 1;

  void validate() const;
};

struct ExamScore {
  std::int64_t points = 0;     // earned
  std::int64_t available = 0;  // sum of question points
  std::int64_t problems = 0;
  std::int64_t correct = 0;
  std::vector<std::string> missing;  // questions without a prediction
  // 100 * points / available; equals points / problems under unit weights.
  double percentage = 0.0;
};

// A prediction is correct when its choice set equals the gold set.
ExamScore score_exam(std::span<const ExamQuestion> questions,
                     const std::map<std::string, std::vector<int>>& predictions);

// One decimal place, as printed in score tables ("76.6").
std::string format_percent(double percentage);

// ---------------------------------------------------------------------------
// Agreement

class ConfusionTable {
 public:
  ConfusionTable() = default;
  explicit ConfusionTable(std::vector<std::string> labels);
  // Rows are gold labels, columns predictions.
  static ConfusionTable from_counts(std::vector<std::vector<std::int64_t>> counts,
                                    std::vector<std::string> labels = {});

  // Unknown labels are appended to the label set.
  void add(const std::string& gold, const std::string& predicted, std::int64_t n = 1);

  size_t size() const { return labels_.size(); }
  std::int64_t total() const;
  std::int64_t count(size_t gold, size_t predicted) const { return counts_[gold][predicted]; }
  const std::vector<std::string>& labels() const { return labels_; }

  // Same table under a relabeling: new index i holds old index perm[i].
  ConfusionTable permuted(std::span<const size_t> perm) const;

 private:
  size_t index_of(const std::string& label);
  std::vector<std::string> labels_;
  std::vector<std::vector<std::int64_t>> counts_;
};

// (p_o - p_e) / (1 - p_e). When p_e == 1 both raters used a single label
// for every item; the value is then defined as 1.
double cohen_kappa(const ConfusionTable& table);
bool kappa_degenerate(const ConfusionTable& table);
double accuracy(const ConfusionTable& table);

// ---------------------------------------------------------------------------
// Spans

struct Span {
  int start = 0;
  int end = 0;  // exclusive
  std::string label;
  std::string surface;
};

struct SpanSet {
  std::vector<Span> spans;
  std::optional<int> doc_length;

  // Throws invalid_span / overlapping_spans.
  void validate() const;
};

enum class MatchMode { kExact, kPartial };

struct SpanCounts {
  std::int64_t matched = 0;
  std::int64_t predicted = 0;
  std::int64_t gold = 0;

  SpanCounts& operator+=(const SpanCounts& o) {
    matched += o.matched;
    predicted += o.predicted;
    gold += o.gold;
    return *this;
  }
};

struct F1Score {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  bool precision_undefined = false;  // no predictions
  bool recall_undefined = false;     // no gold spans
};

// Greedy one-to-one matching in document order. Exact: equal bounds and
// label. Partial: at least one shared character and equal label.
SpanCounts match_spans(const SpanSet& pred, const SpanSet& gold, MatchMode mode);
F1Score f1_from_counts(const SpanCounts& counts);
F1Score ner_f1(const SpanSet& pred, const SpanSet& gold, MatchMode mode);

// ---------------------------------------------------------------------------
// Task files

enum class TaskKind { kMultipleChoice, kClassification, kSpans };

struct TaskResult {
  std::string task;
  TaskKind kind = TaskKind::kClassification;
  // kMultipleChoice
  ExamScore exam;
  // kClassification
  double kappa = 0.0;
  double accuracy = 0.0;
  // kSpans
  F1Score partial;
  F1Score exact;
  std::int64_t items = 0;
  std::vector<std::string> missing;
};

// Gold files are line records:
//   multiple choice  {"id","stem","choices","gold","points"?}
//   classification   {"id","gold"}
//   spans            {"id","text"?,"spans":[{"start","end","label"?}]}
// Prediction files are {"id","output"}, where output is a choice index, a
// list of indices or letters ("a,c"), a label string, or a span list.
TaskResult score_task(const std::string& name, TaskKind kind,
                      const std::filesystem::path& gold_path,
                      const std::filesystem::path& pred_path);

TaskKind task_kind_from_string(const std::string& name);

// Tab-separated table: task, kind, score in the kappa(accuracy) or
// partial(exact) layout, items.
std::string format_report(std::span<const TaskResult> results);

}  // namespace slm::eval
