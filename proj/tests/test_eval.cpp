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

#include <cmath>
#include <fstream>
#include <random>

#include "slm/error.hpp"
#include "slm/eval.hpp"
#include "support.hpp"

namespace slm::eval {
namespace {

TEST(Kappa, TwoByTwoReference) {
  const auto t = ConfusionTable::from_counts({{20, 5}, {10, 15}});
  EXPECT_NEAR(cohen_kappa(t), 0.4, 1e-12);
  EXPECT_NEAR(accuracy(t), 0.7, 1e-12);
  EXPECT_EQ(t.total(), 50);
}

TEST(Kappa, PerfectAndChanceAgreement) {
  EXPECT_NEAR(cohen_kappa(ConfusionTable::from_counts({{7, 0}, {0, 3}})), 1.0, 1e-12);
  EXPECT_NEAR(cohen_kappa(ConfusionTable::from_counts({{25, 25}, {25, 25}})), 0.0, 1e-12);
}

TEST(Kappa, DegenerateTableIsOne) {
  const auto t = ConfusionTable::from_counts({{10, 0}, {0, 0}});
  EXPECT_TRUE(kappa_degenerate(t));
  EXPECT_EQ(cohen_kappa(t), 1.0);
}

TEST(KappaProperty, InvariantUnderRelabeling) {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<std::int64_t> n(0, 20);
  for (int i = 0; i < 200; ++i) {
    std::vector<std::vector<std::int64_t>> c(3, std::vector<std::int64_t>(3));
    for (auto& r : c) {
      for (auto& x : r) x = n(rng) + 1;
    }
    const auto t = ConfusionTable::from_counts(c);
    const size_t perm[] = {2, 0, 1};
    const auto p = t.permuted(perm);
    EXPECT_NEAR(cohen_kappa(t), cohen_kappa(p), 1e-12);
    EXPECT_LE(cohen_kappa(t), 1.0);
  }
}

TEST(Confusion, AddGrowsLabels) {
  ConfusionTable t;
  t.add("pos", "pos", 3);
  t.add("neg", "pos");
  EXPECT_EQ(t.size(), 2u);
  EXPECT_EQ(t.count(1, 0), 1);
}

TEST(Exam, PercentageAndFormatting) {
  std::vector<ExamQuestion> qs(499);
  std::map<std::string, std::vector<int>> preds;
  for (int i = 0; i < 499; ++i) {
    qs[i] = {"q" + std::to_string(i), "", {"a", "b", "c", "d", "e"}, {1}, 1};
    preds[qs[i].id] = {i < 382 ? 1 : 2};
  }
  const auto s = score_exam(qs, preds);
  EXPECT_EQ(s.points, 382);
  EXPECT_EQ(format_percent(s.percentage), "76.6");
}

TEST(Exam, MultiAnswerNeedsExactSetAndPointsWeight) {
  std::vector<ExamQuestion> qs = {{"a", "", {"x", "y", "z"}, {0, 2}, 3}, {"b", "", {"x", "y"}, {1}, 1}};
  auto s = score_exam(qs, {{"a", {2, 0}}, {"b", {1}}});
  EXPECT_EQ(s.points, 4);
  EXPECT_EQ(s.available, 4);
  s = score_exam(qs, {{"a", {0}}});
  EXPECT_EQ(s.points, 0);
  EXPECT_EQ(s.missing, (std::vector<std::string>{"b"}));
  EXPECT_NEAR(s.percentage, 0.0, 1e-12);
}

TEST(Exam, ValidateRejectsOutOfRangeGold) {
  ExamQuestion q{"x", "", {"a", "b"}, {2}, 1};
  EXPECT_THROW(q.validate(), Error);
}

TEST(Spans, ExactAndPartial) {
  SpanSet gold{{{0, 3, "drug", ""}, {5, 9, "disease", ""}}, 20};
  SpanSet pred{{{0, 3, "drug", ""}, {6, 8, "disease", ""}, {12, 14, "drug", ""}}, 20};
  const auto e = ner_f1(pred, gold, MatchMode::kExact);
  EXPECT_NEAR(e.precision, 1.0 / 3.0, 1e-12);
  EXPECT_NEAR(e.recall, 0.5, 1e-12);
  const auto p = ner_f1(pred, gold, MatchMode::kPartial);
  EXPECT_NEAR(p.precision, 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(p.recall, 1.0, 1e-12);
  EXPECT_NEAR(p.f1, 0.8, 1e-12);
}

TEST(Spans, LabelsMustAgree) {
  SpanSet gold{{{0, 3, "drug", ""}}, std::nullopt};
  SpanSet pred{{{0, 3, "disease", ""}}, std::nullopt};
  EXPECT_EQ(match_spans(pred, gold, MatchMode::kPartial).matched, 0);
}

TEST(Spans, EmptySetsAreFlagged) {
  const auto f = f1_from_counts({0, 0, 0});
  EXPECT_TRUE(f.precision_undefined);
  EXPECT_TRUE(f.recall_undefined);
  EXPECT_EQ(f.f1, 0.0);
}

TEST(Spans, ValidateRejectsOverlapAndBadBounds) {
  EXPECT_THROW((SpanSet{{{0, 3, "a", ""}, {2, 4, "a", ""}}, std::nullopt}.validate()), Error);
  EXPECT_THROW((SpanSet{{{3, 3, "a", ""}}, std::nullopt}.validate()), Error);
  EXPECT_THROW((SpanSet{{{0, 30, "a", ""}}, 10}.validate()), Error);
}

TEST(SpansProperty, PartialDominatesExact) {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<int> gap(0, 4), w(1, 5), lab(0, 1), n(0, 5);
  const auto gen = [&] {
    SpanSet s;
    int pos = 0;
    for (int k = n(rng); k > 0; --k) {
      const int b = pos + gap(rng), e = b + w(rng);
      s.spans.push_back({b, e, lab(rng) ? "a" : "b", ""});
      pos = e;
    }
    return s;
  };
  for (int i = 0; i < 1000; ++i) {
    const auto g = gen(), p = gen();
    ASSERT_GE(ner_f1(p, g, MatchMode::kPartial).f1, ner_f1(p, g, MatchMode::kExact).f1);
  }
}

TEST(Perplexity, UniformLogitsGiveVocabSize) {
  const model::Matrix<double> logits = model::Matrix<double>::Zero(5, 40);
  const std::vector<int> tokens = {0, 1, 2, 3, 4};
  EXPECT_NEAR(perplexity_from_logits<double>(logits, tokens), 40.0, 1e-9);
}

TEST(Perplexity, ModelAgreesWithLogits) {
  const auto p = model::init_params<double>(slm::testing::tiny_config(), 1);
  const std::vector<int> tokens = {0, 5, 9, 3, 1};
  const auto logits = model::forward<double>(p, tokens).logits;
  EXPECT_NEAR(perplexity<double>(p, tokens), perplexity_from_logits<double>(logits, tokens), 1e-12);
}

TEST(TaskFiles, ToyExamAndClassification) {
  const auto dir = slm::testing::toy_dir();
  const auto exam = score_task("exam", TaskKind::kMultipleChoice, dir / "exam_gold.jsonl",
                               dir / "exam_pred.jsonl");
  EXPECT_EQ(exam.exam.points, 3);
  EXPECT_EQ(exam.exam.available, 6);
  const auto cls = score_task("cls", TaskKind::kClassification, dir / "cls_gold.jsonl",
                              dir / "cls_pred.jsonl");
  EXPECT_GT(cls.items, 0);
  EXPECT_LE(cls.kappa, 1.0);
  const auto report = format_report(std::vector<TaskResult>{exam, cls});
  EXPECT_NE(report.find("exam"), std::string::npos);
  EXPECT_THROW(task_kind_from_string("essay"), Error);
}

}  // namespace
}  // namespace slm::eval
