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

#include "slm/eval.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <tuple>

#include <nlohmann/json.hpp>

#include "slm/unicode.hpp"

namespace slm::eval {

// ---------------------------------------------------------------------------
// Perplexity

template <typename S>
double perplexity_from_logits(const model::Matrix<S>& logits, std::span<const int> tokens) {
  if (tokens.size() < 2) throw data_error("too_few_tokens", "perplexity needs at least two tokens");
  if (logits.rows() + 1 < static_cast<Eigen::Index>(tokens.size())) {
    throw data_error("shape_mismatch", "need one logits row per predicted token");
  }
  double nll = 0.0;
  for (size_t i = 1; i < tokens.size(); ++i) {
    const auto row = logits.row(static_cast<Eigen::Index>(i - 1));
    const int y = tokens[i];
    if (y < 0 || y >= row.size()) throw data_error("token_out_of_range", std::to_string(y));
    const double mx = static_cast<double>(row.maxCoeff());
    double sum = 0.0;
    for (Eigen::Index j = 0; j < row.size(); ++j) sum += std::exp(static_cast<double>(row(j)) - mx);
    nll += mx + std::log(sum) - static_cast<double>(row(y));
  }
  return std::exp(nll / static_cast<double>(tokens.size() - 1));
}

template <typename S>
double perplexity(const model::Parameters<S>& params, std::span<const int> tokens) {
  if (tokens.size() < 2) throw data_error("too_few_tokens", "perplexity needs at least two tokens");
  const auto out = model::forward<S>(params, tokens);
  return perplexity_from_logits<S>(out.logits, tokens);
}

template double perplexity<float>(const model::Parameters<float>&, std::span<const int>);
template double perplexity<double>(const model::Parameters<double>&, std::span<const int>);
template double perplexity_from_logits<float>(const model::Matrix<float>&, std::span<const int>);
template double perplexity_from_logits<double>(const model::Matrix<double>&, std::span<const int>);

// ---------------------------------------------------------------------------
// Exams

void ExamQuestion::validate() const {
  if (points < 1) throw data_error("invalid_question", id + ": points must be >= 1");
  if (gold.empty()) throw data_error("invalid_question", id + ": no gold answer");
  for (int g : gold) {
    if (g < 0 || (!choices.empty() && g >= static_cast<int>(choices.size()))) {
      throw data_error("invalid_question", id + ": gold index " + std::to_string(g) + " out of range");
    }
  }
}

ExamScore score_exam(std::span<const ExamQuestion> questions,
                     const std::map<std::string, std::vector<int>>& predictions) {
  ExamScore s;
  for (const auto& q : questions) {
    q.validate();
    s.problems += 1;
    s.available += q.points;
    const auto it = predictions.find(q.id);
    if (it == predictions.end()) {
      s.missing.push_back(q.id);
      continue;
    }
    const std::set<int> want(q.gold.begin(), q.gold.end());
    const std::set<int> got(it->second.begin(), it->second.end());
    if (want == got) {
      s.correct += 1;
      s.points += q.points;
    }
  }
  s.percentage = s.available > 0 ? 100.0 * static_cast<double>(s.points) / static_cast<double>(s.available) : 0.0;
  return s;
}

std::string format_percent(double percentage) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.1f", percentage);
  return buf;
}

// ---------------------------------------------------------------------------
// Agreement

ConfusionTable::ConfusionTable(std::vector<std::string> labels) : labels_(std::move(labels)) {
  counts_.assign(labels_.size(), std::vector<std::int64_t>(labels_.size(), 0));
}

ConfusionTable ConfusionTable::from_counts(std::vector<std::vector<std::int64_t>> counts,
                                           std::vector<std::string> labels) {
  const size_t k = counts.size();
  for (const auto& row : counts) {
    if (row.size() != k) throw data_error("shape_mismatch", "confusion table must be square");
    for (auto c : row) {
      if (c < 0) throw data_error("negative_count", "confusion counts must be non-negative");
    }
  }
  if (labels.empty()) {
    for (size_t i = 0; i < k; ++i) labels.push_back(std::to_string(i));
  }
  if (labels.size() != k) throw data_error("shape_mismatch", "one label per row required");
  ConfusionTable t(std::move(labels));
  t.counts_ = std::move(counts);
  return t;
}

size_t ConfusionTable::index_of(const std::string& label) {
  const auto it = std::find(labels_.begin(), labels_.end(), label);
  if (it != labels_.end()) return static_cast<size_t>(it - labels_.begin());
  labels_.push_back(label);
  for (auto& row : counts_) row.push_back(0);
  counts_.emplace_back(labels_.size(), 0);
  return labels_.size() - 1;
}

void ConfusionTable::add(const std::string& gold, const std::string& predicted, std::int64_t n) {
  const size_t g = index_of(gold);
  const size_t p = index_of(predicted);
  counts_[g][p] += n;
}

std::int64_t ConfusionTable::total() const {
  std::int64_t n = 0;
  for (const auto& row : counts_) {
    for (auto c : row) n += c;
  }
  return n;
}

ConfusionTable ConfusionTable::permuted(std::span<const size_t> perm) const {
  if (perm.size() != size()) throw data_error("shape_mismatch", "permutation size differs");
  std::vector<std::string> labels(size());
  std::vector<std::vector<std::int64_t>> counts(size(), std::vector<std::int64_t>(size()));
  for (size_t i = 0; i < size(); ++i) {
    labels[i] = labels_[perm[i]];
    for (size_t j = 0; j < size(); ++j) counts[i][j] = counts_[perm[i]][perm[j]];
  }
  return from_counts(std::move(counts), std::move(labels));
}

namespace {

struct Agreement {
  double p_o;
  double p_e;
};

Agreement agreement(const ConfusionTable& t) {
  const std::int64_t n = t.total();
  if (n <= 0) throw data_error("empty_table", "confusion table has no items");
  const double total = static_cast<double>(n);
  std::int64_t diag = 0;
  double p_e = 0.0;
  for (size_t k = 0; k < t.size(); ++k) {
    diag += t.count(k, k);
    std::int64_t row = 0, col = 0;
    for (size_t j = 0; j < t.size(); ++j) {
      row += t.count(k, j);
      col += t.count(j, k);
    }
    p_e += (static_cast<double>(row) / total) * (static_cast<double>(col) / total);
  }
  return {static_cast<double>(diag) / total, p_e};
}

}  // namespace

bool kappa_degenerate(const ConfusionTable& table) { return agreement(table).p_e == 1.0; }

double cohen_kappa(const ConfusionTable& table) {
  const Agreement a = agreement(table);
  if (a.p_e == 1.0) return 1.0;
  return (a.p_o - a.p_e) / (1.0 - a.p_e);
}

double accuracy(const ConfusionTable& table) { return agreement(table).p_o; }

// ---------------------------------------------------------------------------
// Spans

void SpanSet::validate() const {
  std::vector<const Span*> sorted;
  for (const auto& s : spans) {
    if (s.start < 0 || s.start >= s.end) {
      throw data_error("invalid_span", "span [" + std::to_string(s.start) + ", " +
                                           std::to_string(s.end) + ") is empty or negative");
    }
    if (doc_length && s.end > *doc_length) {
      throw data_error("invalid_span", "span ends past the document");
    }
    sorted.push_back(&s);
  }
  std::sort(sorted.begin(), sorted.end(), [](const Span* a, const Span* b) {
    return std::tie(a->start, a->end) < std::tie(b->start, b->end);
  });
  for (size_t i = 1; i < sorted.size(); ++i) {
    if (sorted[i]->start < sorted[i - 1]->end) {
      throw data_error("overlapping_spans", "spans within one set overlap at " +
                                                std::to_string(sorted[i]->start));
    }
  }
}

SpanCounts match_spans(const SpanSet& pred, const SpanSet& gold, MatchMode mode) {
  pred.validate();
  gold.validate();
  const auto by_position = [](const SpanSet& set) {
    std::vector<const Span*> v;
    for (const auto& s : set.spans) v.push_back(&s);
    std::sort(v.begin(), v.end(), [](const Span* a, const Span* b) {
      return std::tie(a->start, a->end) < std::tie(b->start, b->end);
    });
    return v;
  };
  const auto p = by_position(pred);
  const auto g = by_position(gold);
  std::vector<bool> used(g.size(), false);
  SpanCounts c;
  c.predicted = static_cast<std::int64_t>(p.size());
  c.gold = static_cast<std::int64_t>(g.size());
  for (const Span* ps : p) {
    for (size_t j = 0; j < g.size(); ++j) {
      if (used[j] || g[j]->label != ps->label) continue;
      const bool hit = mode == MatchMode::kExact
                           ? (g[j]->start == ps->start && g[j]->end == ps->end)
                           : (std::max(g[j]->start, ps->start) < std::min(g[j]->end, ps->end));
      if (hit) {
        used[j] = true;
        ++c.matched;
        break;
      }
    }
  }
  return c;
}

F1Score f1_from_counts(const SpanCounts& c) {
  F1Score s;
  s.precision_undefined = c.predicted == 0;
  s.recall_undefined = c.gold == 0;
  s.precision = c.predicted ? static_cast<double>(c.matched) / static_cast<double>(c.predicted) : 0.0;
  s.recall = c.gold ? static_cast<double>(c.matched) / static_cast<double>(c.gold) : 0.0;
  s.f1 = s.precision + s.recall > 0.0 ? 2.0 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  return s;
}

F1Score ner_f1(const SpanSet& pred, const SpanSet& gold, MatchMode mode) {
  return f1_from_counts(match_spans(pred, gold, mode));
}

// ---------------------------------------------------------------------------
// Task files

namespace {

std::vector<nlohmann::json> read_records(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw data_error("io", "cannot open " + path.string());
  std::vector<nlohmann::json> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw data_error("bad_record", path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

std::string record_id(const nlohmann::json& j) {
  const auto& id = j.at("id");
  return id.is_string() ? id.get<std::string>() : id.dump();
}

// Accepts 2, [0, 2], "c", "a,c" or "1,3" (letters are 0-based a.., digits as given).
std::vector<int> parse_choices(const nlohmann::json& v) {
  std::vector<int> out;
  if (v.is_number_integer()) return {v.get<int>()};
  if (v.is_array()) {
    for (const auto& e : v) {
      const auto sub = parse_choices(e);
      out.insert(out.end(), sub.begin(), sub.end());
    }
    return out;
  }
  if (!v.is_string()) throw data_error("bad_record", "unreadable choice " + v.dump());
  std::string token;
  std::stringstream ss(v.get<std::string>());
  while (std::getline(ss, token, ',')) {
    token.erase(std::remove_if(token.begin(), token.end(), ::isspace), token.end());
    if (token.empty()) continue;
    if (token.size() == 1 && std::isalpha(static_cast<unsigned char>(token[0]))) {
      out.push_back(std::tolower(static_cast<unsigned char>(token[0])) - 'a');
    } else {
      try {
        out.push_back(std::stoi(token));
      } catch (const std::exception&) {
        throw data_error("bad_record", "unreadable choice " + token);
      }
    }
  }
  return out;
}

SpanSet parse_spans(const nlohmann::json& v, std::optional<int> doc_length) {
  SpanSet set;
  set.doc_length = doc_length;
  for (const auto& s : v) {
    Span sp;
    sp.start = s.at("start").get<int>();
    sp.end = s.at("end").get<int>();
    sp.label = s.value("label", std::string());
    sp.surface = s.value("surface", std::string());
    set.spans.push_back(std::move(sp));
  }
  return set;
}

std::string fixed2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

}  // namespace

TaskKind task_kind_from_string(const std::string& name) {
  if (name == "multiple_choice" || name == "exam") return TaskKind::kMultipleChoice;
  if (name == "classification") return TaskKind::kClassification;
  if (name == "spans" || name == "ner") return TaskKind::kSpans;
  throw config_error("unknown_task_kind", "task kind must be multiple_choice, classification or spans");
}

TaskResult score_task(const std::string& name, TaskKind kind,
                      const std::filesystem::path& gold_path,
                      const std::filesystem::path& pred_path) {
  const auto gold = read_records(gold_path);
  std::map<std::string, nlohmann::json> preds;
  for (const auto& r : read_records(pred_path)) preds[record_id(r)] = r.at("output");

  TaskResult res;
  res.task = name;
  res.kind = kind;
  res.items = static_cast<std::int64_t>(gold.size());
  try {
    if (kind == TaskKind::kMultipleChoice) {
      std::vector<ExamQuestion> qs;
      std::map<std::string, std::vector<int>> answers;
      for (const auto& g : gold) {
        ExamQuestion q;
        q.id = record_id(g);
        q.stem = g.value("stem", std::string());
        q.choices = g.value("choices", std::vector<std::string>());
        q.gold = parse_choices(g.at("gold"));
        q.points = g.value("points", 1);
        const auto it = preds.find(q.id);
        if (it != preds.end()) answers[q.id] = parse_choices(it->second);
        qs.push_back(std::move(q));
      }
      res.exam = score_exam(qs, answers);
      res.missing = res.exam.missing;
    } else if (kind == TaskKind::kClassification) {
      ConfusionTable table;
      for (const auto& g : gold) {
        const std::string id = record_id(g);
        const std::string want = g.at("gold").is_string() ? g.at("gold").get<std::string>() : g.at("gold").dump();
        const auto it = preds.find(id);
        std::string got;
        if (it == preds.end()) {
          res.missing.push_back(id);
          got = "<missing>";
        } else {
          got = it->second.is_string() ? it->second.get<std::string>() : it->second.dump();
        }
        table.add(want, got);
      }
      res.kappa = cohen_kappa(table);
      res.accuracy = accuracy(table);
    } else {
      SpanCounts exact, partial;
      for (const auto& g : gold) {
        const std::string id = record_id(g);
        std::optional<int> len;
        if (g.contains("text")) {
          len = static_cast<int>(unicode::decode_utf8(g.at("text").get<std::string>()).size());
        }
        const SpanSet gs = parse_spans(g.at("spans"), len);
        SpanSet ps;
        const auto it = preds.find(id);
        if (it == preds.end()) {
          res.missing.push_back(id);
        } else {
          ps = parse_spans(it->second, len);
        }
        exact += match_spans(ps, gs, MatchMode::kExact);
        partial += match_spans(ps, gs, MatchMode::kPartial);
      }
      res.exact = f1_from_counts(exact);
      res.partial = f1_from_counts(partial);
    }
  } catch (const nlohmann::json::exception& e) {
    throw data_error("bad_record", name + ": " + e.what());
  }
  return res;
}

std::string format_report(std::span<const TaskResult> results) {
  std::ostringstream out;
  out << "# score-report v1\n";
  out << "task\tkind\tscore\titems\tmissing\n";
  for (const auto& r : results) {
    out << r.task << '\t';
    switch (r.kind) {
      case TaskKind::kMultipleChoice:
        out << "multiple_choice\t" << r.exam.points << " (" << format_percent(r.exam.percentage)
            << "%)";
        break;
      case TaskKind::kClassification:
        out << "classification\t" << fixed2(r.kappa) << "(" << fixed2(r.accuracy) << ")";
        break;
      case TaskKind::kSpans:
        out << "spans\t" << fixed2(r.partial.f1) << "(" << fixed2(r.exact.f1) << ")";
        break;
    }
    out << '\t' << r.items << '\t' << r.missing.size() << '\n';
  }
  return out.str();
}

}  // namespace slm::eval
