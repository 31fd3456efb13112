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

#include "cli.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <sstream>

#include "slm/analysis.hpp"
#include "slm/config.hpp"
#include "slm/corpus_clean.hpp"
#include "slm/error.hpp"
#include "slm/eval.hpp"
#include "slm/parallel.hpp"
#include "slm/quality.hpp"
#include "slm/segmenter.hpp"
#include "slm/strings.hpp"
#include "slm/tokenizer.hpp"
#include "slm/train.hpp"

namespace slm::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kToolVersion = "0.1.0";

// State shared by every subcommand: the resolved config and the files a run
// reads and writes, for the manifest.
struct Context {
  std::ostream* out = nullptr;
  std::ostream* err = nullptr;
  std::vector<std::string> argv;
  std::string config_path;
  std::optional<std::uint64_t> seed_override;
  std::string manifest_path;
  bool no_manifest = false;
  RunConfig config;

  std::vector<fs::path> inputs;
  std::vector<fs::path> outputs;
  // Directory outputs put their manifest inside the directory.
  bool output_is_dir = false;

  void load_config() {
    config = config_path.empty() ? RunConfig{} : load_run_config(config_path);
    if (seed_override) {
      config.seed = *seed_override;
      config.propagate();
    }
    if (!config_path.empty()) inputs.emplace_back(config_path);
    if (!config.lexicon.empty()) inputs.push_back(config.lexicon);
  }

  fs::path input(const std::string& p) {
    if (!fs::exists(p)) throw data_error("io", "no such file: " + p);
    inputs.emplace_back(p);
    return p;
  }

  fs::path output(const std::string& p) {
    fs::path path = artifact_path(p);
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    outputs.push_back(path);
    return path;
  }

  tok::Tokenizer tokenizer(const tok::Vocabulary& vocab) const {
    seg::Lexicon lex = config.lexicon.empty() ? seg::Lexicon{} : seg::Lexicon::load(config.lexicon);
    return tok::Tokenizer(vocab, config.cleaning, std::move(lex));
  }

  void write_manifest() const {
    if (no_manifest) return;
    fs::path where;
    if (!manifest_path.empty()) {
      where = manifest_path;
    } else if (outputs.empty()) {
      return;
    } else if (output_is_dir) {
      where = outputs.front() / "manifest.json";
    } else {
      where = outputs.front();
      where += ".manifest.json";
    }
    Manifest m;
    m.tool_version = kToolVersion;
    m.argv = argv;
    m.cwd = fs::current_path().string();
    m.config_path = config_path;
    m.config_hash = config_hash(config);
    m.seed = config.seed;
    m.workers = config.workers;
    for (const auto& p : inputs) add_digests(m.inputs, p);
    for (const auto& p : outputs) add_digests(m.outputs, p);
    m.save(where);
  }
};

template <typename F>
void with_precision(const std::string& precision, F&& f) {
  if (precision == "f64") {
    f(double{});
  } else {
    f(float{});
  }
}

std::vector<int> with_bos(std::vector<int> ids) {
  ids.insert(ids.begin(), tok::kBeginId);
  return ids;
}

std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("io", "cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  return lines;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("io", "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("io", "cannot write " + path.string());
  out << text;
}

// ---------------------------------------------------------------------------
// Subcommands

void cmd_clean(Context& ctx, const std::string& in, const std::string& out_path,
               const std::string& report_path) {
  const auto raw = read_raw_documents(ctx.input(in));
  const clean::TextCleaner cleaner(ctx.config.cleaning);
  std::vector<clean::CleanDocument> cleaned(raw.size());
  std::vector<std::optional<clean::RejectReason>> verdicts(raw.size());
  parallel_tasks(raw.size(), ctx.config.workers, [&](size_t i) {
    cleaned[i] = clean::clean_document(raw[i], cleaner);
    verdicts[i] = clean::filter_document(cleaned[i], cleaner);
  });
  clean::FilterReport report;
  std::vector<clean::CleanDocument> kept;
  for (size_t i = 0; i < raw.size(); ++i) {
    ++report.input;
    report.bytes_in += static_cast<std::int64_t>(raw[i].text.size());
    if (verdicts[i]) {
      report.reject(*verdicts[i], static_cast<std::int64_t>(raw[i].text.size()));
      continue;
    }
    ++report.kept;
    const auto removed = static_cast<std::int64_t>(raw[i].text.size()) -
                         static_cast<std::int64_t>(cleaned[i].text.size());
    report.bytes_out += static_cast<std::int64_t>(cleaned[i].text.size());
    report.bytes_removed["cleaning"] += removed;
    kept.push_back(std::move(cleaned[i]));
  }
  write_clean_documents(ctx.output(out_path), kept);
  if (!report_path.empty()) write_text(ctx.output(report_path), report.to_text());
  *ctx.out << "kept " << report.kept << " of " << report.input << " documents\n";
}

void cmd_dedup(Context& ctx, const std::string& in, const std::string& out_path,
               const std::string& report_path) {
  auto docs = read_clean_documents(ctx.input(in));
  auto result = clean::dedup_corpus(std::move(docs), ctx.config.cleaning.sentence_repeat_limit);
  write_clean_documents(ctx.output(out_path), result.docs);
  if (!report_path.empty()) write_text(ctx.output(report_path), result.report.to_text());
  *ctx.out << "kept " << result.report.kept << " of " << result.report.input << " documents\n";
}

void cmd_tokenizer_train(Context& ctx, const std::string& in, const std::string& out_path) {
  const auto docs = read_clean_documents(ctx.input(in));
  const clean::TextCleaner cleaner(ctx.config.cleaning);
  std::vector<std::string> texts;
  texts.reserve(docs.size());
  for (const auto& d : docs) texts.push_back(cleaner.clean(d.text));
  seg::Lexicon lex = ctx.config.lexicon.empty() ? seg::Lexicon{} : seg::Lexicon::load(ctx.config.lexicon);
  const seg::LongestMatchSegmenter segmenter(std::move(lex));
  auto words = tok::count_words(texts, segmenter);
  tok::UnigramTrainer trainer(std::move(words), ctx.config.tokenizer);
  const auto vocab = trainer.train();
  vocab.save(ctx.output(out_path));
  *ctx.out << "vocabulary of " << vocab.size() << " entries written to " << out_path << "\n";
}

void cmd_tokenizer_encode(Context& ctx, const std::string& vocab_path, const std::string& in,
                          const std::string& out_path) {
  const auto tk = ctx.tokenizer(tok::Vocabulary::load(ctx.input(vocab_path)));
  std::ostringstream ss;
  for (const auto& line : read_lines(ctx.input(in))) {
    const auto ids = tk.encode(line);
    for (size_t i = 0; i < ids.size(); ++i) ss << (i ? " " : "") << ids[i];
    ss << '\n';
  }
  write_text(ctx.output(out_path), ss.str());
}

void cmd_tokenizer_decode(Context& ctx, const std::string& vocab_path, const std::string& in,
                          const std::string& out_path, bool strip, bool meta_space) {
  const auto vocab = tok::Vocabulary::load(ctx.input(vocab_path));
  tok::DecodeOptions opts;
  opts.strip_specials = strip;
  opts.restore_whitespace = !meta_space;
  std::ostringstream ss;
  int lineno = 0;
  for (const auto& line : read_lines(ctx.input(in))) {
    ++lineno;
    std::vector<int> ids;
    std::istringstream ls(line);
    std::string tokstr;
    while (ls >> tokstr) {
      try {
        size_t used = 0;
        ids.push_back(std::stoi(tokstr, &used));
        if (used != tokstr.size()) throw std::invalid_argument(tokstr);
      } catch (const std::exception&) {
        throw data_error("bad_id", in + ":" + std::to_string(lineno) + ": '" + tokstr + "' is not an id");
      }
    }
    // Escape so that decoded line breaks keep one record per line.
    ss << escape_line(tok::decode(ids, vocab, opts)) << '\n';
  }
  write_text(ctx.output(out_path), ss.str());
}

std::vector<std::vector<int>> encode_documents(const Context& ctx, const tok::Tokenizer& tk,
                                               const std::vector<clean::CleanDocument>& docs) {
  std::vector<std::vector<int>> ids(docs.size());
  parallel_tasks(docs.size(), ctx.config.workers, [&](size_t i) { ids[i] = tk.encode(docs[i].text); });
  return ids;
}

void adopt_vocab_size(Context& ctx, int vocab_size) {
  if (ctx.config.model.vocab_size != vocab_size) {
    *ctx.err << "note: model.vocab_size " << ctx.config.model.vocab_size
             << " replaced by the tokenizer's " << vocab_size << "\n";
    ctx.config.model.vocab_size = vocab_size;
  }
}

train::RunOptions run_options(Context& ctx, const std::string& out_dir,
                              const std::string& resume, int log_every) {
  train::RunOptions opts;
  opts.out_dir = ctx.output(out_dir);
  ctx.output_is_dir = true;
  fs::create_directories(opts.out_dir);
  if (!resume.empty()) opts.resume = ctx.input(resume);
  std::ostream* err = ctx.err;
  opts.on_step = [err, log_every](const train::StepStats& s) {
    if (log_every > 0 && s.step % log_every == 0) {
      char line[128];
      std::snprintf(line, sizeof(line), "step %lld  lr %.3e  loss %.6f\n",
                    static_cast<long long>(s.step), s.lr, s.loss);
      *err << line;
    }
  };
  return opts;
}

void cmd_pretrain(Context& ctx, const std::string& vocab_path, const std::string& in,
                  const std::string& out_dir, std::optional<std::int64_t> steps,
                  const std::string& resume, int log_every) {
  const auto vocab = tok::Vocabulary::load(ctx.input(vocab_path));
  adopt_vocab_size(ctx, vocab.size());
  if (steps) ctx.config.train.total_steps = *steps;
  ctx.config.validate();
  const auto tk = ctx.tokenizer(vocab);
  const auto docs = read_clean_documents(ctx.input(in));
  const auto ids = encode_documents(ctx, tk, docs);
  const auto packed = train::pack_tokens(ids, ctx.config.model.max_seq, train::PackMode::kPad);
  const auto opts = run_options(ctx, out_dir, resume, log_every);
  with_precision(ctx.config.precision, [&](auto tag) {
    using S = decltype(tag);
    auto params = model::init_params<S>(ctx.config.model, ctx.config.seed);
    const auto result = train::pretrain<S>(std::move(params), packed, ctx.config.train, opts);
    *ctx.out << "trained " << result.log.size() << " steps over " << packed.blocks.size()
             << " blocks; " << result.checkpoints.size() << " checkpoint(s) in " << out_dir << "\n";
  });
}

void cmd_finetune(Context& ctx, const std::string& vocab_path, const std::string& checkpoint,
                  const std::string& in, const std::string& out_dir,
                  std::optional<std::int64_t> steps, const std::string& resume, int log_every) {
  const auto base_vocab = tok::Vocabulary::load(ctx.input(vocab_path));
  const auto vocab = base_vocab.has_chat_specials()
                         ? base_vocab
                         : base_vocab.extend_specials({std::string(tok::kSystem),
                                                       std::string(tok::kUser),
                                                       std::string(tok::kAssistant)});
  if (steps) ctx.config.finetune.total_steps = *steps;
  ctx.config.validate();
  const auto tk = ctx.tokenizer(vocab);
  const auto examples = train::load_chat_examples(ctx.input(in));
  std::vector<train::Sequence> seqs;
  for (const auto& ex : examples) seqs.push_back(train::render_chat(ex, tk));
  const auto opts = run_options(ctx, out_dir, resume, log_every);
  vocab.save(opts.out_dir / "vocab.txt");
  with_precision(ctx.config.precision, [&](auto tag) {
    using S = decltype(tag);
    auto params = model::load_checkpoint<S>(ctx.input(checkpoint).string());
    const auto result =
        train::finetune<S>(std::move(params), seqs, vocab.size(), ctx.config.finetune, opts);
    *ctx.out << "fine-tuned " << result.log.size() << " steps on " << seqs.size()
             << " chats; " << result.checkpoints.size() << " checkpoint(s) in " << out_dir << "\n";
  });
}

template <typename S>
std::vector<quality::FeatureVector> document_features(const Context& ctx,
                                                      const model::Parameters<S>& params,
                                                      const tok::Tokenizer& tk,
                                                      const std::vector<clean::CleanDocument>& docs) {
  std::vector<quality::FeatureVector> feats(docs.size());
  for (size_t i = 0; i < docs.size(); ++i) {
    (void)ctx;
    feats[i] = quality::extract_feature<S>(params, with_bos(tk.encode(docs[i].text)));
  }
  return feats;
}

void cmd_quality_train(Context& ctx, const std::string& vocab_path, const std::string& checkpoint,
                       const std::string& in, const std::string& labels_path,
                       const std::string& out_path) {
  const auto tk = ctx.tokenizer(tok::Vocabulary::load(ctx.input(vocab_path)));
  const auto docs = read_clean_documents(ctx.input(in));
  const auto labels = quality::load_labels(ctx.input(labels_path));
  std::vector<clean::CleanDocument> labelled;
  std::vector<quality::Label> y;
  for (const auto& d : docs) {
    if (const auto it = labels.find(d.id); it != labels.end()) {
      labelled.push_back(d);
      y.push_back(it->second);
    }
  }
  if (labelled.size() != labels.size()) {
    throw data_error("missing_document", "some labelled ids are not in " + in);
  }
  with_precision(ctx.config.precision, [&](auto tag) {
    using S = decltype(tag);
    const auto params = model::load_checkpoint<S>(ctx.input(checkpoint).string());
    const auto x = document_features<S>(ctx, params, tk, labelled);
    const auto forest = quality::rf_train(x, y, ctx.config.quality);
    forest.save(ctx.output(out_path));
    *ctx.out << "forest of " << forest.trees.size() << " trees over " << x.size()
             << " labelled documents\n";
  });
}

void cmd_quality_apply(Context& ctx, const std::string& vocab_path, const std::string& checkpoint,
                       const std::string& forest_path, const std::string& in,
                       const std::string& out_path, const std::string& keep_path) {
  const auto tk = ctx.tokenizer(tok::Vocabulary::load(ctx.input(vocab_path)));
  const auto docs = read_clean_documents(ctx.input(in));
  const auto forest = quality::RandomForest::load(ctx.input(forest_path));
  with_precision(ctx.config.precision, [&](auto tag) {
    using S = decltype(tag);
    const auto params = model::load_checkpoint<S>(ctx.input(checkpoint).string());
    const auto x = document_features<S>(ctx, params, tk, docs);
    std::vector<json> records;
    std::vector<clean::CleanDocument> kept;
    for (size_t i = 0; i < docs.size(); ++i) {
      const auto p = quality::rf_predict(forest, x[i]);
      records.push_back({{"id", docs[i].id},
                         {"label", std::string(quality::to_string(p.label))},
                         {"probability", p.probability}});
      if (p.label == quality::Label::kHigh) kept.push_back(docs[i]);
    }
    write_jsonl(ctx.output(out_path), records);
    if (!keep_path.empty()) write_clean_documents(ctx.output(keep_path), kept);
    *ctx.out << kept.size() << " of " << docs.size() << " documents predicted high\n";
  });
}

void cmd_eval(Context& ctx, const std::vector<std::string>& tasks, const std::string& out_path,
              const std::string& ppl_in, const std::string& vocab_path,
              const std::string& checkpoint) {
  std::vector<eval::TaskResult> results;
  for (const auto& spec : tasks) {
    // name=kind:gold:pred
    const auto eq = spec.find('=');
    const auto c1 = spec.find(':', eq == std::string::npos ? 0 : eq);
    const auto c2 = c1 == std::string::npos ? c1 : spec.find(':', c1 + 1);
    if (eq == std::string::npos || c1 == std::string::npos || c2 == std::string::npos) {
      throw config_error("bad_task", "--task expects name=kind:gold.jsonl:pred.jsonl, got " + spec);
    }
    const std::string name = spec.substr(0, eq);
    const auto kind = eval::task_kind_from_string(spec.substr(eq + 1, c1 - eq - 1));
    const auto gold = ctx.input(spec.substr(c1 + 1, c2 - c1 - 1));
    const auto pred = ctx.input(spec.substr(c2 + 1));
    results.push_back(eval::score_task(name, kind, gold, pred));
  }
  std::string report = eval::format_report(results);
  if (!ppl_in.empty()) {
    if (vocab_path.empty() || checkpoint.empty()) {
      throw config_error("missing_option", "--perplexity needs --vocab and --checkpoint");
    }
    const auto tk = ctx.tokenizer(tok::Vocabulary::load(ctx.input(vocab_path)));
    const auto docs = read_clean_documents(ctx.input(ppl_in));
    with_precision(ctx.config.precision, [&](auto tag) {
      using S = decltype(tag);
      const auto params = model::load_checkpoint<S>(ctx.input(checkpoint).string());
      double nll = 0.0;
      std::int64_t n = 0;
      const auto window = static_cast<size_t>(params.config.max_seq);
      for (const auto& d : docs) {
        auto ids = with_bos(tk.encode(d.text));
        ids.push_back(tok::kEndId);
        // Windows overlap by one token so every next-token pair is scored once.
        for (size_t start = 0; start + 1 < ids.size(); start += window - 1) {
          const size_t len = std::min(window, ids.size() - start);
          if (len < 2) break;
          const std::span<const int> w(ids.data() + start, len);
          nll += std::log(eval::perplexity<S>(params, w)) * static_cast<double>(len - 1);
          n += static_cast<std::int64_t>(len - 1);
        }
      }
      if (n == 0) throw data_error("too_few_tokens", "no scorable tokens in " + ppl_in);
      char line[128];
      std::snprintf(line, sizeof(line), "perplexity\tperplexity\t%.4f\t%lld\t0\n",
                    std::exp(nll / static_cast<double>(n)), static_cast<long long>(n));
      report += line;
    });
  }
  if (out_path.empty()) {
    *ctx.out << report;
  } else {
    write_text(ctx.output(out_path), report);
  }
}

void cmd_analogy(Context& ctx, const std::string& vocab_path, const std::string& checkpoint,
                 const std::vector<std::string>& words, int k, const std::string& out_path) {
  const auto vocab = tok::Vocabulary::load(ctx.input(vocab_path));
  with_precision(ctx.config.precision, [&](auto tag) {
    using S = decltype(tag);
    const auto params = model::load_checkpoint<S>(ctx.input(checkpoint).string());
    if (params.config.vocab_size != vocab.size()) {
      throw data_error("shape_mismatch", "checkpoint and vocabulary sizes differ");
    }
    const auto hits = analysis::analogy<S>(params.token_embedding, vocab, words[0], words[1],
                                           words[2], k);
    std::ostringstream ss;
    ss << "rank\tid\ttoken\tcosine\n";
    for (size_t i = 0; i < hits.size(); ++i) {
      char cos[32];
      std::snprintf(cos, sizeof(cos), "%.6f", hits[i].cosine);
      ss << i + 1 << '\t' << hits[i].id << '\t' << escape_line(hits[i].surface) << '\t' << cos << '\n';
    }
    if (out_path.empty()) {
      *ctx.out << ss.str();
    } else {
      write_text(ctx.output(out_path), ss.str());
    }
  });
}

void cmd_embed_export(Context& ctx, const std::string& vocab_path, const std::string& checkpoint,
                      const std::string& filter, const std::vector<int>& ids,
                      const std::string& stem) {
  const auto vocab = tok::Vocabulary::load(ctx.input(vocab_path));
  with_precision(ctx.config.precision, [&](auto tag) {
    using S = decltype(tag);
    const auto params = model::load_checkpoint<S>(ctx.input(checkpoint).string());
    const auto e = analysis::export_embeddings<S>(params, vocab,
                                                  analysis::token_filter_from_string(filter), ids);
    const fs::path base = artifact_path(stem);
    if (base.has_parent_path()) fs::create_directories(base.parent_path());
    analysis::write_embedding_export(base, e);
    fs::path mat = base, labels = base;
    mat += ".mat";
    labels += ".labels";
    ctx.outputs.push_back(mat);
    ctx.outputs.push_back(labels);
    *ctx.out << e.ids.size() << " embeddings written to " << mat.string() << "\n";
  });
}

void cmd_attn_export(Context& ctx, const std::string& vocab_path, const std::string& checkpoint,
                     const std::string& text, const std::string& in, const std::string& out_dir) {
  const auto tk = ctx.tokenizer(tok::Vocabulary::load(ctx.input(vocab_path)));
  const std::string source = in.empty() ? text : slurp(ctx.input(in));
  auto ids = with_bos(tk.encode(source));
  ids.push_back(tok::kEndId);
  with_precision(ctx.config.precision, [&](auto tag) {
    using S = decltype(tag);
    const auto params = model::load_checkpoint<S>(ctx.input(checkpoint).string());
    const auto e = analysis::export_attention<S>(params, ids);
    const fs::path dir = ctx.output(out_dir);
    ctx.output_is_dir = true;
    analysis::write_attention_export(dir, e);
    *ctx.out << e.maps.size() << " layer maps of " << e.seq << " tokens written to " << out_dir << "\n";
  });
}

int replay(const std::string& manifest_path, std::ostream& out, std::ostream& err);

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kConfig: return kExitConfig;
    case ErrorKind::kData: return kExitData;
    case ErrorKind::kNumeric: return kExitNumeric;
  }
  return kExitData;
}

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Corpus cleaning, tokenizer, training and evaluation toolkit", "slm"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  Context ctx;
  ctx.out = &out;
  ctx.err = &err;
  ctx.argv = args;

  std::function<void()> action;
  std::string replay_manifest;

  const auto common = [&](CLI::App* sub) {
    sub->add_option("--config", ctx.config_path, "Run config (JSON)")->check(CLI::ExistingFile);
    sub->add_option("--seed", ctx.seed_override, "Override every seed in the config");
    sub->add_option("--manifest", ctx.manifest_path, "Manifest path (default: next to the output)");
    sub->add_flag("--no-manifest", ctx.no_manifest, "Do not write a manifest");
  };

  std::string in, out_path, report, vocab, checkpoint, labels, forest, keep, resume, text, filter = "all";
  std::optional<std::int64_t> steps;
  int log_every = 10, k = 10;
  bool strip = false, meta_space = false;
  std::vector<std::string> tasks, words;
  std::vector<int> ids;
  std::string ppl_in;

  auto* clean_cmd = app.add_subcommand("clean", "Normalize and filter raw documents");
  common(clean_cmd);
  clean_cmd->add_option("--in", in, "Raw documents (JSONL)")->required();
  clean_cmd->add_option("--out", out_path, "Clean documents (JSONL)")->required();
  clean_cmd->add_option("--report", report, "Filter report");
  clean_cmd->callback([&] { action = [&] { cmd_clean(ctx, in, out_path, report); }; });

  auto* dedup_cmd = app.add_subcommand("dedup", "Remove duplicate documents and sentences");
  common(dedup_cmd);
  dedup_cmd->add_option("--in", in, "Clean documents (JSONL)")->required();
  dedup_cmd->add_option("--out", out_path, "Deduplicated documents (JSONL)")->required();
  dedup_cmd->add_option("--report", report, "Filter report");
  dedup_cmd->callback([&] { action = [&] { cmd_dedup(ctx, in, out_path, report); }; });

  auto* quality_cmd = app.add_subcommand("quality", "Random-forest quality filter");
  quality_cmd->require_subcommand(1);
  auto* qtrain = quality_cmd->add_subcommand("train", "Fit a forest on labelled documents");
  common(qtrain);
  qtrain->add_option("--vocab", vocab)->required();
  qtrain->add_option("--checkpoint", checkpoint)->required();
  qtrain->add_option("--in", in, "Clean documents (JSONL)")->required();
  qtrain->add_option("--labels", labels, "Labels (JSONL {id, label})")->required();
  qtrain->add_option("--out", out_path, "Forest file")->required();
  qtrain->callback([&] {
    action = [&] { cmd_quality_train(ctx, vocab, checkpoint, in, labels, out_path); };
  });
  auto* qapply = quality_cmd->add_subcommand("apply", "Label documents with a trained forest");
  common(qapply);
  qapply->add_option("--vocab", vocab)->required();
  qapply->add_option("--checkpoint", checkpoint)->required();
  qapply->add_option("--forest", forest)->required();
  qapply->add_option("--in", in, "Clean documents (JSONL)")->required();
  qapply->add_option("--out", out_path, "Predictions (JSONL {id, label, probability})")->required();
  qapply->add_option("--keep", keep, "Write documents predicted high here");
  qapply->callback([&] {
    action = [&] { cmd_quality_apply(ctx, vocab, checkpoint, forest, in, out_path, keep); };
  });

  auto* tok_cmd = app.add_subcommand("tokenizer", "Unigram tokenizer");
  tok_cmd->require_subcommand(1);
  auto* ttrain = tok_cmd->add_subcommand("train", "Train a vocabulary on clean documents");
  common(ttrain);
  ttrain->add_option("--in", in, "Clean documents (JSONL)")->required();
  ttrain->add_option("--out", out_path, "Vocabulary file")->required();
  ttrain->callback([&] { action = [&] { cmd_tokenizer_train(ctx, in, out_path); }; });
  auto* tenc = tok_cmd->add_subcommand("encode", "Encode text lines to ids");
  common(tenc);
  tenc->add_option("--vocab", vocab)->required();
  tenc->add_option("--in", in, "Text, one input per line")->required();
  tenc->add_option("--out", out_path, "Space-separated ids, one line per input")->required();
  tenc->callback([&] { action = [&] { cmd_tokenizer_encode(ctx, vocab, in, out_path); }; });
  auto* tdec = tok_cmd->add_subcommand("decode", "Decode id lines to text");
  common(tdec);
  tdec->add_option("--vocab", vocab)->required();
  tdec->add_option("--in", in, "Space-separated ids")->required();
  tdec->add_option("--out", out_path, "Text, one escaped line per input")->required();
  tdec->add_flag("--strip-specials", strip, "Drop special tokens");
  tdec->add_flag("--meta-space", meta_space, "Keep U+2581 instead of spaces");
  tdec->callback([&] {
    action = [&] { cmd_tokenizer_decode(ctx, vocab, in, out_path, strip, meta_space); };
  });

  auto* pre_cmd = app.add_subcommand("pretrain", "Pre-train a model from scratch");
  common(pre_cmd);
  pre_cmd->add_option("--vocab", vocab)->required();
  pre_cmd->add_option("--in", in, "Clean documents (JSONL)")->required();
  pre_cmd->add_option("--out", out_path, "Output directory")->required();
  pre_cmd->add_option("--steps", steps, "Override train.total_steps");
  pre_cmd->add_option("--resume", resume, "Training checkpoint to resume from");
  pre_cmd->add_option("--log-every", log_every, "Print loss every N steps (0: never)");
  pre_cmd->callback([&] {
    action = [&] { cmd_pretrain(ctx, vocab, in, out_path, steps, resume, log_every); };
  });

  auto* ft_cmd = app.add_subcommand("finetune", "Instruction-tune a pre-trained model");
  common(ft_cmd);
  ft_cmd->add_option("--vocab", vocab, "Base vocabulary")->required();
  ft_cmd->add_option("--checkpoint", checkpoint, "Pre-trained checkpoint")->required();
  ft_cmd->add_option("--in", in, "Chats (JSONL {system, user, assistant})")->required();
  ft_cmd->add_option("--out", out_path, "Output directory")->required();
  ft_cmd->add_option("--steps", steps, "Override finetune.total_steps");
  ft_cmd->add_option("--resume", resume, "Training checkpoint to resume from");
  ft_cmd->add_option("--log-every", log_every, "Print loss every N steps (0: never)");
  ft_cmd->callback([&] {
    action = [&] { cmd_finetune(ctx, vocab, checkpoint, in, out_path, steps, resume, log_every); };
  });

  auto* eval_cmd = app.add_subcommand("eval", "Score predictions and perplexity");
  common(eval_cmd);
  eval_cmd->add_option("--task", tasks, "name=kind:gold.jsonl:pred.jsonl (repeatable)");
  eval_cmd->add_option("--out", out_path, "Report file (default: stdout)");
  eval_cmd->add_option("--perplexity", ppl_in, "Clean documents to score");
  eval_cmd->add_option("--vocab", vocab);
  eval_cmd->add_option("--checkpoint", checkpoint);
  eval_cmd->callback([&] {
    action = [&] { cmd_eval(ctx, tasks, out_path, ppl_in, vocab, checkpoint); };
  });

  auto* an_cmd = app.add_subcommand("analyze", "Embedding and attention analysis");
  an_cmd->require_subcommand(1);
  auto* analogy_cmd = an_cmd->add_subcommand("analogy", "Nearest tokens to a - b + c");
  common(analogy_cmd);
  analogy_cmd->add_option("--vocab", vocab)->required();
  analogy_cmd->add_option("--checkpoint", checkpoint)->required();
  analogy_cmd->add_option("words", words, "a b c")->required()->expected(3);
  analogy_cmd->add_option("-k", k, "Number of results")->check(CLI::PositiveNumber);
  analogy_cmd->add_option("--out", out_path, "Result table (default: stdout)");
  analogy_cmd->callback([&] {
    action = [&] { cmd_analogy(ctx, vocab, checkpoint, words, k, out_path); };
  });
  auto* emb_cmd = an_cmd->add_subcommand("embed-export", "Export token embeddings");
  common(emb_cmd);
  emb_cmd->add_option("--vocab", vocab)->required();
  emb_cmd->add_option("--checkpoint", checkpoint)->required();
  emb_cmd->add_option("--filter", filter, "all | specials | pieces | ids");
  emb_cmd->add_option("--ids", ids, "Token ids for --filter ids");
  emb_cmd->add_option("--out", out_path, "Output stem (.mat and .labels are appended)")->required();
  emb_cmd->callback([&] {
    action = [&] { cmd_embed_export(ctx, vocab, checkpoint, filter, ids, out_path); };
  });
  auto* attn_cmd = an_cmd->add_subcommand("attn-export", "Export attention maps for one input");
  common(attn_cmd);
  attn_cmd->add_option("--vocab", vocab)->required();
  attn_cmd->add_option("--checkpoint", checkpoint)->required();
  auto* text_opt = attn_cmd->add_option("--text", text, "Input text");
  auto* in_opt = attn_cmd->add_option("--in", in, "Input text file");
  text_opt->excludes(in_opt);
  attn_cmd->add_option("--out", out_path, "Output directory")->required();
  attn_cmd->callback([&] {
    if (text.empty() && in.empty()) throw CLI::RequiredError("--text or --in");
    action = [&] { cmd_attn_export(ctx, vocab, checkpoint, text, in, out_path); };
  });

  auto* replay_cmd = app.add_subcommand("replay", "Re-run a manifest and compare output digests");
  replay_cmd->add_option("manifest", replay_manifest)->required()->check(CLI::ExistingFile);

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  if (replay_cmd->parsed()) return replay(replay_manifest, out, err);

  ctx.load_config();
  action();
  ctx.write_manifest();
  return kExitOk;
}

int guarded(const std::function<int()>& body, std::ostream& err) {
  try {
    return body();
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const fs::filesystem_error& e) {
    err << "error: io: " << e.what() << "\n";
    return kExitData;
  } catch (const json::exception& e) {
    err << "error: bad_record: " << e.what() << "\n";
    return kExitData;
  } catch (const std::bad_alloc&) {
    err << "error: out of memory\n";
    return kExitData;
  }
}

int replay(const std::string& manifest_path, std::ostream& out, std::ostream& err) {
  const Manifest m = Manifest::load(manifest_path);
  for (const auto& [path, digest] : m.inputs) {
    if (!fs::exists(path) || sha256_file(path) != digest) {
      throw data_error("input_changed", "input " + path + " differs from the manifest");
    }
  }
  const fs::path here = fs::current_path();
  fs::current_path(m.cwd);
  std::vector<std::string> argv = m.argv;
  // The replayed run must not overwrite the manifest being checked.
  argv.push_back("--no-manifest");
  std::ostringstream sink;
  int code = kExitOk;
  try {
    code = guarded([&] { return dispatch(argv, sink, err); }, err);
  } catch (...) {
    fs::current_path(here);
    throw;
  }
  fs::current_path(here);
  if (code != kExitOk) return code;
  std::map<std::string, std::string> now;
  size_t mismatches = 0;
  for (const auto& [path, digest] : m.outputs) {
    const bool ok = fs::exists(path) && sha256_file(path) == digest;
    if (!ok) {
      ++mismatches;
      err << "mismatch: " << path << "\n";
    }
  }
  if (mismatches != 0) {
    throw data_error("replay_mismatch", std::to_string(mismatches) + " output(s) differ");
  }
  out << "replay reproduced " << m.outputs.size() << " output digest(s)\n";
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  return guarded([&] { return dispatch(args, out, err); }, err);
}

}  // namespace slm::cli
