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

#include "slm/train.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "slm/parallel.hpp"
#include "slm/random.hpp"

namespace slm::train {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Packing

std::vector<Sequence> PackedBatch::sequences() const {
  std::vector<Sequence> out;
  out.reserve(blocks.size());
  for (size_t b = 0; b < blocks.size(); ++b) out.push_back({blocks[b], target_masks[b]});
  return out;
}

PackedBatch pack_tokens(std::span<const std::vector<int>> documents, int block_size,
                        PackMode mode) {
  if (block_size < 2) throw config_error("invalid_block_size", "block size must be >= 2");
  PackedBatch batch;
  batch.block_size = block_size;

  // One flat stream; a token is a loss target unless it is a pad.
  std::vector<int> stream;
  std::vector<std::uint8_t> is_target;
  std::vector<std::uint8_t> is_boundary;
  for (const auto& doc : documents) {
    stream.push_back(tok::kBeginId);
    is_target.push_back(1);
    is_boundary.push_back(0);
    for (int t : doc) {
      stream.push_back(t);
      is_target.push_back(1);
      is_boundary.push_back(0);
    }
    stream.push_back(tok::kEndId);
    is_target.push_back(1);
    is_boundary.push_back(1);
    batch.input_tokens += static_cast<std::int64_t>(doc.size());
    batch.separator_tokens += 2;
  }

  const size_t remainder = stream.size() % static_cast<size_t>(block_size);
  if (remainder != 0) {
    if (mode == PackMode::kPad) {
      const size_t pad = block_size - remainder;
      stream.insert(stream.end(), pad, tok::kEndId);
      is_target.insert(is_target.end(), pad, 0);
      is_boundary.insert(is_boundary.end(), pad, 0);
      batch.pad_tokens = static_cast<std::int64_t>(pad);
    } else {
      stream.resize(stream.size() - remainder);
      batch.truncated_tokens = static_cast<std::int64_t>(remainder);
    }
  }

  const size_t n_blocks = stream.size() / block_size;
  for (size_t b = 0; b < n_blocks; ++b) {
    const size_t base = b * block_size;
    batch.blocks.emplace_back(stream.begin() + base, stream.begin() + base + block_size);
    std::vector<std::uint8_t> mask(is_target.begin() + base,
                                   is_target.begin() + base + block_size);
    mask[0] = 0;
    batch.target_masks.push_back(std::move(mask));
    std::vector<int> bounds;
    for (int i = 0; i < block_size; ++i) {
      if (is_boundary[base + i]) bounds.push_back(i);
    }
    batch.boundaries.push_back(std::move(bounds));
  }
  return batch;
}

// ---------------------------------------------------------------------------
// Schedule and optimizer

double lr_at(std::int64_t step, const LrSchedule& s) {
  if (s.total_steps <= 0 || s.warmup_steps < 0 || s.warmup_steps >= s.total_steps) {
    throw config_error("invalid_schedule", "need 0 <= warmup_steps < total_steps");
  }
  if (step < 0 || step > s.total_steps) {
    throw config_error("step_out_of_range", "step " + std::to_string(step) + " outside [0, " +
                                                std::to_string(s.total_steps) + "]");
  }
  if (step < s.warmup_steps) {
    return s.peak_lr * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
  }
  const double progress = static_cast<double>(step - s.warmup_steps) /
                          static_cast<double>(s.total_steps - s.warmup_steps);
  if (progress >= 1.0) return 0.0;
  return s.peak_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

template <typename S>
OptimizerState<S> OptimizerState<S>::zeros(const model::ModelConfig& config) {
  OptimizerState st;
  st.m = Parameters<S>::zeros(config);
  st.v = Parameters<S>::zeros(config);
  return st;
}

template <typename S>
void adamw_step(Parameters<S>& params, const Parameters<S>& grads, OptimizerState<S>& state,
                double lr, const AdamWParams& hp) {
  if (!(grads.config == params.config) || !(state.m.config == params.config)) {
    throw data_error("shape_mismatch", "parameter, gradient and moment shapes differ");
  }
  const auto g = grads.tensors();
  for (const auto& t : g) {
    if (!t.map().allFinite()) throw numeric_error("nonfinite_grad", "non-finite gradient in " + t.name);
  }
  auto p = params.tensors();
  auto m = state.m.tensors();
  auto v = state.v.tensors();
  state.step += 1;
  const double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(state.step));
  for (size_t i = 0; i < p.size(); ++i) {
    const double decay = p[i].is_norm ? 0.0 : hp.weight_decay;
    S* pd = p[i].data;
    S* md = m[i].data;
    S* vd = v[i].data;
    const S* gd = g[i].data;
    const Eigen::Index n = p[i].size();
    for (Eigen::Index j = 0; j < n; ++j) {
      const double gj = gd[j];
      const double mj = hp.beta1 * md[j] + (1.0 - hp.beta1) * gj;
      const double vj = hp.beta2 * vd[j] + (1.0 - hp.beta2) * gj * gj;
      md[j] = static_cast<S>(mj);
      vd[j] = static_cast<S>(vj);
      const double mhat = mj / bc1;
      const double vhat = vj / bc2;
      double w = pd[j];
      w -= lr * decay * w;
      w -= lr * mhat / (std::sqrt(vhat) + hp.eps);
      pd[j] = static_cast<S>(w);
    }
  }
}

// ---------------------------------------------------------------------------
// Loss

template <typename S>
double lm_loss_sum(const Matrix<S>& logits, std::span<const int> targets,
                   std::span<const std::uint8_t> mask, std::int64_t* count, Matrix<S>* dlogits,
                   double scale) {
  const Eigen::Index rows = logits.rows();
  const Eigen::Index vocab = logits.cols();
  if (static_cast<Eigen::Index>(targets.size()) != rows ||
      static_cast<Eigen::Index>(mask.size()) != rows) {
    throw data_error("shape_mismatch", "targets and mask need one entry per logits row");
  }
  if (dlogits) *dlogits = Matrix<S>::Zero(rows, vocab);
  double total = 0.0;
  std::int64_t n = 0;
  for (Eigen::Index t = 0; t < rows; ++t) {
    if (!mask[t]) continue;
    const int y = targets[t];
    if (y < 0 || y >= vocab) throw data_error("token_out_of_range", "target id " + std::to_string(y));
    const auto row = logits.row(t);
    const double mx = static_cast<double>(row.maxCoeff());
    double sum = 0.0;
    for (Eigen::Index j = 0; j < vocab; ++j) sum += std::exp(static_cast<double>(row(j)) - mx);
    const double lse = mx + std::log(sum);
    total += lse - static_cast<double>(row(y));
    ++n;
    if (dlogits) {
      for (Eigen::Index j = 0; j < vocab; ++j) {
        (*dlogits)(t, j) = static_cast<S>(scale * std::exp(static_cast<double>(row(j)) - lse));
      }
      (*dlogits)(t, y) -= static_cast<S>(scale);
    }
  }
  if (count) *count = n;
  return total;
}

template <typename S>
double lm_loss(const Matrix<S>& logits, std::span<const int> targets,
               std::span<const std::uint8_t> mask) {
  std::int64_t n = 0;
  const double total = lm_loss_sum<S>(logits, targets, mask, &n);
  if (n == 0) throw numeric_error("empty_loss", "every position is masked");
  return total / static_cast<double>(n);
}

ShiftedTargets shift_targets(const Sequence& seq) {
  const size_t n = seq.tokens.size();
  if (seq.target_mask.size() != n) throw data_error("shape_mismatch", "mask length differs from tokens");
  ShiftedTargets out;
  out.targets.assign(n, 0);
  out.mask.assign(n, 0);
  for (size_t t = 0; t + 1 < n; ++t) {
    out.targets[t] = seq.tokens[t + 1];
    out.mask[t] = seq.target_mask[t + 1];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Instruction data

std::vector<ChatExample> load_chat_examples(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw data_error("io", "cannot open " + path.string());
  std::vector<ChatExample> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      out.push_back({j.value("system", std::string()), j.value("user", std::string()),
                     j.at("assistant").get<std::string>()});
    } catch (const nlohmann::json::exception& e) {
      throw data_error("bad_record", path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

Sequence render_chat_ids(std::span<const int> system, std::span<const int> user,
                         std::span<const int> assistant, const tok::Vocabulary& vocab,
                         bool allow_empty_assistant) {
  const auto sys_id = vocab.find_special(tok::kSystem);
  const auto user_id = vocab.find_special(tok::kUser);
  const auto asst_id = vocab.find_special(tok::kAssistant);
  if (!sys_id || !user_id || !asst_id) {
    throw data_error("missing_chat_specials", "vocabulary lacks the chat special tokens");
  }
  if (assistant.empty() && !allow_empty_assistant) {
    throw data_error("empty_assistant", "training example has an empty assistant turn");
  }
  Sequence s;
  const auto push = [&](int id, bool target) {
    s.tokens.push_back(id);
    s.target_mask.push_back(target ? 1 : 0);
  };
  push(tok::kBeginId, false);
  push(*sys_id, false);
  for (int t : system) push(t, false);
  push(*user_id, false);
  for (int t : user) push(t, false);
  push(*asst_id, false);
  for (int t : assistant) push(t, true);
  push(tok::kEndId, true);
  return s;
}

Sequence render_chat(const ChatExample& ex, const tok::Tokenizer& tokenizer,
                     bool allow_empty_assistant) {
  const auto sys = tokenizer.encode(ex.system);
  const auto usr = tokenizer.encode(ex.user);
  const auto asst = tokenizer.encode(ex.assistant);
  return render_chat_ids(sys, usr, asst, tokenizer.vocab(), allow_empty_assistant);
}

template <typename S>
Matrix<S> neftune_noise(Eigen::Index rows, Eigen::Index cols, double alpha, std::uint64_t seed) {
  Matrix<S> eps = Matrix<S>::Zero(rows, cols);
  if (alpha == 0.0 || rows * cols == 0) return eps;
  const double bound = alpha / std::sqrt(static_cast<double>(rows * cols));
  Rng rng(seed);
  for (Eigen::Index i = 0; i < eps.size(); ++i) {
    eps.data()[i] = static_cast<S>(rng.uniform(-1.0, 1.0) * bound);
  }
  return eps;
}

template <typename S>
Matrix<S> neftune(const Matrix<S>& embeddings, double alpha, std::uint64_t seed) {
  if (alpha == 0.0) return embeddings;
  return embeddings + neftune_noise<S>(embeddings.rows(), embeddings.cols(), alpha, seed);
}

template <typename S>
Parameters<S> extend_vocab(const Parameters<S>& base, int new_vocab, std::uint64_t seed) {
  const model::ModelConfig& bc = base.config;
  if (new_vocab < bc.vocab_size) {
    throw config_error("vocab_shrink", "cannot shrink vocabulary from " +
                                           std::to_string(bc.vocab_size) + " to " +
                                           std::to_string(new_vocab));
  }
  model::ModelConfig nc = bc;
  nc.vocab_size = new_vocab;
  Parameters<S> out = Parameters<S>::zeros(nc);
  out.provenance = base.provenance;
  auto src = base.tensors();
  auto dst = out.tensors();
  for (size_t i = 0; i < src.size(); ++i) {
    if (src[i].name == "token_embedding" || src[i].name == "lm_head") continue;
    dst[i].map() = src[i].map();
  }
  const Eigen::Index old_v = bc.vocab_size;
  const Eigen::Index added = new_vocab - old_v;
  out.token_embedding.topRows(old_v) = base.token_embedding;
  out.lm_head.leftCols(old_v) = base.lm_head;
  if (added > 0) {
    const double small = model::small_init_std(nc);
    const double xavier = model::xavier_std(nc.d_model, nc.vocab_size);
    model::Matrix<S> rows(added, nc.d_model);
    model::fill_normal<S>(rows, small, seed, 1u << 20);
    out.token_embedding.bottomRows(added) = rows;
    model::Matrix<S> cols(nc.d_model, added);
    model::fill_normal<S>(cols, xavier, seed, (1u << 20) + 1);
    out.lm_head.rightCols(added) = cols;
    out.provenance["token_embedding.extension"] = {model::InitScheme::kSmall, small};
    out.provenance["lm_head.extension"] = {model::InitScheme::kXavier, xavier};
  }
  return out;
}

// ---------------------------------------------------------------------------
// Config

TrainConfig TrainConfig::finetune_defaults() {
  TrainConfig c;
  c.total_steps = 890;
  c.checkpoint_every = 890;
  c.effective_batch = 256;
  c.micro_batch = 8;
  c.grad_accum_steps = 32;
  c.data_shards = 1;
  c.peak_lr = 1e-4;
  c.warmup_steps = 50;
  c.weight_decay = 0.01;
  c.neftune_alpha = 5.0;
  return c;
}

void TrainConfig::validate() const {
  const auto fail = [](const std::string& m) { return config_error("invalid_train_config", m); };
  if (total_steps <= 0) throw fail("total_steps must be positive");
  if (checkpoint_every <= 0) throw fail("checkpoint_every must be positive");
  if (micro_batch <= 0 || grad_accum_steps <= 0 || data_shards <= 0) {
    throw fail("batch factors must be positive");
  }
  if (static_cast<std::int64_t>(effective_batch) !=
      static_cast<std::int64_t>(micro_batch) * grad_accum_steps * data_shards) {
    throw fail("effective_batch must equal micro_batch * grad_accum_steps * data_shards");
  }
  if (warmup_steps < 0 || warmup_steps >= total_steps) throw fail("need 0 <= warmup_steps < total_steps");
  if (!(peak_lr >= 0.0)) throw fail("peak_lr must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw fail("betas must be in [0, 1)");
  if (!(eps > 0.0)) throw fail("eps must be positive");
  if (!(weight_decay >= 0.0)) throw fail("weight_decay must be >= 0");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw fail("dropout must be in [0, 1)");
  if (!(neftune_alpha >= 0.0)) throw fail("neftune_alpha must be >= 0");
  if (workers < 1) throw fail("workers must be >= 1");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"total_steps", c.total_steps},
                     {"checkpoint_every", c.checkpoint_every},
                     {"effective_batch", c.effective_batch},
                     {"micro_batch", c.micro_batch},
                     {"grad_accum_steps", c.grad_accum_steps},
                     {"data_shards", c.data_shards},
                     {"peak_lr", c.peak_lr},
                     {"warmup_steps", c.warmup_steps},
                     {"beta1", c.beta1},
                     {"beta2", c.beta2},
                     {"eps", c.eps},
                     {"weight_decay", c.weight_decay},
                     {"dropout", c.dropout},
                     {"neftune_alpha", c.neftune_alpha},
                     {"shuffle", c.shuffle},
                     {"seed", c.seed},
                     {"workers", c.workers}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  const TrainConfig d = c;
  c.total_steps = j.value("total_steps", d.total_steps);
  c.checkpoint_every = j.value("checkpoint_every", d.checkpoint_every);
  c.effective_batch = j.value("effective_batch", d.effective_batch);
  c.micro_batch = j.value("micro_batch", d.micro_batch);
  c.grad_accum_steps = j.value("grad_accum_steps", d.grad_accum_steps);
  c.data_shards = j.value("data_shards", d.data_shards);
  c.peak_lr = j.value("peak_lr", d.peak_lr);
  c.warmup_steps = j.value("warmup_steps", d.warmup_steps);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.eps = j.value("eps", d.eps);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.dropout = j.value("dropout", d.dropout);
  c.neftune_alpha = j.value("neftune_alpha", d.neftune_alpha);
  c.shuffle = j.value("shuffle", d.shuffle);
  c.seed = j.value("seed", d.seed);
  c.workers = j.value("workers", d.workers);
}

// ---------------------------------------------------------------------------
// Gradients

std::int64_t count_targets(std::span<const Sequence> seqs) {
  std::int64_t n = 0;
  for (const auto& s : seqs) {
    for (size_t t = 1; t < s.target_mask.size(); ++t) n += s.target_mask[t] ? 1 : 0;
  }
  return n;
}

namespace {

template <typename S>
double sequence_gradient(const Parameters<S>& params, const Sequence& seq,
                         const GradOptions& options, std::uint64_t index, double scale,
                         Parameters<S>& grads) {
  model::ForwardOptions<S> fo;
  fo.training = options.training;
  fo.dropout_seed = mix_seed(options.seed, 2 * index);
  Matrix<S> noise;
  if (options.training && options.neftune_alpha > 0.0) {
    noise = neftune_noise<S>(static_cast<Eigen::Index>(seq.tokens.size()), params.config.d_model,
                             options.neftune_alpha, mix_seed(options.seed, 2 * index + 1));
    fo.embedding_noise = &noise;
  }
  model::ForwardCache<S> cache;
  const auto out = model::forward<S>(params, seq.tokens, fo, &cache);
  const ShiftedTargets st = shift_targets(seq);
  std::int64_t n = 0;
  Matrix<S> dlogits;
  const double loss = lm_loss_sum<S>(out.logits, st.targets, st.mask, &n, &dlogits, scale);
  if (n > 0) model::backward<S>(params, cache, dlogits, grads);
  return loss;
}

template <typename S>
void add_into(Parameters<S>& dst, const Parameters<S>& src) {
  auto d = dst.tensors();
  const auto s = src.tensors();
  for (size_t i = 0; i < d.size(); ++i) d[i].map() += s[i].map();
}

}  // namespace

template <typename S>
double accumulate_gradients(const Parameters<S>& params, std::span<const Sequence> seqs,
                            const GradOptions& options, double scale, Parameters<S>& grads) {
  const size_t wave = std::max<size_t>(1, static_cast<size_t>(options.workers));
  std::vector<Parameters<S>> buffers;
  std::vector<double> losses(seqs.size(), 0.0);
  for (size_t start = 0; start < seqs.size(); start += wave) {
    const size_t n = std::min(wave, seqs.size() - start);
    while (buffers.size() < n) buffers.push_back(Parameters<S>::zeros(params.config));
    parallel_tasks(n, options.workers, [&](size_t t) {
      buffers[t].set_zero();
      losses[start + t] = sequence_gradient<S>(params, seqs[start + t], options,
                                               options.first_index + start + t, scale, buffers[t]);
    });
    for (size_t t = 0; t < n; ++t) add_into(grads, buffers[t]);
  }
  double total = 0.0;
  for (double l : losses) total += l;
  return total;
}

template <typename S>
double evaluate_loss(const Parameters<S>& params, std::span<const Sequence> seqs, int workers) {
  std::vector<double> losses(seqs.size(), 0.0);
  std::vector<std::int64_t> counts(seqs.size(), 0);
  parallel_tasks(seqs.size(), workers, [&](size_t i) {
    const auto out = model::forward<S>(params, seqs[i].tokens);
    const ShiftedTargets st = shift_targets(seqs[i]);
    losses[i] = lm_loss_sum<S>(out.logits, st.targets, st.mask, &counts[i]);
  });
  double total = 0.0;
  std::int64_t n = 0;
  for (size_t i = 0; i < seqs.size(); ++i) {
    total += losses[i];
    n += counts[i];
  }
  if (n == 0) throw numeric_error("empty_loss", "no target positions to evaluate");
  return total / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Loop

std::vector<size_t> step_indices(std::int64_t step, size_t dataset_size, int effective_batch,
                                 bool shuffle, std::uint64_t seed) {
  if (dataset_size == 0) throw data_error("empty_dataset", "no training sequences");
  std::vector<size_t> out;
  out.reserve(effective_batch);
  std::map<std::uint64_t, std::vector<size_t>> perms;
  const std::uint64_t first = static_cast<std::uint64_t>(step - 1) * effective_batch;
  for (int i = 0; i < effective_batch; ++i) {
    const std::uint64_t pos = first + i;
    const std::uint64_t epoch = pos / dataset_size;
    const size_t within = pos % dataset_size;
    if (!shuffle) {
      out.push_back(within);
      continue;
    }
    auto it = perms.find(epoch);
    if (it == perms.end()) {
      std::vector<size_t> perm(dataset_size);
      std::iota(perm.begin(), perm.end(), size_t{0});
      Rng rng(mix_seed(seed, 0x5eed0000ULL + epoch));
      for (size_t k = dataset_size; k > 1; --k) std::swap(perm[k - 1], perm[rng.below(k)]);
      it = perms.emplace(epoch, std::move(perm)).first;
    }
    out.push_back(it->second[within]);
  }
  return out;
}

std::string checkpoint_name(std::int64_t step) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "step-%08lld.ckpt", static_cast<long long>(step));
  return buf;
}

namespace {

nlohmann::json resume_key(const TrainConfig& c) {
  nlohmann::json j = c;
  j.erase("workers");
  return j;
}

}  // namespace

template <typename S>
void save_training_checkpoint(const fs::path& path, const Parameters<S>& params,
                              const OptimizerState<S>& optimizer, const TrainConfig& config,
                              std::int64_t seen) {
  model::TensorFile f =
      model::make_checkpoint(params, {params.config, config.seed, optimizer.step, ""});
  f.header()["kind"] = "train";
  f.header()["train_config"] = config;
  f.header()["seen_tokens"] = seen;
  model::store_params(f, optimizer.m, "adam.m.");
  model::store_params(f, optimizer.v, "adam.v.");
  f.save(path.string());
}

void write_loss_log(const fs::path& path, std::span<const StepStats> log) {
  std::ofstream out(path);
  if (!out) throw data_error("io", "cannot write " + path.string());
  out << "step\tseen_tokens\tlr\tloss\n";
  char buf[64];
  for (const auto& s : log) {
    out << s.step << '\t' << s.seen_tokens << '\t';
    auto r = std::to_chars(buf, buf + sizeof(buf), s.lr);
    out.write(buf, r.ptr - buf);
    out << '\t';
    r = std::to_chars(buf, buf + sizeof(buf), s.loss);
    out.write(buf, r.ptr - buf);
    out << '\n';
  }
}

std::vector<StepStats> read_loss_log(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw data_error("io", "cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != "step\tseen_tokens\tlr\tloss") throw data_error("bad_header", "not a loss log");
  std::vector<StepStats> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    StepStats s;
    std::string lr, loss;
    ss >> s.step >> s.seen_tokens >> lr >> loss;
    s.lr = std::stod(lr);
    s.loss = std::stod(loss);
    out.push_back(s);
  }
  return out;
}

template <typename S>
TrainResult<S> run_training(Parameters<S> params, std::span<const Sequence> data,
                            const TrainConfig& config, const RunOptions& options) {
  config.validate();
  if (data.empty()) throw data_error("empty_dataset", "no training sequences");
  params.config.dropout_p = config.dropout;

  TrainResult<S> result;
  result.optimizer = OptimizerState<S>::zeros(params.config);
  std::int64_t start = 0;
  if (options.resume) {
    const model::TensorFile f = model::TensorFile::load(options.resume->string());
    const auto info = model::read_checkpoint_info(f);
    if (!(info.config == params.config)) {
      throw config_error("resume_mismatch", "checkpoint model config differs from the run config");
    }
    if (!f.header().contains("train_config") ||
        resume_key(f.header()["train_config"].get<TrainConfig>()) != resume_key(config)) {
      throw config_error("resume_mismatch", "checkpoint training config differs from the run config");
    }
    params = model::params_from_checkpoint<S>(f);
    model::load_params(f, result.optimizer.m, "adam.m.");
    model::load_params(f, result.optimizer.v, "adam.v.");
    result.optimizer.step = info.step;
    result.seen_tokens = f.header().value("seen_tokens", std::int64_t{0});
    start = info.step;
    if (!options.out_dir.empty() && fs::exists(options.out_dir / "loss.tsv")) {
      for (const auto& s : read_loss_log(options.out_dir / "loss.tsv")) {
        if (s.step <= start) result.log.push_back(s);
      }
    }
  }
  if (!options.out_dir.empty()) fs::create_directories(options.out_dir);

  const AdamWParams hp = config.adamw();
  const LrSchedule schedule = config.schedule();
  Parameters<S> grads = Parameters<S>::zeros(params.config);
  for (std::int64_t step = start + 1; step <= config.total_steps; ++step) {
    const auto idx = step_indices(step, data.size(), config.effective_batch, config.shuffle,
                                  config.seed);
    std::vector<Sequence> batch;
    batch.reserve(idx.size());
    std::int64_t tokens = 0;
    for (size_t i : idx) {
      batch.push_back(data[i]);
      tokens += static_cast<std::int64_t>(data[i].tokens.size());
    }
    const std::int64_t n_targets = count_targets(batch);
    if (n_targets == 0) throw numeric_error("empty_loss", "step " + std::to_string(step) + " has no targets");

    grads.set_zero();
    GradOptions go;
    go.training = true;
    go.neftune_alpha = config.neftune_alpha;
    go.seed = mix_seed(config.seed, static_cast<std::uint64_t>(step));
    go.workers = config.workers;
    double loss_sum = 0.0;
    const double scale = 1.0 / static_cast<double>(n_targets);
    for (size_t off = 0; off < batch.size(); off += config.micro_batch) {
      const size_t n = std::min<size_t>(config.micro_batch, batch.size() - off);
      go.first_index = off;
      loss_sum += accumulate_gradients<S>(params, std::span(batch).subspan(off, n), go, scale, grads);
    }
    const double lr = lr_at(step, schedule);
    adamw_step(params, grads, result.optimizer, lr, hp);
    result.seen_tokens += tokens;
    const StepStats stats{step, result.seen_tokens, lr, loss_sum / static_cast<double>(n_targets)};
    result.log.push_back(stats);
    if (options.on_step) options.on_step(stats);
    if (!options.out_dir.empty()) {
      if (step % config.checkpoint_every == 0) {
        const fs::path p = options.out_dir / checkpoint_name(step);
        save_training_checkpoint(p, params, result.optimizer, config, result.seen_tokens);
        result.checkpoints.push_back(p);
      }
    }
  }
  if (!options.out_dir.empty()) write_loss_log(options.out_dir / "loss.tsv", result.log);
  result.params = std::move(params);
  return result;
}

template <typename S>
TrainResult<S> pretrain(Parameters<S> params, const PackedBatch& corpus, const TrainConfig& config,
                        const RunOptions& options) {
  const auto seqs = corpus.sequences();
  return run_training<S>(std::move(params), seqs, config, options);
}

template <typename S>
TrainResult<S> finetune(Parameters<S> params, std::span<const Sequence> chats, int chat_vocab_size,
                        const TrainConfig& config, const RunOptions& options) {
  if (params.config.vocab_size < chat_vocab_size) {
    params = extend_vocab(params, chat_vocab_size, mix_seed(config.seed, 0xe87e5d));
  }
  return run_training<S>(std::move(params), chats, config, options);
}

#define SLM_INSTANTIATE(S)                                                                       \
  template struct OptimizerState<S>;                                                             \
  template void adamw_step<S>(Parameters<S>&, const Parameters<S>&, OptimizerState<S>&, double,  \
                              const AdamWParams&);                                               \
  template double lm_loss<S>(const Matrix<S>&, std::span<const int>,                             \
                             std::span<const std::uint8_t>);                                     \
  template double lm_loss_sum<S>(const Matrix<S>&, std::span<const int>,                         \
                                 std::span<const std::uint8_t>, std::int64_t*, Matrix<S>*,       \
                                 double);                                                        \
  template Matrix<S> neftune_noise<S>(Eigen::Index, Eigen::Index, double, std::uint64_t);        \
  template Matrix<S> neftune<S>(const Matrix<S>&, double, std::uint64_t);                        \
  template Parameters<S> extend_vocab<S>(const Parameters<S>&, int, std::uint64_t);              \
  template double accumulate_gradients<S>(const Parameters<S>&, std::span<const Sequence>,       \
                                          const GradOptions&, double, Parameters<S>&);           \
  template double evaluate_loss<S>(const Parameters<S>&, std::span<const Sequence>, int);        \
  template void save_training_checkpoint<S>(const fs::path&, const Parameters<S>&,               \
                                            const OptimizerState<S>&, const TrainConfig&,        \
                                            std::int64_t);                                       \
  template TrainResult<S> run_training<S>(Parameters<S>, std::span<const Sequence>,              \
                                          const TrainConfig&, const RunOptions&);                \
  template TrainResult<S> pretrain<S>(Parameters<S>, const PackedBatch&, const TrainConfig&,     \
                                      const RunOptions&);                                        \
  template TrainResult<S> finetune<S>(Parameters<S>, std::span<const Sequence>, int,             \
                                      const TrainConfig&, const RunOptions&);

SLM_INSTANTIATE(float)
SLM_INSTANTIATE(double)
#undef SLM_INSTANTIATE

}  // namespace slm::train
