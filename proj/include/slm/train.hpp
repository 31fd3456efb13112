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

// Causal-LM pre-training and masked instruction tuning.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "slm/model.hpp"
#include "slm/tokenizer.hpp"

namespace slm::train {

using model::Matrix;
using model::Parameters;

// ---------------------------------------------------------------------------
// Packing

enum class PackMode {
  kPad,       // final partial block filled with <|end_of_text|>
  kTruncate,  // final partial block dropped
};

// One training sequence. target_mask[t] = 1 when token t is predicted from
// tokens [0, t) and contributes to the loss; target_mask[0] is always 0.
struct Sequence {
  std::vector<int> tokens;
  std::vector<std::uint8_t> target_mask;
};

struct PackedBatch {
  int block_size = 2048;
  std::vector<std::vector<int>> blocks;
  std::vector<std::vector<std::uint8_t>> target_masks;
  // Per block, positions of the <|end_of_text|> closing each document.
  std::vector<std::vector<int>> boundaries;

  std::int64_t input_tokens = 0;      // document tokens before framing
  std::int64_t separator_tokens = 0;  // begin + end markers
  std::int64_t pad_tokens = 0;
  std::int64_t truncated_tokens = 0;

  std::int64_t emitted_tokens() const {
    return static_cast<std::int64_t>(blocks.size()) * block_size;
  }
  // emitted = input + separators + pad - truncated
  bool balanced() const {
    return emitted_tokens() == input_tokens + separator_tokens + pad_tokens - truncated_tokens;
  }
  std::vector<Sequence> sequences() const;
};

PackedBatch pack_tokens(std::span<const std::vector<int>> documents, int block_size = 2048,
                        PackMode mode = PackMode::kPad);

// ---------------------------------------------------------------------------
// Schedule and optimizer

struct LrSchedule {
  double peak_lr = 1e-3;
  std::int64_t warmup_steps = 750;
  std::int64_t total_steps = 24000;
};

// Linear warmup from 0 to peak, then half-cosine to 0 at total_steps.
double lr_at(std::int64_t step, const LrSchedule& schedule);

struct AdamWParams {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
};

template <typename Scalar>
struct OptimizerState {
  Parameters<Scalar> m;
  Parameters<Scalar> v;
  std::int64_t step = 0;

  static OptimizerState zeros(const model::ModelConfig& config);
};

// Decoupled weight decay with bias correction; norm weights are not decayed.
// Throws nonfinite_grad naming the first offending tensor before any update.
template <typename Scalar>
void adamw_step(Parameters<Scalar>& params, const Parameters<Scalar>& grads,
                OptimizerState<Scalar>& state, double lr, const AdamWParams& hp);

// ---------------------------------------------------------------------------
// Loss

// Mean over rows with mask != 0 of -log softmax(logits.row(t))[targets[t]].
// Throws empty_loss when no row is enabled.
template <typename Scalar>
double lm_loss(const Matrix<Scalar>& logits, std::span<const int> targets,
               std::span<const std::uint8_t> mask);

// Sum of the per-row losses and their count. When `dlogits` is given it is
// set to scale * d(sum)/d(logits); disabled rows are exactly zero.
template <typename Scalar>
double lm_loss_sum(const Matrix<Scalar>& logits, std::span<const int> targets,
                   std::span<const std::uint8_t> mask, std::int64_t* count,
                   Matrix<Scalar>* dlogits = nullptr, double scale = 1.0);

// Row t of the result predicts token t+1; the last row is disabled.
struct ShiftedTargets {
  std::vector<int> targets;
  std::vector<std::uint8_t> mask;
};
ShiftedTargets shift_targets(const Sequence& seq);

// ---------------------------------------------------------------------------
// Instruction data

struct ChatExample {
  std::string system;
  std::string user;
  std::string assistant;
};

std::vector<ChatExample> load_chat_examples(const std::filesystem::path& path);

// <|begin_of_text|> <|system|> sys <|user|> user <|assistant|> asst <|end_of_text|>
// Targets are the assistant tokens and the closing end marker.
Sequence render_chat_ids(std::span<const int> system, std::span<const int> user,
                         std::span<const int> assistant, const tok::Vocabulary& vocab,
                         bool allow_empty_assistant = false);
Sequence render_chat(const ChatExample& example, const tok::Tokenizer& tokenizer,
                     bool allow_empty_assistant = false);

// Uniform(-1, 1) * alpha / sqrt(rows * cols).
template <typename Scalar>
Matrix<Scalar> neftune_noise(Eigen::Index rows, Eigen::Index cols, double alpha,
                             std::uint64_t seed);
template <typename Scalar>
Matrix<Scalar> neftune(const Matrix<Scalar>& embeddings, double alpha, std::uint64_t seed);

// Grows the vocabulary of a model. Existing embedding rows and head columns
// are copied bit-exactly; new embedding rows use small init and new head
// columns Xavier init for the new vocabulary size.
template <typename Scalar>
Parameters<Scalar> extend_vocab(const Parameters<Scalar>& base, int new_vocab_size,
                                std::uint64_t seed);

// ---------------------------------------------------------------------------
// Training loop

struct TrainConfig {
  std::int64_t total_steps = 24000;
  std::int64_t checkpoint_every = 3200;
  int effective_batch = 1024;
  int micro_batch = 8;
  int grad_accum_steps = 32;
  int data_shards = 4;
  double peak_lr = 1e-3;
  std::int64_t warmup_steps = 750;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
  double dropout = 0.1;
  double neftune_alpha = 0.0;
  bool shuffle = true;
  std::uint64_t seed = 0;
  int workers = 1;

  static TrainConfig finetune_defaults();
  void validate() const;
  LrSchedule schedule() const { return {peak_lr, warmup_steps, total_steps}; }
  AdamWParams adamw() const { return {beta1, beta2, eps, weight_decay}; }
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct GradOptions {
  bool training = true;  // dropout and noise on
  double neftune_alpha = 0.0;
  std::uint64_t seed = 0;
  // Global index of seqs[0]; per-sequence random streams derive from it.
  std::uint64_t first_index = 0;
  int workers = 1;
};

// Adds d(sum of losses)/d(params) * scale into `grads` and returns the loss
// sum. Per-sequence gradients are reduced in sequence order, so the result
// does not depend on `workers`.
template <typename Scalar>
double accumulate_gradients(const Parameters<Scalar>& params, std::span<const Sequence> seqs,
                            const GradOptions& options, double scale,
                            Parameters<Scalar>& grads);

std::int64_t count_targets(std::span<const Sequence> seqs);

// Token-weighted mean loss with dropout and noise off.
template <typename Scalar>
double evaluate_loss(const Parameters<Scalar>& params, std::span<const Sequence> seqs,
                     int workers = 1);

struct StepStats {
  std::int64_t step = 0;
  std::int64_t seen_tokens = 0;
  double lr = 0.0;
  double loss = 0.0;
};

struct RunOptions {
  std::filesystem::path out_dir;  // checkpoints and loss log; empty = none
  std::optional<std::filesystem::path> resume;
  std::function<void(const StepStats&)> on_step;
};

template <typename Scalar>
struct TrainResult {
  Parameters<Scalar> params;
  OptimizerState<Scalar> optimizer;
  std::vector<StepStats> log;
  std::vector<std::filesystem::path> checkpoints;
  std::int64_t seen_tokens = 0;
};

// Sequence order for a step: a seeded permutation per epoch when shuffling.
std::vector<size_t> step_indices(std::int64_t step, size_t dataset_size, int effective_batch,
                                 bool shuffle, std::uint64_t seed);

template <typename Scalar>
TrainResult<Scalar> run_training(Parameters<Scalar> params, std::span<const Sequence> data,
                                 const TrainConfig& config, const RunOptions& options);

template <typename Scalar>
TrainResult<Scalar> pretrain(Parameters<Scalar> params, const PackedBatch& corpus,
                             const TrainConfig& config, const RunOptions& options);

// Extends the vocabulary to the chat vocabulary when needed, then trains
// with masked loss and NEFTune.
template <typename Scalar>
TrainResult<Scalar> finetune(Parameters<Scalar> params, std::span<const Sequence> chats,
                             int chat_vocab_size, const TrainConfig& config,
                             const RunOptions& options);

std::string checkpoint_name(std::int64_t step);

template <typename Scalar>
void save_training_checkpoint(const std::filesystem::path& path, const Parameters<Scalar>& params,
                              const OptimizerState<Scalar>& optimizer, const TrainConfig& config,
                              std::int64_t seen_tokens);

// Loss log: "step\tseen_tokens\tlr\tloss" header, one row per step.
void write_loss_log(const std::filesystem::path& path, std::span<const StepStats> log);
std::vector<StepStats> read_loss_log(const std::filesystem::path& path);

// Tokens fed to the model over a run.
constexpr std::int64_t seen_tokens(std::int64_t steps, std::int64_t batch, std::int64_t seq_len) {
  return steps * batch * seq_len;
}

}  // namespace slm::train
