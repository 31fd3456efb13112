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

// Pre-norm decoder-only transformer: scaled token embedding, RMSNorm, GQA
// self-attention with rotary positions, non-gated SiLU MLP, untied head.
// No bias tensors anywhere. All matrices are row-major; activations are
// [seq x features] and a linear layer is `x * W`.

#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "slm/error.hpp"

namespace slm::model {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

struct ModelConfig {
  int n_layers = 24;
  int d_model = 2048;
  int d_ff = 8192;
  int head_dim = 64;
  int n_heads = 32;
  int kv_groups = 8;
  int vocab_size = 32768;
  int max_seq = 2048;
  double dropout_p = 0.1;
  double rope_base = 10000.0;
  double norm_eps = 1e-5;

  int kv_dim() const { return kv_groups * head_dim; }
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

// Closed-form scalar count over the tensor list.
std::int64_t count_params(const ModelConfig& config);

// ---------------------------------------------------------------------------
// Initialization

enum class InitScheme { kSmall, kScaled, kXavier, kOnes };

const char* to_string(InitScheme scheme);

struct InitRecord {
  InitScheme scheme = InitScheme::kOnes;
  double std = 0.0;
  friend bool operator==(const InitRecord&, const InitRecord&) = default;
};

// sqrt(2 / (5 d_model))
double small_init_std(const ModelConfig& config);
// small_init_std / sqrt(2 n_layers)
double scaled_init_std(const ModelConfig& config);
// sqrt(2 / (fan_in + fan_out))
double xavier_std(int fan_in, int fan_out);

// ---------------------------------------------------------------------------
// Parameters

template <typename Scalar>
struct LayerParams {
  Matrix<Scalar> wq;  // d_model x d_model
  Matrix<Scalar> wk;  // d_model x kv_dim
  Matrix<Scalar> wv;  // d_model x kv_dim
  Matrix<Scalar> wo;  // d_model x d_model
  Matrix<Scalar> w1;  // d_model x d_ff
  Matrix<Scalar> w2;  // d_ff x d_model
  Vector<Scalar> attn_norm;
  Vector<Scalar> mlp_norm;
};

// Mutable or const view of one named tensor.
template <typename T>
struct TensorRef {
  std::string name;
  T* data;
  Eigen::Index rows;
  Eigen::Index cols;
  bool is_norm;

  Eigen::Index size() const { return rows * cols; }
  auto map() const {
    return Eigen::Map<std::conditional_t<std::is_const_v<T>,
                                         const Matrix<std::remove_const_t<T>>,
                                         Matrix<std::remove_const_t<T>>>>(data, rows, cols);
  }
};

template <typename Scalar>
struct Parameters {
  ModelConfig config;
  Matrix<Scalar> token_embedding;  // vocab x d_model
  std::vector<LayerParams<Scalar>> layers;
  Vector<Scalar> final_norm;
  Matrix<Scalar> lm_head;  // d_model x vocab
  std::map<std::string, InitRecord> provenance;

  // Every tensor allocated with the config's shapes and set to zero.
  static Parameters zeros(const ModelConfig& config);

  // Tensors in a fixed canonical order; grads and optimizer moments share it.
  std::vector<TensorRef<Scalar>> tensors();
  std::vector<TensorRef<const Scalar>> tensors() const;

  std::int64_t num_scalars() const;
  void set_zero();
  bool all_finite() const;

  template <typename To>
  Parameters<To> cast() const;
};

template <typename Scalar>
Parameters<Scalar> init_params(const ModelConfig& config, std::uint64_t seed);

// Fills `m` with N(0, std^2) from a stream derived from (seed, stream).
template <typename Scalar>
void fill_normal(Eigen::Ref<Matrix<Scalar>> m, double std, std::uint64_t seed,
                 std::uint64_t stream);

// ---------------------------------------------------------------------------
// Building blocks

template <typename Derived>
auto silu(const Eigen::ArrayBase<Derived>& t) {
  using S = typename Derived::Scalar;
  return t / (S(1) + (-t).exp());
}

inline double silu(double t) { return t / (1.0 + std::exp(-t)); }

// Row-wise y = w * x / sqrt(mean(x^2) + eps).
template <typename Derived, typename DerivedW>
Matrix<typename Derived::Scalar> rmsnorm(const Eigen::MatrixBase<Derived>& x,
                                         const Eigen::MatrixBase<DerivedW>& w, double eps) {
  using S = typename Derived::Scalar;
  const Eigen::Index d = x.cols();
  Vector<S> inv = ((x.array().square().rowwise().sum() / S(d)) + S(eps)).rsqrt();
  return (inv.asDiagonal() * x.derived()) * w.derived().asDiagonal();
}

// y = silu(x * W1) * W2
template <typename Derived, typename D1, typename D2>
Matrix<typename Derived::Scalar> silu_mlp(const Eigen::MatrixBase<Derived>& x,
                                          const Eigen::MatrixBase<D1>& w1,
                                          const Eigen::MatrixBase<D2>& w2) {
  using S = typename Derived::Scalar;
  Matrix<S> u = x * w1;
  return silu(u.array()).matrix() * w2;
}

// Rotates consecutive pairs (2i, 2i+1) of each row by positions[r] * theta_i,
// theta_i = base^(-2i/head_dim). `x` is [seq x head_dim].
template <typename Scalar>
Matrix<Scalar> rope_apply(const Matrix<Scalar>& x, std::span<const int> positions,
                          double base = 10000.0);

// In-place rotation of every head block of width head_dim in x
// [seq x (heads*head_dim)]. `inverse` rotates by the negative angle.
template <typename Scalar>
void rope_inplace(Matrix<Scalar>& x, int head_dim, double base, bool inverse = false);

template <typename Scalar>
struct AttentionOptions {
  bool causal = true;
  // Dropout on attention probabilities; `rng_seed` drives the masks.
  double dropout_p = 0.0;
  std::uint64_t rng_seed = 0;
  // When non-null receives n_heads probability matrices [seq x seq].
  std::vector<Matrix<Scalar>>* probs = nullptr;
};

// Self-attention sublayer on an already-normalized input [seq x d_model].
template <typename Scalar>
Matrix<Scalar> attention_gqa(const Matrix<Scalar>& x, const LayerParams<Scalar>& layer,
                             const ModelConfig& config,
                             const AttentionOptions<Scalar>& options = {});

// ---------------------------------------------------------------------------
// Forward / backward

template <typename Scalar>
struct ForwardOptions {
  bool training = false;       // enables dropout
  std::uint64_t dropout_seed = 0;
  bool keep_hidden = false;    // hidden[0] = embedding output, hidden[l+1] = layer l output
  bool keep_attention = false; // attention[l][h] = [seq x seq] probabilities
  // Added to the scaled embeddings before the first layer (NEFTune).
  const Matrix<Scalar>* embedding_noise = nullptr;
};

template <typename Scalar>
struct ForwardOutput {
  Matrix<Scalar> logits;        // seq x vocab
  Matrix<Scalar> final_hidden;  // seq x d_model, after the final norm
  std::vector<Matrix<Scalar>> hidden;
  std::vector<std::vector<Matrix<Scalar>>> attention;
};

// Saved activations for backward.
template <typename Scalar>
struct LayerCache {
  Matrix<Scalar> x, n1, q, k, v, attn_out, h, n2, u, s;
  Vector<Scalar> inv1, inv2;
  std::vector<Matrix<Scalar>> probs;       // per head, before dropout
  std::vector<Matrix<Scalar>> probs_drop;  // per head, after dropout (empty if none)
  std::vector<Matrix<Scalar>> attn_masks;  // per head dropout scale masks
  Matrix<Scalar> resid1_mask, resid2_mask;
};

template <typename Scalar>
struct ForwardCache {
  std::vector<int> tokens;
  std::vector<LayerCache<Scalar>> layers;
  Matrix<Scalar> final_in;
  Vector<Scalar> final_inv;
};

template <typename Scalar>
ForwardOutput<Scalar> forward(const Parameters<Scalar>& params, std::span<const int> tokens,
                              const ForwardOptions<Scalar>& options = {},
                              ForwardCache<Scalar>* cache = nullptr);

// Accumulates d(loss)/d(params) into `grads` given d(loss)/d(logits).
template <typename Scalar>
void backward(const Parameters<Scalar>& params, const ForwardCache<Scalar>& cache,
              const Matrix<Scalar>& dlogits, Parameters<Scalar>& grads);

// ---------------------------------------------------------------------------
// Checkpoints

struct CheckpointInfo {
  ModelConfig config;
  std::uint64_t seed = 0;
  std::int64_t step = 0;
  std::string dtype;  // "f32" | "f64"
};

// Named-tensor container: a version line, a JSON header and a row-major
// little-endian payload.
struct TensorBlob {
  std::string name;
  std::vector<std::int64_t> shape;
  std::string dtype;
  std::vector<char> bytes;
};

class TensorFile {
 public:
  nlohmann::json& header();
  const nlohmann::json& header() const;

  template <typename Scalar>
  void put(const std::string& name, const Scalar* data, std::int64_t rows, std::int64_t cols);
  template <typename Scalar>
  void get(const std::string& name, Scalar* data, std::int64_t rows, std::int64_t cols) const;
  bool contains(const std::string& name) const;
  const std::vector<TensorBlob>& blobs() const { return blobs_; }

  void save(const std::string& path) const;
  static TensorFile load(const std::string& path);

  TensorFile();
  TensorFile(const TensorFile&);
  TensorFile(TensorFile&&) noexcept;
  TensorFile& operator=(const TensorFile&);
  TensorFile& operator=(TensorFile&&) noexcept;
  ~TensorFile();

 private:
  const TensorBlob& find(const std::string& name) const;
  std::unique_ptr<nlohmann::json> header_;
  std::vector<TensorBlob> blobs_;
};

template <typename Scalar>
constexpr const char* dtype_name() {
  static_assert(std::is_same_v<Scalar, float> || std::is_same_v<Scalar, double>);
  return std::is_same_v<Scalar, float> ? "f32" : "f64";
}

template <typename Scalar>
void store_params(TensorFile& file, const Parameters<Scalar>& params,
                  const std::string& prefix = "");
template <typename Scalar>
void load_params(const TensorFile& file, Parameters<Scalar>& params,
                 const std::string& prefix = "");

// Header (kind, config, seed, step, dtype, init provenance) plus parameters.
template <typename Scalar>
TensorFile make_checkpoint(const Parameters<Scalar>& params, const CheckpointInfo& info);

template <typename Scalar>
void save_checkpoint(const std::string& path, const Parameters<Scalar>& params,
                     const CheckpointInfo& info);

CheckpointInfo read_checkpoint_info(const TensorFile& file);

template <typename Scalar>
Parameters<Scalar> params_from_checkpoint(const TensorFile& file, CheckpointInfo* info = nullptr);

template <typename Scalar>
Parameters<Scalar> load_checkpoint(const std::string& path, CheckpointInfo* info = nullptr);

}  // namespace slm::model
