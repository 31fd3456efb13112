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

#include "slm/model.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "slm/random.hpp"

namespace slm::model {

namespace {

constexpr const char* kCheckpointMagic = "#slm-tensors";
constexpr int kCheckpointVersion = 1;

template <typename S>
Vector<S> inv_rms(const Matrix<S>& x, double eps) {
  const S d = static_cast<S>(x.cols());
  return ((x.array().square().rowwise().sum() / d) + S(eps)).rsqrt().matrix();
}

template <typename S>
Matrix<S> apply_norm(const Matrix<S>& x, const Vector<S>& inv, const Vector<S>& w) {
  return (inv.asDiagonal() * x) * w.asDiagonal();
}

// dy -> dx (accumulated into dx) and dw for y = diag(inv) x diag(w).
template <typename S>
void norm_backward(const Matrix<S>& x, const Vector<S>& inv, const Vector<S>& w,
                   const Matrix<S>& dy, Matrix<S>& dx, Vector<S>& dw) {
  const S d = static_cast<S>(x.cols());
  dw += (dy.cwiseProduct(inv.asDiagonal() * x)).colwise().sum().transpose();
  Matrix<S> g = dy * w.asDiagonal();
  Vector<S> dot = g.cwiseProduct(x).rowwise().sum();
  Vector<S> coef = inv.array().cube() * dot.array() / d;
  dx += inv.asDiagonal() * g - coef.asDiagonal() * x;
}

// Inverted-dropout scale mask: 0 with probability p, else 1/(1-p).
template <typename S>
Matrix<S> dropout_mask(Eigen::Index rows, Eigen::Index cols, double p, std::uint64_t seed) {
  Rng rng(seed);
  const S keep = static_cast<S>(1.0 / (1.0 - p));
  Matrix<S> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform() < p ? S(0) : keep;
  return m;
}

template <typename S>
void check_layer_shapes(const LayerParams<S>& L, const ModelConfig& c) {
  const auto bad = [](const char* what) {
    return data_error("shape_mismatch", std::string("layer tensor ") + what);
  };
  if (L.wq.rows() != c.d_model || L.wq.cols() != c.d_model) throw bad("wq");
  if (L.wk.rows() != c.d_model || L.wk.cols() != c.kv_dim()) throw bad("wk");
  if (L.wv.rows() != c.d_model || L.wv.cols() != c.kv_dim()) throw bad("wv");
  if (L.wo.rows() != c.d_model || L.wo.cols() != c.d_model) throw bad("wo");
}

// Normalized input -> attention output before W_O. Fills the cache fields
// q, k, v, probs, probs_drop and attn_masks when `cache` is given.
template <typename S>
Matrix<S> attention_heads(const Matrix<S>& xn, const LayerParams<S>& L, const ModelConfig& c,
                          bool causal, double dropout_p, std::uint64_t seed,
                          std::vector<Matrix<S>>* probs_out, LayerCache<S>* cache) {
  if (xn.cols() != c.d_model) {
    throw data_error("shape_mismatch", "attention input has " + std::to_string(xn.cols()) +
                                           " columns, expected " + std::to_string(c.d_model));
  }
  check_layer_shapes(L, c);
  const Eigen::Index T = xn.rows();
  const int hd = c.head_dim;
  Matrix<S> q = xn * L.wq;
  Matrix<S> k = xn * L.wk;
  Matrix<S> v = xn * L.wv;
  rope_inplace(q, hd, c.rope_base);
  rope_inplace(k, hd, c.rope_base);

  const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(hd)));
  Matrix<S> out(T, c.d_model);
  if (probs_out) probs_out->clear();
  for (int h = 0; h < c.n_heads; ++h) {
    const int g = h * c.kv_groups / c.n_heads;
    Matrix<S> scores = (q.middleCols(h * hd, hd) * k.middleCols(g * hd, hd).transpose()) * scale;
    Matrix<S> p = Matrix<S>::Zero(T, T);
    for (Eigen::Index i = 0; i < T; ++i) {
      const Eigen::Index n = causal ? i + 1 : T;
      const S mx = scores.row(i).head(n).maxCoeff();
      S sum = 0;
      for (Eigen::Index j = 0; j < n; ++j) {
        p(i, j) = std::exp(scores(i, j) - mx);
        sum += p(i, j);
      }
      p.row(i).head(n) /= sum;
    }
    Matrix<S> mask;
    Matrix<S> pd;
    if (dropout_p > 0.0) {
      mask = dropout_mask<S>(T, T, dropout_p, mix_seed(seed, static_cast<std::uint64_t>(h)));
      pd = p.cwiseProduct(mask);
    }
    const Matrix<S>& used = dropout_p > 0.0 ? pd : p;
    out.middleCols(h * hd, hd) = used * v.middleCols(g * hd, hd);
    if (probs_out) probs_out->push_back(p);
    if (cache) {
      cache->probs.push_back(std::move(p));
      if (dropout_p > 0.0) {
        cache->probs_drop.push_back(std::move(pd));
        cache->attn_masks.push_back(std::move(mask));
      }
    }
  }
  if (cache) {
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

void ModelConfig::validate() const {
  const auto fail = [](const std::string& msg) { return config_error("invalid_model_config", msg); };
  if (n_layers < 0) throw fail("n_layers must be >= 0");
  if (d_model <= 0 || d_ff <= 0 || head_dim <= 0 || n_heads <= 0 || kv_groups <= 0) {
    throw fail("dimensions must be positive");
  }
  if (vocab_size <= 0 || max_seq <= 0) throw fail("vocab_size and max_seq must be positive");
  if (d_model != n_heads * head_dim) throw fail("d_model must equal n_heads * head_dim");
  if (n_heads % kv_groups != 0) throw fail("n_heads must be divisible by kv_groups");
  if (head_dim % 2 != 0) throw fail("head_dim must be even for rotary positions");
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw fail("dropout_p must be in [0, 1)");
  if (!(rope_base > 0.0)) throw fail("rope_base must be positive");
  if (!(norm_eps >= 0.0)) throw fail("norm_eps must be >= 0");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"n_layers", c.n_layers},     {"d_model", c.d_model},
                     {"d_ff", c.d_ff},             {"head_dim", c.head_dim},
                     {"n_heads", c.n_heads},       {"kv_groups", c.kv_groups},
                     {"vocab_size", c.vocab_size}, {"max_seq", c.max_seq},
                     {"dropout_p", c.dropout_p},   {"rope_base", c.rope_base},
                     {"norm_eps", c.norm_eps}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.n_layers = j.value("n_layers", d.n_layers);
  c.d_model = j.value("d_model", d.d_model);
  c.d_ff = j.value("d_ff", d.d_ff);
  c.head_dim = j.value("head_dim", d.head_dim);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.kv_groups = j.value("kv_groups", d.kv_groups);
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.max_seq = j.value("max_seq", d.max_seq);
  c.dropout_p = j.value("dropout_p", d.dropout_p);
  c.rope_base = j.value("rope_base", d.rope_base);
  c.norm_eps = j.value("norm_eps", d.norm_eps);
}

std::int64_t count_params(const ModelConfig& c) {
  c.validate();
  const std::int64_t d = c.d_model, f = c.d_ff, v = c.vocab_size, kv = c.kv_dim();
  const std::int64_t per_layer = d * d + 2 * d * kv + d * d + d * f + f * d + 2 * d;
  return v * d + c.n_layers * per_layer + d + d * v;
}

const char* to_string(InitScheme scheme) {
  switch (scheme) {
    case InitScheme::kSmall: return "small";
    case InitScheme::kScaled: return "scaled";
    case InitScheme::kXavier: return "xavier";
    case InitScheme::kOnes: return "ones";
  }
  return "?";
}

double small_init_std(const ModelConfig& c) { return std::sqrt(2.0 / (5.0 * c.d_model)); }

double scaled_init_std(const ModelConfig& c) {
  return small_init_std(c) / std::sqrt(2.0 * std::max(c.n_layers, 1));
}

double xavier_std(int fan_in, int fan_out) { return std::sqrt(2.0 / (fan_in + fan_out)); }

// ---------------------------------------------------------------------------
// Parameters

template <typename S>
Parameters<S> Parameters<S>::zeros(const ModelConfig& c) {
  c.validate();
  Parameters p;
  p.config = c;
  p.token_embedding = Matrix<S>::Zero(c.vocab_size, c.d_model);
  p.layers.resize(c.n_layers);
  for (auto& L : p.layers) {
    L.wq = Matrix<S>::Zero(c.d_model, c.d_model);
    L.wk = Matrix<S>::Zero(c.d_model, c.kv_dim());
    L.wv = Matrix<S>::Zero(c.d_model, c.kv_dim());
    L.wo = Matrix<S>::Zero(c.d_model, c.d_model);
    L.w1 = Matrix<S>::Zero(c.d_model, c.d_ff);
    L.w2 = Matrix<S>::Zero(c.d_ff, c.d_model);
    L.attn_norm = Vector<S>::Zero(c.d_model);
    L.mlp_norm = Vector<S>::Zero(c.d_model);
  }
  p.final_norm = Vector<S>::Zero(c.d_model);
  p.lm_head = Matrix<S>::Zero(c.d_model, c.vocab_size);
  return p;
}

namespace {

template <typename T, typename P>
std::vector<TensorRef<T>> collect(P& p) {
  std::vector<TensorRef<T>> out;
  const auto add = [&](std::string name, auto& t, bool is_norm) {
    out.push_back({std::move(name), t.data(), t.rows(), t.cols(), is_norm});
  };
  add("token_embedding", p.token_embedding, false);
  for (size_t l = 0; l < p.layers.size(); ++l) {
    auto& L = p.layers[l];
    const std::string pre = "layers." + std::to_string(l) + ".";
    add(pre + "wq", L.wq, false);
    add(pre + "wk", L.wk, false);
    add(pre + "wv", L.wv, false);
    add(pre + "wo", L.wo, false);
    add(pre + "w1", L.w1, false);
    add(pre + "w2", L.w2, false);
    add(pre + "attn_norm", L.attn_norm, true);
    add(pre + "mlp_norm", L.mlp_norm, true);
  }
  add("final_norm", p.final_norm, true);
  add("lm_head", p.lm_head, false);
  return out;
}

}  // namespace

template <typename S>
std::vector<TensorRef<S>> Parameters<S>::tensors() {
  return collect<S>(*this);
}

template <typename S>
std::vector<TensorRef<const S>> Parameters<S>::tensors() const {
  return collect<const S>(*this);
}

template <typename S>
std::int64_t Parameters<S>::num_scalars() const {
  std::int64_t n = 0;
  for (const auto& t : tensors()) n += t.size();
  return n;
}

template <typename S>
void Parameters<S>::set_zero() {
  for (auto& t : tensors()) t.map().setZero();
}

template <typename S>
bool Parameters<S>::all_finite() const {
  for (const auto& t : tensors()) {
    if (!t.map().allFinite()) return false;
  }
  return true;
}

template <typename S>
template <typename To>
Parameters<To> Parameters<S>::cast() const {
  Parameters<To> out = Parameters<To>::zeros(config);
  out.provenance = provenance;
  auto src = tensors();
  auto dst = out.tensors();
  for (size_t i = 0; i < src.size(); ++i) dst[i].map() = src[i].map().template cast<To>();
  return out;
}

template <typename S>
void fill_normal(Eigen::Ref<Matrix<S>> m, double std, std::uint64_t seed, std::uint64_t stream) {
  Rng rng(mix_seed(seed, stream));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = static_cast<S>(std * rng.normal());
  }
}

template <typename S>
Parameters<S> init_params(const ModelConfig& c, std::uint64_t seed) {
  Parameters<S> p = Parameters<S>::zeros(c);
  const double small = small_init_std(c);
  const double scaled = scaled_init_std(c);
  const double xavier = xavier_std(c.d_model, c.vocab_size);
  std::uint64_t stream = 0;
  for (auto& t : p.tensors()) {
    const std::string& n = t.name;
    InitRecord rec;
    if (t.is_norm) {
      rec = {InitScheme::kOnes, 0.0};
      t.map().setOnes();
    } else {
      if (n == "lm_head") {
        rec = {InitScheme::kXavier, xavier};
      } else if (n.ends_with(".wo") || n.ends_with(".w2")) {
        rec = {InitScheme::kScaled, scaled};
      } else {
        rec = {InitScheme::kSmall, small};
      }
      fill_normal<S>(t.map(), rec.std, seed, stream);
    }
    ++stream;
    p.provenance[n] = rec;
  }
  return p;
}

// ---------------------------------------------------------------------------
// Building blocks

template <typename S>
Matrix<S> rope_apply(const Matrix<S>& x, std::span<const int> positions, double base) {
  const Eigen::Index hd = x.cols();
  if (hd % 2 != 0) throw config_error("odd_head_dim", "rotary positions need an even head_dim");
  if (static_cast<Eigen::Index>(positions.size()) != x.rows()) {
    throw data_error("shape_mismatch", "one position per row required");
  }
  Matrix<S> y(x.rows(), hd);
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    for (Eigen::Index i = 0; i < hd / 2; ++i) {
      const double theta = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(hd));
      const double angle = positions[r] * theta;
      const S cs = static_cast<S>(std::cos(angle));
      const S sn = static_cast<S>(std::sin(angle));
      const S a = x(r, 2 * i);
      const S b = x(r, 2 * i + 1);
      y(r, 2 * i) = a * cs - b * sn;
      y(r, 2 * i + 1) = a * sn + b * cs;
    }
  }
  return y;
}

template <typename S>
void rope_inplace(Matrix<S>& x, int head_dim, double base, bool inverse) {
  if (head_dim % 2 != 0) throw config_error("odd_head_dim", "rotary positions need an even head_dim");
  if (x.cols() % head_dim != 0) throw data_error("shape_mismatch", "width not a multiple of head_dim");
  const int half = head_dim / 2;
  std::vector<double> theta(half);
  for (int i = 0; i < half; ++i) theta[i] = std::pow(base, -2.0 * i / head_dim);
  const Eigen::Index heads = x.cols() / head_dim;
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    for (int i = 0; i < half; ++i) {
      const double angle = static_cast<double>(r) * theta[i];
      const S cs = static_cast<S>(std::cos(angle));
      const S sn = static_cast<S>(inverse ? -std::sin(angle) : std::sin(angle));
      for (Eigen::Index h = 0; h < heads; ++h) {
        const Eigen::Index c0 = h * head_dim + 2 * i;
        const S a = x(r, c0);
        const S b = x(r, c0 + 1);
        x(r, c0) = a * cs - b * sn;
        x(r, c0 + 1) = a * sn + b * cs;
      }
    }
  }
}

template <typename S>
Matrix<S> attention_gqa(const Matrix<S>& x, const LayerParams<S>& layer, const ModelConfig& c,
                        const AttentionOptions<S>& options) {
  if (x.rows() > c.max_seq) throw data_error("sequence_too_long", "sequence exceeds max_seq");
  Matrix<S> heads = attention_heads<S>(x, layer, c, options.causal, options.dropout_p,
                                       options.rng_seed, options.probs, nullptr);
  return heads * layer.wo;
}

// ---------------------------------------------------------------------------
// Forward / backward

template <typename S>
ForwardOutput<S> forward(const Parameters<S>& params, std::span<const int> tokens,
                         const ForwardOptions<S>& options, ForwardCache<S>* cache) {
  const ModelConfig& c = params.config;
  const Eigen::Index T = static_cast<Eigen::Index>(tokens.size());
  if (T == 0) throw data_error("empty_sequence", "forward needs at least one token");
  if (T > c.max_seq) {
    throw data_error("sequence_too_long", std::to_string(T) + " tokens exceed max_seq " +
                                              std::to_string(c.max_seq));
  }
  for (int t : tokens) {
    if (t < 0 || t >= c.vocab_size) {
      throw data_error("token_out_of_range", "token id " + std::to_string(t) +
                                                 " outside vocabulary of " +
                                                 std::to_string(c.vocab_size));
    }
  }
  const double p = options.training ? c.dropout_p : 0.0;
  const S emb_scale = static_cast<S>(std::sqrt(static_cast<double>(c.d_model)));

  ForwardOutput<S> out;
  Matrix<S> h(T, c.d_model);
  for (Eigen::Index t = 0; t < T; ++t) h.row(t) = params.token_embedding.row(tokens[t]) * emb_scale;
  if (options.embedding_noise) {
    const auto& noise = *options.embedding_noise;
    if (noise.rows() != T || noise.cols() != c.d_model) {
      throw data_error("shape_mismatch", "embedding noise must be [seq x d_model]");
    }
    h += noise;
  }
  if (options.keep_hidden) out.hidden.push_back(h);
  if (cache) {
    cache->tokens.assign(tokens.begin(), tokens.end());
    cache->layers.clear();
    cache->layers.resize(c.n_layers);
  }

  for (int l = 0; l < c.n_layers; ++l) {
    const LayerParams<S>& L = params.layers[l];
    const std::uint64_t lseed = mix_seed(options.dropout_seed, static_cast<std::uint64_t>(l));
    LayerCache<S>* lc = cache ? &cache->layers[l] : nullptr;

    Vector<S> inv1 = inv_rms(h, c.norm_eps);
    Matrix<S> n1 = apply_norm(h, inv1, L.attn_norm);
    std::vector<Matrix<S>> probs;
    Matrix<S> heads = attention_heads<S>(n1, L, c, true, p, mix_seed(lseed, 0),
                                         options.keep_attention ? &probs : nullptr, lc);
    Matrix<S> a = heads * L.wo;
    Matrix<S> m1;
    if (p > 0.0) {
      m1 = dropout_mask<S>(T, c.d_model, p, mix_seed(lseed, 1));
      a = a.cwiseProduct(m1);
    }
    Matrix<S> h1 = h + a;

    Vector<S> inv2 = inv_rms(h1, c.norm_eps);
    Matrix<S> n2 = apply_norm(h1, inv2, L.mlp_norm);
    Matrix<S> u = n2 * L.w1;
    Matrix<S> s = silu(u.array()).matrix();
    Matrix<S> m = s * L.w2;
    Matrix<S> m2;
    if (p > 0.0) {
      m2 = dropout_mask<S>(T, c.d_model, p, mix_seed(lseed, 2));
      m = m.cwiseProduct(m2);
    }
    Matrix<S> h2 = h1 + m;

    if (lc) {
      lc->x = std::move(h);
      lc->inv1 = std::move(inv1);
      lc->n1 = std::move(n1);
      lc->attn_out = std::move(heads);
      lc->resid1_mask = std::move(m1);
      lc->h = h1;
      lc->inv2 = std::move(inv2);
      lc->n2 = std::move(n2);
      lc->u = std::move(u);
      lc->s = std::move(s);
      lc->resid2_mask = std::move(m2);
    }
    if (options.keep_attention) out.attention.push_back(std::move(probs));
    h = std::move(h2);
    if (options.keep_hidden) out.hidden.push_back(h);
  }

  Vector<S> inv = inv_rms(h, c.norm_eps);
  out.final_hidden = apply_norm(h, inv, params.final_norm);
  out.logits = out.final_hidden * params.lm_head;
  if (cache) {
    cache->final_in = std::move(h);
    cache->final_inv = std::move(inv);
  }
  return out;
}

template <typename S>
void backward(const Parameters<S>& params, const ForwardCache<S>& cache, const Matrix<S>& dlogits,
              Parameters<S>& grads) {
  const ModelConfig& c = params.config;
  const Eigen::Index T = static_cast<Eigen::Index>(cache.tokens.size());
  if (dlogits.rows() != T || dlogits.cols() != c.vocab_size) {
    throw data_error("shape_mismatch", "dlogits must be [seq x vocab]");
  }
  if (!(grads.config == c)) throw data_error("shape_mismatch", "gradient buffer config differs");

  Matrix<S> fh = apply_norm(cache.final_in, cache.final_inv, params.final_norm);
  grads.lm_head.noalias() += fh.transpose() * dlogits;
  Matrix<S> dfh = dlogits * params.lm_head.transpose();
  Matrix<S> dh = Matrix<S>::Zero(T, c.d_model);
  norm_backward(cache.final_in, cache.final_inv, params.final_norm, dfh, dh, grads.final_norm);

  const int hd = c.head_dim;
  const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(hd)));
  for (int l = c.n_layers - 1; l >= 0; --l) {
    const LayerParams<S>& L = params.layers[l];
    LayerParams<S>& G = grads.layers[l];
    const LayerCache<S>& lc = cache.layers[l];

    // MLP branch: h2 = h1 + drop(silu(n2 W1) W2)
    Matrix<S> dm = lc.resid2_mask.size() ? Matrix<S>(dh.cwiseProduct(lc.resid2_mask)) : dh;
    G.w2.noalias() += lc.s.transpose() * dm;
    Matrix<S> ds = dm * L.w2.transpose();
    Matrix<S> sig = (S(1) + (-lc.u.array()).exp()).inverse().matrix();
    Matrix<S> du =
        ds.array() * (sig.array() * (S(1) + lc.u.array() * (S(1) - sig.array())));
    G.w1.noalias() += lc.n2.transpose() * du;
    Matrix<S> dn2 = du * L.w1.transpose();
    norm_backward(lc.h, lc.inv2, L.mlp_norm, dn2, dh, G.mlp_norm);

    // Attention branch: h1 = x + drop(heads W_O)
    Matrix<S> da = lc.resid1_mask.size() ? Matrix<S>(dh.cwiseProduct(lc.resid1_mask)) : dh;
    G.wo.noalias() += lc.attn_out.transpose() * da;
    Matrix<S> dheads = da * L.wo.transpose();
    Matrix<S> dq = Matrix<S>::Zero(T, c.d_model);
    Matrix<S> dk = Matrix<S>::Zero(T, c.kv_dim());
    Matrix<S> dv = Matrix<S>::Zero(T, c.kv_dim());
    const bool dropped = !lc.attn_masks.empty();
    for (int h = 0; h < c.n_heads; ++h) {
      const int g = h * c.kv_groups / c.n_heads;
      const Matrix<S>& P = lc.probs[h];
      const Matrix<S>& Pd = dropped ? lc.probs_drop[h] : P;
      Matrix<S> dOh = dheads.middleCols(h * hd, hd);
      dv.middleCols(g * hd, hd).noalias() += Pd.transpose() * dOh;
      Matrix<S> dP = dOh * lc.v.middleCols(g * hd, hd).transpose();
      if (dropped) dP = dP.cwiseProduct(lc.attn_masks[h]);
      Vector<S> row_dot = dP.cwiseProduct(P).rowwise().sum();
      Matrix<S> dS = P.cwiseProduct(dP - row_dot.replicate(1, T));
      dq.middleCols(h * hd, hd).noalias() += (dS * lc.k.middleCols(g * hd, hd)) * scale;
      dk.middleCols(g * hd, hd).noalias() += (dS.transpose() * lc.q.middleCols(h * hd, hd)) * scale;
    }
    rope_inplace(dq, hd, c.rope_base, true);
    rope_inplace(dk, hd, c.rope_base, true);
    G.wq.noalias() += lc.n1.transpose() * dq;
    G.wk.noalias() += lc.n1.transpose() * dk;
    G.wv.noalias() += lc.n1.transpose() * dv;
    Matrix<S> dn1 = dq * L.wq.transpose() + dk * L.wk.transpose() + dv * L.wv.transpose();
    norm_backward(lc.x, lc.inv1, L.attn_norm, dn1, dh, G.attn_norm);
  }

  const S emb_scale = static_cast<S>(std::sqrt(static_cast<double>(c.d_model)));
  for (Eigen::Index t = 0; t < T; ++t) {
    grads.token_embedding.row(cache.tokens[t]) += dh.row(t) * emb_scale;
  }
}

// ---------------------------------------------------------------------------
// Tensor files

TensorFile::TensorFile() : header_(std::make_unique<nlohmann::json>(nlohmann::json::object())) {}
TensorFile::TensorFile(const TensorFile& o)
    : header_(std::make_unique<nlohmann::json>(*o.header_)), blobs_(o.blobs_) {}
TensorFile::TensorFile(TensorFile&&) noexcept = default;
TensorFile& TensorFile::operator=(const TensorFile& o) {
  header_ = std::make_unique<nlohmann::json>(*o.header_);
  blobs_ = o.blobs_;
  return *this;
}
TensorFile& TensorFile::operator=(TensorFile&&) noexcept = default;
TensorFile::~TensorFile() = default;

nlohmann::json& TensorFile::header() { return *header_; }
const nlohmann::json& TensorFile::header() const { return *header_; }

bool TensorFile::contains(const std::string& name) const {
  return std::any_of(blobs_.begin(), blobs_.end(), [&](const auto& b) { return b.name == name; });
}

const TensorBlob& TensorFile::find(const std::string& name) const {
  for (const auto& b : blobs_) {
    if (b.name == name) return b;
  }
  throw data_error("missing_tensor", "tensor " + name + " not in file");
}

template <typename S>
void TensorFile::put(const std::string& name, const S* data, std::int64_t rows, std::int64_t cols) {
  if (contains(name)) throw data_error("duplicate_tensor", name);
  TensorBlob b;
  b.name = name;
  b.shape = {rows, cols};
  b.dtype = dtype_name<S>();
  b.bytes.resize(static_cast<size_t>(rows * cols) * sizeof(S));
  std::memcpy(b.bytes.data(), data, b.bytes.size());
  blobs_.push_back(std::move(b));
}

template <typename S>
void TensorFile::get(const std::string& name, S* data, std::int64_t rows, std::int64_t cols) const {
  const TensorBlob& b = find(name);
  if (b.shape.size() != 2 || b.shape[0] != rows || b.shape[1] != cols) {
    throw data_error("shape_mismatch", "tensor " + name + " has unexpected shape");
  }
  const size_t n = static_cast<size_t>(rows * cols);
  if (b.dtype == dtype_name<S>()) {
    std::memcpy(data, b.bytes.data(), n * sizeof(S));
  } else if (b.dtype == "f32") {
    const float* src = reinterpret_cast<const float*>(b.bytes.data());
    for (size_t i = 0; i < n; ++i) data[i] = static_cast<S>(src[i]);
  } else if (b.dtype == "f64") {
    const double* src = reinterpret_cast<const double*>(b.bytes.data());
    for (size_t i = 0; i < n; ++i) data[i] = static_cast<S>(src[i]);
  } else {
    throw data_error("unsupported_dtype", b.dtype);
  }
}

void TensorFile::save(const std::string& path) const {
  nlohmann::json head = *header_;
  nlohmann::json table = nlohmann::json::array();
  std::int64_t offset = 0;
  for (const auto& b : blobs_) {
    table.push_back({{"name", b.name},
                     {"shape", b.shape},
                     {"dtype", b.dtype},
                     {"offset", offset},
                     {"nbytes", b.bytes.size()}});
    offset += static_cast<std::int64_t>(b.bytes.size());
  }
  head["tensors"] = std::move(table);
  const std::string text = head.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("io", "cannot write " + path);
  out << kCheckpointMagic << '\t' << kCheckpointVersion << '\n' << text.size() << '\n' << text << '\n';
  for (const auto& b : blobs_) out.write(b.bytes.data(), static_cast<std::streamsize>(b.bytes.size()));
  if (!out) throw data_error("io", "write failed for " + path);
}

TensorFile TensorFile::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("io", "cannot open " + path);
  std::string magic_line;
  std::getline(in, magic_line);
  const auto tab = magic_line.find('\t');
  if (tab == std::string::npos || magic_line.substr(0, tab) != kCheckpointMagic) {
    throw data_error("bad_magic", path + " is not a tensor file");
  }
  if (magic_line.substr(tab + 1) != std::to_string(kCheckpointVersion)) {
    throw data_error("unsupported_version", "tensor file version " + magic_line.substr(tab + 1));
  }
  std::string len_line;
  std::getline(in, len_line);
  size_t len = 0;
  try {
    len = std::stoull(len_line);
  } catch (const std::exception&) {
    throw data_error("bad_header", "header length line unreadable");
  }
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (in.get() != '\n') throw data_error("bad_header", "truncated header");
  TensorFile f;
  try {
    *f.header_ = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw data_error("bad_header", e.what());
  }
  for (const auto& t : f.header_->at("tensors")) {
    TensorBlob b;
    b.name = t.at("name").get<std::string>();
    b.shape = t.at("shape").get<std::vector<std::int64_t>>();
    b.dtype = t.at("dtype").get<std::string>();
    b.bytes.resize(t.at("nbytes").get<size_t>());
    in.read(b.bytes.data(), static_cast<std::streamsize>(b.bytes.size()));
    if (!in) throw data_error("truncated", "payload of " + b.name + " is truncated");
    f.blobs_.push_back(std::move(b));
  }
  f.header_->erase("tensors");
  return f;
}

template <typename S>
void store_params(TensorFile& file, const Parameters<S>& params, const std::string& prefix) {
  for (const auto& t : params.tensors()) file.put<S>(prefix + t.name, t.data, t.rows, t.cols);
}

template <typename S>
void load_params(const TensorFile& file, Parameters<S>& params, const std::string& prefix) {
  for (auto& t : params.tensors()) file.get<S>(prefix + t.name, t.data, t.rows, t.cols);
}

template <typename S>
TensorFile make_checkpoint(const Parameters<S>& params, const CheckpointInfo& info) {
  TensorFile f;
  f.header()["kind"] = "model";
  f.header()["config"] = params.config;
  f.header()["seed"] = info.seed;
  f.header()["step"] = info.step;
  f.header()["dtype"] = dtype_name<S>();
  nlohmann::json prov = nlohmann::json::object();
  for (const auto& [name, rec] : params.provenance) {
    prov[name] = {{"scheme", to_string(rec.scheme)}, {"std", rec.std}};
  }
  f.header()["provenance"] = std::move(prov);
  store_params(f, params);
  return f;
}

template <typename S>
void save_checkpoint(const std::string& path, const Parameters<S>& params,
                     const CheckpointInfo& info) {
  make_checkpoint(params, info).save(path);
}

CheckpointInfo read_checkpoint_info(const TensorFile& file) {
  CheckpointInfo info;
  const auto& h = file.header();
  if (!h.contains("config")) throw data_error("bad_header", "checkpoint has no model config");
  info.config = h.at("config").get<ModelConfig>();
  info.seed = h.value("seed", std::uint64_t{0});
  info.step = h.value("step", std::int64_t{0});
  info.dtype = h.value("dtype", std::string("f64"));
  return info;
}

template <typename S>
Parameters<S> load_checkpoint(const std::string& path, CheckpointInfo* info_out) {
  return params_from_checkpoint<S>(TensorFile::load(path), info_out);
}

template <typename S>
Parameters<S> params_from_checkpoint(const TensorFile& f, CheckpointInfo* info_out) {
  const CheckpointInfo info = read_checkpoint_info(f);
  Parameters<S> p = Parameters<S>::zeros(info.config);
  load_params(f, p);
  if (f.header().contains("provenance")) {
    for (const auto& [name, rec] : f.header()["provenance"].items()) {
      const std::string scheme = rec.at("scheme").template get<std::string>();
      InitRecord r;
      r.std = rec.at("std").template get<double>();
      if (scheme == "small") r.scheme = InitScheme::kSmall;
      else if (scheme == "scaled") r.scheme = InitScheme::kScaled;
      else if (scheme == "xavier") r.scheme = InitScheme::kXavier;
      else r.scheme = InitScheme::kOnes;
      p.provenance[name] = r;
    }
  }
  if (info_out) *info_out = info;
  return p;
}

// ---------------------------------------------------------------------------
// Instantiations

#define SLM_INSTANTIATE(S)                                                                      \
  template struct Parameters<S>;                                                                \
  template Parameters<S> init_params<S>(const ModelConfig&, std::uint64_t);                     \
  template void fill_normal<S>(Eigen::Ref<Matrix<S>>, double, std::uint64_t, std::uint64_t);    \
  template Matrix<S> rope_apply<S>(const Matrix<S>&, std::span<const int>, double);             \
  template void rope_inplace<S>(Matrix<S>&, int, double, bool);                                 \
  template Matrix<S> attention_gqa<S>(const Matrix<S>&, const LayerParams<S>&,                  \
                                      const ModelConfig&, const AttentionOptions<S>&);          \
  template ForwardOutput<S> forward<S>(const Parameters<S>&, std::span<const int>,              \
                                       const ForwardOptions<S>&, ForwardCache<S>*);             \
  template void backward<S>(const Parameters<S>&, const ForwardCache<S>&, const Matrix<S>&,     \
                            Parameters<S>&);                                                    \
  template void TensorFile::put<S>(const std::string&, const S*, std::int64_t, std::int64_t);   \
  template void TensorFile::get<S>(const std::string&, S*, std::int64_t, std::int64_t) const;   \
  template void store_params<S>(TensorFile&, const Parameters<S>&, const std::string&);         \
  template void load_params<S>(const TensorFile&, Parameters<S>&, const std::string&);          \
  template void save_checkpoint<S>(const std::string&, const Parameters<S>&,                    \
                                   const CheckpointInfo&);                                      \
  template Parameters<S> load_checkpoint<S>(const std::string&, CheckpointInfo*);               \
  template Parameters<S> params_from_checkpoint<S>(const TensorFile&, CheckpointInfo*);         \
  template TensorFile make_checkpoint<S>(const Parameters<S>&, const CheckpointInfo&);

SLM_INSTANTIATE(float)
SLM_INSTANTIATE(double)
#undef SLM_INSTANTIATE

template Parameters<float> Parameters<double>::cast<float>() const;
template Parameters<double> Parameters<float>::cast<double>() const;
template Parameters<double> Parameters<double>::cast<double>() const;
template Parameters<float> Parameters<float>::cast<float>() const;

}  // namespace slm::model
