#pragma once

#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "distaudit/ops.hpp"
#include "distaudit/rng.hpp"
#include "distaudit/tensor.hpp"

namespace distaudit {

struct ModelConfig {
  int n_layers = 1;
  int n_heads = 1;
  int d_model = 32;
  int d_ff = 128;
  int vocab_size = 260;
  int max_seq_len = 256;
  bool tie_embeddings = true;

  void validate() const {
    if (n_layers < 1) throw ConfigError("model config: n_layers must be >= 1");
    if (n_heads < 1) throw ConfigError("model config: n_heads must be >= 1");
    if (d_model < 1) throw ConfigError("model config: d_model must be >= 1");
    if (d_model % n_heads != 0)
      throw ConfigError("model config: n_heads must divide d_model");
    if (d_ff < 1) throw ConfigError("model config: d_ff must be >= 1");
    if (vocab_size < 2) throw ConfigError("model config: vocab_size must be >= 2");
    if (max_seq_len < 1) throw ConfigError("model config: max_seq_len must be >= 1");
  }

  bool operator==(const ModelConfig&) const = default;
};

// Bundled architectures: one teacher and three student sizes.
inline ModelConfig arch_config(const std::string& name) {
  ModelConfig c;
  if (name == "T") {
    c.n_layers = 4; c.n_heads = 4; c.d_model = 128; c.d_ff = 512;
  } else if (name == "S-L") {
    c.n_layers = 3; c.n_heads = 4; c.d_model = 96; c.d_ff = 384;
  } else if (name == "S-M") {
    c.n_layers = 2; c.n_heads = 4; c.d_model = 64; c.d_ff = 256;
  } else if (name == "S-S") {
    c.n_layers = 1; c.n_heads = 2; c.d_model = 32; c.d_ff = 128;
  } else {
    throw ConfigError("unknown architecture name: " + name);
  }
  return c;
}

// Decoder-only transformer parameters: token and position embeddings, a
// stack of pre-norm blocks, a final layer norm, and (untied only) an output
// head. all() exposes the tensors in a fixed canonical order which defines
// both the optimizer slot layout and the checkpoint payload order.
template <typename Real>
struct TransformerParamsT {
  ModelConfig config;

  TensorT<Real> wte;  // [vocab, d_model]
  TensorT<Real> wpe;  // [max_seq_len, d_model]
  struct Block {
    TensorT<Real> ln1_g, ln1_b;
    TensorT<Real> qkv_w, qkv_b;    // [d, 3d], [3d]
    TensorT<Real> proj_w, proj_b;  // [d, d], [d]
    TensorT<Real> ln2_g, ln2_b;
    TensorT<Real> fc_w, fc_b;      // [d, d_ff], [d_ff]
    TensorT<Real> out_w, out_b;    // [d_ff, d], [d]
  };
  std::vector<Block> blocks;
  TensorT<Real> lnf_g, lnf_b;
  TensorT<Real> head_w;  // [vocab, d_model], absent when tied

  std::vector<TensorT<Real>*> all() {
    std::vector<TensorT<Real>*> ps{&wte, &wpe};
    for (auto& b : blocks) {
      ps.push_back(&b.ln1_g); ps.push_back(&b.ln1_b);
      ps.push_back(&b.qkv_w); ps.push_back(&b.qkv_b);
      ps.push_back(&b.proj_w); ps.push_back(&b.proj_b);
      ps.push_back(&b.ln2_g); ps.push_back(&b.ln2_b);
      ps.push_back(&b.fc_w); ps.push_back(&b.fc_b);
      ps.push_back(&b.out_w); ps.push_back(&b.out_b);
    }
    ps.push_back(&lnf_g);
    ps.push_back(&lnf_b);
    if (!config.tie_embeddings) ps.push_back(&head_w);
    return ps;
  }

  std::vector<const TensorT<Real>*> all() const {
    auto ps = const_cast<TransformerParamsT*>(this)->all();
    return {ps.begin(), ps.end()};
  }

  long param_count() const {
    long n = 0;
    for (const auto* p : all()) n += static_cast<long>(p->numel());
    return n;
  }
};

using TransformerParams = TransformerParamsT<float>;

inline long param_count(const ModelConfig& c) {
  const long d = c.d_model, ff = c.d_ff, v = c.vocab_size, s = c.max_seq_len, L = c.n_layers;
  long block = 2 * d            // ln1
               + d * 3 * d + 3 * d
               + d * d + d
               + 2 * d          // ln2
               + d * ff + ff
               + ff * d + d;
  long n = v * d + s * d + L * block + 2 * d;
  if (!c.tie_embeddings) n += v * d;
  return n;
}

// Fresh parameters. Weights draw from Normal(0, 0.02); the residual output
// projections (attention proj and MLP out) are scaled down by
// 1/sqrt(2 * n_layers); biases start at zero and norm gains at one.
template <typename Real>
TransformerParamsT<Real> init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  TransformerParamsT<Real> p;
  p.config = config;
  Rng rng(seed);
  const double base = 0.02;
  const double resid = base / std::sqrt(2.0 * config.n_layers);
  const int d = config.d_model, ff = config.d_ff;

  p.wte = randn<Real>({config.vocab_size, d}, rng, base, true);
  p.wpe = randn<Real>({config.max_seq_len, d}, rng, base, true);
  p.blocks.resize(config.n_layers);
  for (auto& b : p.blocks) {
    b.ln1_g = full<Real>({d}, Real(1), true);
    b.ln1_b = zeros<Real>({d}, true);
    b.qkv_w = randn<Real>({d, 3 * d}, rng, base, true);
    b.qkv_b = zeros<Real>({3 * d}, true);
    b.proj_w = randn<Real>({d, d}, rng, resid, true);
    b.proj_b = zeros<Real>({d}, true);
    b.ln2_g = full<Real>({d}, Real(1), true);
    b.ln2_b = zeros<Real>({d}, true);
    b.fc_w = randn<Real>({d, ff}, rng, base, true);
    b.fc_b = zeros<Real>({ff}, true);
    b.out_w = randn<Real>({ff, d}, rng, resid, true);
    b.out_b = zeros<Real>({d}, true);
  }
  p.lnf_g = full<Real>({d}, Real(1), true);
  p.lnf_b = zeros<Real>({d}, true);
  if (!config.tie_embeddings)
    p.head_w = randn<Real>({config.vocab_size, d}, rng, base, true);
  return p;
}

// Full forward pass over one sequence of token ids. Returns next-token
// logits, one row per input position. Pass a null tape for inference.
// Parameters are read-only; gradient accumulation happens through the
// shared grad buffers when the tape replays.
template <typename Real>
TensorT<Real> forward_logits(TapeT<Real>* tape, const TransformerParamsT<Real>& params,
                             std::span<const int> ids) {
  const ModelConfig& c = params.config;
  const int T = static_cast<int>(ids.size());
  if (T < 1) throw LengthError("forward: sequence must hold at least one token");
  if (T > c.max_seq_len)
    throw LengthError("forward: sequence length " + std::to_string(T) + " exceeds max_seq_len " +
                      std::to_string(c.max_seq_len));
  for (int id : ids)
    if (id < 0 || id >= c.vocab_size)
      throw VocabError("forward: token id " + std::to_string(id) + " outside [0, " +
                       std::to_string(c.vocab_size) + ")");

  std::vector<int> positions(T);
  std::iota(positions.begin(), positions.end(), 0);
  TensorT<Real> x = add(tape, embedding_lookup(tape, params.wte, ids),
                        embedding_lookup(tape, params.wpe, positions));
  const int d = c.d_model;
  for (const auto& b : params.blocks) {
    TensorT<Real> h = layer_norm(tape, x, b.ln1_g, b.ln1_b);
    TensorT<Real> qkv = add_bias(tape, matmul(tape, h, b.qkv_w), b.qkv_b);
    TensorT<Real> q = slice_cols(tape, qkv, 0, d);
    TensorT<Real> k = slice_cols(tape, qkv, d, 2 * d);
    TensorT<Real> v = slice_cols(tape, qkv, 2 * d, 3 * d);
    TensorT<Real> att = causal_self_attention(tape, q, k, v, c.n_heads);
    x = add(tape, x, add_bias(tape, matmul(tape, att, b.proj_w), b.proj_b));
    TensorT<Real> h2 = layer_norm(tape, x, b.ln2_g, b.ln2_b);
    TensorT<Real> ffn = gelu(tape, add_bias(tape, matmul(tape, h2, b.fc_w), b.fc_b));
    x = add(tape, x, add_bias(tape, matmul(tape, ffn, b.out_w), b.out_b));
  }
  x = layer_norm(tape, x, params.lnf_g, params.lnf_b);
  if (c.tie_embeddings) return matmul_nt(tape, x, params.wte);
  return matmul_nt(tape, x, params.head_w);
}

// Inference-only overload; lets callers write forward_logits(nullptr, ...)
// without naming the tape type.
template <typename Real>
TensorT<Real> forward_logits(std::nullptr_t, const TransformerParamsT<Real>& params,
                             std::span<const int> ids) {
  return forward_logits(static_cast<TapeT<Real>*>(nullptr), params, ids);
}

// All-zero parameter set straight from a config (checkpoint loading).
template <typename Real>
TransformerParamsT<Real> init_zero(const ModelConfig& config) {
  config.validate();
  TransformerParamsT<Real> p;
  p.config = config;
  const int d = config.d_model, ff = config.d_ff;
  p.wte = zeros<Real>({config.vocab_size, d}, true);
  p.wpe = zeros<Real>({config.max_seq_len, d}, true);
  p.blocks.resize(config.n_layers);
  for (auto& b : p.blocks) {
    b.ln1_g = zeros<Real>({d}, true);
    b.ln1_b = zeros<Real>({d}, true);
    b.qkv_w = zeros<Real>({d, 3 * d}, true);
    b.qkv_b = zeros<Real>({3 * d}, true);
    b.proj_w = zeros<Real>({d, d}, true);
    b.proj_b = zeros<Real>({d}, true);
    b.ln2_g = zeros<Real>({d}, true);
    b.ln2_b = zeros<Real>({d}, true);
    b.fc_w = zeros<Real>({d, ff}, true);
    b.fc_b = zeros<Real>({ff}, true);
    b.out_w = zeros<Real>({ff, d}, true);
    b.out_b = zeros<Real>({d}, true);
  }
  p.lnf_g = zeros<Real>({d}, true);
  p.lnf_b = zeros<Real>({d}, true);
  if (!config.tie_embeddings) p.head_w = zeros<Real>({config.vocab_size, d}, true);
  return p;
}

// All-zero parameter set with the same shapes as src.
template <typename Real>
TransformerParamsT<Real> init_zero_like(const TransformerParamsT<Real>& src) {
  TransformerParamsT<Real> dst;
  dst.config = src.config;
  dst.wte = TensorT<Real>(src.wte.shape, true);
  dst.wpe = TensorT<Real>(src.wpe.shape, true);
  dst.blocks.resize(src.blocks.size());
  for (std::size_t i = 0; i < src.blocks.size(); ++i) {
    const auto& s = src.blocks[i];
    auto& b = dst.blocks[i];
    b.ln1_g = TensorT<Real>(s.ln1_g.shape, true);
    b.ln1_b = TensorT<Real>(s.ln1_b.shape, true);
    b.qkv_w = TensorT<Real>(s.qkv_w.shape, true);
    b.qkv_b = TensorT<Real>(s.qkv_b.shape, true);
    b.proj_w = TensorT<Real>(s.proj_w.shape, true);
    b.proj_b = TensorT<Real>(s.proj_b.shape, true);
    b.ln2_g = TensorT<Real>(s.ln2_g.shape, true);
    b.ln2_b = TensorT<Real>(s.ln2_b.shape, true);
    b.fc_w = TensorT<Real>(s.fc_w.shape, true);
    b.fc_b = TensorT<Real>(s.fc_b.shape, true);
    b.out_w = TensorT<Real>(s.out_w.shape, true);
    b.out_b = TensorT<Real>(s.out_b.shape, true);
  }
  dst.lnf_g = TensorT<Real>(src.lnf_g.shape, true);
  dst.lnf_b = TensorT<Real>(src.lnf_b.shape, true);
  if (!src.config.tie_embeddings) dst.head_w = TensorT<Real>(src.head_w.shape, true);
  return dst;
}

// Deep copy: fresh storage, same values.
template <typename Real>
TransformerParamsT<Real> clone_params(const TransformerParamsT<Real>& src) {
  TransformerParamsT<Real> dst = init_zero_like(src);
  auto sp = src.all();
  auto dp = dst.all();
  for (std::size_t i = 0; i < sp.size(); ++i) *dp[i]->data = *sp[i]->data;
  return dst;
}

}  // namespace distaudit
