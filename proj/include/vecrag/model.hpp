// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "vecrag/ops.hpp"
#include "vecrag/rng.hpp"
#include "vecrag/tensor.hpp"
#include "vecrag/tokenizer.hpp"

// The fusion architecture: a small bidirectional encoder squeezes each
// additional context into the hidden state of a leading CLS token, a
// per-decoder-layer linear projector lifts those vectors into the decoder
// width, and a cross-attention + MLP block in front of every decoder layer's
// self-attention lets the decoder read them. With no context vectors the
// cross blocks vanish and the decoder is the plain baseline.

namespace vecrag {

struct ModelConfig {
  int vocab_size = 101;
  int d_dec = 64;
  int d_enc = 32;
  int n_layers_dec = 4;
  int n_layers_enc = 2;
  int n_heads = 4;
  int max_seq_len = 256;
  int max_ctx_vectors = 20;
  int enc_max_len = 64;  // per-context token budget, CLS included

  int d_k() const { return d_dec / n_heads; }

  void validate() const {
    if (d_dec % n_heads != 0) {
      throw std::invalid_argument("model config: d_dec " + std::to_string(d_dec) +
                                  " not divisible by n_heads " + std::to_string(n_heads));
    }
    if (d_enc % n_heads != 0) {
      throw std::invalid_argument("model config: d_enc " + std::to_string(d_enc) +
                                  " not divisible by n_heads " + std::to_string(n_heads));
    }
    if (vocab_size < 2 || d_dec < 2 || d_enc < 2 || n_layers_dec < 1 || n_layers_enc < 1 ||
        n_heads < 1 || max_seq_len < 2 || max_ctx_vectors < 0 || enc_max_len < 2) {
      throw std::invalid_argument("model config: degenerate dimension");
    }
  }
};

struct AttentionWeights {
  Tensor wq, wk, wv, wo;  // each [d, d]
};

struct MlpWeights {
  Tensor w1, b1, w2, b2;  // d -> 4d -> d
};

struct LayerNormWeights {
  Tensor gain, bias;
};

struct DecoderLayerParams {
  LayerNormWeights ln;  // in front of self-attention
  AttentionWeights self_attn;
  MlpWeights mlp;
};

// Task model (theta).
struct DecoderParams {
  Tensor tok_emb;  // [vocab, d_dec]
  Tensor pos_emb;  // [max_seq_len, d_dec]
  std::vector<DecoderLayerParams> layers;
  LayerNormWeights ln_final;
  Tensor w_out;  // [d_dec, vocab]
  Tensor b_out;  // [vocab]
};

struct EncoderLayerParams {
  LayerNormWeights ln_attn;
  AttentionWeights attn;
  LayerNormWeights ln_mlp;
  MlpWeights mlp;
};

// Context encoder (phi). Bidirectional: no causal mask anywhere.
struct EncoderParams {
  Tensor tok_emb;  // [vocab, d_enc]; the CLS row doubles as the summary slot
  Tensor pos_emb;  // [enc_max_len, d_enc]
  std::vector<EncoderLayerParams> layers;
  LayerNormWeights ln_final;
};

struct AdapterLayerParams {
  LayerNormWeights ln_cross;
  Tensor projector;  // [d_enc, d_dec], bias-free
  AttentionWeights cross_attn;
  MlpWeights cross_mlp;
};

// Newly added parameters (pi): one projector + cross block per decoder layer.
struct AdapterParams {
  std::vector<AdapterLayerParams> layers;
};

struct ModelParams {
  DecoderParams decoder;
  EncoderParams encoder;
  AdapterParams adapters;  // empty layers = plain baseline decoder

  bool has_adapters() const { return !adapters.layers.empty(); }
};

enum class ParamGroup { decoder_theta, encoder_phi, adapter_pi };

struct NamedParam {
  std::string name;
  Tensor tensor;
  ParamGroup group;
};

// ---- initialization ----

namespace detail {

inline Tensor randn(Shape shape, Rng& rng, double std_dev) {
  Tensor t(std::move(shape), 0.0, true);
  for (std::size_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.normal(0.0, std_dev);
  return t;
}

// Attention and MLP matrices use fan-in scaling so attention scores are
// alive at initialization (a tiny from-scratch model never escapes a
// near-uniform attention plateau otherwise). Embeddings and the vocab
// readout stay small so initial logits are near uniform.
inline AttentionWeights init_attention(std::size_t d, Rng& rng) {
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  return {randn({d, d}, rng, s), randn({d, d}, rng, s), randn({d, d}, rng, s),
          randn({d, d}, rng, s)};
}

inline MlpWeights init_mlp(std::size_t d, Rng& rng) {
  const double s1 = 1.0 / std::sqrt(static_cast<double>(d));
  const double s2 = 1.0 / std::sqrt(static_cast<double>(4 * d));
  return {randn({d, 4 * d}, rng, s1), Tensor(Shape{4 * d}, 0.0, true),
          randn({4 * d, d}, rng, s2), Tensor(Shape{d}, 0.0, true)};
}

inline LayerNormWeights init_layer_norm(std::size_t d) {
  return {Tensor(Shape{d}, 1.0, true), Tensor(Shape{d}, 0.0, true)};
}

inline Tensor clone(const Tensor& t) {
  return Tensor(t.shape(), t.values(), t.requires_grad());
}

constexpr double kInitStd = 0.02;

}  // namespace detail

inline DecoderParams init_decoder(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  const auto d = static_cast<std::size_t>(cfg.d_dec);
  DecoderParams p;
  p.tok_emb = detail::randn({static_cast<std::size_t>(cfg.vocab_size), d}, rng, detail::kInitStd);
  p.pos_emb = detail::randn({static_cast<std::size_t>(cfg.max_seq_len), d}, rng, detail::kInitStd);
  for (int l = 0; l < cfg.n_layers_dec; ++l) {
    p.layers.push_back({detail::init_layer_norm(d), detail::init_attention(d, rng),
                        detail::init_mlp(d, rng)});
  }
  p.ln_final = detail::init_layer_norm(d);
  p.w_out = detail::randn({d, static_cast<std::size_t>(cfg.vocab_size)}, rng, detail::kInitStd);
  p.b_out = Tensor(Shape{static_cast<std::size_t>(cfg.vocab_size)}, 0.0, true);
  return p;
}

inline EncoderParams init_encoder(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  const auto d = static_cast<std::size_t>(cfg.d_enc);
  EncoderParams p;
  p.tok_emb = detail::randn({static_cast<std::size_t>(cfg.vocab_size), d}, rng, detail::kInitStd);
  p.pos_emb = detail::randn({static_cast<std::size_t>(cfg.enc_max_len), d}, rng, detail::kInitStd);
  for (int l = 0; l < cfg.n_layers_enc; ++l) {
    p.layers.push_back({detail::init_layer_norm(d), detail::init_attention(d, rng),
                        detail::init_layer_norm(d), detail::init_mlp(d, rng)});
  }
  p.ln_final = detail::init_layer_norm(d);
  return p;
}

/// Adapter weights start as copies of the matching decoder layer's own
/// self-attention / MLP / pre-norm, so the only randomly initialized pieces
/// are the projectors (uniform +-1/sqrt(d_enc)). equivalence_mode zeroes the
/// cross-MLP output layer, which silences every cross block exactly.
inline AdapterParams init_adapters(const DecoderParams& decoder, const ModelConfig& cfg,
                                   std::uint64_t seed, bool equivalence_mode = false) {
  Rng rng(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(cfg.d_enc));
  AdapterParams p;
  for (const DecoderLayerParams& dl : decoder.layers) {
    AdapterLayerParams al;
    al.ln_cross = {detail::clone(dl.ln.gain), detail::clone(dl.ln.bias)};
    al.cross_attn = {detail::clone(dl.self_attn.wq), detail::clone(dl.self_attn.wk),
                     detail::clone(dl.self_attn.wv), detail::clone(dl.self_attn.wo)};
    al.cross_mlp = {detail::clone(dl.mlp.w1), detail::clone(dl.mlp.b1),
                    detail::clone(dl.mlp.w2), detail::clone(dl.mlp.b2)};
    al.projector = Tensor(Shape{static_cast<std::size_t>(cfg.d_enc),
                                static_cast<std::size_t>(cfg.d_dec)},
                          0.0, true);
    for (std::size_t i = 0; i < al.projector.numel(); ++i) {
      al.projector.data()[i] = rng.uniform(-bound, bound);
    }
    if (equivalence_mode) {
      al.cross_mlp.w2 = Tensor(al.cross_mlp.w2.shape(), 0.0, true);
      al.cross_mlp.b2 = Tensor(al.cross_mlp.b2.shape(), 0.0, true);
    }
    p.layers.push_back(std::move(al));
  }
  return p;
}

inline ModelParams init_model(const ModelConfig& cfg, std::uint64_t seed,
                              bool with_adapters = true, bool equivalence_mode = false) {
  ModelParams p;
  p.decoder = init_decoder(cfg, seed);
  p.encoder = init_encoder(cfg, seed + 1);
  if (with_adapters) p.adapters = init_adapters(p.decoder, cfg, seed + 2, equivalence_mode);
  return p;
}

// ---- parameter iteration ----

inline std::vector<NamedParam> named_parameters(const ModelParams& p) {
  std::vector<NamedParam> out;
  auto push = [&out](const std::string& name, const Tensor& t, ParamGroup g) {
    out.push_back({name, t, g});
  };
  auto push_attn = [&](const std::string& base, const AttentionWeights& w, ParamGroup g) {
    push(base + ".wq", w.wq, g);
    push(base + ".wk", w.wk, g);
    push(base + ".wv", w.wv, g);
    push(base + ".wo", w.wo, g);
  };
  auto push_mlp = [&](const std::string& base, const MlpWeights& w, ParamGroup g) {
    push(base + ".w1", w.w1, g);
    push(base + ".b1", w.b1, g);
    push(base + ".w2", w.w2, g);
    push(base + ".b2", w.b2, g);
  };
  auto push_ln = [&](const std::string& base, const LayerNormWeights& w, ParamGroup g) {
    push(base + ".gain", w.gain, g);
    push(base + ".bias", w.bias, g);
  };

  push("dec.tok_emb", p.decoder.tok_emb, ParamGroup::decoder_theta);
  push("dec.pos_emb", p.decoder.pos_emb, ParamGroup::decoder_theta);
  for (std::size_t l = 0; l < p.decoder.layers.size(); ++l) {
    const std::string base = "dec.layer" + std::to_string(l);
    push_ln(base + ".ln", p.decoder.layers[l].ln, ParamGroup::decoder_theta);
    push_attn(base + ".self", p.decoder.layers[l].self_attn, ParamGroup::decoder_theta);
    push_mlp(base + ".mlp", p.decoder.layers[l].mlp, ParamGroup::decoder_theta);
  }
  push_ln("dec.ln_final", p.decoder.ln_final, ParamGroup::decoder_theta);
  push("dec.w_out", p.decoder.w_out, ParamGroup::decoder_theta);
  push("dec.b_out", p.decoder.b_out, ParamGroup::decoder_theta);

  push("enc.tok_emb", p.encoder.tok_emb, ParamGroup::encoder_phi);
  push("enc.pos_emb", p.encoder.pos_emb, ParamGroup::encoder_phi);
  for (std::size_t l = 0; l < p.encoder.layers.size(); ++l) {
    const std::string base = "enc.layer" + std::to_string(l);
    push_ln(base + ".ln_attn", p.encoder.layers[l].ln_attn, ParamGroup::encoder_phi);
    push_attn(base + ".attn", p.encoder.layers[l].attn, ParamGroup::encoder_phi);
    push_ln(base + ".ln_mlp", p.encoder.layers[l].ln_mlp, ParamGroup::encoder_phi);
    push_mlp(base + ".mlp", p.encoder.layers[l].mlp, ParamGroup::encoder_phi);
  }
  push_ln("enc.ln_final", p.encoder.ln_final, ParamGroup::encoder_phi);

  for (std::size_t l = 0; l < p.adapters.layers.size(); ++l) {
    const std::string base = "adp.layer" + std::to_string(l);
    push_ln(base + ".ln_cross", p.adapters.layers[l].ln_cross, ParamGroup::adapter_pi);
    push(base + ".proj", p.adapters.layers[l].projector, ParamGroup::adapter_pi);
    push_attn(base + ".cross", p.adapters.layers[l].cross_attn, ParamGroup::adapter_pi);
    push_mlp(base + ".cross_mlp", p.adapters.layers[l].cross_mlp, ParamGroup::adapter_pi);
  }
  return out;
}

/// FNV-1a over the raw parameter bytes of one group; freeze tests and the
/// training log use it to prove a group did not move.
inline std::uint64_t group_hash(const ModelParams& p, ParamGroup g) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const NamedParam& np : named_parameters(p)) {
    if (np.group != g) continue;
    const auto* bytes = reinterpret_cast<const unsigned char*>(np.tensor.data());
    for (std::size_t i = 0; i < np.tensor.numel() * sizeof(double); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  }
  return h;
}

inline void set_group_trainable(const ModelParams& p, ParamGroup g, bool trainable) {
  for (const NamedParam& np : named_parameters(p)) {
    if (np.group == g) np.tensor.set_requires_grad(trainable);
  }
}

// ---- forward pieces ----

namespace detail {

inline Tensor mlp_forward(const Tensor& x, const MlpWeights& w) {
  Tensor h = gelu(add(matmul(x, w.w1), w.b1));
  return add(matmul(h, w.w2), w.b2);
}

inline Tensor multi_head_attention(const Tensor& q_in, const Tensor& kv_in,
                                   const AttentionWeights& w, int n_heads, const Tensor& mask) {
  const Tensor q = matmul(q_in, w.wq);
  const Tensor k = matmul(kv_in, w.wk);
  const Tensor v = matmul(kv_in, w.wv);
  const std::size_t d = q.shape()[1];
  const std::size_t dk = d / static_cast<std::size_t>(n_heads);
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));
  std::vector<Tensor> heads;
  heads.reserve(static_cast<std::size_t>(n_heads));
  for (int h = 0; h < n_heads; ++h) {
    const std::size_t off = static_cast<std::size_t>(h) * dk;
    const Tensor qh = slice_cols(q, off, dk);
    const Tensor kh = slice_cols(k, off, dk);
    const Tensor vh = slice_cols(v, off, dk);
    const Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt_dk);
    heads.push_back(matmul(softmax_rows(scores, mask), vh));
  }
  return matmul(concat_cols(heads), w.wo);
}

}  // namespace detail

/// h_add: one row per additional context, the final-layer hidden state of the
/// prepended CLS position. Contexts are encoded separately, with no prompt
/// text, so row i depends only on context i.
inline Tensor encode_contexts(const std::vector<std::vector<int>>& k_add_tokens,
                              const EncoderParams& enc, const ModelConfig& cfg) {
  if (k_add_tokens.size() > static_cast<std::size_t>(cfg.max_ctx_vectors)) {
    throw std::invalid_argument("encode_contexts: " + std::to_string(k_add_tokens.size()) +
                                " contexts exceed max_ctx_vectors " +
                                std::to_string(cfg.max_ctx_vectors));
  }
  const auto d = static_cast<std::size_t>(cfg.d_enc);
  if (k_add_tokens.empty()) return Tensor(Shape{0, d}, 0.0);
  std::vector<Tensor> rows;
  rows.reserve(k_add_tokens.size());
  for (const std::vector<int>& ctx : k_add_tokens) {
    std::vector<int> ids;
    ids.reserve(ctx.size() + 1);
    ids.push_back(CharTokenizer::kCls);
    const std::size_t keep =
        std::min(ctx.size(), static_cast<std::size_t>(cfg.enc_max_len) - 1);
    ids.insert(ids.end(), ctx.begin(), ctx.begin() + keep);
    Tensor h = add(embedding(enc.tok_emb, ids), slice_rows(enc.pos_emb, 0, ids.size()));
    for (const EncoderLayerParams& el : enc.layers) {
      const Tensor normed = layer_norm(h, el.ln_attn.gain, el.ln_attn.bias);
      h = add(h, detail::multi_head_attention(normed, normed, el.attn, cfg.n_heads, Tensor()));
      h = add(h, detail::mlp_forward(layer_norm(h, el.ln_mlp.gain, el.ln_mlp.bias), el.mlp));
    }
    h = layer_norm(h, enc.ln_final.gain, enc.ln_final.bias);
    rows.push_back(slice_rows(h, 0, 1));
  }
  return concat_rows(rows);
}

/// Per-layer projection h_kv = h_add x projector(layer).
inline Tensor project_contexts(const Tensor& h_add, std::size_t layer,
                               const AdapterParams& adapters) {
  if (layer >= adapters.layers.size()) {
    throw std::invalid_argument("project_contexts: layer " + std::to_string(layer) +
                                " out of range (" + std::to_string(adapters.layers.size()) +
                                " adapter layers)");
  }
  return matmul(h_add, adapters.layers[layer].projector);
}

/// Multi-head attention from the token stream onto the projected context
/// vectors. No causal mask and no positions on h_kv: the vectors form a set.
inline Tensor cross_attention(const Tensor& h_q, const Tensor& h_kv, const AttentionWeights& w,
                              const ModelConfig& cfg) {
  return detail::multi_head_attention(h_q, h_kv, w, cfg.n_heads, Tensor());
}

/// One decoder layer. With context vectors:
///   u = h_in + CrossMLP(CrossAttn(norm(h_in), h_kv))
///   out = u + MLP(SelfAttn(norm(u)))   (causal self-attention)
/// Without them the cross block is skipped exactly: u = h_in.
inline Tensor decoder_layer(const Tensor& h_in, const Tensor& h_kv,
                            const DecoderLayerParams& dl, const AdapterLayerParams* al,
                            const ModelConfig& cfg, const Tensor& mask) {
  Tensor u = h_in;
  if (h_kv.defined() && h_kv.shape()[0] > 0) {
    if (al == nullptr) {
      throw std::invalid_argument("decoder_layer: context vectors given but no adapter");
    }
    const Tensor normed = layer_norm(h_in, al->ln_cross.gain, al->ln_cross.bias);
    const Tensor h_c = cross_attention(normed, h_kv, al->cross_attn, cfg);
    u = add(h_in, detail::mlp_forward(h_c, al->cross_mlp));
  }
  const Tensor normed = layer_norm(u, dl.ln.gain, dl.ln.bias);
  const Tensor h_s = detail::multi_head_attention(normed, normed, dl.self_attn, cfg.n_heads, mask);
  return add(u, detail::mlp_forward(h_s, dl.mlp));
}

/// Decoder pass over an already-encoded h_add ([M, d_enc], M may be 0).
inline Tensor forward_with_vectors(const std::vector<int>& tokens, const Tensor& h_add,
                                   const ModelParams& params, const ModelConfig& cfg) {
  if (tokens.empty()) throw std::invalid_argument("forward: empty token sequence");
  if (tokens.size() > static_cast<std::size_t>(cfg.max_seq_len)) {
    throw std::invalid_argument("forward: sequence of " + std::to_string(tokens.size()) +
                                " tokens exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
  }
  const std::size_t t_len = tokens.size();
  const bool use_ctx = h_add.defined() && h_add.shape()[0] > 0;
  if (use_ctx && !params.has_adapters()) {
    throw std::invalid_argument("forward: context vectors given but model has no adapters");
  }
  const Tensor mask = causal_mask(t_len);
  Tensor h = add(embedding(params.decoder.tok_emb, tokens),
                 slice_rows(params.decoder.pos_emb, 0, t_len));
  for (std::size_t l = 0; l < params.decoder.layers.size(); ++l) {
    Tensor h_kv;
    const AdapterLayerParams* al = nullptr;
    if (use_ctx) {
      h_kv = project_contexts(h_add, l, params.adapters);
      al = &params.adapters.layers[l];
    }
    h = decoder_layer(h, h_kv, params.decoder.layers[l], al, cfg, mask);
  }
  h = layer_norm(h, params.decoder.ln_final.gain, params.decoder.ln_final.bias);
  return add(matmul(h, params.decoder.w_out), params.decoder.b_out);
}

/// Full pass: encode k_add, then run the decoder. logits[t] models the
/// distribution of tokens[t+1].
inline Tensor forward(const std::vector<int>& tokens,
                      const std::vector<std::vector<int>>& k_add_tokens,
                      const ModelParams& params, const ModelConfig& cfg) {
  Tensor h_add;
  if (!k_add_tokens.empty()) h_add = encode_contexts(k_add_tokens, params.encoder, cfg);
  return forward_with_vectors(tokens, h_add, params, cfg);
}

/// Greedy decoding; ties break toward the lowest token id. Stops on the stop
/// token, after max_new tokens, or at the model's sequence limit.
inline std::vector<int> generate_greedy(const std::vector<int>& prefix,
                                        const std::vector<std::vector<int>>& k_add_tokens,
                                        const ModelParams& params, const ModelConfig& cfg,
                                        int max_new, int stop_token) {
  if (prefix.empty()) throw std::invalid_argument("generate: empty prefix");
  if (prefix.size() >= static_cast<std::size_t>(cfg.max_seq_len)) {
    throw std::invalid_argument("generate: prefix of " + std::to_string(prefix.size()) +
                                " tokens leaves no room under max_seq_len " +
                                std::to_string(cfg.max_seq_len));
  }
  Tensor h_add;
  if (!k_add_tokens.empty()) h_add = encode_contexts(k_add_tokens, params.encoder, cfg);
  std::vector<int> seq = prefix;
  std::vector<int> out;
  for (int i = 0; i < max_new; ++i) {
    const Tensor logits = forward_with_vectors(seq, h_add, params, cfg);
    const std::size_t v = logits.shape()[1];
    const double* last = logits.data() + (seq.size() - 1) * v;
    int best = 0;
    for (std::size_t j = 1; j < v; ++j) {
      if (last[j] > last[best]) best = static_cast<int>(j);
    }
    if (best == stop_token) break;
    out.push_back(best);
    seq.push_back(best);
    if (seq.size() >= static_cast<std::size_t>(cfg.max_seq_len)) break;
  }
  return out;
}

}  // namespace vecrag
