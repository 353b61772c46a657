#pragma once

#include <optional>
#include <string>
#include <vector>

#include "gazedetr/params.hpp"
#include "gazedetr/tensor.hpp"

namespace gazedetr {

// Shared per-forward state: training toggles dropout, rng feeds the masks.
struct ForwardCtx {
  bool training = false;
  Rng* rng = nullptr;
  double dropout_rate = 0.1;
};

inline Tensor apply_dropout(const Tensor& x, const ForwardCtx& ctx) {
  return dropout(x, ctx.dropout_rate, ctx.rng, ctx.training);
}

// Additive key mask: valid keys contribute, padded keys get -1e30 so their
// softmax weight underflows to exactly zero.
constexpr double kMaskedLogit = -1e30;

using KeyMask = std::vector<char>;  // nonzero = valid; empty mask = all valid

struct Linear {
  Tensor w;  // [in x out]
  Tensor b;  // [out], undefined when bias-free

  Linear() = default;
  Linear(ParamRegistry& reg, const std::string& prefix, int in, int out, Rng& rng,
         bool bias = true) {
    w = reg.xavier(prefix + ".w", in, out, rng);
    if (bias) b = reg.zeros(prefix + ".b", {out});
  }

  Tensor forward(const Tensor& x) const {
    Tensor y = matmul(x, w);
    return b.defined() ? add(y, b) : y;
  }
};

struct LayerNormParams {
  Tensor gamma, beta;

  LayerNormParams() = default;
  LayerNormParams(ParamRegistry& reg, const std::string& prefix, int d) {
    gamma = reg.ones(prefix + ".g", {d});
    beta = reg.zeros(prefix + ".b", {d});
  }

  Tensor forward(const Tensor& x) const { return layer_norm(x, gamma, beta); }
};

// 2D sinusoidal positional encoding (DETR lineage). Raw integer grid
// coordinates keep a cell's encoding independent of the grid extents, which
// the padded-batch equivalence relies on. First half of each row encodes y,
// second half x, sin/cos interleaved per frequency.
inline Tensor sine_positional_encoding(int H, int W, int d) {
  check(H > 0 && W > 0, "positional encoding needs positive grid extents");
  check(d % 4 == 0, "positional encoding width must be divisible by 4, got " + std::to_string(d));
  const int nfreq = d / 4;
  std::vector<double> freq(nfreq);
  for (int i = 0; i < nfreq; ++i) freq[i] = std::pow(10000.0, -4.0 * i / d);
  std::vector<double> out(static_cast<std::size_t>(H) * W * d);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      double* row = out.data() + (static_cast<std::size_t>(y) * W + x) * d;
      for (int i = 0; i < nfreq; ++i) {
        row[2 * i] = std::sin(y * freq[i]);
        row[2 * i + 1] = std::cos(y * freq[i]);
        row[d / 2 + 2 * i] = std::sin(x * freq[i]);
        row[d / 2 + 2 * i + 1] = std::cos(x * freq[i]);
      }
    }
  }
  return Tensor::from_values({H * W, d}, std::move(out));
}

struct AttentionResult {
  Tensor output;  // [n_q x d]
  Tensor attn;    // [n_heads, n_q, n_k], pre-dropout softmax weights
};

// Scaled dot-product attention over already-projected queries/keys. Queries
// and keys are laid out as n_segments side-by-side width-d blocks; each head
// takes its d/n_heads slice from every segment, so segment structure is
// preserved headwise. `values` is already projected to model width d.
inline AttentionResult attention_core(const Tensor& q, const Tensor& k, const Tensor& v,
                                      const Linear& out_proj, int n_heads, int n_segments,
                                      const KeyMask& key_mask, const ForwardCtx& ctx) {
  const int n_q = q.dim(0), n_k = k.dim(0);
  const int total = q.dim(1);
  check(k.dim(1) == total, "attention queries and keys must share width, got " +
                               shape_str(q.shape()) + " vs " + shape_str(k.shape()));
  check(total % n_segments == 0, "attention width must split into segments");
  const int d = total / n_segments;
  check(d % n_heads == 0, "attention width " + std::to_string(d) + " not divisible by " +
                              std::to_string(n_heads) + " heads");
  const int hd = d / n_heads;
  const int dv = v.dim(1);
  check(dv % n_heads == 0, "value width not divisible by head count");
  const int hdv = dv / n_heads;
  check(key_mask.empty() || static_cast<int>(key_mask.size()) == n_k,
        "key mask length must match key count");

  Tensor mask_row;
  if (!key_mask.empty()) {
    std::vector<double> m(n_k, 0.0);
    for (int j = 0; j < n_k; ++j)
      if (!key_mask[j]) m[j] = kMaskedLogit;
    mask_row = Tensor::from_values({n_k}, std::move(m));
  }

  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(n_segments) * hd);
  std::vector<Tensor> head_ctx;
  std::vector<double> attn_maps(static_cast<std::size_t>(n_heads) * n_q * n_k);
  for (int h = 0; h < n_heads; ++h) {
    std::vector<Tensor> q_slices, k_slices;
    for (int s = 0; s < n_segments; ++s) {
      q_slices.push_back(slice_cols(q, s * d + h * hd, hd));
      k_slices.push_back(slice_cols(k, s * d + h * hd, hd));
    }
    Tensor qh = n_segments == 1 ? q_slices[0] : concat_cols(q_slices);
    Tensor kh = n_segments == 1 ? k_slices[0] : concat_cols(k_slices);
    Tensor logits = scale(matmul(qh, transpose(kh)), inv_scale);
    if (mask_row.defined()) logits = add(logits, mask_row);
    Tensor attn = softmax_lastdim(logits);
    std::copy(attn.values().begin(), attn.values().end(),
              attn_maps.begin() + static_cast<std::size_t>(h) * n_q * n_k);
    Tensor attn_d = apply_dropout(attn, ctx);
    head_ctx.push_back(matmul(attn_d, slice_cols(v, h * hdv, hdv)));
  }
  Tensor ctx_cat = n_heads == 1 ? head_ctx[0] : concat_cols(head_ctx);
  AttentionResult res;
  res.output = out_proj.forward(ctx_cat);
  res.attn = Tensor::from_values({n_heads, n_q, n_k}, std::move(attn_maps));
  return res;
}

// Plain multi-head attention with its own Q/K/V input projections.
struct MultiHeadAttention {
  Linear q_proj, k_proj, v_proj, out_proj;
  int n_heads = 1;

  MultiHeadAttention() = default;
  MultiHeadAttention(ParamRegistry& reg, const std::string& prefix, int d, int heads, Rng& rng)
      : q_proj(reg, prefix + ".q", d, d, rng),
        k_proj(reg, prefix + ".k", d, d, rng),
        v_proj(reg, prefix + ".v", d, d, rng),
        out_proj(reg, prefix + ".o", d, d, rng),
        n_heads(heads) {}

  AttentionResult forward(const Tensor& queries, const Tensor& keys, const Tensor& values,
                          const KeyMask& key_mask, const ForwardCtx& ctx) const {
    check(queries.dim(1) == keys.dim(1), "mha queries and keys must share width, got " +
                                             shape_str(queries.shape()) + " vs " +
                                             shape_str(keys.shape()));
    return attention_core(q_proj.forward(queries), k_proj.forward(keys),
                          v_proj.forward(values), out_proj, n_heads, 1, key_mask, ctx);
  }
};

struct FeedForward {
  Linear fc1, fc2;

  FeedForward() = default;
  FeedForward(ParamRegistry& reg, const std::string& prefix, int d, int hidden, Rng& rng)
      : fc1(reg, prefix + ".fc1", d, hidden, rng), fc2(reg, prefix + ".fc2", hidden, d, rng) {}

  Tensor forward(const Tensor& x, const ForwardCtx& ctx) const {
    return fc2.forward(apply_dropout(relu(fc1.forward(x)), ctx));
  }
};

// Post-norm transformer encoder layer; positional encoding enters Q and K
// only, never the value path.
struct EncoderLayer {
  MultiHeadAttention self_attn;
  FeedForward ffn;
  LayerNormParams ln1, ln2;

  EncoderLayer() = default;
  EncoderLayer(ParamRegistry& reg, const std::string& prefix, int d, int heads, int ffn_dim,
               Rng& rng)
      : self_attn(reg, prefix + ".attn", d, heads, rng),
        ffn(reg, prefix + ".ffn", d, ffn_dim, rng),
        ln1(reg, prefix + ".ln1", d),
        ln2(reg, prefix + ".ln2", d) {}

  Tensor forward(const Tensor& x, const Tensor& pos, const KeyMask& key_mask,
                 const ForwardCtx& ctx) const {
    check(x.shape() == pos.shape(), "encoder layer input and positional encoding disagree: " +
                                        shape_str(x.shape()) + " vs " + shape_str(pos.shape()));
    Tensor qk = add(x, pos);
    Tensor a = self_attn.forward(qk, qk, x, key_mask, ctx).output;
    Tensor x1 = ln1.forward(add(x, apply_dropout(a, ctx)));
    Tensor f = ffn.forward(x1, ctx);
    return ln2.forward(add(x1, apply_dropout(f, ctx)));
  }
};

// DETR-style decoder layer for the head predictor: learned spatial queries
// added to Q/K in self-attention and to Q in cross-attention.
struct HeadDecoderLayer {
  MultiHeadAttention self_attn, cross_attn;
  FeedForward ffn;
  LayerNormParams ln1, ln2, ln3;

  HeadDecoderLayer() = default;
  HeadDecoderLayer(ParamRegistry& reg, const std::string& prefix, int d, int heads, int ffn_dim,
                   Rng& rng)
      : self_attn(reg, prefix + ".self", d, heads, rng),
        cross_attn(reg, prefix + ".cross", d, heads, rng),
        ffn(reg, prefix + ".ffn", d, ffn_dim, rng),
        ln1(reg, prefix + ".ln1", d),
        ln2(reg, prefix + ".ln2", d),
        ln3(reg, prefix + ".ln3", d) {}

  struct Result {
    Tensor embeddings;  // [N_q x d]
    Tensor cross_attn_maps;
  };

  Result forward(const Tensor& E_prev, const Tensor& p_q, const Tensor& memory, const Tensor& p_k,
                 const KeyMask& key_mask, const ForwardCtx& ctx) const {
    check(E_prev.shape() == p_q.shape(), "decoder embeddings and spatial queries disagree: " +
                                             shape_str(E_prev.shape()) + " vs " +
                                             shape_str(p_q.shape()));
    Tensor qk = add(E_prev, p_q);
    Tensor a = self_attn.forward(qk, qk, E_prev, {}, ctx).output;
    Tensor x1 = ln1.forward(add(E_prev, apply_dropout(a, ctx)));
    AttentionResult cross =
        cross_attn.forward(add(x1, p_q), add(memory, p_k), memory, key_mask, ctx);
    Tensor x2 = ln2.forward(add(x1, apply_dropout(cross.output, ctx)));
    Tensor f = ffn.forward(x2, ctx);
    return {ln3.forward(add(x2, apply_dropout(f, ctx))), cross.attn};
  }
};

// Gaze decoder self-attention: keys and queries mix the previous embeddings
// with the head predictor's spatial query through separate projections,
// instead of adding a randomly initialized learned query.
struct GazeSelfAttention {
  Linear k_e, k_p, q_e, q_p;  // projection matrices, bias-free
  Linear v_proj, out_proj;
  int n_heads = 1;

  GazeSelfAttention() = default;
  GazeSelfAttention(ParamRegistry& reg, const std::string& prefix, int d, int heads, Rng& rng)
      : k_e(reg, prefix + ".ke", d, d, rng, false),
        k_p(reg, prefix + ".kp", d, d, rng, false),
        q_e(reg, prefix + ".qe", d, d, rng, false),
        q_p(reg, prefix + ".qp", d, d, rng, false),
        v_proj(reg, prefix + ".v", d, d, rng),
        out_proj(reg, prefix + ".o", d, d, rng),
        n_heads(heads) {}

  AttentionResult forward(const Tensor& E_prev, const Tensor& p_q, const ForwardCtx& ctx) const {
    check(E_prev.shape() == p_q.shape(), "gaze self-attention needs matching [N_q x d] inputs");
    Tensor k = add(k_e.forward(E_prev), k_p.forward(p_q));
    Tensor q = add(q_e.forward(E_prev), q_p.forward(p_q));
    return attention_core(q, k, v_proj.forward(E_prev), out_proj, n_heads, 1, {}, ctx);
  }
};

// Gaze decoder cross-attention. With a fused memory M = m1 || m2 (width 2d),
// keys concatenate the two memory halves (shared projection) with the
// positional encoding, and queries concatenate the self-attention output
// twice with the previous embeddings, so the attention logits decompose into
// the three terms  c_q'm1 + c_q'm2 + E'p_k  per head. Values project M back
// to width d. Without a fused memory (shared-encoder variants) the same
// construction runs on the single width-d memory.
struct GazeCrossAttention {
  Linear k_m, k_p, q_c, q_e;  // projection matrices, bias-free
  Linear v_proj, out_proj;
  int n_heads = 1;
  int d = 0;
  bool fused_memory = true;

  GazeCrossAttention() = default;
  GazeCrossAttention(ParamRegistry& reg, const std::string& prefix, int d_, int heads, bool fused,
                     Rng& rng)
      : k_m(reg, prefix + ".km", d_, d_, rng, false),
        k_p(reg, prefix + ".kp", d_, d_, rng, false),
        q_c(reg, prefix + ".qc", d_, d_, rng, false),
        q_e(reg, prefix + ".qe", d_, d_, rng, false),
        v_proj(reg, prefix + ".v", fused ? 2 * d_ : d_, d_, rng),
        out_proj(reg, prefix + ".o", d_, d_, rng),
        n_heads(heads),
        d(d_),
        fused_memory(fused) {}

  AttentionResult forward(const Tensor& c_q_in, const Tensor& E_prev, const Tensor& p_q,
                          const Tensor& memory, const Tensor& p_k, bool first_layer,
                          const KeyMask& key_mask, const ForwardCtx& ctx) const {
    const int want = fused_memory ? 2 * d : d;
    check(memory.ndim() == 2 && memory.dim(1) == want,
          "gaze cross-attention memory must have width " + std::to_string(want) + ", got " +
              shape_str(memory.shape()));
    Tensor c_q = first_layer ? add(c_q_in, p_q) : c_q_in;
    Tensor q, k;
    if (fused_memory) {
      Tensor m1 = slice_cols(memory, 0, d);
      Tensor m2 = slice_cols(memory, d, d);
      k = concat_cols({k_m.forward(m1), k_m.forward(m2), k_p.forward(p_k)});
      Tensor qc = q_c.forward(c_q);
      q = concat_cols({qc, qc, q_e.forward(E_prev)});
    } else {
      k = concat_cols({k_m.forward(memory), k_p.forward(p_k)});
      q = concat_cols({q_c.forward(c_q), q_e.forward(E_prev)});
    }
    const int n_segments = fused_memory ? 3 : 2;
    return attention_core(q, k, v_proj.forward(memory), out_proj, n_heads, n_segments, key_mask,
                          ctx);
  }
};

}  // namespace gazedetr
