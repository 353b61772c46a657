#pragma once

#include <cstring>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "gazedetr/attention.hpp"
#include "gazedetr/params.hpp"
#include "gazedetr/types.hpp"

namespace gazedetr {

enum class Variant { A, B, C, D };

inline const char* to_string(Variant v) {
  switch (v) {
    case Variant::A: return "A";
    case Variant::B: return "B";
    case Variant::C: return "C";
    case Variant::D: return "D";
  }
  return "?";
}

inline Variant variant_from_string(const std::string& s) {
  if (s == "A") return Variant::A;
  if (s == "B") return Variant::B;
  if (s == "C") return Variant::C;
  if (s == "D") return Variant::D;
  fail("unknown model variant: " + s);
}

struct ModelConfig {
  int d = 32;
  int n_heads = 4;
  int n_queries = 16;
  int n_enc_layers = 2;
  int n_dec_layers = 2;
  int ffn_dim = 0;  // 0 -> 4*d
  Variant variant = Variant::D;
  bool gaze_location_output = true;
  bool heatmap_output = false;
  int heatmap_grid = 16;
  int backbone_channels = 64;
  double dropout = 0.1;

  // Table-3 gating: GSFE exists for C/D; A/D reuse the head predictor's
  // spatial query, B/C learn a fresh one.
  bool has_gsfe() const { return variant == Variant::C || variant == Variant::D; }
  bool shares_query() const { return variant == Variant::A || variant == Variant::D; }
  int ffn() const { return ffn_dim > 0 ? ffn_dim : 4 * d; }

  void validate() const {
    check(d > 0 && d % 4 == 0, "model width must be positive and divisible by 4");
    check(n_heads > 0 && d % n_heads == 0, "model width must split across heads");
    check(n_queries > 0 && n_enc_layers > 0 && n_dec_layers > 0, "layer/query counts must be positive");
    check(heatmap_grid > 0, "heatmap grid must be positive");
    check(backbone_channels > 0, "backbone channels must be positive");
    check(gaze_location_output || heatmap_output, "model must produce a gaze output");
  }
};

// ---------------------------------------------------------------------------
// Backbone

// Structural minimum: the smallest input whose stride-8 feature grid still
// has a cell. Dataset-level validation enforces the larger 32-px floor.
constexpr int kBackboneMinInput = 8;
constexpr int kBackboneStride = 8;

inline int conv_out_extent(int v, int k, int s, int p) { return (v + 2 * p - k) / s + 1; }

// Four-stage CNN trained from scratch: 3 -> 16 -> 32 -> 64 -> C with three
// stride-2 stages (total stride 8). Features beyond a sample's valid region
// are re-zeroed after every stage so a zero-padded batch reproduces the
// single-sample computation exactly.
struct Backbone {
  Tensor w1, b1, w2, b2, w3, b3, w4, b4;

  Backbone() = default;
  Backbone(ParamRegistry& reg, const std::string& prefix, int out_channels, Rng& rng) {
    w1 = reg.xavier_conv(prefix + ".conv1.w", 16, 3, 3, 3, rng);
    b1 = reg.zeros(prefix + ".conv1.b", {16});
    w2 = reg.xavier_conv(prefix + ".conv2.w", 32, 16, 3, 3, rng);
    b2 = reg.zeros(prefix + ".conv2.b", {32});
    w3 = reg.xavier_conv(prefix + ".conv3.w", 64, 32, 3, 3, rng);
    b3 = reg.zeros(prefix + ".conv3.b", {64});
    w4 = reg.xavier_conv(prefix + ".conv4.w", out_channels, 64, 3, 3, rng);
    b4 = reg.zeros(prefix + ".conv4.b", {out_channels});
  }

  struct Result {
    Tensor f1;  // [C x h x w]
    int valid_h, valid_w;
  };

  static Tensor mask_invalid(const Tensor& x, int vh, int vw) {
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (vh >= h && vw >= w) return x;
    std::vector<double> m(x.size(), 0.0);
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < vh; ++y)
        for (int xx = 0; xx < vw; ++xx)
          m[(static_cast<std::size_t>(ch) * h + y) * w + xx] = 1.0;
    return mul(x, Tensor::from_values(x.shape(), std::move(m)));
  }

  Result forward(const Tensor& image, int valid_h, int valid_w) const {
    check(image.ndim() == 3 && image.dim(0) == 3,
          "backbone input must be [3xHxW], got " + shape_str(image.shape()));
    check(valid_h >= kBackboneMinInput && valid_w >= kBackboneMinInput,
          "backbone input below minimum extent " + std::to_string(kBackboneMinInput) + ": " +
              std::to_string(valid_h) + "x" + std::to_string(valid_w));
    int vh = valid_h, vw = valid_w;
    Tensor x = image;
    const Tensor* ws[4] = {&w1, &w2, &w3, &w4};
    const Tensor* bs[4] = {&b1, &b2, &b3, &b4};
    const int strides[4] = {2, 2, 2, 1};
    for (int i = 0; i < 4; ++i) {
      x = relu(conv2d(x, *ws[i], *bs[i], strides[i], 1));
      vh = conv_out_extent(vh, 3, strides[i], 1);
      vw = conv_out_extent(vw, 3, strides[i], 1);
      x = mask_invalid(x, vh, vw);
    }
    return {x, vh, vw};
  }
};

// [C x h x w] -> [(h*w) x d] token matrix via a 1x1 convolution.
struct InputProjection {
  Tensor w;  // [d x C x 1 x 1]
  Tensor b;  // [d]

  InputProjection() = default;
  InputProjection(ParamRegistry& reg, const std::string& prefix, int in_channels, int d, Rng& rng) {
    w = reg.xavier_conv(prefix + ".w", d, in_channels, 1, 1, rng);
    b = reg.zeros(prefix + ".b", {d});
  }

  Tensor forward(const Tensor& f) const {
    Tensor z = conv2d(f, w, b, 1, 0);  // [d x h x w]
    const int d = z.dim(0), h = z.dim(1), wd = z.dim(2);
    // [d x h x w] row-major -> transpose to [(h*w) x d]
    return transpose(reshape(z, {d, h * wd}));
  }
};

struct Mlp {
  std::vector<Linear> layers;

  Mlp() = default;
  Mlp(ParamRegistry& reg, const std::string& prefix, const std::vector<int>& dims, Rng& rng) {
    for (std::size_t i = 0; i + 1 < dims.size(); ++i)
      layers.emplace_back(reg, prefix + ".l" + std::to_string(i), dims[i], dims[i + 1], rng);
  }

  Tensor forward(const Tensor& x) const {
    Tensor h = x;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      h = layers[i].forward(h);
      if (i + 1 < layers.size()) h = relu(h);
    }
    return h;
  }
};

// One gaze decoder layer: reformulated self-attention, reformulated
// cross-attention into the (fused) memory, then a feed-forward block, all
// post-norm with residuals.
struct GazeDecoderLayer {
  GazeSelfAttention self_attn;
  GazeCrossAttention cross_attn;
  FeedForward ffn;
  LayerNormParams ln1, ln2, ln3;

  GazeDecoderLayer() = default;
  GazeDecoderLayer(ParamRegistry& reg, const std::string& prefix, int d, int heads, int ffn_dim,
                   bool fused_memory, Rng& rng)
      : self_attn(reg, prefix + ".self", d, heads, rng),
        cross_attn(reg, prefix + ".cross", d, heads, fused_memory, rng),
        ffn(reg, prefix + ".ffn", d, ffn_dim, rng),
        ln1(reg, prefix + ".ln1", d),
        ln2(reg, prefix + ".ln2", d),
        ln3(reg, prefix + ".ln3", d) {}

  struct Result {
    Tensor embeddings;
    Tensor cross_attn_maps;  // [heads, N_q, n_k]
  };

  Result forward(const Tensor& E_prev, const Tensor& p_q, const Tensor& memory, const Tensor& p_k,
                 bool first_layer, const KeyMask& mask, const ForwardCtx& ctx) const {
    Tensor sa = self_attn.forward(E_prev, p_q, ctx).output;
    Tensor c_q = ln1.forward(add(E_prev, apply_dropout(sa, ctx)));
    AttentionResult ca = cross_attn.forward(c_q, E_prev, p_q, memory, p_k, first_layer, mask, ctx);
    Tensor x2 = ln2.forward(add(c_q, apply_dropout(ca.output, ctx)));
    Tensor out = ln3.forward(add(x2, apply_dropout(ffn.forward(x2, ctx), ctx)));
    return {out, ca.attn};
  }
};

// ---------------------------------------------------------------------------
// Full model

class GazeDETR {
 public:
  GazeDETR(const ModelConfig& cfg, std::uint64_t init_seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(Rng::mix(init_seed, 0x6d6f64656cULL));
    backbone_ = Backbone(reg_, "backbone", cfg_.backbone_channels, rng);
    input_proj_ = InputProjection(reg_, "head_predictor.input_proj", cfg_.backbone_channels,
                                  cfg_.d, rng);
    for (int i = 0; i < cfg_.n_enc_layers; ++i)
      encoder_.emplace_back(reg_, "head_predictor.encoder." + std::to_string(i), cfg_.d,
                            cfg_.n_heads, cfg_.ffn(), rng);
    for (int i = 0; i < cfg_.n_dec_layers; ++i)
      decoder_.emplace_back(reg_, "head_predictor.decoder." + std::to_string(i), cfg_.d,
                            cfg_.n_heads, cfg_.ffn(), rng);
    p_q_ = reg_.normal("head_predictor.p_q", {cfg_.n_queries, cfg_.d}, rng);
    box_head_ = Mlp(reg_, "head_predictor.box_head", {cfg_.d, cfg_.d, cfg_.d, 4}, rng);
    class_head_ = Linear(reg_, "head_predictor.class_head", cfg_.d, 1, rng);

    if (cfg_.has_gsfe()) {
      gsfe_input_proj_ = InputProjection(reg_, "gsfe.input_proj", cfg_.backbone_channels, cfg_.d,
                                         rng);
      for (int i = 0; i < cfg_.n_enc_layers; ++i)
        gsfe_encoder_.emplace_back(reg_, "gsfe.encoder." + std::to_string(i), cfg_.d, cfg_.n_heads,
                                   cfg_.ffn(), rng);
      gsfe_proj_z1_ = Linear(reg_, "gsfe.proj_z1", cfg_.d, cfg_.d, rng, /*bias=*/false);
      gsfe_proj_e1_ = Linear(reg_, "gsfe.proj_e1", cfg_.d, cfg_.d, rng, /*bias=*/false);
    }

    if (!cfg_.shares_query())
      gaze_p_q_ = reg_.normal("gaze_decoder.p_q", {cfg_.n_queries, cfg_.d}, rng);
    for (int i = 0; i < cfg_.n_dec_layers; ++i)
      gaze_decoder_.emplace_back(reg_, "gaze_decoder.layer." + std::to_string(i), cfg_.d,
                                 cfg_.n_heads, cfg_.ffn(), cfg_.has_gsfe(), rng);
    if (cfg_.gaze_location_output)
      gaze_head_ = Mlp(reg_, "gaze_decoder.gaze_head", {cfg_.d, cfg_.d, cfg_.d, 2}, rng);
    inout_head_ = Linear(reg_, "gaze_decoder.inout_head", cfg_.d, 1, rng);
    if (cfg_.heatmap_output)
      heatmap_head_ = Mlp(reg_, "gaze_decoder.heatmap_head",
                          {cfg_.d, 4 * cfg_.d, cfg_.heatmap_grid * cfg_.heatmap_grid}, rng);
  }

  const ModelConfig& config() const { return cfg_; }
  ParamRegistry& params() { return reg_; }
  const ParamRegistry& params() const { return reg_; }
  const Backbone& backbone() const { return backbone_; }
  Tensor spatial_query() const { return p_q_; }
  Tensor gaze_query() const { return cfg_.shares_query() ? p_q_ : gaze_p_q_; }

  struct Forward {
    PredictionSet preds;
    std::vector<DetectionOutput> detections;
    Tensor head_cross_attn;                    // last decoder layer, [heads, N_q, h*w]
    std::vector<Tensor> gaze_cross_attn;       // per layer, [heads, N_q, h*w]
    int feat_h = 0, feat_w = 0;
  };

  struct GsfeResult {
    Tensor M;   // [(h*w) x 2d] = m1 || m2
    Tensor m1;  // proj(z1) + e2
    Tensor m2;  // proj(e1) + z2
    Tensor z2, e2;
  };

  // Global scene feature encoder: a second 1x1 projection and encoder stack
  // over f1, cross-fused with the head predictor's features.
  GsfeResult gsfe_forward(const Tensor& f1, const Tensor& z1, const Tensor& e1, const Tensor& p_k,
                          const KeyMask& mask, const ForwardCtx& ctx) const {
    check(cfg_.has_gsfe(), "gsfe_forward: variant " + std::string(to_string(cfg_.variant)) +
                               " has no global scene feature encoder");
    GsfeResult r;
    r.z2 = gsfe_input_proj_.forward(f1);
    r.e2 = r.z2;
    for (const auto& layer : gsfe_encoder_) r.e2 = layer.forward(r.e2, p_k, mask, ctx);
    r.m1 = add(gsfe_proj_z1_.forward(z1), r.e2);
    r.m2 = add(gsfe_proj_e1_.forward(e1), r.z2);
    r.M = concat_cols({r.m1, r.m2});
    return r;
  }

  struct HeadPredictorResult {
    Tensor boxes;        // [N_q x 4], sigmoid-bounded
    Tensor head_logits;  // [N_q]
    Tensor f1, z1, e1;   // backbone features and encoder memory
    Tensor p_k;
    Tensor cross_attn;   // last decoder layer, [heads, N_q, h*w]
    KeyMask mask;
    int feat_h = 0, feat_w = 0;
  };

  // Backbone, 1x1 projection, encoder stack, and the DETR-style decoder with
  // the learned spatial queries; box and class FFNs on the final embeddings.
  HeadPredictorResult head_predictor_forward(const Tensor& image, const ForwardCtx& ctx,
                                             std::array<int, 2> valid = {0, 0}) const {
    const int vh_img = valid[0] > 0 ? valid[0] : image.dim(1);
    const int vw_img = valid[1] > 0 ? valid[1] : image.dim(2);
    auto bb = backbone_.forward(image, vh_img, vw_img);
    HeadPredictorResult r;
    r.f1 = bb.f1;
    r.feat_h = bb.f1.dim(1);
    r.feat_w = bb.f1.dim(2);
    if (bb.valid_h < r.feat_h || bb.valid_w < r.feat_w) {
      r.mask.assign(static_cast<std::size_t>(r.feat_h) * r.feat_w, 0);
      for (int y = 0; y < bb.valid_h; ++y)
        for (int x = 0; x < bb.valid_w; ++x)
          r.mask[static_cast<std::size_t>(y) * r.feat_w + x] = 1;
    }
    r.p_k = sine_positional_encoding(r.feat_h, r.feat_w, cfg_.d);
    r.z1 = input_proj_.forward(bb.f1);
    r.e1 = r.z1;
    for (const auto& layer : encoder_) r.e1 = layer.forward(r.e1, r.p_k, r.mask, ctx);

    Tensor E = Tensor::zeros({cfg_.n_queries, cfg_.d});
    for (const auto& layer : decoder_) {
      auto dr = layer.forward(E, p_q_, r.e1, r.p_k, r.mask, ctx);
      E = dr.embeddings;
      r.cross_attn = dr.cross_attn_maps;
    }
    r.boxes = sigmoid(box_head_.forward(E));
    r.head_logits = reshape(class_head_.forward(E), {cfg_.n_queries});
    return r;
  }

  struct GazeDecoderResult {
    Tensor gaze;          // [N_q x 2]
    Tensor inout_logits;  // [N_q]
    Tensor heatmaps;      // [N_q x grid^2] when the model has a heatmap head
    std::vector<Tensor> cross_attn;  // per layer, [heads, N_q, h*w]
  };

  // Stacked reformulated decoder layers over the given memory (M for GSFE
  // variants, e1 otherwise), then the gaze / in-out / heatmap heads.
  GazeDecoderResult gaze_decoder_forward(const Tensor& memory, const Tensor& p_k,
                                         const KeyMask& mask, const ForwardCtx& ctx) const {
    const int want = cfg_.has_gsfe() ? 2 * cfg_.d : cfg_.d;
    check(memory.dim(1) == want,
          "gaze decoder memory width " + std::to_string(memory.dim(1)) + " does not match variant " +
              to_string(cfg_.variant) + " (expects " + std::to_string(want) + ")");
    const Tensor p_q_gaze = gaze_query();
    Tensor Eg = Tensor::zeros({cfg_.n_queries, cfg_.d});
    GazeDecoderResult r;
    for (std::size_t i = 0; i < gaze_decoder_.size(); ++i) {
      auto lr = gaze_decoder_[i].forward(Eg, p_q_gaze, memory, p_k, i == 0, mask, ctx);
      Eg = lr.embeddings;
      r.cross_attn.push_back(lr.cross_attn_maps);
    }
    r.inout_logits = reshape(inout_head_.forward(Eg), {cfg_.n_queries});
    if (cfg_.heatmap_output) r.heatmaps = sigmoid(heatmap_head_.forward(Eg));
    if (cfg_.gaze_location_output) {
      r.gaze = sigmoid(gaze_head_.forward(Eg));
    } else {
      // heatmap-only variants report the argmax cell center
      std::vector<double> g(static_cast<std::size_t>(cfg_.n_queries) * 2);
      const int grid = cfg_.heatmap_grid;
      for (int q = 0; q < cfg_.n_queries; ++q) {
        int best = 0;
        const double* row =
            r.heatmaps.values().data() + static_cast<std::size_t>(q) * grid * grid;
        for (int c = 1; c < grid * grid; ++c)
          if (row[c] > row[best]) best = c;
        g[2 * q] = (best % grid + 0.5) / grid;
        g[2 * q + 1] = (best / grid + 0.5) / grid;
      }
      r.gaze = Tensor::from_values({cfg_.n_queries, 2}, std::move(g));
    }
    return r;
  }

  // Valid extents cover the un-padded region of `image`; defaults to the
  // full image. Deterministic given parameters, image, and ctx state.
  Forward forward(const Tensor& image, const ForwardCtx& ctx_in,
                  std::array<int, 2> valid = {0, 0}) const {
    ForwardCtx ctx = ctx_in;
    ctx.dropout_rate = cfg_.dropout;
    HeadPredictorResult hp = head_predictor_forward(image, ctx, valid);
    Tensor memory =
        cfg_.has_gsfe() ? gsfe_forward(hp.f1, hp.z1, hp.e1, hp.p_k, hp.mask, ctx).M : hp.e1;
    GazeDecoderResult gd = gaze_decoder_forward(memory, hp.p_k, hp.mask, ctx);

    Forward out;
    out.feat_h = hp.feat_h;
    out.feat_w = hp.feat_w;
    out.head_cross_attn = hp.cross_attn;
    out.gaze_cross_attn = std::move(gd.cross_attn);

    PredictionSet& preds = out.preds;
    preds.boxes = hp.boxes;
    preds.head_logits = hp.head_logits;
    preds.inout_logits = gd.inout_logits;
    preds.gaze = gd.gaze;
    if (cfg_.heatmap_output) {
      preds.heatmaps = gd.heatmaps;
      preds.heatmap_h = cfg_.heatmap_grid;
      preds.heatmap_w = cfg_.heatmap_grid;
    }

    out.detections.reserve(cfg_.n_queries);
    for (int q = 0; q < cfg_.n_queries; ++q) {
      DetectionOutput det;
      det.box = {preds.boxes.at(q, 0), preds.boxes.at(q, 1), preds.boxes.at(q, 2),
                 preds.boxes.at(q, 3)};
      det.head_logit = preds.head_logits.values()[q];
      det.gaze = {preds.gaze.at(q, 0), preds.gaze.at(q, 1)};
      det.inout_logit = preds.inout_logits.values()[q];
      if (cfg_.heatmap_output) {
        const int hw = cfg_.heatmap_grid * cfg_.heatmap_grid;
        det.heatmap.assign(preds.heatmaps.values().begin() + static_cast<std::size_t>(q) * hw,
                           preds.heatmaps.values().begin() + static_cast<std::size_t>(q + 1) * hw);
        det.heatmap_h = det.heatmap_w = cfg_.heatmap_grid;
      }
      out.detections.push_back(std::move(det));
    }
    return out;
  }

 private:
  ModelConfig cfg_;
  ParamRegistry reg_;
  Backbone backbone_;
  InputProjection input_proj_;
  std::vector<EncoderLayer> encoder_;
  std::vector<HeadDecoderLayer> decoder_;
  Tensor p_q_;
  Mlp box_head_;
  Linear class_head_;
  InputProjection gsfe_input_proj_;
  std::vector<EncoderLayer> gsfe_encoder_;
  Linear gsfe_proj_z1_, gsfe_proj_e1_;
  Tensor gaze_p_q_;
  std::vector<GazeDecoderLayer> gaze_decoder_;
  Mlp gaze_head_;
  Linear inout_head_;
  Mlp heatmap_head_;
};

// Stacks per-layer attention maps [heads, N_q, n_k] into one
// [n_layers, heads, N_q, n_k] tensor.
inline Tensor stack_attention_maps(const std::vector<Tensor>& layers) {
  check(!layers.empty(), "stack_attention_maps: no layers");
  const Shape s = layers[0].shape();
  std::vector<double> out;
  out.reserve(layers.size() * layers[0].size());
  for (const Tensor& t : layers) {
    check(t.shape() == s, "stack_attention_maps: inconsistent layer shapes");
    out.insert(out.end(), t.values().begin(), t.values().end());
  }
  return Tensor::from_values({static_cast<int>(layers.size()), s[0], s[1], s[2]}, std::move(out));
}

// ---------------------------------------------------------------------------
// Checkpoint container: magic, version, config echo, then named parameter
// records with little-endian 64-bit floats. Bit-exact round trip.

namespace detail {

constexpr char kCheckpointMagic[8] = {'G', 'Z', 'D', 'E', 'T', 'R', 'C', 'K'};
constexpr std::uint32_t kCheckpointVersion = 1;

inline void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

inline void write_f64(std::ostream& os, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, 8);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline double read_f64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  double d;
  std::memcpy(&d, &bits, 8);
  return d;
}

inline void write_string(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is) {
  const std::uint32_t n = read_u32(is);
  std::string s(n, '\0');
  is.read(s.data(), n);
  return s;
}

inline void write_config(std::ostream& os, const ModelConfig& c) {
  write_u32(os, static_cast<std::uint32_t>(c.d));
  write_u32(os, static_cast<std::uint32_t>(c.n_heads));
  write_u32(os, static_cast<std::uint32_t>(c.n_queries));
  write_u32(os, static_cast<std::uint32_t>(c.n_enc_layers));
  write_u32(os, static_cast<std::uint32_t>(c.n_dec_layers));
  write_u32(os, static_cast<std::uint32_t>(c.ffn_dim));
  write_u32(os, static_cast<std::uint32_t>(c.variant));
  write_u32(os, (c.gaze_location_output ? 1u : 0u) | (c.heatmap_output ? 2u : 0u));
  write_u32(os, static_cast<std::uint32_t>(c.heatmap_grid));
  write_u32(os, static_cast<std::uint32_t>(c.backbone_channels));
  write_f64(os, c.dropout);
}

inline ModelConfig read_config(std::istream& is) {
  ModelConfig c;
  c.d = static_cast<int>(read_u32(is));
  c.n_heads = static_cast<int>(read_u32(is));
  c.n_queries = static_cast<int>(read_u32(is));
  c.n_enc_layers = static_cast<int>(read_u32(is));
  c.n_dec_layers = static_cast<int>(read_u32(is));
  c.ffn_dim = static_cast<int>(read_u32(is));
  c.variant = static_cast<Variant>(read_u32(is));
  const std::uint32_t flags = read_u32(is);
  c.gaze_location_output = (flags & 1u) != 0;
  c.heatmap_output = (flags & 2u) != 0;
  c.heatmap_grid = static_cast<int>(read_u32(is));
  c.backbone_channels = static_cast<int>(read_u32(is));
  c.dropout = read_f64(is);
  return c;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const GazeDETR& model) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open checkpoint for writing: " + path);
  os.write(detail::kCheckpointMagic, 8);
  detail::write_u32(os, detail::kCheckpointVersion);
  detail::write_config(os, model.config());
  const auto& params = model.params().params();
  detail::write_u32(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    detail::write_string(os, name);
    detail::write_u32(os, static_cast<std::uint32_t>(t.shape().size()));
    for (int e : t.shape()) detail::write_u32(os, static_cast<std::uint32_t>(e));
    for (double v : t.values()) detail::write_f64(os, v);
  }
  if (!os) throw DataError("short checkpoint write: " + path);
}

inline ModelConfig peek_checkpoint_config(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint: " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, detail::kCheckpointMagic, 8) != 0)
    throw DataError("not a checkpoint file: " + path);
  const std::uint32_t version = detail::read_u32(is);
  if (version != detail::kCheckpointVersion)
    throw DataError("unsupported checkpoint version " + std::to_string(version) + " in " + path);
  return detail::read_config(is);
}

inline GazeDETR load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint: " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, detail::kCheckpointMagic, 8) != 0)
    throw DataError("not a checkpoint file: " + path);
  const std::uint32_t version = detail::read_u32(is);
  if (version != detail::kCheckpointVersion)
    throw DataError("unsupported checkpoint version " + std::to_string(version) + " in " + path);
  ModelConfig cfg = detail::read_config(is);
  GazeDETR model(cfg, /*init_seed=*/0);
  const std::uint32_t n_params = detail::read_u32(is);
  const auto& registry = model.params().params();
  if (n_params != registry.size())
    throw DataError("checkpoint parameter count mismatch in " + path + ": file has " +
                    std::to_string(n_params) + ", model needs " +
                    std::to_string(registry.size()));
  for (std::uint32_t i = 0; i < n_params; ++i) {
    const std::string name = detail::read_string(is);
    const std::uint32_t ndim = detail::read_u32(is);
    Shape shape;
    for (std::uint32_t k = 0; k < ndim; ++k)
      shape.push_back(static_cast<int>(detail::read_u32(is)));
    auto it = registry.find(name);
    if (it == registry.end()) throw DataError("unexpected parameter in checkpoint: " + name);
    if (it->second.shape() != shape)
      throw DataError("checkpoint shape mismatch for " + name + ": file " + shape_str(shape) +
                      " vs model " + shape_str(it->second.shape()));
    Tensor t = it->second;
    for (double& v : t.values()) v = detail::read_f64(is);
  }
  if (!is) throw DataError("truncated checkpoint: " + path);
  return model;
}

// Names the first differing field between a requested config and a
// checkpoint's stored config; empty string when compatible.
inline std::string config_mismatch(const ModelConfig& want, const ModelConfig& got) {
  if (want.d != got.d) return "d";
  if (want.n_heads != got.n_heads) return "n_heads";
  if (want.n_queries != got.n_queries) return "n_queries";
  if (want.n_enc_layers != got.n_enc_layers) return "n_enc_layers";
  if (want.n_dec_layers != got.n_dec_layers) return "n_dec_layers";
  if (want.ffn_dim != got.ffn_dim) return "ffn_dim";
  if (want.variant != got.variant) return "variant";
  if (want.gaze_location_output != got.gaze_location_output) return "gaze_location_output";
  if (want.heatmap_output != got.heatmap_output) return "heatmap_output";
  if (want.heatmap_grid != got.heatmap_grid) return "heatmap_grid";
  if (want.backbone_channels != got.backbone_channels) return "backbone_channels";
  return "";
}

}  // namespace gazedetr
