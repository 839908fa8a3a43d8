// Modality-specific encoders, decoders and projection heads. Two backbone
// families satisfy one token contract: a strided-conv autoencoder whose class
// token is a linear projection of the global average pooled feature map, and
// a small pre-norm vision transformer with a learned [CLS] token and
// full-token (mask-free) reconstruction.
//
// Token layout: token 0 is the class token; tokens 1..L are patch tokens
// ordered left-to-right, top-to-bottom over the patch lattice.
#pragma once

#include <array>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "solarchip/autograd.hpp"
#include "solarchip/data.hpp"
#include "solarchip/rng.hpp"

namespace solarchip {

enum class BackboneKind { Conv, Transformer };

inline const char* backbone_name(BackboneKind k) {
  return k == BackboneKind::Conv ? "conv" : "transformer";
}

inline BackboneKind backbone_from_name(const std::string& s) {
  if (s == "conv") return BackboneKind::Conv;
  if (s == "transformer") return BackboneKind::Transformer;
  throw std::invalid_argument("unknown backbone: " + s);
}

struct BackboneConfig {
  BackboneKind kind = BackboneKind::Transformer;
  int side = 64;
  int patch = 8;
  int d_model = 32;
  int d_ctr = 16;
  int depth = 2;
  int heads = 4;

  int grid_side() const { return side / patch; }
  int num_patches() const { return grid_side() * grid_side(); }

  // Number of stride-2 stages needed to reach one feature per patch.
  int conv_stages() const {
    int s = 0, p = patch;
    while (p > 1) {
      p >>= 1;
      ++s;
    }
    return s;
  }

  void validate() const {
    if (side < 2 || patch < 1 || side % patch != 0)
      throw std::invalid_argument("BackboneConfig: side must be a positive multiple of patch");
    if (kind == BackboneKind::Conv && (patch & (patch - 1)) != 0)
      throw std::invalid_argument("BackboneConfig: conv backbone needs power-of-two patch");
    if (kind == BackboneKind::Transformer && d_model % heads != 0)
      throw std::invalid_argument("BackboneConfig: heads must divide d_model");
    if (d_model < 1 || d_ctr < 1 || depth < 1 || heads < 1)
      throw std::invalid_argument("BackboneConfig: dims must be positive");
  }
};

// B x (L+1) x D_model encoder output.
struct TokenSequence {
  Var tokens;

  Var cls() const { return token_at(tokens, 0); }
  Var patches() const { return token_range(tokens, 1, tokens->value.dim(1) - 1); }
};

// Contrastive-space projections.
struct Embeddings {
  Var cls;      // B x D_ctr
  Var patches;  // B x L x D_ctr
};

// ---------------------------------------------------------------------------
// parameter containers
// ---------------------------------------------------------------------------

struct LinearParams {
  Var w, b;
};

struct NormParams {
  Var gamma, beta;
};

struct BlockParams {
  NormParams ln1;
  LinearParams qkv, proj;
  NormParams ln2;
  LinearParams fc1, fc2;
};

struct TransformerEncoderParams {
  LinearParams embed;  // patch pixels -> d_model
  Var cls_token;       // d_model
  Var pos;             // (L+1) x d_model
  std::vector<BlockParams> blocks;
  NormParams final_ln;
};

struct TransformerDecoderParams {
  LinearParams embed;  // d_model -> d_model
  Var pos;             // L x d_model
  std::vector<BlockParams> blocks;
  NormParams final_ln;
  LinearParams to_pixels;  // d_model -> patch^2
};

struct ConvEncoderParams {
  std::vector<LinearParams> stages;  // conv weights [O,C,3,3] in .w, bias in .b
  LinearParams cls_proj;             // pooled feature -> class token
};

struct ConvDecoderParams {
  std::vector<LinearParams> stages;  // transposed conv weights [Cin,Cout,4,4]
};

struct ModalityModel {
  std::variant<ConvEncoderParams, TransformerEncoderParams> encoder;
  std::variant<ConvDecoderParams, TransformerDecoderParams> decoder;
  LinearParams cls_head, img_head;
};

// Learnable temperatures, applied only as exp(alpha). One per granularity.
struct Temperatures {
  Var alpha_cls, alpha_pat, alpha_int;
};

enum class ParamRole : int { Encoder = 0, Decoder = 1, ClsHead = 2, ImgHead = 3, Temperature = 4 };

struct ParamInfo {
  std::string name;
  int modality;  // -1 for shared (temperatures)
  ParamRole role;
  int layer;  // stage/block index, -1 if not layered
  Var var;
};

// ---------------------------------------------------------------------------
// initialization
// ---------------------------------------------------------------------------

namespace detail {

// Symmetric uniform scaled by fan-in; biases start at zero.
inline LinearParams init_linear(int fan_in, std::vector<int> w_shape, int out_dim, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return {parameter(Tensor::uniform(std::move(w_shape), bound, rng)),
          parameter(Tensor::zeros({out_dim}))};
}

inline NormParams init_norm(int d) {
  return {parameter(Tensor::full({d}, 1.0)), parameter(Tensor::zeros({d}))};
}

inline BlockParams init_block(int d, Rng& rng) {
  BlockParams b;
  b.ln1 = init_norm(d);
  b.qkv = init_linear(d, {d, 3 * d}, 3 * d, rng);
  b.proj = init_linear(d, {d, d}, d, rng);
  b.ln2 = init_norm(d);
  b.fc1 = init_linear(d, {d, 4 * d}, 4 * d, rng);
  b.fc2 = init_linear(4 * d, {4 * d, d}, d, rng);
  return b;
}

inline std::vector<int> conv_channels(const BackboneConfig& cfg) {
  const int n = cfg.conv_stages();
  std::vector<int> ch(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) ch[static_cast<std::size_t>(i)] = std::max(4, cfg.d_model >> (n - 1 - i));
  ch[static_cast<std::size_t>(n - 1)] = cfg.d_model;
  return ch;
}

// Last-dim slice helper for splitting fused qkv projections.
inline Var slice_lastdim(const Var& x, int start, int len) {
  const auto& s = x->value.shape();
  const int d = s.back();
  const int rows = x->value.numel() / d;
  std::vector<int> out_shape = s;
  out_shape.back() = len;
  std::vector<int> idx(static_cast<std::size_t>(rows) * len);
  std::size_t o = 0;
  for (int r = 0; r < rows; ++r)
    for (int j = 0; j < len; ++j) idx[o++] = r * d + start + j;
  return gather(x, std::move(out_shape), std::move(idx));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// the full model: 11 independent modality parameter sets + temperatures
// ---------------------------------------------------------------------------

class MultiModalModel {
 public:
  MultiModalModel() = default;

  MultiModalModel(BackboneConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    for (int m = 0; m < ModalityId::kCount; ++m) {
      Rng rng = Rng::derive(seed, 0x40D31ull + static_cast<std::uint64_t>(m));
      models_[static_cast<std::size_t>(m)] = init_modality(cfg_, rng);
    }
    temps_.alpha_cls = parameter(Tensor::scalar(0.0));
    temps_.alpha_pat = parameter(Tensor::scalar(0.0));
    temps_.alpha_int = parameter(Tensor::scalar(0.0));
  }

  const BackboneConfig& config() const { return cfg_; }
  Temperatures& temps() { return temps_; }
  const Temperatures& temps() const { return temps_; }
  ModalityModel& modality(int m) { return models_[static_cast<std::size_t>(m)]; }
  const ModalityModel& modality(int m) const { return models_[static_cast<std::size_t>(m)]; }

  // batch: B x 1 x side x side, signed-log domain.
  TokenSequence encode(int modality, const Var& batch) const {
    check_input(batch);
    const auto& mm = models_[static_cast<std::size_t>(modality)];
    if (cfg_.kind == BackboneKind::Conv)
      return encode_conv(std::get<ConvEncoderParams>(mm.encoder), batch);
    return encode_transformer(std::get<TransformerEncoderParams>(mm.encoder), batch);
  }

  // Class and patch tokens through the two linear heads.
  Embeddings project(const TokenSequence& seq, int modality) const {
    const auto& mm = models_[static_cast<std::size_t>(modality)];
    return {linear(seq.cls(), mm.cls_head.w, mm.cls_head.b),
            linear(seq.patches(), mm.img_head.w, mm.img_head.b)};
  }

  // patch_tokens: B x L x d_model, the pre-projection tokens. Contrastive
  // embeddings are never valid input here.
  Var decode(const Var& patch_tokens, int modality) const {
    if (patch_tokens->value.ndim() != 3 || patch_tokens->value.dim(1) != cfg_.num_patches() ||
        patch_tokens->value.dim(2) != cfg_.d_model) {
      std::ostringstream os;
      os << "decode: expected B x " << cfg_.num_patches() << " x " << cfg_.d_model
         << " patch tokens, got " << patch_tokens->value.shape_str();
      throw std::invalid_argument(os.str());
    }
    const auto& mm = models_[static_cast<std::size_t>(modality)];
    if (cfg_.kind == BackboneKind::Conv)
      return decode_conv(std::get<ConvDecoderParams>(mm.decoder), patch_tokens);
    return decode_transformer(std::get<TransformerDecoderParams>(mm.decoder), patch_tokens);
  }

  // Stable enumeration used by the optimizer and checkpoints.
  std::vector<ParamInfo> parameters() const {
    std::vector<ParamInfo> out;
    for (int m = 0; m < ModalityId::kCount; ++m) {
      const auto& mm = models_[static_cast<std::size_t>(m)];
      char prefix[8];
      std::snprintf(prefix, sizeof(prefix), "m%02d.", m);
      const std::string p(prefix);
      if (cfg_.kind == BackboneKind::Conv) {
        const auto& enc = std::get<ConvEncoderParams>(mm.encoder);
        for (std::size_t i = 0; i < enc.stages.size(); ++i) {
          out.push_back({p + "enc.stage" + std::to_string(i) + ".w", m, ParamRole::Encoder,
                         static_cast<int>(i), enc.stages[i].w});
          out.push_back({p + "enc.stage" + std::to_string(i) + ".b", m, ParamRole::Encoder,
                         static_cast<int>(i), enc.stages[i].b});
        }
        out.push_back({p + "enc.cls_proj.w", m, ParamRole::Encoder, -1, enc.cls_proj.w});
        out.push_back({p + "enc.cls_proj.b", m, ParamRole::Encoder, -1, enc.cls_proj.b});
        const auto& dec = std::get<ConvDecoderParams>(mm.decoder);
        for (std::size_t i = 0; i < dec.stages.size(); ++i) {
          out.push_back({p + "dec.stage" + std::to_string(i) + ".w", m, ParamRole::Decoder,
                         static_cast<int>(i), dec.stages[i].w});
          out.push_back({p + "dec.stage" + std::to_string(i) + ".b", m, ParamRole::Decoder,
                         static_cast<int>(i), dec.stages[i].b});
        }
      } else {
        const auto& enc = std::get<TransformerEncoderParams>(mm.encoder);
        out.push_back({p + "enc.embed.w", m, ParamRole::Encoder, -1, enc.embed.w});
        out.push_back({p + "enc.embed.b", m, ParamRole::Encoder, -1, enc.embed.b});
        out.push_back({p + "enc.cls_token", m, ParamRole::Encoder, -1, enc.cls_token});
        out.push_back({p + "enc.pos", m, ParamRole::Encoder, -1, enc.pos});
        append_blocks(out, p + "enc.", m, ParamRole::Encoder, enc.blocks);
        out.push_back({p + "enc.final_ln.g", m, ParamRole::Encoder, -1, enc.final_ln.gamma});
        out.push_back({p + "enc.final_ln.b", m, ParamRole::Encoder, -1, enc.final_ln.beta});
        const auto& dec = std::get<TransformerDecoderParams>(mm.decoder);
        out.push_back({p + "dec.embed.w", m, ParamRole::Decoder, -1, dec.embed.w});
        out.push_back({p + "dec.embed.b", m, ParamRole::Decoder, -1, dec.embed.b});
        out.push_back({p + "dec.pos", m, ParamRole::Decoder, -1, dec.pos});
        append_blocks(out, p + "dec.", m, ParamRole::Decoder, dec.blocks);
        out.push_back({p + "dec.final_ln.g", m, ParamRole::Decoder, -1, dec.final_ln.gamma});
        out.push_back({p + "dec.final_ln.b", m, ParamRole::Decoder, -1, dec.final_ln.beta});
        out.push_back({p + "dec.to_pixels.w", m, ParamRole::Decoder, -1, dec.to_pixels.w});
        out.push_back({p + "dec.to_pixels.b", m, ParamRole::Decoder, -1, dec.to_pixels.b});
      }
      out.push_back({p + "cls_head.w", m, ParamRole::ClsHead, -1, mm.cls_head.w});
      out.push_back({p + "cls_head.b", m, ParamRole::ClsHead, -1, mm.cls_head.b});
      out.push_back({p + "img_head.w", m, ParamRole::ImgHead, -1, mm.img_head.w});
      out.push_back({p + "img_head.b", m, ParamRole::ImgHead, -1, mm.img_head.b});
    }
    out.push_back({"alpha_cls", -1, ParamRole::Temperature, -1, temps_.alpha_cls});
    out.push_back({"alpha_pat", -1, ParamRole::Temperature, -1, temps_.alpha_pat});
    out.push_back({"alpha_int", -1, ParamRole::Temperature, -1, temps_.alpha_int});
    return out;
  }

 private:
  static void append_blocks(std::vector<ParamInfo>& out, const std::string& prefix, int m,
                            ParamRole role, const std::vector<BlockParams>& blocks) {
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const std::string bp = prefix + "blk" + std::to_string(i) + ".";
      const int layer = static_cast<int>(i);
      const auto& b = blocks[i];
      out.push_back({bp + "ln1.g", m, role, layer, b.ln1.gamma});
      out.push_back({bp + "ln1.b", m, role, layer, b.ln1.beta});
      out.push_back({bp + "qkv.w", m, role, layer, b.qkv.w});
      out.push_back({bp + "qkv.b", m, role, layer, b.qkv.b});
      out.push_back({bp + "proj.w", m, role, layer, b.proj.w});
      out.push_back({bp + "proj.b", m, role, layer, b.proj.b});
      out.push_back({bp + "ln2.g", m, role, layer, b.ln2.gamma});
      out.push_back({bp + "ln2.b", m, role, layer, b.ln2.beta});
      out.push_back({bp + "fc1.w", m, role, layer, b.fc1.w});
      out.push_back({bp + "fc1.b", m, role, layer, b.fc1.b});
      out.push_back({bp + "fc2.w", m, role, layer, b.fc2.w});
      out.push_back({bp + "fc2.b", m, role, layer, b.fc2.b});
    }
  }

  static ModalityModel init_modality(const BackboneConfig& cfg, Rng& rng) {
    ModalityModel mm;
    const int d = cfg.d_model;
    if (cfg.kind == BackboneKind::Conv) {
      ConvEncoderParams enc;
      auto ch = detail::conv_channels(cfg);
      int in_ch = 1;
      for (int c : ch) {
        enc.stages.push_back(detail::init_linear(in_ch * 9, {c, in_ch, 3, 3}, c, rng));
        in_ch = c;
      }
      enc.cls_proj = detail::init_linear(d, {d, d}, d, rng);
      mm.encoder = std::move(enc);

      ConvDecoderParams dec;
      std::vector<int> rev(ch.rbegin(), ch.rend());  // starts at d_model
      for (std::size_t i = 0; i < rev.size(); ++i) {
        const int cin = rev[i];
        const int cout = (i + 1 < rev.size()) ? rev[i + 1] : 1;
        dec.stages.push_back(detail::init_linear(cin * 16, {cin, cout, 4, 4}, cout, rng));
      }
      mm.decoder = std::move(dec);
    } else {
      const int l = cfg.num_patches();
      TransformerEncoderParams enc;
      enc.embed = detail::init_linear(cfg.patch * cfg.patch, {cfg.patch * cfg.patch, d}, d, rng);
      const double pb = 1.0 / std::sqrt(static_cast<double>(d));
      enc.cls_token = parameter(Tensor::uniform({d}, pb, rng));
      enc.pos = parameter(Tensor::uniform({(l + 1) * d}, pb, rng));
      for (int i = 0; i < cfg.depth; ++i) enc.blocks.push_back(detail::init_block(d, rng));
      enc.final_ln = detail::init_norm(d);
      mm.encoder = std::move(enc);

      TransformerDecoderParams dec;
      dec.embed = detail::init_linear(d, {d, d}, d, rng);
      dec.pos = parameter(Tensor::uniform({l * d}, pb, rng));
      for (int i = 0; i < cfg.depth; ++i) dec.blocks.push_back(detail::init_block(d, rng));
      dec.final_ln = detail::init_norm(d);
      dec.to_pixels = detail::init_linear(d, {d, cfg.patch * cfg.patch}, cfg.patch * cfg.patch, rng);
      mm.decoder = std::move(dec);
    }
    mm.cls_head = detail::init_linear(d, {d, cfg.d_ctr}, cfg.d_ctr, rng);
    mm.img_head = detail::init_linear(d, {d, cfg.d_ctr}, cfg.d_ctr, rng);
    return mm;
  }

  void check_input(const Var& batch) const {
    const auto& s = batch->value.shape();
    if (s.size() != 4 || s[1] != 1 || s[2] != cfg_.side || s[3] != cfg_.side) {
      std::ostringstream os;
      os << "encode: expected B x 1 x " << cfg_.side << " x " << cfg_.side << ", got "
         << batch->value.shape_str();
      throw std::invalid_argument(os.str());
    }
  }

  Var run_block(const BlockParams& b, const Var& x, int heads) const {
    // pre-norm attention
    Var h = layer_norm(x, b.ln1.gamma, b.ln1.beta);
    Var qkv = linear(h, b.qkv.w, b.qkv.b);
    const int d = cfg_.d_model;
    Var q = split_heads(detail::slice_lastdim(qkv, 0, d), heads);
    Var k = split_heads(detail::slice_lastdim(qkv, d, d), heads);
    Var v = split_heads(detail::slice_lastdim(qkv, 2 * d, d), heads);
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(d / heads));
    Var att = softmax_lastdim(scale(bmm(q, k, true), inv_sqrt_dh));
    Var ctx = merge_heads(bmm(att, v), heads);
    Var x1 = add(x, linear(ctx, b.proj.w, b.proj.b));
    // pre-norm MLP
    Var h2 = layer_norm(x1, b.ln2.gamma, b.ln2.beta);
    Var mlp = linear(gelu(linear(h2, b.fc1.w, b.fc1.b)), b.fc2.w, b.fc2.b);
    return add(x1, mlp);
  }

  TokenSequence encode_transformer(const TransformerEncoderParams& enc, const Var& batch) const {
    const int bsz = batch->value.dim(0);
    const int l = cfg_.num_patches();
    Var tok = linear(image_to_patches(batch, cfg_.patch), enc.embed.w, enc.embed.b);
    Var cls = expand_rows(enc.cls_token, bsz, 1, cfg_.d_model);
    Var seq = concat_dim1(cls, tok);
    seq = add(seq, expand_rows(enc.pos, bsz, l + 1, cfg_.d_model));
    for (const auto& blk : enc.blocks) seq = run_block(blk, seq, cfg_.heads);
    seq = layer_norm(seq, enc.final_ln.gamma, enc.final_ln.beta);
    return {seq};
  }

  TokenSequence encode_conv(const ConvEncoderParams& enc, const Var& batch) const {
    Var x = batch;
    for (std::size_t i = 0; i < enc.stages.size(); ++i) {
      x = conv2d(x, enc.stages[i].w, enc.stages[i].b, 2, 1);
      if (i + 1 < enc.stages.size()) x = gelu(x);
    }
    // x: B x d_model x G x G
    Var patches = map_to_tokens(x);
    Var cls = linear(global_avg_pool(x), enc.cls_proj.w, enc.cls_proj.b);
    Var cls3 = reshape(cls, {batch->value.dim(0), 1, cfg_.d_model});
    return {concat_dim1(cls3, patches)};
  }

  Var decode_transformer(const TransformerDecoderParams& dec, const Var& patch_tokens) const {
    const int bsz = patch_tokens->value.dim(0);
    const int l = cfg_.num_patches();
    Var x = linear(patch_tokens, dec.embed.w, dec.embed.b);
    x = add(x, expand_rows(dec.pos, bsz, l, cfg_.d_model));
    for (const auto& blk : dec.blocks) x = run_block(blk, x, cfg_.heads);
    x = layer_norm(x, dec.final_ln.gamma, dec.final_ln.beta);
    return patches_to_image(linear(x, dec.to_pixels.w, dec.to_pixels.b), cfg_.patch);
  }

  Var decode_conv(const ConvDecoderParams& dec, const Var& patch_tokens) const {
    Var x = tokens_to_map(patch_tokens);
    for (std::size_t i = 0; i < dec.stages.size(); ++i) {
      x = conv_transpose2d(x, dec.stages[i].w, dec.stages[i].b, 2, 1);
      if (i + 1 < dec.stages.size()) x = gelu(x);
    }
    return x;
  }

  BackboneConfig cfg_;
  std::array<ModalityModel, ModalityId::kCount> models_;
  Temperatures temps_;
};

}  // namespace solarchip
