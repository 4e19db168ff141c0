#pragma once

// Conditional denoiser eps(x_t, t, e): a two-level U-Net with one
// cross-attention block per level, plus the image <-> latent codec.

#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "hiper/errors.hpp"
#include "hiper/image.hpp"
#include "hiper/random.hpp"
#include "hiper/tensor.hpp"
#include "hiper/text.hpp"

namespace hiper {

// Extra input channels holding pixel coordinates.
inline constexpr std::size_t kCoordChannels = 2;

struct ModelConfig {
  std::size_t image_size = 32;  // spatial side of the latent the denoiser sees
  std::size_t in_channels = 3;
  std::size_t ch1 = 32;
  std::size_t ch2 = 64;
  std::size_t groups = 8;
  std::size_t time_dim = 32;
  std::size_t temb_dim = 64;
  std::size_t embed_dim = 32;  // C
  std::size_t tokens = 16;     // M
  std::size_t steps = 100;     // T
  std::uint64_t init_seed = 0;

  bool operator==(const ModelConfig&) const = default;
};

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

struct ConvParams {
  Tensor w, b;
};

struct NormParams {
  Tensor gamma, beta;
};

struct ResBlockParams {
  NormParams norm1;
  ConvParams conv1;
  Tensor temb_w, temb_b;
  NormParams norm2;
  ConvParams conv2;
  std::optional<ConvParams> skip;  // 1x1, present when channel counts differ
};

struct AttentionParams {
  NormParams norm;
  Tensor wq, wk, bk, wv, bv, wo, bo;
};

struct DenoiserParams {
  Tensor time_w, time_b;
  ConvParams conv_in;
  ResBlockParams res1;
  AttentionParams attn1;
  ResBlockParams res2;
  AttentionParams attn2;
  ResBlockParams res3;
  NormParams norm_out;
  ConvParams conv_out;
  bool frozen = false;
};

namespace detail {

inline ConvParams make_conv(std::size_t k, std::size_t cin, std::size_t cout, Rng& rng, double gain = 1.0) {
  const double std = gain * std::sqrt(2.0 / static_cast<double>(k * k * cin));
  return {Tensor::randn({k, k, cin, cout}, rng, std), Tensor({cout}, 0.0)};
}

inline NormParams make_norm(std::size_t c) { return {Tensor({c}, 1.0), Tensor({c}, 0.0)}; }

inline ResBlockParams make_res(std::size_t cin, std::size_t cout, std::size_t temb, Rng& rng) {
  ResBlockParams p;
  p.norm1 = make_norm(cin);
  p.conv1 = make_conv(3, cin, cout, rng);
  p.temb_w = Tensor::randn({temb, cout}, rng, std::sqrt(1.0 / static_cast<double>(temb)));
  p.temb_b = Tensor({cout}, 0.0);
  p.norm2 = make_norm(cout);
  p.conv2 = make_conv(3, cout, cout, rng, 0.3);
  if (cin != cout) p.skip = make_conv(1, cin, cout, rng, 0.7);
  return p;
}

inline AttentionParams make_attention(std::size_t c, std::size_t embed, Rng& rng) {
  AttentionParams p;
  const double sc = std::sqrt(1.0 / static_cast<double>(c)), se = std::sqrt(1.0 / static_cast<double>(embed));
  p.norm = make_norm(c);
  p.wq = Tensor::randn({c, c}, rng, sc);
  p.wk = Tensor::randn({embed, c}, rng, se);
  p.bk = Tensor({c}, 0.0);
  p.wv = Tensor::randn({embed, c}, rng, se);
  p.bv = Tensor({c}, 0.0);
  p.wo = Tensor::randn({c, c}, rng, 0.3 * sc);
  p.bo = Tensor({c}, 0.0);
  return p;
}

inline void name_conv(NamedTensors& out, const std::string& prefix, const ConvParams& p) {
  out.emplace_back(prefix + ".w", p.w);
  out.emplace_back(prefix + ".b", p.b);
}

inline void name_norm(NamedTensors& out, const std::string& prefix, const NormParams& p) {
  out.emplace_back(prefix + ".gamma", p.gamma);
  out.emplace_back(prefix + ".beta", p.beta);
}

inline void name_res(NamedTensors& out, const std::string& prefix, const ResBlockParams& p) {
  name_norm(out, prefix + ".norm1", p.norm1);
  name_conv(out, prefix + ".conv1", p.conv1);
  out.emplace_back(prefix + ".temb.w", p.temb_w);
  out.emplace_back(prefix + ".temb.b", p.temb_b);
  name_norm(out, prefix + ".norm2", p.norm2);
  name_conv(out, prefix + ".conv2", p.conv2);
  if (p.skip) name_conv(out, prefix + ".skip", *p.skip);
}

inline void name_attention(NamedTensors& out, const std::string& prefix, const AttentionParams& p) {
  name_norm(out, prefix + ".norm", p.norm);
  out.emplace_back(prefix + ".wq", p.wq);
  out.emplace_back(prefix + ".wk", p.wk);
  out.emplace_back(prefix + ".bk", p.bk);
  out.emplace_back(prefix + ".wv", p.wv);
  out.emplace_back(prefix + ".bv", p.bv);
  out.emplace_back(prefix + ".wo", p.wo);
  out.emplace_back(prefix + ".bo", p.bo);
}

}  // namespace detail

inline void validate(const ModelConfig& cfg) {
  if (cfg.image_size == 0 || cfg.image_size % 2 != 0)
    throw ParameterError("model: image_size must be a positive multiple of 2");
  if (cfg.groups == 0 || cfg.ch1 % cfg.groups != 0 || cfg.ch2 % cfg.groups != 0 || (cfg.ch1 + cfg.ch2) % cfg.groups != 0)
    throw ParameterError("model: channel counts must be divisible by the group count");
  if (cfg.time_dim == 0 || cfg.time_dim % 2 != 0) throw ParameterError("model: time_dim must be even");
  if (cfg.tokens == 0 || cfg.embed_dim == 0) throw ParameterError("model: empty text geometry");
}

inline DenoiserParams init_denoiser(const ModelConfig& cfg) {
  validate(cfg);
  Rng rng(cfg.init_seed, 0xD3A0);
  DenoiserParams p;
  p.time_w = Tensor::randn({cfg.time_dim, cfg.temb_dim}, rng, std::sqrt(1.0 / static_cast<double>(cfg.time_dim)));
  p.time_b = Tensor({cfg.temb_dim}, 0.0);
  p.conv_in = detail::make_conv(3, cfg.in_channels + kCoordChannels, cfg.ch1, rng);
  p.res1 = detail::make_res(cfg.ch1, cfg.ch1, cfg.temb_dim, rng);
  p.attn1 = detail::make_attention(cfg.ch1, cfg.embed_dim, rng);
  p.res2 = detail::make_res(cfg.ch1, cfg.ch2, cfg.temb_dim, rng);
  p.attn2 = detail::make_attention(cfg.ch2, cfg.embed_dim, rng);
  p.res3 = detail::make_res(cfg.ch1 + cfg.ch2, cfg.ch1, cfg.temb_dim, rng);
  p.norm_out = detail::make_norm(cfg.ch1);
  p.conv_out = detail::make_conv(3, cfg.ch1, cfg.in_channels, rng, 0.3);
  return p;
}

// Stable ordering; used for checkpoints and optimizers.
inline NamedTensors named_parameters(const DenoiserParams& p) {
  NamedTensors out;
  out.emplace_back("unet.time.w", p.time_w);
  out.emplace_back("unet.time.b", p.time_b);
  detail::name_conv(out, "unet.conv_in", p.conv_in);
  detail::name_res(out, "unet.res1", p.res1);
  detail::name_attention(out, "unet.attn1", p.attn1);
  detail::name_res(out, "unet.res2", p.res2);
  detail::name_attention(out, "unet.attn2", p.attn2);
  detail::name_res(out, "unet.res3", p.res3);
  detail::name_norm(out, "unet.norm_out", p.norm_out);
  detail::name_conv(out, "unet.conv_out", p.conv_out);
  return out;
}

inline void set_frozen(DenoiserParams& p, bool frozen) {
  for (auto& [name, t] : named_parameters(p)) t.set_requires_grad(!frozen);
  p.frozen = frozen;
}

inline bool all_frozen(const DenoiserParams& p) {
  if (!p.frozen) return false;
  for (const auto& [name, t] : named_parameters(p))
    if (t.requires_grad()) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Timestep conditioning

// [sin(t w_0), ..., sin(t w_{h-1}), cos(t w_0), ..., cos(t w_{h-1})], w_k = 10000^(-k/h).
inline std::vector<double> sinusoidal_features(std::size_t t, std::size_t dim) {
  if (dim == 0 || dim % 2 != 0) throw ParameterError("sinusoidal_features: dim must be even and positive");
  const std::size_t half = dim / 2;
  std::vector<double> out(dim);
  for (std::size_t k = 0; k < half; ++k) {
    const double freq = std::pow(10000.0, -static_cast<double>(k) / static_cast<double>(half));
    out[k] = std::sin(static_cast<double>(t) * freq);
    out[half + k] = std::cos(static_cast<double>(t) * freq);
  }
  return out;
}

// Affine projection of the sinusoidal features: [1, temb_dim].
inline Tensor time_embed(std::size_t t, const DenoiserParams& p) {
  const std::size_t dim = p.time_w.dim(0);
  Tensor raw({1, dim}, sinusoidal_features(t, dim));
  return linear(raw, p.time_w, p.time_b);
}

// ---------------------------------------------------------------------------
// Attention record

struct AttentionMap {
  std::size_t height = 0, width = 0, tokens = 0;
  std::vector<double> weights;  // [height * width, tokens], rows post-softmax

  double at(std::size_t pos, std::size_t token) const { return weights[pos * tokens + token]; }
};

struct AttentionRecord {
  std::size_t t = 0;
  std::vector<AttentionMap> layers;
};

struct DenoiseOutput {
  Tensor eps;
  std::optional<AttentionRecord> attention;
};

namespace detail {

inline Tensor resblock(const Tensor& x, const Tensor& temb_act, const ResBlockParams& p, std::size_t groups) {
  Tensor h = conv2d(silu(group_norm(x, p.norm1.gamma, p.norm1.beta, groups)), p.conv1.w, p.conv1.b);
  Tensor tb = linear(temb_act, p.temb_w, p.temb_b);
  h = add_bias(h, reshape(tb, {tb.dim(1)}));
  h = conv2d(silu(group_norm(h, p.norm2.gamma, p.norm2.beta, groups)), p.conv2.w, p.conv2.b);
  Tensor skip = p.skip ? conv2d(x, p.skip->w, p.skip->b) : x;
  return add(h, skip);
}

// Queries from image features, keys/values from the M text columns (ctx: [M, C]).
inline Tensor cross_attention(const Tensor& x, const Tensor& ctx, const AttentionParams& p, std::size_t groups,
                              AttentionMap* record) {
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2), npos = h * w;
  Tensor xn = reshape(group_norm(x, p.norm.gamma, p.norm.beta, groups), {npos, c});
  Tensor q = matmul(xn, p.wq);
  Tensor k = linear(ctx, p.wk, p.bk);
  Tensor v = linear(ctx, p.wv, p.bv);
  const double d = static_cast<double>(q.dim(1));
  Tensor attn = softmax(scale(matmul(q, transpose(k)), 1.0 / std::sqrt(d)));
  if (record) *record = AttentionMap{h, w, ctx.dim(0), attn.values()};
  Tensor o = linear(matmul(attn, v), p.wo, p.bo);
  return add(x, reshape(o, {h, w, c}));
}

// Fixed x and y coordinates in [-1, 1] at pixel centres, [S, S, 2].
inline Tensor coord_grid(std::size_t size) {
  Tensor g({size, size, kCoordChannels});
  const double s = static_cast<double>(size);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      g.data()[(y * size + x) * 2] = (2.0 * static_cast<double>(x) + 1.0) / s - 1.0;
      g.data()[(y * size + x) * 2 + 1] = (2.0 * static_cast<double>(y) + 1.0) / s - 1.0;
    }
  return g;
}

}  // namespace detail

// e: [C, M] text embedding (may require grad).
inline DenoiseOutput denoise(const Tensor& xt, std::size_t t, const Tensor& e, const DenoiserParams& p,
                             const ModelConfig& cfg, bool record_attention = false) {
  if (xt.rank() != 3 || xt.dim(0) != cfg.image_size || xt.dim(1) != cfg.image_size || xt.dim(2) != cfg.in_channels)
    throw DimensionError("denoise: input " + shape_str(xt.shape()) + " does not match model input [" +
                         std::to_string(cfg.image_size) + "," + std::to_string(cfg.image_size) + "," +
                         std::to_string(cfg.in_channels) + "]");
  if (e.rank() != 2 || e.dim(0) != cfg.embed_dim || e.dim(1) != cfg.tokens)
    throw DimensionError("denoise: embedding " + shape_str(e.shape()) + " does not match [" +
                         std::to_string(cfg.embed_dim) + "," + std::to_string(cfg.tokens) + "]");
  if (t < 1 || t > cfg.steps) throw IndexError("denoise: step t=" + std::to_string(t) + " out of range");

  DenoiseOutput out;
  AttentionMap map1, map2;
  const bool rec = record_attention;
  const std::size_t g = cfg.groups;

  Tensor temb = silu(time_embed(t, p));
  Tensor ctx = transpose(e);

  // Convolutions alone cannot tell where they are; the coordinate channels let
  // the first layer see absolute position.
  Tensor h0 = conv2d(concat({xt, detail::coord_grid(cfg.image_size)}, 2), p.conv_in.w, p.conv_in.b);
  Tensor h1 = detail::cross_attention(detail::resblock(h0, temb, p.res1, g), ctx, p.attn1, g, rec ? &map1 : nullptr);
  Tensor h2 = detail::cross_attention(detail::resblock(avg_pool2x(h1), temb, p.res2, g), ctx, p.attn2, g,
                                      rec ? &map2 : nullptr);
  Tensor u = concat({upsample2x(h2), h1}, 2);
  Tensor h3 = detail::resblock(u, temb, p.res3, g);
  out.eps = conv2d(silu(group_norm(h3, p.norm_out.gamma, p.norm_out.beta, g)), p.conv_out.w, p.conv_out.b);
  if (rec) out.attention = AttentionRecord{t, {std::move(map1), std::move(map2)}};
  return out;
}

inline DenoiseOutput denoise(const Tensor& xt, std::size_t t, const TextEmbedding& e, const DenoiserParams& p,
                             const ModelConfig& cfg, bool record_attention = false) {
  return denoise(xt, t, e.mat, p, cfg, record_attention);
}

// ---------------------------------------------------------------------------
// Codec: image p <-> latent x

enum class CodecKind { identity, tiny_autoencoder };

struct Codec {
  CodecKind kind = CodecKind::identity;
  std::size_t latent_channels = 3;
  std::size_t hidden = 16;
  ConvParams enc1, enc2, dec1, dec2;

  static Codec identity() { return Codec{}; }

  static Codec tiny_autoencoder(std::size_t latent_channels, std::uint64_t seed, std::size_t hidden = 16) {
    Rng rng(seed, 0xC0DEC);
    Codec c;
    c.kind = CodecKind::tiny_autoencoder;
    c.latent_channels = latent_channels;
    c.hidden = hidden;
    c.enc1 = detail::make_conv(3, 3, hidden, rng);
    c.enc2 = detail::make_conv(3, hidden, latent_channels, rng, 0.5);
    c.dec1 = detail::make_conv(3, latent_channels, hidden, rng);
    c.dec2 = detail::make_conv(3, hidden, 3, rng, 0.5);
    return c;
  }

  // Side of the latent for an image of the given side.
  std::size_t latent_size(std::size_t image_size) const {
    return kind == CodecKind::identity ? image_size : image_size / 2;
  }

  NamedTensors named_parameters() const {
    NamedTensors out;
    if (kind == CodecKind::identity) return out;
    detail::name_conv(out, "codec.enc1", enc1);
    detail::name_conv(out, "codec.enc2", enc2);
    detail::name_conv(out, "codec.dec1", dec1);
    detail::name_conv(out, "codec.dec2", dec2);
    return out;
  }

  // Pixel tensor in [-1, 1] -> latent (differentiable).
  Tensor encode_tensor(const Tensor& x) const {
    if (kind == CodecKind::identity) return x;
    Tensor h = silu(conv2d(x, enc1.w, enc1.b));
    return conv2d(avg_pool2x(h), enc2.w, enc2.b);
  }

  // Latent -> pixel tensor in roughly [-1, 1] (differentiable).
  Tensor decode_tensor(const Tensor& z) const {
    if (kind == CodecKind::identity) return z;
    Tensor h = silu(conv2d(upsample2x(z), dec1.w, dec1.b));
    return conv2d(h, dec2.w, dec2.b);
  }
};

inline Tensor image_to_tensor(const Image& img) {
  for (double v : img.pixels)
    if (!(v >= 0.0 && v <= 1.0)) throw FormatError("encode_image: pixel value outside [0,1]");
  Tensor x({img.height, img.width, 3});
  for (std::size_t i = 0; i < img.pixels.size(); ++i) x.data()[i] = 2.0 * img.pixels[i] - 1.0;
  return x;
}

// Clamps to [0,1] and snaps to the 8-bit grid.
inline Image tensor_to_image(const Tensor& x) {
  if (x.rank() != 3 || x.dim(2) != 3) throw DimensionError("decode_latent: expected [H,W,3], got " + shape_str(x.shape()));
  Image img(x.dim(0), x.dim(1));
  for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = (x.data()[i] + 1.0) / 2.0;
  quantize(img);
  return img;
}

inline Tensor encode_image(const Image& img, const Codec& codec) {
  NoGradGuard no_grad;
  return codec.encode_tensor(image_to_tensor(img));
}

inline Image decode_latent(const Tensor& z, const Codec& codec) {
  NoGradGuard no_grad;
  return tensor_to_image(codec.decode_tensor(z));
}

}  // namespace hiper
