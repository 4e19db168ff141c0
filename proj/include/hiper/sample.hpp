#pragma once

// Reverse-diffusion sampling from a plain or composite text embedding.

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "hiper/config.hpp"
#include "hiper/errors.hpp"
#include "hiper/model.hpp"
#include "hiper/pipeline.hpp"
#include "hiper/random.hpp"
#include "hiper/schedule.hpp"
#include "hiper/tensor.hpp"
#include "hiper/text.hpp"

namespace hiper {

// Called with the conditioning handed to the denoiser at every reverse step.
using StepObserver = std::function<void(std::size_t sample, std::size_t t, const Tensor& conditioning)>;

struct GenerateResult {
  std::vector<Image> images;
  std::vector<Tensor> latents;  // final x_0 per sample, before decoding
  TextEmbedding conditioning;
  std::vector<AttentionRecord> attention;  // one per sample when recorded
};

// Sample i starts from its own stream Rng(seed, i), so results do not depend
// on how many samples are drawn alongside it.
inline GenerateResult sample_embedding(const TextEmbedding& e, const Pipeline& pl, const SampleConfig& cfg,
                                       const StepObserver& observer = {}) {
  if (!all_frozen(pl.params)) throw ContractError("generate: model parameters must be frozen");
  const std::size_t T = pl.schedule.steps();
  if (cfg.record_attention && (cfg.attention_t < 1 || cfg.attention_t > T))
    throw IndexError("generate: attention step " + std::to_string(cfg.attention_t) + " outside [1," +
                     std::to_string(T) + "]");
  NoGradGuard no_grad;
  GenerateResult out;
  out.conditioning = e;
  // Pixel-space latents live in [-1, 1]; learned latents have no fixed range.
  const bool clamp = cfg.clamp_x0 && pl.config.codec.kind == CodecKind::identity;
  const Shape shape{pl.model.image_size, pl.model.image_size, pl.model.in_channels};
  for (std::size_t i = 0; i < cfg.count; ++i) {
    Rng rng(cfg.seed, i);
    Tensor x = Tensor::randn(shape, rng);
    for (std::size_t t = T; t >= 1; --t) {
      if (observer) observer(i, t, e.mat);
      const bool rec = cfg.record_attention && t == cfg.attention_t;
      auto d = denoise(x, t, e.mat, pl.params, pl.model, rec);
      if (rec) out.attention.push_back(std::move(*d.attention));
      if (clamp) d.eps = clamp_eps(x, t, d.eps, pl.schedule, 1.0);
      Tensor noise = t > 1 ? Tensor::randn(shape, rng) : Tensor(shape, 0.0);
      x = reverse_step(x, t, d.eps, pl.schedule, noise);
    }
    out.images.push_back(decode_latent(x, pl.codec));
    out.latents.push_back(std::move(x));
  }
  return out;
}

inline TextEmbedding composite_embedding(const std::string& target_prompt, const Tensor& hiper_tail,
                                         const Pipeline& pl, double alpha) {
  const std::size_t M = pl.model.tokens;
  if (hiper_tail.rank() != 2 || hiper_tail.dim(0) != pl.model.embed_dim)
    throw DimensionError("generate: tail " + shape_str(hiper_tail.shape()) + " does not match embedding dim " +
                         std::to_string(pl.model.embed_dim));
  const std::size_t n = hiper_tail.dim(1);
  if (n > M) throw ParameterError("generate: tail has more than M columns");
  const auto seq = tokenize(target_prompt, pl.vocab, M);
  if (seq.pad_count() < n)
    throw PreconditionError("generate: prompt '" + target_prompt + "' leaves " + std::to_string(seq.pad_count()) +
                            " pad positions, N=" + std::to_string(n) + " needed");
  return compose(split_embedding(pl.encode(target_prompt), n).head, hiper_tail, alpha);
}

// Target head + alpha-scaled personalized tail.
inline GenerateResult generate(const std::string& target_prompt, const Tensor& hiper_tail, const Pipeline& pl,
                               const SampleConfig& cfg, const StepObserver& observer = {}) {
  return sample_embedding(composite_embedding(target_prompt, hiper_tail, pl, cfg.alpha), pl, cfg, observer);
}

// Plain conditional sampling from encode(prompt).
inline GenerateResult generate_baseline(const std::string& prompt, const Pipeline& pl, const SampleConfig& cfg) {
  return sample_embedding(pl.encode(prompt), pl, cfg);
}

}  // namespace hiper
