#pragma once

// Optimizers, denoiser pretraining, codec pretraining, and the two
// embedding optimizations against a frozen model: tail-only (HiPer) and
// whole-embedding.

#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "hiper/config.hpp"
#include "hiper/data.hpp"
#include "hiper/errors.hpp"
#include "hiper/model.hpp"
#include "hiper/pipeline.hpp"
#include "hiper/random.hpp"
#include "hiper/schedule.hpp"
#include "hiper/tensor.hpp"
#include "hiper/text.hpp"

namespace hiper {

using ProgressFn = std::function<void(std::size_t step, double loss)>;

// Adam or SGD over a fixed list of tensors. Tensors that do not require grad
// get no state and are never touched.
class Optimizer {
 public:
  Optimizer(const std::vector<Tensor>& params, double lr, OptimizerConfig cfg = {}) : lr_(lr), cfg_(cfg) {
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ParameterError("optimizer: learning rate must be finite and >= 0");
    for (const auto& p : params) {
      if (!p.requires_grad()) continue;
      params_.push_back(p);
      if (cfg_.kind == OptimizerKind::adam) {
        m_.emplace_back(p.size(), 0.0);
        v_.emplace_back(p.size(), 0.0);
      }
    }
  }

  // Applies one update from the current grads, then zeroes them.
  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor& p = params_[i];
      auto data = p.data();
      if (!p.has_grad()) p.grad_mut();
      auto g = p.grad();
      if (cfg_.kind == OptimizerKind::sgd) {
        for (std::size_t j = 0; j < data.size(); ++j) data[j] -= lr_ * g[j];
      } else {
        auto& m = m_[i];
        auto& v = v_[i];
        for (std::size_t j = 0; j < data.size(); ++j) {
          m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
          v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
          data[j] -= lr_ * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg_.eps);
        }
      }
      p.zero_grad();
    }
  }

  std::size_t step_count() const { return t_; }
  std::size_t state_count() const { return m_.size(); }
  const std::vector<double>& first_moment(std::size_t i) const { return m_.at(i); }
  const std::vector<double>& second_moment(std::size_t i) const { return v_.at(i); }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  double lr_;
  OptimizerConfig cfg_;
  std::size_t t_ = 0;
};

namespace detail {

[[noreturn]] inline void non_finite_loss(const char* where, std::size_t step, double lr,
                                         const std::vector<double>& losses) {
  std::ostringstream os;
  os << where << ": non-finite loss at step " << step << " (lr " << lr << "); last losses:";
  const std::size_t from = losses.size() > 10 ? losses.size() - 10 : 0;
  for (std::size_t i = from; i < losses.size(); ++i) os << ' ' << losses[i];
  throw NumericError(os.str());
}

inline std::vector<Tensor> handles(const NamedTensors& named) {
  std::vector<Tensor> out;
  for (const auto& [n, t] : named) out.push_back(t);
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Codec pretraining (tiny autoencoder only)

inline std::vector<double> pretrain_codec(Codec& codec, const std::vector<Image>& images, std::size_t steps,
                                          double lr, std::uint64_t seed, ProgressFn progress = {}) {
  std::vector<double> losses;
  if (codec.kind == CodecKind::identity) return losses;
  if (images.empty()) throw PreconditionError("pretrain_codec: no images");
  auto params = detail::handles(codec.named_parameters());
  for (auto& p : params) p.set_requires_grad(true);
  Optimizer opt(params, lr);
  Rng rng(seed, 0xC0DE);
  for (std::size_t step = 1; step <= steps; ++step) {
    Tensor x = image_to_tensor(images[rng.uniform_int(0, images.size() - 1)]);
    Tensor loss = mse(codec.decode_tensor(codec.encode_tensor(x)), x);
    const double l = loss.item();
    losses.push_back(l);
    if (!std::isfinite(l)) detail::non_finite_loss("pretrain_codec", step, lr, losses);
    backward(loss);
    opt.step();
    if (progress) progress(step, l);
  }
  for (auto& p : params) p.set_requires_grad(false).clear_grad();
  return losses;
}

// ---------------------------------------------------------------------------
// Denoiser pretraining

// Trains the denoiser and text table of pl on ds. Each step draws a batch of
// scenes, a uniform timestep and fresh noise per scene. Returns per-step
// mean losses. pl comes back frozen.
inline std::vector<double> pretrain_denoiser(Pipeline& pl, const Dataset& ds, const TrainConfig& cfg,
                                             ProgressFn progress = {}) {
  if (ds.scenes.empty()) throw PreconditionError("pretrain: dataset is empty");
  if (cfg.mode != TrainMode::pretrain) throw ContractError("pretrain: config mode must be pretrain");
  if (cfg.batch < 1) throw ParameterError("pretrain: batch must be >= 1");

  std::vector<Tensor> latents;
  std::vector<TokenSequence> tokens;
  for (const auto& s : ds.scenes) {
    latents.push_back(encode_image(s.image, pl.codec));
    tokens.push_back(tokenize(s.caption, pl.vocab, pl.model.tokens));
  }

  set_frozen(pl.params, false);
  pl.table.set_requires_grad(true);
  auto params = detail::handles(pl.trainable_parameters());
  Optimizer opt(params, cfg.lr, cfg.optimizer);

  std::vector<std::vector<double>> ema;
  if (cfg.ema_decay > 0.0)
    for (const auto& p : params) ema.push_back(p.values());

  Rng rng(cfg.seed, 0x9E7A);
  const std::size_t T = pl.schedule.steps();
  const double inv_batch = 1.0 / static_cast<double>(cfg.batch);
  std::vector<double> losses;
  losses.reserve(cfg.steps);
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    double total = 0.0;
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      const std::size_t i = rng.uniform_int(0, ds.scenes.size() - 1);
      const std::size_t t = rng.uniform_int(1, T);
      Tensor eps = Tensor::randn(latents[i].shape(), rng);
      Tensor xt = forward_diffuse(latents[i], t, eps, pl.schedule);
      Tensor e = embed_tokens(tokens[i], pl.table);
      Tensor loss = mse(denoise(xt, t, e, pl.params, pl.model).eps, eps);
      total += loss.item();
      backward(scale(loss, inv_batch));
    }
    const double mean_loss = total * inv_batch;
    losses.push_back(mean_loss);
    if (!std::isfinite(mean_loss)) detail::non_finite_loss("pretrain", step, cfg.lr, losses);
    opt.step();
    if (!ema.empty()) {
      // Warm-up keeps early averages from being dominated by the initialization.
      const double d = std::min(cfg.ema_decay, (1.0 + step) / (10.0 + step));
      for (std::size_t k = 0; k < params.size(); ++k) {
        const auto p = params[k].data();
        for (std::size_t j = 0; j < p.size(); ++j) ema[k][j] += (1.0 - d) * (p[j] - ema[k][j]);
      }
    }
    if (progress) progress(step, mean_loss);
  }
  if (!ema.empty())
    for (std::size_t k = 0; k < params.size(); ++k) std::copy(ema[k].begin(), ema[k].end(), params[k].data().begin());
  for (auto& p : params) p.clear_grad();
  pl.freeze();
  return losses;
}

struct PretrainResult {
  Pipeline pipeline;
  std::vector<double> losses;
  std::vector<double> codec_losses;
};

// Builds a fresh pipeline for rc, trains the codec (if any) and the denoiser.
inline PretrainResult pretrain(const Dataset& ds, const RunConfig& rc, ProgressFn progress = {}) {
  if (ds.scenes.empty()) throw PreconditionError("pretrain: dataset is empty");
  PretrainResult r{make_pipeline(rc, ds.scenes.front().image.height, ds.vocab), {}, {}};
  if (rc.codec.kind != CodecKind::identity) {
    std::vector<Image> images;
    for (const auto& s : ds.scenes) images.push_back(s.image);
    r.codec_losses = pretrain_codec(r.pipeline.codec, images, rc.codec.steps, rc.codec.lr, rc.seed);
  }
  r.losses = pretrain_denoiser(r.pipeline, ds, rc.pretrain_config(), std::move(progress));
  return r;
}

// ---------------------------------------------------------------------------
// Embedding optimization against a frozen model

struct EmbeddingFit {
  Tensor head;       // fixed leading columns, [C, M - N]; empty for whole-embedding fits
  Tensor trainable;  // optimized columns
  TextEmbedding source;
  std::vector<double> losses;

  // The optimized conditioning, [head, trainable].
  TextEmbedding embedding() const {
    NoGradGuard no_grad;
    Tensor mat = head.defined() && head.dim(1) > 0 ? concat({head, trainable}, 1) : trainable.clone();
    return {mat, Provenance::optimized};
  }
};

namespace detail {

inline void check_frozen(const Pipeline& pl, const char* where) {
  if (!all_frozen(pl.params) || pl.table.requires_grad())
    throw ContractError(std::string(where) + ": model parameters must be frozen");
}

inline void check_canvas(const Image& image, const Pipeline& pl, const char* where) {
  if (image.height != pl.canvas || image.width != pl.canvas)
    throw DimensionError(std::string(where) + ": image " + std::to_string(image.height) + "x" +
                         std::to_string(image.width) + " does not match canvas " + std::to_string(pl.canvas));
}

// Shared step loop: per step a uniform t, fresh noise, the noised latent, and
// one optimizer update of `trainable` only.
inline std::vector<double> fit_columns(const Tensor& x0, const Tensor& head, Tensor& trainable, const Pipeline& pl,
                                       const TrainConfig& cfg, const char* where, const ProgressFn& progress) {
  Optimizer opt({trainable}, cfg.lr, cfg.optimizer);
  Rng rng(cfg.seed, 0xE4BED);
  const std::size_t T = pl.schedule.steps();
  const bool has_head = head.defined() && head.dim(1) > 0;
  std::vector<double> losses;
  losses.reserve(cfg.steps);
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    const std::size_t t = rng.uniform_int(1, T);
    Tensor eps = Tensor::randn(x0.shape(), rng);
    Tensor xt = forward_diffuse(x0, t, eps, pl.schedule);
    Tensor e = has_head ? concat({head, trainable}, 1) : trainable;
    Tensor loss = mse(eps, denoise(xt, t, e, pl.params, pl.model).eps);
    const double l = loss.item();
    losses.push_back(l);
    if (!std::isfinite(l)) non_finite_loss(where, step, cfg.lr, losses);
    backward(loss);
    opt.step();
    if (progress) progress(step, l);
  }
  return losses;
}

}  // namespace detail

// Optimizes only the last N columns of encode(src_prompt); the head and the
// model stay bit-identical.
inline EmbeddingFit optimize_hiper(const Image& image, const std::string& src_prompt, const Pipeline& pl,
                                   const TrainConfig& cfg, ProgressFn progress = {}) {
  detail::check_frozen(pl, "optimize_hiper");
  detail::check_canvas(image, pl, "optimize_hiper");
  const std::size_t M = pl.model.tokens, n = cfg.n_tokens;
  if (n < 1 || n > M)
    throw ParameterError("optimize_hiper: N=" + std::to_string(n) + " outside [1," + std::to_string(M) + "]");
  const auto seq = tokenize(src_prompt, pl.vocab, M);
  if (seq.pad_count() < n)
    throw PreconditionError("optimize_hiper: prompt '" + src_prompt + "' leaves " + std::to_string(seq.pad_count()) +
                            " pad positions, N=" + std::to_string(n) + " needed");

  EmbeddingFit fit;
  fit.source = pl.encode(src_prompt);
  fit.head = split_embedding(fit.source, n).head;
  Rng init_rng(cfg.seed, 0x1417);
  fit.trainable = init_hiper(fit.source, n, cfg.tail_init, cfg.init_std, init_rng);
  const Tensor x0 = encode_image(image, pl.codec);
  fit.losses = detail::fit_columns(x0, fit.head, fit.trainable, pl, cfg, "optimize_hiper", progress);
  fit.trainable.set_requires_grad(false).clear_grad();
  return fit;
}

// Optimizes every column of encode(src_prompt).
inline EmbeddingFit optimize_full_embedding(const Image& image, const std::string& src_prompt, const Pipeline& pl,
                                            const TrainConfig& cfg, ProgressFn progress = {}) {
  detail::check_frozen(pl, "optimize_full_embedding");
  detail::check_canvas(image, pl, "optimize_full_embedding");
  EmbeddingFit fit;
  fit.source = pl.encode(src_prompt);
  fit.trainable = fit.source.mat.clone();
  fit.trainable.set_requires_grad(true);
  const Tensor x0 = encode_image(image, pl.codec);
  fit.losses = detail::fit_columns(x0, Tensor(), fit.trainable, pl, cfg, "optimize_full_embedding", progress);
  fit.trainable.set_requires_grad(false).clear_grad();
  return fit;
}

}  // namespace hiper
