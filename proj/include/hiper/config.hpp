#pragma once

// Run configuration shared by the library entry points and the CLI, with
// JSON round-tripping. Paths are not part of the config; they live in the
// manifests the CLI writes.

#include <array>
#include <cstdint>
#include <string>
#include <utility>

#include <json.hpp>

#include "hiper/errors.hpp"
#include "hiper/model.hpp"
#include "hiper/schedule.hpp"
#include "hiper/text.hpp"

namespace hiper {

enum class OptimizerKind { adam, sgd };
enum class TrainMode { pretrain, hiper, full_embedding };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  bool operator==(const OptimizerConfig&) const = default;
};

struct TrainConfig {
  std::size_t steps = 1000;
  double lr = 5e-3;
  std::size_t batch = 1;
  std::uint64_t seed = 0;
  OptimizerConfig optimizer;
  TrainMode mode = TrainMode::hiper;
  std::size_t n_tokens = 3;
  TailInit tail_init = TailInit::pad_copy;
  double init_std = 0.02;
  double ema_decay = 0.0;  // pretraining only; 0 disables the averaged copy

  bool operator==(const TrainConfig&) const = default;
};

struct SampleConfig {
  std::uint64_t seed = 0;
  double alpha = 0.8;
  std::size_t count = 1;
  bool record_attention = false;
  std::size_t attention_t = 1;
  bool clamp_x0 = true;  // clamp the implied clean image to the data range at every step

  bool operator==(const SampleConfig&) const = default;
};

struct ScheduleConfig {
  double beta_start = 1e-3;
  double beta_end = 0.2;

  bool operator==(const ScheduleConfig&) const = default;
};

struct CodecConfig {
  CodecKind kind = CodecKind::identity;
  std::size_t latent_channels = 4;
  std::size_t hidden = 16;
  std::size_t steps = 1500;
  double lr = 2e-3;

  bool operator==(const CodecConfig&) const = default;
};

struct DataConfig {
  std::size_t count = 2000;
  std::size_t size = 32;  // canvas side in pixels
  std::uint64_t seed = 0;

  bool operator==(const DataConfig&) const = default;
};

inline TrainConfig default_pretrain_config() {
  TrainConfig c;
  c.steps = 10000;
  c.lr = 1e-3;
  c.batch = 3;
  c.mode = TrainMode::pretrain;
  c.ema_decay = 0.999;
  return c;
}

struct RunConfig {
  ModelConfig model;
  ScheduleConfig schedule;
  CodecConfig codec;
  DataConfig data;
  TrainConfig pretrain = default_pretrain_config();
  TrainConfig train;
  SampleConfig sample;
  std::uint64_t seed = 0;

  // Train/sample configs with the run seed applied.
  TrainConfig pretrain_config() const {
    auto c = pretrain;
    c.seed = seed;
    return c;
  }
  TrainConfig train_config() const {
    auto c = train;
    c.seed = seed;
    return c;
  }
  SampleConfig sample_config() const {
    auto c = sample;
    c.seed = seed;
    return c;
  }

  NoiseSchedule make_noise_schedule() const {
    return make_schedule(model.steps, schedule.beta_start, schedule.beta_end);
  }

  bool operator==(const RunConfig&) const = default;
};

namespace detail {

template <typename E, std::size_t K>
using EnumNames = std::array<std::pair<E, const char*>, K>;

template <typename E, std::size_t K>
void enum_to_json(nlohmann::json& j, E v, const EnumNames<E, K>& names) {
  for (const auto& [e, n] : names)
    if (e == v) {
      j = n;
      return;
    }
  throw FormatError("config: enum value out of range");
}

// Unknown names are rejected rather than mapped to a default.
template <typename E, std::size_t K>
void enum_from_json(const nlohmann::json& j, E& v, const EnumNames<E, K>& names, const char* what) {
  if (!j.is_string()) throw FormatError(std::string("config: ") + what + " must be a string");
  const auto s = j.get<std::string>();
  for (const auto& [e, n] : names)
    if (s == n) {
      v = e;
      return;
    }
  throw FormatError(std::string("config: unknown ") + what + " '" + s + "'");
}

inline constexpr EnumNames<OptimizerKind, 2> kOptimizerNames{{{OptimizerKind::adam, "adam"}, {OptimizerKind::sgd, "sgd"}}};
inline constexpr EnumNames<TrainMode, 3> kModeNames{{{TrainMode::pretrain, "pretrain"},
                                                     {TrainMode::hiper, "hiper"},
                                                     {TrainMode::full_embedding, "full-embedding"}}};
inline constexpr EnumNames<TailInit, 2> kTailInitNames{{{TailInit::pad_copy, "pad-copy"}, {TailInit::gaussian, "gaussian"}}};
inline constexpr EnumNames<CodecKind, 2> kCodecNames{{{CodecKind::identity, "identity"},
                                                      {CodecKind::tiny_autoencoder, "tiny-autoencoder"}}};

}  // namespace detail

inline void to_json(nlohmann::json& j, OptimizerKind v) { detail::enum_to_json(j, v, detail::kOptimizerNames); }
inline void from_json(const nlohmann::json& j, OptimizerKind& v) {
  detail::enum_from_json(j, v, detail::kOptimizerNames, "optimizer");
}
inline void to_json(nlohmann::json& j, TrainMode v) { detail::enum_to_json(j, v, detail::kModeNames); }
inline void from_json(const nlohmann::json& j, TrainMode& v) { detail::enum_from_json(j, v, detail::kModeNames, "mode"); }
inline void to_json(nlohmann::json& j, TailInit v) { detail::enum_to_json(j, v, detail::kTailInitNames); }
inline void from_json(const nlohmann::json& j, TailInit& v) {
  detail::enum_from_json(j, v, detail::kTailInitNames, "tail init");
}
inline void to_json(nlohmann::json& j, CodecKind v) { detail::enum_to_json(j, v, detail::kCodecNames); }
inline void from_json(const nlohmann::json& j, CodecKind& v) { detail::enum_from_json(j, v, detail::kCodecNames, "codec"); }

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ModelConfig, image_size, in_channels, ch1, ch2, groups, time_dim,
                                                temb_dim, embed_dim, tokens, steps, init_seed)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(OptimizerConfig, kind, beta1, beta2, eps)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ScheduleConfig, beta_start, beta_end)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(CodecConfig, kind, latent_channels, hidden, steps, lr)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DataConfig, count, size, seed)

// Seeds are omitted from the nested configs; RunConfig::seed is the single source.
inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"steps", c.steps},         {"lr", c.lr},         {"batch", c.batch},           {"optimizer", c.optimizer},
       {"mode", c.mode},           {"n_tokens", c.n_tokens}, {"tail_init", c.tail_init}, {"init_std", c.init_std},
       {"ema_decay", c.ema_decay}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  const TrainConfig d = c;
  c.steps = j.value("steps", d.steps);
  c.lr = j.value("lr", d.lr);
  c.batch = j.value("batch", d.batch);
  c.optimizer = j.value("optimizer", d.optimizer);
  c.mode = j.value("mode", d.mode);
  c.n_tokens = j.value("n_tokens", d.n_tokens);
  c.tail_init = j.value("tail_init", d.tail_init);
  c.init_std = j.value("init_std", d.init_std);
  c.ema_decay = j.value("ema_decay", d.ema_decay);
}

inline void to_json(nlohmann::json& j, const SampleConfig& c) {
  j = {{"alpha", c.alpha},
       {"count", c.count},
       {"record_attention", c.record_attention},
       {"attention_t", c.attention_t},
       {"clamp_x0", c.clamp_x0}};
}

inline void from_json(const nlohmann::json& j, SampleConfig& c) {
  const SampleConfig d = c;
  c.alpha = j.value("alpha", d.alpha);
  c.count = j.value("count", d.count);
  c.record_attention = j.value("record_attention", d.record_attention);
  c.attention_t = j.value("attention_t", d.attention_t);
  c.clamp_x0 = j.value("clamp_x0", d.clamp_x0);
}

inline void to_json(nlohmann::json& j, const RunConfig& c) {
  j = {{"model", c.model}, {"schedule", c.schedule}, {"codec", c.codec}, {"data", c.data},
       {"pretrain", c.pretrain}, {"train", c.train}, {"sample", c.sample}, {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, RunConfig& c) {
  if (!j.is_object()) throw FormatError("config: expected a JSON object");
  const RunConfig d;
  c.model = j.value("model", d.model);
  c.schedule = j.value("schedule", d.schedule);
  c.codec = j.value("codec", d.codec);
  c.data = j.value("data", d.data);
  // Fields absent from the file keep the pretraining defaults.
  c.pretrain = d.pretrain;
  if (j.contains("pretrain")) from_json(j.at("pretrain"), c.pretrain);
  c.train = j.value("train", d.train);
  c.sample = j.value("sample", d.sample);
  c.seed = j.value("seed", d.seed);
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  try {
    return j.get<RunConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("config: ") + e.what());
  }
}

}  // namespace hiper
