#pragma once

// Everything a trained lab run needs in one place: the noise schedule, codec,
// denoiser parameters, text table and vocabulary, plus checkpoint round trips.

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "hiper/config.hpp"
#include "hiper/io.hpp"
#include "hiper/model.hpp"
#include "hiper/schedule.hpp"
#include "hiper/text.hpp"

namespace hiper {

inline constexpr const char* kTableName = "embedding.table";
inline constexpr const char* kTailName = "hiper_tail";
inline constexpr const char* kFullEmbeddingName = "full_embedding";

// Denoiser geometry implied by the canvas size and codec.
inline ModelConfig denoiser_config(const RunConfig& rc, std::size_t canvas) {
  ModelConfig m = rc.model;
  if (rc.codec.kind == CodecKind::identity) {
    m.image_size = canvas;
    m.in_channels = 3;
  } else {
    m.image_size = canvas / 2;
    m.in_channels = rc.codec.latent_channels;
  }
  return m;
}

struct Pipeline {
  RunConfig config;
  std::size_t canvas = 32;
  ModelConfig model;
  NoiseSchedule schedule;
  Codec codec;
  DenoiserParams params;
  Tensor table;  // [C, V]
  Vocab vocab;

  TextEmbedding encode(const std::string& prompt) const { return hiper::encode(prompt, vocab, table, model.tokens); }

  NamedTensors trainable_parameters() const {
    auto out = named_parameters(params);
    out.emplace_back(kTableName, table);
    return out;
  }

  void freeze() {
    set_frozen(params, true);
    table.set_requires_grad(false);
  }
};

inline Pipeline make_pipeline(const RunConfig& rc, std::size_t canvas, Vocab vocab) {
  Pipeline pl;
  pl.config = rc;
  pl.canvas = canvas;
  pl.model = denoiser_config(rc, canvas);
  pl.schedule = rc.make_noise_schedule();
  pl.codec = rc.codec.kind == CodecKind::identity
                 ? Codec::identity()
                 : Codec::tiny_autoencoder(rc.codec.latent_channels, rc.model.init_seed, rc.codec.hidden);
  pl.params = init_denoiser(pl.model);
  pl.vocab = std::move(vocab);
  Rng rng(rc.model.init_seed, 0x7AB1E);
  pl.table = Tensor::randn({pl.model.embed_dim, pl.vocab.size()}, rng);
  return pl;
}

inline nlohmann::json pipeline_header(const Pipeline& pl) {
  std::vector<std::string> words(pl.vocab.words().begin() + 1, pl.vocab.words().end());
  return {{"kind", "pipeline"}, {"config", pl.config}, {"canvas", pl.canvas}, {"vocab", words}};
}

// Writes the checkpoint plus a vocab.tsv beside it; returns the checkpoint hash.
inline std::string save_pipeline(const std::filesystem::path& path, const Pipeline& pl) {
  Checkpoint ck;
  ck.config = pipeline_header(pl);
  ck.tensors = pl.trainable_parameters();
  for (auto& nt : pl.codec.named_parameters()) ck.tensors.push_back(nt);
  auto hash = save_checkpoint(path, ck);
  pl.vocab.save((path.parent_path() / "vocab.tsv").string());
  return hash;
}

// Loaded pipelines come back frozen.
inline Pipeline load_pipeline(const std::filesystem::path& path) {
  const Checkpoint ck = load_checkpoint(path);
  if (ck.config.value("kind", "") != "pipeline") throw FormatError("checkpoint: " + path.string() + " is not a model checkpoint");
  const RunConfig rc = run_config_from_json(ck.config.at("config"));
  Pipeline pl = make_pipeline(rc, ck.config.at("canvas").get<std::size_t>(),
                              Vocab(ck.config.at("vocab").get<std::vector<std::string>>()));
  assign_parameters(pl.trainable_parameters(), ck);
  assign_parameters(pl.codec.named_parameters(), ck);
  pl.freeze();
  return pl;
}

}  // namespace hiper
