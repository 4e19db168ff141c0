// hiper_lab: command-line driver for the personalization lab.
//
// Every command writes into its output directory a manifest.json holding the
// command name, the full run config, the resolved inputs, the hash of the
// model checkpoint it read and a hash of every artifact it wrote, plus a
// separate timing.json. Passing a manifest back through --config re-runs the
// command with the same config and inputs.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "hiper/hiper.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace hiper;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class InputKind { path, text, list };

class Run;

struct Command {
  std::string name;
  CLI::App* app = nullptr;
  std::string config_path;
  std::string out_dir;
  std::vector<std::function<void(RunConfig&)>> overrides;
  struct Input {
    std::string value;
    std::vector<std::string> values;
    InputKind kind = InputKind::text;
    CLI::Option* opt = nullptr;
  };
  std::map<std::string, Input> inputs;
  std::function<int(Run&)> body;
};

// Adds a flag that, when given, overrides one config field.
template <typename T, typename Apply>
CLI::Option* flag(Command& c, const std::string& names, const std::string& desc, Apply apply) {
  auto value = std::make_shared<T>();
  CLI::Option* opt = c.app->add_option(names, *value, desc);
  c.overrides.push_back([value, opt, apply](RunConfig& rc) {
    if (opt->count() > 0) apply(rc, *value);
  });
  return opt;
}

template <typename E>
E enum_value(const std::string& s) {
  return json(s).get<E>();
}

void input(Command& c, const std::string& name, InputKind kind, const std::string& desc) {
  auto& in = c.inputs[name];
  in.kind = kind;
  in.opt = kind == InputKind::list ? c.app->add_option("--" + name, in.values, desc)
                                   : c.app->add_option("--" + name, in.value, desc);
}

std::string hash_of(const fs::path& p) { return file_hash(p); }

class Run {
 public:
  Run(const Command& cmd, RunConfig rc, json inputs, std::string expected_hash, fs::path out)
      : cmd_(cmd), rc(std::move(rc)), inputs_(std::move(inputs)), expected_hash_(std::move(expected_hash)),
        out(std::move(out)) {}

  const Command& cmd_;
  RunConfig rc;
  json inputs_;
  std::string expected_hash_;
  fs::path out;
  std::string checkpoint_hash;
  std::vector<fs::path> outputs;
  json timing = json::object();

  std::string get(const std::string& name) const { return inputs_.value(name, std::string()); }

  std::vector<std::string> get_list(const std::string& name) const {
    return inputs_.value(name, std::vector<std::string>());
  }

  std::string need(const std::string& name) const {
    auto v = get(name);
    if (v.empty()) throw UsageError(cmd_.name + ": --" + name + " is required");
    return v;
  }

  // Records a file written into the output directory.
  fs::path emit(const fs::path& rel) {
    outputs.push_back(rel);
    return out / rel;
  }

  Pipeline load_model() {
    const fs::path path = need("model");
    if (!fs::exists(path)) throw IoError("model checkpoint " + path.string() + " not found");
    checkpoint_hash = hash_of(path);
    if (!expected_hash_.empty() && expected_hash_ != checkpoint_hash)
      throw ContractError("checkpoint " + path.string() + " has hash " + checkpoint_hash + ", manifest expects " +
                          expected_hash_);
    auto pl = load_pipeline(path);
    // The architecture and its training belong to the checkpoint; record those.
    rc.model = pl.config.model;
    rc.schedule = pl.config.schedule;
    rc.codec = pl.config.codec;
    rc.data = pl.config.data;
    rc.pretrain = pl.config.pretrain;
    return pl;
  }

  Image load_image(const std::string& name) { return read_ppm(need(name)); }

  void time(const std::string& phase, double seconds) { timing[phase] = seconds; }
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

ProgressFn step_printer(const std::string& what, std::size_t total) {
  const std::size_t every = std::max<std::size_t>(1, total / 10);
  return [what, total, every](std::size_t step, double loss) {
    if (step % every == 0 || step == total)
      std::fprintf(stderr, "%s: step %zu/%zu loss %.6f\n", what.c_str(), step, total, loss);
  };
}

// "shape=circle,position=right" or, if empty, every attribute word in `prompt`.
AttrTarget parse_target(const std::string& spec, const std::string& prompt) {
  AttrTarget t;
  if (spec.empty()) {
    std::istringstream words(prompt);
    for (std::string w; words >> w;) {
      for (std::size_t i = 0; i < kShapes.size(); ++i)
        if (w == kShapes[i]) t.shape = i;
      for (std::size_t i = 0; i < kColors.size(); ++i)
        if (w == kColors[i].name) t.color = i;
      for (std::size_t i = 0; i < kPositions.size(); ++i)
        if (w == kPositions[i]) t.position = i;
    }
    return t;
  }
  std::stringstream ss(spec);
  for (std::string item; std::getline(ss, item, ',');) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw UsageError("--target: expected key=value, got '" + item + "'");
    const auto key = item.substr(0, eq), value = item.substr(eq + 1);
    if (key == "shape") t.shape = index_of(kShapes, value, "shape");
    else if (key == "color") t.color = color_index(value);
    else if (key == "position") t.position = index_of(kPositions, value, "position");
    else throw UsageError("--target: unknown attribute '" + key + "'");
  }
  return t;
}

std::size_t parse_texture(const std::string& s) {
  if (s.empty()) return kHeldOutTexture;
  try {
    const auto v = std::stoul(s);
    check_texture(v);
    return v;
  } catch (const std::logic_error&) {
    throw UsageError("--source-texture: expected an id below " + std::to_string(kTextureCount) + ", got '" + s + "'");
  }
}

std::vector<std::size_t> parse_ns(const std::string& s) {
  std::vector<std::size_t> ns;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) {
    try {
      ns.push_back(std::stoul(item));
    } catch (const std::logic_error&) {
      throw UsageError("--ns: expected comma-separated integers, got '" + s + "'");
    }
  }
  if (ns.empty()) throw UsageError("--ns: empty list");
  return ns;
}

json report_summary(const MetricReport& r) {
  return {{"count", r.count},
          {"semantic_accuracy", r.semantic_accuracy},
          {"identity_similarity", r.identity_similarity},
          {"identity_match", r.identity_match},
          {"mean_distance", r.mean_distance}};
}

json loss_summary(const std::vector<double>& losses) {
  const std::size_t w = std::min<std::size_t>(100, losses.size());
  if (w == 0) return json::object();
  double lead = 0, trail = 0;
  for (std::size_t i = 0; i < w; ++i) {
    lead += losses[i] / static_cast<double>(w);
    trail += losses[losses.size() - w + i] / static_cast<double>(w);
  }
  return {{"steps", losses.size()}, {"window", w}, {"leading_mean", lead}, {"trailing_mean", trail},
          {"ratio", trail / lead}};
}

void write_samples(Run& run, const GenerateResult& g) {
  char name[32];
  Checkpoint latents;
  latents.config = {{"kind", "latents"}};
  for (std::size_t i = 0; i < g.images.size(); ++i) {
    std::snprintf(name, sizeof name, "sample_%03zu.ppm", i);
    write_ppm(run.emit(name).string(), g.images[i]);
    std::snprintf(name, sizeof name, "sample_%03zu", i);
    latents.tensors.emplace_back(name, g.latents[i]);
  }
  write_ppm(run.emit("grid.ppm").string(), tile_images({g.images}));
  save_checkpoint(run.emit("latents.ckpt"), latents);
}

// Optional evaluation of generated samples when --target is given.
void maybe_evaluate(Run& run, const GenerateResult& g, const std::string& prompt, std::size_t canvas) {
  if (run.get("target").empty()) return;
  auto report = evaluate(g.images, parse_target(run.get("target"), prompt), parse_texture(run.get("source-texture")),
                         canvas);
  write_json(run.emit("report.json"), report_json(report));
  write_report_csv(run.emit("report.csv"), report);
  std::cout << report_summary(report).dump() << '\n';
}

struct StoredEmbedding {
  std::string kind;
  Tensor mat;
  json header;
};

StoredEmbedding load_embedding(const fs::path& path) {
  auto ck = load_checkpoint(path);
  const auto kind = ck.config.value("kind", "");
  if (kind == "hiper") return {kind, ck.get(kTailName), ck.config};
  if (kind == "full-embedding") return {kind, ck.get(kFullEmbeddingName), ck.config};
  throw FormatError("checkpoint " + path.string() + " holds neither a personalized tail nor a full embedding");
}

Checkpoint embedding_checkpoint(const Run& run, const std::string& kind, const std::string& tensor_name,
                                const Tensor& t, const std::string& src) {
  Checkpoint ck;
  ck.config = {{"kind", kind},
               {"n_tokens", run.rc.train.n_tokens},
               {"src_prompt", src},
               {"model_hash", run.checkpoint_hash},
               {"config", run.rc}};
  ck.tensors.emplace_back(tensor_name, t);
  return ck;
}

// ---------------------------------------------------------------------------
// Command bodies

int cmd_dataset_gen(Run& run) {
  const auto& d = run.rc.data;
  auto ds = gen_dataset(d.count, d.seed, d.size);
  write_dataset(ds, run.out);
  char name[32];
  for (std::size_t i = 0; i < ds.scenes.size(); ++i) {
    std::snprintf(name, sizeof name, "scene_%05zu.ppm", i);
    run.outputs.push_back(name);
  }
  run.outputs.push_back("manifest.jsonl");
  run.outputs.push_back("vocab.tsv");
  std::cout << "wrote " << ds.scenes.size() << " scenes to " << run.out.string() << '\n';
  return 0;
}

int cmd_dataset_render(Run& run) {
  const auto a = make_attrs(run.need("shape"), run.need("color"), run.need("position"));
  const auto tex = parse_texture(run.get("texture").empty() ? "0" : run.get("texture"));
  write_ppm(run.emit("image.ppm").string(), render_scene(a, tex, run.rc.data.size));
  std::cout << caption_for(a, tex == kHeldOutTexture ? 0 : tex) << '\n';
  return 0;
}

int cmd_pretrain(Run& run) {
  auto t0 = std::chrono::steady_clock::now();
  const Dataset ds = run.get("data").empty() ? gen_dataset(run.rc.data.count, run.rc.data.seed, run.rc.data.size)
                                             : read_dataset(run.get("data"));
  run.time("dataset_seconds", seconds_since(t0));
  t0 = std::chrono::steady_clock::now();
  auto r = pretrain(ds, run.rc, step_printer("pretrain", run.rc.pretrain.steps));
  run.time("train_seconds", seconds_since(t0));
  const auto hash = save_pipeline(run.emit("model.ckpt"), r.pipeline);
  run.outputs.push_back("vocab.tsv");
  write_loss_csv(run.emit("loss.csv"), r.losses);
  if (!r.codec_losses.empty()) write_loss_csv(run.emit("codec_loss.csv"), r.codec_losses);
  std::cout << "model " << (run.out / "model.ckpt").string() << " hash " << hash << '\n';
  return 0;
}

TrainConfig fit_config(const Run& run, TrainMode mode) {
  auto c = run.rc.train_config();
  c.mode = mode;
  return c;
}

int cmd_personalize(Run& run) {
  auto pl = run.load_model();
  const auto image = run.load_image("image");
  const auto src = run.get("src");
  const auto cfg = fit_config(run, TrainMode::hiper);
  const auto t0 = std::chrono::steady_clock::now();
  auto fit = optimize_hiper(image, src, pl, cfg, step_printer("personalize", cfg.steps));
  run.time("optimize_seconds", seconds_since(t0));
  save_checkpoint(run.emit("hiper.ckpt"), embedding_checkpoint(run, "hiper", kTailName, fit.trainable, src));
  write_loss_csv(run.emit("loss.csv"), fit.losses);
  const auto summary = loss_summary(fit.losses);
  write_json(run.emit("summary.json"), summary);
  std::cout << summary.dump() << '\n';
  return 0;
}

int cmd_invert_full(Run& run) {
  auto pl = run.load_model();
  const auto image = run.load_image("image");
  const auto src = run.get("src");
  const auto cfg = fit_config(run, TrainMode::full_embedding);
  const auto t0 = std::chrono::steady_clock::now();
  auto fit = optimize_full_embedding(image, src, pl, cfg, step_printer("invert-full", cfg.steps));
  run.time("optimize_seconds", seconds_since(t0));
  save_checkpoint(run.emit("full.ckpt"),
                  embedding_checkpoint(run, "full-embedding", kFullEmbeddingName, fit.trainable, src));
  write_loss_csv(run.emit("loss.csv"), fit.losses);
  auto summary = loss_summary(fit.losses);
  const std::size_t n = std::min(cfg.n_tokens, pl.model.tokens);
  const auto head = split_embedding(fit.embedding(), n).head, src_head = split_embedding(fit.source, n).head;
  double drift = 0;
  for (std::size_t i = 0; i < head.size(); ++i) drift += (head.at(i) - src_head.at(i)) * (head.at(i) - src_head.at(i));
  summary["head_drift"] = std::sqrt(drift);
  write_json(run.emit("summary.json"), summary);
  std::cout << summary.dump() << '\n';
  return 0;
}

int cmd_generate(Run& run) {
  auto pl = run.load_model();
  const auto emb = load_embedding(run.need("embedding"));
  const auto prompt = run.get("prompt");
  const auto cfg = run.rc.sample_config();
  const auto t0 = std::chrono::steady_clock::now();
  GenerateResult g;
  if (emb.kind == "hiper") {
    g = generate(prompt, emb.mat, pl, cfg);
  } else {
    if (!prompt.empty()) throw UsageError("generate: --prompt is not used with a full embedding");
    g = sample_embedding({emb.mat, Provenance::optimized}, pl, cfg);
  }
  run.time("sample_seconds", seconds_since(t0));
  write_samples(run, g);
  maybe_evaluate(run, g, prompt, pl.canvas);
  return 0;
}

int cmd_generate_baseline(Run& run) {
  auto pl = run.load_model();
  const auto prompt = run.get("prompt");
  const auto t0 = std::chrono::steady_clock::now();
  auto g = generate_baseline(prompt, pl, run.rc.sample_config());
  run.time("sample_seconds", seconds_since(t0));
  write_samples(run, g);
  maybe_evaluate(run, g, prompt, pl.canvas);
  return 0;
}

int cmd_attn(Run& run) {
  auto pl = run.load_model();
  const auto cond_name = run.get("condition").empty() ? std::string("src") : run.get("condition");
  AttentionCondition cond;
  if (cond_name == "src") cond = AttentionCondition::source;
  else if (cond_name == "src-hiper") cond = AttentionCondition::source_head_hiper;
  else if (cond_name == "tgt-hiper") cond = AttentionCondition::target_head_hiper;
  else throw UsageError("attn: --condition must be src, src-hiper or tgt-hiper");
  const auto src = run.get("src"), tgt = run.get("tgt");
  Tensor tail({pl.model.embed_dim, 0});
  if (cond != AttentionCondition::source) {
    const auto emb = load_embedding(run.need("embedding"));
    if (emb.kind != "hiper") throw UsageError("attn: --embedding must hold a personalized tail");
    tail = emb.mat;
  }
  auto cfg = run.rc.sample_config();
  cfg.record_attention = true;
  const auto e = attention_embedding(cond, src, tgt, tail, pl, cfg.alpha);
  auto g = sample_embedding(e, pl, cfg);
  const auto& prompt = cond == AttentionCondition::target_head_hiper ? tgt : src;
  const std::size_t content = tokenize(prompt, pl.vocab, pl.model.tokens).content_length();

  auto dump = dump_attention(g.attention.at(0), run.out / "maps");
  for (const auto& p : dump.maps) run.outputs.push_back(fs::relative(p, run.out));
  for (const auto& p : dump.grids) run.outputs.push_back(fs::relative(p, run.out));
  run.outputs.push_back(fs::relative(dump.raw_csv, run.out));
  write_samples(run, g);

  CsvWriter csv(run.emit("mass.csv"), {"sample", "content", "pad"});
  double pad = 0, con = 0;
  const bool split = content > 0 && content < pl.model.tokens;
  for (std::size_t i = 0; i < g.attention.size() && split; ++i) {
    const auto tm = token_mass(g.attention[i], content);
    csv.write(i, tm.content, tm.pad);
    pad += tm.pad / static_cast<double>(g.attention.size());
    con += tm.content / static_cast<double>(g.attention.size());
  }
  json summary{{"condition", cond_name}, {"t", cfg.attention_t}, {"content_tokens", content},
               {"maps", dump.maps.size()}};
  if (split) summary.update({{"mean_content_mass", con}, {"mean_pad_mass", pad}});
  write_json(run.emit("attention.json"), summary);
  std::cout << summary.dump() << '\n';
  return 0;
}

PersonalizationSpec personalization_spec(Run& run) {
  const auto tgt = run.need("tgt");
  return {run.load_image("image"), run.get("src"), tgt, parse_target(run.get("target"), tgt),
          parse_texture(run.get("source-texture"))};
}

int cmd_sweep_n(Run& run) {
  auto pl = run.load_model();
  const auto spec = personalization_spec(run);
  const auto ns = parse_ns(run.get("ns").empty() ? "1,3,5,7" : run.get("ns"));
  const auto t0 = std::chrono::steady_clock::now();
  auto r = sweep_n(spec, ns, pl, fit_config(run, TrainMode::hiper), run.rc.sample_config(),
                   [](const std::string& cell) { std::fprintf(stderr, "sweep-n: %s done\n", cell.c_str()); });
  run.time("sweep_seconds", seconds_since(t0));
  json entries = json::array();
  CsvWriter csv(run.emit("sweep.csv"),
                {"n", "count", "semantic_accuracy", "identity_similarity", "identity_match", "loss_ratio"});
  char name[32];
  for (const auto& e : r.entries) {
    const auto ls = loss_summary(e.losses);
    csv.write(e.n, e.report.count, e.report.semantic_accuracy, e.report.identity_similarity, e.report.identity_match,
              ls.value("ratio", 0.0));
    auto j = report_summary(e.report);
    j["n"] = e.n;
    j["loss"] = ls;
    entries.push_back(j);
    std::snprintf(name, sizeof name, "loss_n%02zu.csv", e.n);
    write_loss_csv(run.emit(name), e.losses);
  }
  json summary{{"entries", entries}, {"identity_spearman", r.identity_spearman}};
  write_json(run.emit("sweep.json"), summary);
  write_ppm(run.emit("grid.ppm").string(), r.grid);
  std::cout << summary.dump() << '\n';
  return 0;
}

int cmd_ablate_src(Run& run) {
  auto pl = run.load_model();
  const auto spec = personalization_spec(run);
  const auto prompts = run.get_list("prompts");
  if (prompts.empty()) throw UsageError("ablate-src: --prompts is required");
  auto entries = ablate_source_prompt(spec, prompts, pl, fit_config(run, TrainMode::hiper), run.rc.sample_config(),
                                      [](const std::string& p) { std::fprintf(stderr, "ablate-src: '%s' done\n", p.c_str()); });
  CsvWriter csv(run.emit("ablation.csv"), {"prompt", "index", "abstain", "semantic_ok", "texture_distance",
                                           "nearest_texture"});
  json out = json::array();
  for (const auto& e : entries) {
    for (const auto& row : e.report.rows)
      csv.write('"' + e.prompt + '"', row.index, row.abstain, row.semantic_ok, row.texture_distance,
                row.nearest_texture);
    auto j = report_summary(e.report);
    j["prompt"] = e.prompt;
    out.push_back(j);
  }
  write_json(run.emit("ablation.json"), out);
  std::cout << out.dump() << '\n';
  return 0;
}

int cmd_eval(Run& run) {
  const fs::path dir = run.need("images");
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const auto name = entry.path().filename().string();
    if (entry.path().extension() == ".ppm" && name.rfind("sample_", 0) == 0) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<Image> images;
  for (const auto& f : files) images.push_back(read_ppm(f.string()));
  const std::size_t canvas = images.empty() ? run.rc.data.size : images.front().height;
  auto report = evaluate(images, parse_target(run.get("target"), run.get("prompt")),
                         parse_texture(run.get("source-texture")), canvas);
  write_json(run.emit("report.json"), report_json(report));
  write_report_csv(run.emit("report.csv"), report);
  std::cout << report_summary(report).dump() << '\n';
  return 0;
}

int cmd_gradcheck(Run& run) {
  const auto results = gradient_suite();
  CsvWriter csv(run.emit("gradcheck.csv"), {"check", "max_rel_error", "pass"});
  bool ok = true;
  for (const auto& r : results) {
    const bool pass = r.max_rel_error <= kGradTolerance;
    ok = ok && pass;
    csv.write(r.name, r.max_rel_error, pass);
    std::printf("%-28s %.3e %s\n", r.name.c_str(), r.max_rel_error, pass ? "ok" : "FAIL");
  }
  std::printf("%s (%zu checks, tolerance %.0e)\n", ok ? "all checks passed" : "gradient check failed",
              results.size(), kGradTolerance);
  return ok ? 0 : 2;
}

// ---------------------------------------------------------------------------
// Flag groups

void seed_flag(Command& c) {
  flag<std::uint64_t>(c, "--seed", "run seed", [](RunConfig& rc, std::uint64_t v) { rc.seed = v; });
}

void data_flags(Command& c) {
  flag<std::size_t>(c, "--count", "number of scenes", [](RunConfig& rc, std::size_t v) { rc.data.count = v; });
  flag<std::size_t>(c, "--size", "canvas side in pixels", [](RunConfig& rc, std::size_t v) { rc.data.size = v; });
  flag<std::uint64_t>(c, "--data-seed", "dataset seed", [](RunConfig& rc, std::uint64_t v) { rc.data.seed = v; });
}

void model_flags(Command& c) {
  flag<std::size_t>(c, "--ch1", "channels at full resolution", [](RunConfig& rc, std::size_t v) { rc.model.ch1 = v; });
  flag<std::size_t>(c, "--ch2", "channels at half resolution", [](RunConfig& rc, std::size_t v) { rc.model.ch2 = v; });
  flag<std::size_t>(c, "--groups", "group-norm groups", [](RunConfig& rc, std::size_t v) { rc.model.groups = v; });
  flag<std::size_t>(c, "--embed-dim", "text embedding width", [](RunConfig& rc, std::size_t v) { rc.model.embed_dim = v; });
  flag<std::size_t>(c, "--tokens", "text embedding length", [](RunConfig& rc, std::size_t v) { rc.model.tokens = v; });
  flag<std::size_t>(c, "--timesteps", "diffusion steps", [](RunConfig& rc, std::size_t v) { rc.model.steps = v; });
  flag<std::uint64_t>(c, "--model-seed", "parameter init seed",
                      [](RunConfig& rc, std::uint64_t v) { rc.model.init_seed = v; });
  flag<double>(c, "--beta-start", "first noise variance", [](RunConfig& rc, double v) { rc.schedule.beta_start = v; });
  flag<double>(c, "--beta-end", "last noise variance", [](RunConfig& rc, double v) { rc.schedule.beta_end = v; });
  flag<std::string>(c, "--codec", "identity or tiny-autoencoder",
                    [](RunConfig& rc, const std::string& v) { rc.codec.kind = enum_value<CodecKind>(v); })
      ->check(CLI::IsMember({"identity", "tiny-autoencoder"}));
  flag<std::size_t>(c, "--latent-channels", "autoencoder latent channels",
                    [](RunConfig& rc, std::size_t v) { rc.codec.latent_channels = v; });
  flag<std::size_t>(c, "--codec-steps", "autoencoder training steps",
                    [](RunConfig& rc, std::size_t v) { rc.codec.steps = v; });
}

void pretrain_flags(Command& c) {
  flag<std::size_t>(c, "--steps", "optimizer steps", [](RunConfig& rc, std::size_t v) { rc.pretrain.steps = v; });
  flag<double>(c, "--lr", "learning rate", [](RunConfig& rc, double v) { rc.pretrain.lr = v; });
  flag<std::size_t>(c, "--batch", "scenes per step", [](RunConfig& rc, std::size_t v) { rc.pretrain.batch = v; });
  flag<double>(c, "--ema", "parameter averaging decay (0 disables)",
               [](RunConfig& rc, double v) { rc.pretrain.ema_decay = v; });
}

void train_flags(Command& c) {
  flag<std::size_t>(c, "--steps", "optimizer steps", [](RunConfig& rc, std::size_t v) { rc.train.steps = v; });
  flag<double>(c, "--lr", "learning rate", [](RunConfig& rc, double v) { rc.train.lr = v; });
  flag<std::size_t>(c, "--n-tokens", "personalized token count",
                    [](RunConfig& rc, std::size_t v) { rc.train.n_tokens = v; });
  flag<std::string>(c, "--optimizer", "adam or sgd",
                    [](RunConfig& rc, const std::string& v) { rc.train.optimizer.kind = enum_value<OptimizerKind>(v); })
      ->check(CLI::IsMember({"adam", "sgd"}));
  flag<std::string>(c, "--tail-init", "pad-copy or gaussian",
                    [](RunConfig& rc, const std::string& v) { rc.train.tail_init = enum_value<TailInit>(v); })
      ->check(CLI::IsMember({"pad-copy", "gaussian"}));
  flag<double>(c, "--init-std", "std of the gaussian tail init", [](RunConfig& rc, double v) { rc.train.init_std = v; });
}

void sample_flags(Command& c) {
  flag<double>(c, "--alpha", "tail calibration factor", [](RunConfig& rc, double v) { rc.sample.alpha = v; });
  flag<std::size_t>(c, "--samples", "samples to draw", [](RunConfig& rc, std::size_t v) { rc.sample.count = v; });
  flag<bool>(c, "--clamp-x0", "clamp the implied clean image each step",
             [](RunConfig& rc, bool v) { rc.sample.clamp_x0 = v; });
}

void eval_inputs(Command& c) {
  input(c, "target", InputKind::text, "attributes to score, e.g. position=right (default: words of the target prompt)");
  input(c, "source-texture", InputKind::text, "texture id of the source image (default: held-out texture)");
}

// ---------------------------------------------------------------------------
// Dispatch

json manifest_or_config(const Command& c, json& inputs, std::string& expected_hash) {
  if (c.config_path.empty()) return json::object();
  json j = read_json(c.config_path);
  if (j.is_object() && j.contains("command") && j.contains("config")) {
    if (j["command"] != c.name)
      throw UsageError("--config: manifest is for '" + j["command"].get<std::string>() + "', not '" + c.name + "'");
    inputs = j.value("inputs", json::object());
    expected_hash = j.value("checkpoint_hash", "");
    return j["config"];
  }
  return j;
}

fs::path default_out(const Command& c) {
  const char* root = std::getenv("HIPER_LAB_DIR");
  std::string leaf = c.name;
  std::replace(leaf.begin(), leaf.end(), ' ', '-');
  return fs::path(root && *root ? root : "hiper_runs") / leaf;
}

int execute(const Command& c) {
  json inputs = json::object();
  std::string expected_hash;
  RunConfig rc = run_config_from_json(manifest_or_config(c, inputs, expected_hash));
  for (const auto& apply : c.overrides) apply(rc);
  for (const auto& [name, in] : c.inputs) {
    if (in.opt->count() == 0) continue;
    if (in.kind == InputKind::list) inputs[name] = in.values;
    else if (in.kind == InputKind::path && !in.value.empty()) inputs[name] = fs::absolute(in.value).string();
    else inputs[name] = in.value;
  }
  const fs::path out = c.out_dir.empty() ? default_out(c) : fs::path(c.out_dir);
  fs::create_directories(out);

  Run run(c, rc, inputs, expected_hash, out);
  const auto t0 = std::chrono::steady_clock::now();
  const int code = c.body(run);
  run.time("total_seconds", seconds_since(t0));

  json outputs = json::object();
  for (const auto& rel : run.outputs) outputs[rel.generic_string()] = hash_of(out / rel);
  json manifest{{"command", c.name}, {"config", run.rc},   {"seed", run.rc.seed},
                {"inputs", inputs},  {"checkpoint_hash", run.checkpoint_hash}, {"outputs", outputs}};
  write_json(out / "manifest.json", manifest);
  write_json(out / "timing.json", json{{"command", c.name}, {"seconds", run.timing}});
  return code;
}

Command& add_command(std::vector<std::unique_ptr<Command>>& cmds, CLI::App* parent, const std::string& name,
                     const std::string& sub, const std::string& desc, std::function<int(Run&)> body) {
  auto c = std::make_unique<Command>();
  c->name = name;
  c->app = parent->add_subcommand(sub, desc);
  c->body = std::move(body);
  c->app->add_option("--config", c->config_path, "JSON run config, or a manifest.json to re-run");
  c->app->add_option("--out", c->out_dir, "output directory (default: $HIPER_LAB_DIR/<command>)");
  seed_flag(*c);
  cmds.push_back(std::move(c));
  return *cmds.back();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Text-embedding personalization lab for a toy text-conditioned diffusion model"};
  app.require_subcommand(1);
  std::vector<std::unique_ptr<Command>> cmds;

  auto* dataset = app.add_subcommand("dataset", "procedural scene datasets");
  dataset->require_subcommand(1);
  {
    auto& c = add_command(cmds, dataset, "dataset gen", "gen", "generate a captioned scene dataset", cmd_dataset_gen);
    data_flags(c);
  }
  {
    auto& c = add_command(cmds, dataset, "dataset render", "render", "render one scene to image.ppm",
                          cmd_dataset_render);
    data_flags(c);
    input(c, "shape", InputKind::text, "square, circle or triangle");
    input(c, "color", InputKind::text, "color name");
    input(c, "position", InputKind::text, "left, right, top, bottom or center");
    input(c, "texture", InputKind::text, "texture id (4 is the held-out texture)");
  }
  {
    auto& c = add_command(cmds, &app, "pretrain", "pretrain", "train the denoiser and text table", cmd_pretrain);
    data_flags(c);
    model_flags(c);
    pretrain_flags(c);
    input(c, "data", InputKind::path, "dataset directory (default: generate in memory)");
  }
  {
    auto& c = add_command(cmds, &app, "personalize", "personalize", "optimize the personalized tail for one image",
                          cmd_personalize);
    train_flags(c);
    input(c, "model", InputKind::path, "model checkpoint");
    input(c, "image", InputKind::path, "source image (PPM)");
    input(c, "src", InputKind::text, "source prompt");
  }
  {
    auto& c = add_command(cmds, &app, "invert-full", "invert-full", "optimize the whole source embedding",
                          cmd_invert_full);
    train_flags(c);
    input(c, "model", InputKind::path, "model checkpoint");
    input(c, "image", InputKind::path, "source image (PPM)");
    input(c, "src", InputKind::text, "source prompt");
  }
  {
    auto& c = add_command(cmds, &app, "generate", "generate", "sample from a target prompt plus a stored embedding",
                          cmd_generate);
    sample_flags(c);
    input(c, "model", InputKind::path, "model checkpoint");
    input(c, "embedding", InputKind::path, "hiper.ckpt or full.ckpt");
    input(c, "prompt", InputKind::text, "target prompt");
    eval_inputs(c);
  }
  {
    auto& c = add_command(cmds, &app, "generate-baseline", "generate-baseline", "sample from a plain prompt",
                          cmd_generate_baseline);
    sample_flags(c);
    input(c, "model", InputKind::path, "model checkpoint");
    input(c, "prompt", InputKind::text, "prompt");
    eval_inputs(c);
  }
  {
    auto& c = add_command(cmds, &app, "attn", "attn", "dump cross-attention maps", cmd_attn);
    sample_flags(c);
    flag<std::size_t>(c, "--t", "reverse step to record", [](RunConfig& rc, std::size_t v) { rc.sample.attention_t = v; });
    input(c, "model", InputKind::path, "model checkpoint");
    input(c, "condition", InputKind::text, "src, src-hiper or tgt-hiper");
    input(c, "src", InputKind::text, "source prompt");
    input(c, "tgt", InputKind::text, "target prompt");
    input(c, "embedding", InputKind::path, "hiper.ckpt (hiper conditions)");
  }
  {
    auto& c = add_command(cmds, &app, "sweep-n", "sweep-n", "personalize and generate for several N", cmd_sweep_n);
    train_flags(c);
    sample_flags(c);
    input(c, "model", InputKind::path, "model checkpoint");
    input(c, "image", InputKind::path, "source image (PPM)");
    input(c, "src", InputKind::text, "source prompt");
    input(c, "tgt", InputKind::text, "target prompt");
    input(c, "ns", InputKind::text, "comma-separated N values (default 1,3,5,7)");
    eval_inputs(c);
  }
  {
    auto& c = add_command(cmds, &app, "ablate-src", "ablate-src", "personalize from several source prompts",
                          cmd_ablate_src);
    train_flags(c);
    sample_flags(c);
    input(c, "model", InputKind::path, "model checkpoint");
    input(c, "image", InputKind::path, "source image (PPM)");
    input(c, "prompts", InputKind::list, "source prompts, one argument each (\"\" for the empty prompt)");
    input(c, "tgt", InputKind::text, "target prompt");
    eval_inputs(c);
  }
  {
    auto& c = add_command(cmds, &app, "eval", "eval", "score sample_*.ppm images in a directory", cmd_eval);
    input(c, "images", InputKind::path, "directory of sample_*.ppm");
    input(c, "prompt", InputKind::text, "target prompt (used when --target is omitted)");
    eval_inputs(c);
  }
  add_command(cmds, &app, "gradcheck", "gradcheck", "finite-difference check of every differentiable op",
              cmd_gradcheck);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  for (const auto& c : cmds) {
    if (!c->app->parsed()) continue;
    try {
      return execute(*c);
    } catch (const UsageError& e) {
      std::cerr << "usage error: " << e.what() << "\n\n" << c->app->help();
      return 1;
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << '\n';
      return 2;
    }
  }
  return 1;
}
