#pragma once

// Procedural shapes-with-captions scenes and the attribute classifier that
// scores generated images.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "hiper/errors.hpp"
#include "hiper/image.hpp"
#include "hiper/random.hpp"
#include "hiper/text.hpp"

namespace hiper {

struct NamedColor {
  const char* name;
  std::array<double, 3> rgb;
};

inline constexpr std::array<NamedColor, 8> kColors{{
    {"red", {1.0, 0.0, 0.0}},
    {"green", {0.0, 1.0, 0.0}},
    {"blue", {0.0, 0.0, 1.0}},
    {"yellow", {1.0, 1.0, 0.0}},
    {"cyan", {0.0, 1.0, 1.0}},
    {"magenta", {1.0, 0.0, 1.0}},
    {"white", {1.0, 1.0, 1.0}},
    {"orange", {1.0, 0.5, 0.0}},
}};

inline constexpr std::array<const char*, 3> kShapes{"square", "circle", "triangle"};
inline constexpr std::array<const char*, 5> kPositions{"left", "right", "top", "bottom", "center"};

// Texture 0 is a plain fill. Textures with a word appear in captions; the
// last one has no word and never appears in generated datasets.
inline constexpr std::array<const char*, 5> kTextureWords{"", "striped", "barred", "slanted", ""};
inline constexpr std::size_t kTextureCount = kTextureWords.size();
inline constexpr std::size_t kHeldOutTexture = 4;

struct Attrs {
  std::size_t shape = 0, color = 0, position = 0;
  bool operator==(const Attrs&) const = default;
};

struct ShapeScene {
  Image image;
  std::string caption;
  Attrs attrs;
  std::size_t texture_id = 0;
};

struct Dataset {
  std::vector<ShapeScene> scenes;
  Vocab vocab;
};

inline std::size_t index_of(std::span<const char* const> names, const std::string& word, const char* what) {
  for (std::size_t i = 0; i < names.size(); ++i)
    if (word == names[i]) return i;
  throw VocabularyError(std::string("unknown ") + what + " '" + word + "'");
}

inline std::size_t color_index(const std::string& name) {
  for (std::size_t i = 0; i < kColors.size(); ++i)
    if (name == kColors[i].name) return i;
  throw VocabularyError("unknown color '" + name + "'");
}

inline Attrs make_attrs(const std::string& shape, const std::string& color, const std::string& position) {
  return {index_of(kShapes, shape, "shape"), color_index(color), index_of(kPositions, position, "position")};
}

inline void check_texture(std::size_t texture_id) {
  if (texture_id >= kTextureCount) throw ParameterError("texture id " + std::to_string(texture_id) + " out of range");
}

// Pattern strength in [0, 1] at pixel (x, y); period 4, anchored to the canvas.
inline double texture_pattern(std::size_t texture_id, std::size_t x, std::size_t y) {
  check_texture(texture_id);
  const double h = (y % 4) < 2 ? 1.0 : 0.0;
  const double v = (x % 4) < 2 ? 1.0 : 0.0;
  switch (texture_id) {
    case 1: return h;
    case 2: return v;
    case 3: return ((x + y) % 4) < 2 ? 1.0 : 0.0;
    case 4: return 0.5 * h + 0.5 * v;
    default: return 0.0;
  }
}

inline std::string caption_for(const Attrs& a, std::size_t texture_id = 0) {
  check_texture(texture_id);
  std::string cap = "a ";
  if (*kTextureWords[texture_id]) cap += std::string(kTextureWords[texture_id]) + " ";
  return cap + kColors.at(a.color).name + " " + kShapes.at(a.shape) + " " + kPositions.at(a.position);
}

// Every word the caption grammar can produce, in a fixed order.
inline Vocab scene_vocab() {
  Vocab v;
  v.add("a");
  for (const auto& c : kColors) v.add(c.name);
  for (const auto* s : kShapes) v.add(s);
  for (const auto* p : kPositions) v.add(p);
  for (const auto* w : kTextureWords)
    if (*w) v.add(w);
  return v;
}

inline std::array<double, 2> anchor(std::size_t position, std::size_t size) {
  const double s = static_cast<double>(size);
  switch (position) {
    case 0: return {s / 4, s / 2};
    case 1: return {3 * s / 4, s / 2};
    case 2: return {s / 2, s / 4};
    case 3: return {s / 2, 3 * s / 4};
    default: return {s / 2, s / 2};
  }
}

// Shape membership of the pixel whose center is (x + 0.5, y + 0.5).
inline bool inside_shape(std::size_t shape, std::size_t position, std::size_t size, std::size_t x, std::size_t y) {
  const auto [cx, cy] = anchor(position, size);
  const double half = 3.0 * static_cast<double>(size) / 16.0;
  const double dx = static_cast<double>(x) + 0.5 - cx, dy = static_cast<double>(y) + 0.5 - cy;
  switch (shape) {
    case 0: return std::abs(dx) <= half && std::abs(dy) <= half;
    case 1: return dx * dx + dy * dy <= half * half;
    default: return dy >= -half && dy <= half && std::abs(dx) <= (dy + half) / 2;
  }
}

inline Image render_scene(const Attrs& a, std::size_t texture_id, std::size_t size) {
  check_texture(texture_id);
  if (a.shape >= kShapes.size() || a.color >= kColors.size() || a.position >= kPositions.size())
    throw ParameterError("render_scene: attribute index out of range");
  Image img(size, size);
  const auto& rgb = kColors[a.color].rgb;
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      if (!inside_shape(a.shape, a.position, size, x, y)) continue;
      const double shade = 1.0 - 0.5 * texture_pattern(texture_id, x, y);
      for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = rgb[c] * shade;
    }
  quantize(img);
  return img;
}

inline ShapeScene make_scene(const Attrs& a, std::size_t texture_id, std::size_t size) {
  return {render_scene(a, texture_id, size), caption_for(a, texture_id), a, texture_id};
}

// Half the scenes are plain; the rest use one of the captioned textures.
inline Dataset gen_dataset(std::size_t n, std::uint64_t seed, std::size_t size) {
  if (n < 1) throw ParameterError("gen_dataset: n must be >= 1");
  if (size == 0 || size % 4 != 0) throw ParameterError("gen_dataset: size must be a positive multiple of 4");
  Rng rng(seed, 0xDA7A);
  Dataset ds{{}, scene_vocab()};
  ds.scenes.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Attrs a;
    a.shape = rng.uniform_int(0, kShapes.size() - 1);
    a.color = rng.uniform_int(0, kColors.size() - 1);
    a.position = rng.uniform_int(0, kPositions.size() - 1);
    std::size_t tex = 0;
    if (rng.uniform() < 0.5) tex = rng.uniform_int(1, kHeldOutTexture - 1);
    ds.scenes.push_back(make_scene(a, tex, size));
  }
  return ds;
}

inline nlohmann::json attrs_json(const Attrs& a) {
  return {{"shape", kShapes[a.shape]}, {"color", kColors[a.color].name}, {"position", kPositions[a.position]}};
}

inline Attrs attrs_from_json(const nlohmann::json& j) {
  return make_attrs(j.at("shape").get<std::string>(), j.at("color").get<std::string>(),
                    j.at("position").get<std::string>());
}

// Writes scene_XXXXX.ppm files, manifest.jsonl and vocab.tsv into dir.
inline void write_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream manifest(dir / "manifest.jsonl");
  if (!manifest) throw IoError("dataset: cannot write " + (dir / "manifest.jsonl").string());
  char name[32];
  for (std::size_t i = 0; i < ds.scenes.size(); ++i) {
    const auto& s = ds.scenes[i];
    std::snprintf(name, sizeof name, "scene_%05zu.ppm", i);
    write_ppm((dir / name).string(), s.image);
    nlohmann::json row{{"caption", s.caption}, {"attrs", attrs_json(s.attrs)}, {"texture_id", s.texture_id},
                       {"file", name}};
    manifest << row.dump() << '\n';
  }
  ds.vocab.save((dir / "vocab.tsv").string());
}

inline Dataset read_dataset(const std::filesystem::path& dir) {
  std::ifstream manifest(dir / "manifest.jsonl");
  if (!manifest) throw IoError("dataset: cannot read " + (dir / "manifest.jsonl").string());
  Dataset ds{{}, Vocab::load((dir / "vocab.tsv").string())};
  std::string line;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    auto row = nlohmann::json::parse(line);
    ShapeScene s;
    s.caption = row.at("caption").get<std::string>();
    s.attrs = attrs_from_json(row.at("attrs"));
    s.texture_id = row.at("texture_id").get<std::size_t>();
    s.image = read_ppm((dir / row.at("file").get<std::string>()).string());
    ds.scenes.push_back(std::move(s));
  }
  if (ds.scenes.empty()) throw FormatError("dataset: " + dir.string() + " has no scenes");
  return ds;
}

// ---------------------------------------------------------------------------
// Classifier

struct Classification {
  bool abstain = true;
  Attrs attrs;
  double confidence = 0.0;  // best minus second-best shape score
};

inline constexpr double kForegroundLevel = 0.25;

inline std::vector<bool> foreground_mask(const Image& img) {
  std::vector<bool> mask(img.height * img.width);
  for (std::size_t i = 0; i < mask.size(); ++i) {
    const double* p = &img.pixels[i * 3];
    mask[i] = std::max({p[0], p[1], p[2]}) > kForegroundLevel;
  }
  return mask;
}

namespace detail {

// Too little foreground is empty; more than half the canvas is not a shape.
inline bool foreground_usable(const std::vector<bool>& mask) {
  const auto count = static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true));
  return count >= 16 && count * 2 <= mask.size();
}

}  // namespace detail

inline Classification classify(const Image& img, std::size_t size) {
  if (img.height != size || img.width != size)
    throw DimensionError("classify: image " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                         " does not match canvas " + std::to_string(size));
  Classification out;
  const auto mask = foreground_mask(img);
  if (!detail::foreground_usable(mask)) return out;

  double sx = 0, sy = 0, n = 0;
  std::array<double, 3> mean{};
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      if (!mask[y * size + x]) continue;
      sx += x + 0.5;
      sy += y + 0.5;
      n += 1;
      for (std::size_t c = 0; c < 3; ++c) mean[c] += img.at(y, x, c);
    }
  sx /= n;
  sy /= n;

  double best = 1e300;
  for (std::size_t p = 0; p < kPositions.size(); ++p) {
    const auto [ax, ay] = anchor(p, size);
    const double d = (sx - ax) * (sx - ax) + (sy - ay) * (sy - ay);
    if (d < best) best = d, out.attrs.position = p;
  }

  // Intersection over union against each shape drawn at the detected anchor.
  std::array<double, kShapes.size()> score{};
  for (std::size_t s = 0; s < kShapes.size(); ++s) {
    double inter = 0, uni = 0;
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        const bool a = mask[y * size + x], b = inside_shape(s, out.attrs.position, size, x, y);
        inter += a && b;
        uni += a || b;
      }
    score[s] = uni > 0 ? inter / uni : 0.0;
  }
  std::array<std::size_t, kShapes.size()> order{0, 1, 2};
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return score[a] > score[b]; });
  out.attrs.shape = order[0];
  out.confidence = score[order[0]] - score[order[1]];

  const double peak = std::max({mean[0], mean[1], mean[2]});
  best = 1e300;
  for (std::size_t c = 0; c < kColors.size(); ++c) {
    double d = 0;
    for (std::size_t k = 0; k < 3; ++k) {
      const double diff = mean[k] / peak - kColors[c].rgb[k];
      d += diff * diff;
    }
    if (d < best) best = d, out.attrs.color = c;
  }
  out.abstain = false;
  return out;
}

// ---------------------------------------------------------------------------
// Texture signature

inline constexpr double kTextureRegularizer = 0.1;

namespace detail {

// Mean brightness per (x mod 4, y mod 4) cell over the mask, relative to the
// mean over cells. Empty optional if any cell has no samples.
inline std::optional<std::array<double, 16>> cell_signature(const std::vector<double>& level,
                                                            const std::vector<bool>& mask, std::size_t width) {
  std::array<double, 16> sum{}, cnt{};
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!mask[i]) continue;
    const std::size_t x = i % width, y = i / width;
    const std::size_t cell = (y % 4) * 4 + (x % 4);
    sum[cell] += level[i];
    cnt[cell] += 1;
  }
  double mean = 0;
  for (std::size_t k = 0; k < 16; ++k) {
    if (cnt[k] == 0) return std::nullopt;
    sum[k] /= cnt[k];
    mean += sum[k] / 16;
  }
  if (mean <= 0) return std::nullopt;
  for (auto& v : sum) v = v / mean - 1.0;
  return sum;
}

}  // namespace detail

inline std::array<double, 16> texture_prototype(std::size_t texture_id) {
  check_texture(texture_id);
  std::vector<double> level(16);
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 4; ++x) level[y * 4 + x] = 1.0 - 0.5 * texture_pattern(texture_id, x, y);
  return *detail::cell_signature(level, std::vector<bool>(16, true), 4);
}

// 0 for a matching texture, up to 1 for an unrelated one or no usable foreground.
inline double texture_distance(const Image& img, std::size_t texture_id) {
  const auto proto = texture_prototype(texture_id);
  const auto mask = foreground_mask(img);
  if (!detail::foreground_usable(mask)) return 1.0;
  std::vector<double> level(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    const double* p = &img.pixels[i * 3];
    level[i] = std::max({p[0], p[1], p[2]});
  }
  const auto sig = detail::cell_signature(level, mask, img.width);
  if (!sig) return 1.0;
  double diff = 0, norm = 0;
  for (std::size_t k = 0; k < 16; ++k) {
    diff += ((*sig)[k] - proto[k]) * ((*sig)[k] - proto[k]);
    norm += (*sig)[k] * (*sig)[k] + proto[k] * proto[k];
  }
  return std::min(1.0, diff / (norm + kTextureRegularizer));
}

// Texture id whose prototype is closest to the image.
inline std::size_t nearest_texture(const Image& img) {
  std::size_t best = 0;
  double best_d = 2.0;
  for (std::size_t t = 0; t < kTextureCount; ++t) {
    const double d = texture_distance(img, t);
    if (d < best_d) best_d = d, best = t;
  }
  return best;
}

}  // namespace hiper
