#pragma once

// Metrics over generated images, cross-attention dumps, the N sweep and the
// source-prompt ablation.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "hiper/config.hpp"
#include "hiper/data.hpp"
#include "hiper/image.hpp"
#include "hiper/io.hpp"
#include "hiper/pipeline.hpp"
#include "hiper/sample.hpp"
#include "hiper/train.hpp"

namespace hiper {

// Attributes a generated image is expected to show; unset fields are not scored.
struct AttrTarget {
  std::optional<std::size_t> shape, color, position;

  static AttrTarget all(const Attrs& a) { return {a.shape, a.color, a.position}; }

  bool matches(const Attrs& a) const {
    return (!shape || *shape == a.shape) && (!color || *color == a.color) && (!position || *position == a.position);
  }
};

struct MetricRow {
  std::size_t index = 0;
  bool abstain = true;
  Attrs attrs;
  bool semantic_ok = false;
  double texture_distance = 1.0;
  std::size_t nearest_texture = 0;
};

struct MetricReport {
  std::size_t count = 0;
  double semantic_accuracy = 0.0;
  double identity_similarity = 0.0;  // 1 - mean distance to the source texture
  double identity_match = 0.0;       // fraction whose nearest prototype is the source texture
  std::array<double, kTextureCount> mean_distance{};  // mean distance to every prototype
  std::vector<MetricRow> rows;

  // Mean distance to the source texture is below that to every other prototype.
  bool source_is_closest(std::size_t source_texture) const {
    for (std::size_t k = 0; k < kTextureCount; ++k)
      if (k != source_texture && !(mean_distance[source_texture] < mean_distance[k])) return false;
    return count > 0;
  }
};

inline MetricReport evaluate(const std::vector<Image>& images, const AttrTarget& target, std::size_t source_texture,
                             std::size_t canvas) {
  check_texture(source_texture);
  MetricReport r;
  r.count = images.size();
  if (images.empty()) return r;
  double ok = 0, dist = 0, match = 0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    MetricRow row;
    row.index = i;
    const auto c = classify(images[i], canvas);
    row.abstain = c.abstain;
    row.attrs = c.attrs;
    row.semantic_ok = !c.abstain && target.matches(c.attrs);
    double best = 2.0;
    for (std::size_t k = 0; k < kTextureCount; ++k) {
      const double d = texture_distance(images[i], k);
      r.mean_distance[k] += d / static_cast<double>(images.size());
      if (d < best) best = d, row.nearest_texture = k;
    }
    row.texture_distance = texture_distance(images[i], source_texture);
    ok += row.semantic_ok;
    dist += row.texture_distance;
    match += !c.abstain && row.nearest_texture == source_texture;
    r.rows.push_back(row);
  }
  const double n = static_cast<double>(images.size());
  r.semantic_accuracy = ok / n;
  r.identity_similarity = 1.0 - dist / n;
  r.identity_match = match / n;
  return r;
}

inline nlohmann::json report_json(const MetricReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows)
    rows.push_back({{"index", row.index},
                    {"abstain", row.abstain},
                    {"attrs", attrs_json(row.attrs)},
                    {"semantic_ok", row.semantic_ok},
                    {"texture_distance", row.texture_distance},
                    {"nearest_texture", row.nearest_texture}});
  return {{"count", r.count},
          {"semantic_accuracy", r.semantic_accuracy},
          {"identity_similarity", r.identity_similarity},
          {"identity_match", r.identity_match},
          {"mean_distance", r.mean_distance},
          {"rows", rows}};
}

inline void write_report_csv(const std::filesystem::path& path, const MetricReport& r) {
  CsvWriter csv(path, {"index", "abstain", "shape", "color", "position", "semantic_ok", "texture_distance",
                       "nearest_texture"});
  for (const auto& row : r.rows)
    csv.write(row.index, row.abstain, kShapes[row.attrs.shape], kColors[row.attrs.color].name,
              kPositions[row.attrs.position], row.semantic_ok, row.texture_distance, row.nearest_texture);
}

// Average ranks for ties.
inline std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

// Pearson correlation of the ranks; 0 when either side is constant.
inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw DimensionError("spearman: length mismatch");
  if (x.size() < 2) return 0.0;
  const auto rx = ranks(x), ry = ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  return sxx > 0 && syy > 0 ? sxy / std::sqrt(sxx * syy) : 0.0;
}

// Row-major tiling of equally sized images, no gaps.
inline Image tile_images(const std::vector<std::vector<Image>>& rows) {
  if (rows.empty() || rows.front().empty()) return {};
  const std::size_t h = rows.front().front().height, w = rows.front().front().width;
  std::size_t cols = 0;
  for (const auto& r : rows) cols = std::max(cols, r.size());
  Image grid(h * rows.size(), w * cols);
  for (std::size_t ri = 0; ri < rows.size(); ++ri)
    for (std::size_t ci = 0; ci < rows[ri].size(); ++ci) {
      const Image& tile = rows[ri][ci];
      if (tile.height != h || tile.width != w) throw DimensionError("tile_images: tiles differ in size");
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
          for (std::size_t c = 0; c < 3; ++c) grid.at(ri * h + y, ci * w + x, c) = tile.at(y, x, c);
    }
  return grid;
}

// ---------------------------------------------------------------------------
// Cross-attention maps

enum class AttentionCondition { source, source_head_hiper, target_head_hiper };

// The three conditionings compared in the attention figure.
inline TextEmbedding attention_embedding(AttentionCondition cond, const std::string& src_prompt,
                                         const std::string& tgt_prompt, const Tensor& hiper_tail, const Pipeline& pl,
                                         double alpha) {
  switch (cond) {
    case AttentionCondition::source: return pl.encode(src_prompt);
    case AttentionCondition::source_head_hiper: return composite_embedding(src_prompt, hiper_tail, pl, alpha);
    default: return composite_embedding(tgt_prompt, hiper_tail, pl, alpha);
  }
}

// Per-token map of one layer, min-max normalized to [0, 1].
inline std::vector<double> token_map(const AttentionMap& m, std::size_t token) {
  std::vector<double> v(m.height * m.width);
  for (std::size_t p = 0; p < v.size(); ++p) v[p] = m.at(p, token);
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  const double a = *lo, span = *hi - *lo;
  for (auto& x : v) x = span > 0 ? (x - a) / span : 0.0;
  return v;
}

inline Image gray_to_image(const std::vector<double>& gray, std::size_t h, std::size_t w) {
  Image img(h, w);
  for (std::size_t i = 0; i < gray.size(); ++i)
    for (std::size_t c = 0; c < 3; ++c) img.pixels[i * 3 + c] = gray[i];
  quantize(img);
  return img;
}

struct AttentionDump {
  std::vector<std::filesystem::path> maps;   // one PGM per (layer, token)
  std::vector<std::filesystem::path> grids;  // one PPM per layer
  std::filesystem::path raw_csv;
};

// Writes layer<L>_token<K>.pgm, grid_layer<L>.ppm and attention.csv into dir.
inline AttentionDump dump_attention(const AttentionRecord& rec, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  AttentionDump out;
  out.raw_csv = dir / "attention.csv";
  CsvWriter csv(out.raw_csv, {"layer", "t", "row", "token", "value"});
  char name[64];
  for (std::size_t l = 0; l < rec.layers.size(); ++l) {
    const auto& m = rec.layers[l];
    std::vector<Image> tiles;
    for (std::size_t k = 0; k < m.tokens; ++k) {
      const auto gray = token_map(m, k);
      std::snprintf(name, sizeof name, "layer%zu_token%02zu.pgm", l, k);
      write_pgm((dir / name).string(), m.height, m.width, gray);
      out.maps.push_back(dir / name);
      tiles.push_back(gray_to_image(gray, m.height, m.width));
    }
    std::snprintf(name, sizeof name, "grid_layer%zu.ppm", l);
    write_ppm((dir / name).string(), tile_images({tiles}));
    out.grids.push_back(dir / name);
    for (std::size_t p = 0; p < m.height * m.width; ++p)
      for (std::size_t k = 0; k < m.tokens; ++k) csv.write(l, rec.t, p, k, m.at(p, k));
  }
  return out;
}

struct TokenMass {
  double pad = 0.0;      // mean attention mass per pad column
  double content = 0.0;  // mean attention mass per content column
};

// Attention mass per column averaged over positions and layers, then split
// into the first `content` columns and the rest.
inline TokenMass token_mass(const AttentionRecord& rec, std::size_t content) {
  TokenMass tm;
  if (rec.layers.empty()) return tm;
  const std::size_t M = rec.layers.front().tokens;
  if (content == 0 || content >= M) throw ParameterError("token_mass: need both content and pad columns");
  for (const auto& m : rec.layers) {
    const std::size_t npos = m.height * m.width;
    for (std::size_t k = 0; k < M; ++k) {
      double s = 0;
      for (std::size_t p = 0; p < npos; ++p) s += m.at(p, k);
      s /= static_cast<double>(npos);
      if (k < content) tm.content += s / static_cast<double>(content);
      else tm.pad += s / static_cast<double>(M - content);
    }
  }
  tm.pad /= static_cast<double>(rec.layers.size());
  tm.content /= static_cast<double>(rec.layers.size());
  return tm;
}

// ---------------------------------------------------------------------------
// N sweep and source-prompt ablation

struct PersonalizationSpec {
  Image image;
  std::string src_prompt;
  std::string tgt_prompt;
  AttrTarget target;
  std::size_t source_texture = kHeldOutTexture;
};

struct SweepEntry {
  std::size_t n = 0;
  MetricReport report;
  std::vector<double> losses;
};

struct SweepResult {
  std::vector<SweepEntry> entries;
  double identity_spearman = 0.0;  // rank correlation of identity_similarity with N
  Image grid;                      // one row of samples per N
};

using CellProgress = std::function<void(const std::string& label)>;

inline SweepResult sweep_n(const PersonalizationSpec& spec, const std::vector<std::size_t>& ns, const Pipeline& pl,
                           TrainConfig train, SampleConfig sample, const CellProgress& progress = {}) {
  if (ns.empty()) throw ParameterError("sweep_n: no N values");
  SweepResult out;
  std::vector<std::vector<Image>> rows;
  std::vector<double> xs, ys;
  for (std::size_t n : ns) {
    train.n_tokens = n;
    auto fit = optimize_hiper(spec.image, spec.src_prompt, pl, train);
    auto gen = generate(spec.tgt_prompt, fit.trainable, pl, sample);
    SweepEntry entry{n, evaluate(gen.images, spec.target, spec.source_texture, pl.canvas), std::move(fit.losses)};
    xs.push_back(static_cast<double>(n));
    ys.push_back(entry.report.identity_similarity);
    rows.push_back(std::move(gen.images));
    out.entries.push_back(std::move(entry));
    if (progress) progress("N=" + std::to_string(n));
  }
  out.identity_spearman = spearman(xs, ys);
  out.grid = tile_images(rows);
  return out;
}

struct AblationEntry {
  std::string prompt;
  MetricReport report;
};

inline std::vector<AblationEntry> ablate_source_prompt(const PersonalizationSpec& spec,
                                                       const std::vector<std::string>& prompts, const Pipeline& pl,
                                                       const TrainConfig& train, const SampleConfig& sample,
                                                       const CellProgress& progress = {}) {
  std::vector<AblationEntry> out;
  for (const auto& prompt : prompts) {
    auto fit = optimize_hiper(spec.image, prompt, pl, train);
    auto gen = generate(spec.tgt_prompt, fit.trainable, pl, sample);
    out.push_back({prompt, evaluate(gen.images, spec.target, spec.source_texture, pl.canvas)});
    if (progress) progress(prompt);
  }
  return out;
}

}  // namespace hiper
