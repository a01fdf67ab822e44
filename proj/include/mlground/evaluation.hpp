#pragma once

// Pointing game, attention correctness and level-selection statistics,
// plus heatmap export.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mlground/dataset.hpp"
#include "mlground/model.hpp"
#include "mlground/ops.hpp"

namespace mlground {

// Reshapes an N-vector over an M x M grid and resizes it to image size.
template <typename Scalar>
Tensor<Scalar> upsample_heatmap(std::span<const Scalar> h, std::size_t grid, std::size_t image_w,
                                std::size_t image_h) {
  if (grid == 0 || h.size() != grid * grid) {
    throw ShapeError(detail::concat("heatmap of length ", h.size(), " is not a ", grid, "x", grid,
                                    " grid"));
  }
  Tensor<Scalar> g({grid, grid}, std::vector<Scalar>(h.begin(), h.end()));
  return bilinear_resize(g, image_h, image_w);
}

struct PointingResult {
  bool hit = false;
  std::size_t x = 0, y = 0;
};

// Argmax pixel of an H x W map, first occurrence in row-major order.
template <typename Scalar>
PointingResult pointing_hit(const Tensor<Scalar>& map, std::span<const Box> boxes) {
  if (map.rank() != 2) throw ShapeError("pointing_hit expects an H x W map");
  const std::size_t idx = argmax(map.data());
  PointingResult r;
  r.y = idx / map.dim(1);
  r.x = idx % map.dim(1);
  for (const auto& b : boxes) r.hit = r.hit || b.contains(std::int64_t(r.x), std::int64_t(r.y));
  return r;
}

template <typename Scalar>
PointingResult pointing_hit(const Tensor<Scalar>& map, const Box& box) {
  return pointing_hit(map, std::span<const Box>(&box, 1));
}

// Share of heatmap mass inside the union of boxes.
template <typename Scalar>
double attention_correctness(const Tensor<Scalar>& map, std::span<const Box> boxes) {
  if (map.rank() != 2) throw ShapeError("attention_correctness expects an H x W map");
  double inside = 0, total = 0;
  for (std::size_t y = 0; y < map.dim(0); ++y) {
    for (std::size_t x = 0; x < map.dim(1); ++x) {
      const double v = map.at(y, x);
      if (v < 0) throw ValueError("attention_correctness: heatmap must be nonnegative");
      total += v;
      const bool in = std::any_of(boxes.begin(), boxes.end(), [&](const Box& b) {
        return b.contains(std::int64_t(x), std::int64_t(y));
      });
      if (in) inside += v;
    }
  }
  return inside / std::max(total, kNormEpsilon);
}

template <typename Scalar>
double attention_correctness(const Tensor<Scalar>& map, const Box& box) {
  return attention_correctness(map, std::span<const Box>(&box, 1));
}

enum class EvalMode { Word, Sentence };

inline EvalMode parse_eval_mode(const std::string& s) {
  if (s == "word") return EvalMode::Word;
  if (s == "sentence") return EvalMode::Sentence;
  throw ValueError(detail::concat("unknown eval mode '", s, "' (word|sentence)"));
}

inline const char* eval_mode_name(EvalMode m) { return m == EvalMode::Word ? "word" : "sentence"; }

// One query's grid heatmap, ready to be scored.
struct EvalItem {
  std::string sample_id;
  std::size_t query = 0;
  std::string category;
  std::vector<double> heatmap;  // N = grid * grid
  std::size_t grid = 0;
  std::size_t image_width = 0, image_height = 0;
  std::vector<Box> boxes;
  std::size_t selected_level = 0;
  std::optional<std::size_t> planted_level;
};

struct QueryResult {
  std::string sample_id;
  std::size_t query = 0;
  std::string category;
  bool hit = false;
  std::size_t x = 0, y = 0;
  double correctness = 0;
  std::size_t selected_level = 0;
  std::optional<std::size_t> planted_level;
};

struct CategoryStats {
  std::size_t hits = 0, misses = 0;
  double accuracy = 0;
  double correctness = 0;                  // mean over queries
  std::vector<std::size_t> level_counts;   // per level
  std::vector<double> level_rates;         // percentages, sum to 100
};

struct EvalReport {
  std::string mode;
  std::size_t levels = 0;
  std::size_t hits = 0, misses = 0;
  double pointing_accuracy = 0;
  double attention_correctness = 0;
  std::map<std::string, CategoryStats> categories;
  std::vector<QueryResult> queries;
};

inline QueryResult score_item(const EvalItem& item) {
  auto map = upsample_heatmap<double>(item.heatmap, item.grid, item.image_width, item.image_height);
  auto p = pointing_hit(map, std::span<const Box>(item.boxes));
  QueryResult q;
  q.sample_id = item.sample_id;
  q.query = item.query;
  q.category = item.category;
  q.hit = p.hit;
  q.x = p.x;
  q.y = p.y;
  // Bilinear weights are convex, so a nonnegative grid stays nonnegative;
  // tiny negative rounding is clamped.
  for (auto& v : map.storage()) v = std::max(v, 0.0);
  q.correctness = attention_correctness(map, std::span<const Box>(item.boxes));
  q.selected_level = item.selected_level;
  q.planted_level = item.planted_level;
  return q;
}

inline EvalReport summarize(std::span<const QueryResult> results, std::size_t levels, const std::string& mode) {
  if (results.empty()) throw ValueError("evaluation: no queries");
  EvalReport r;
  r.mode = mode;
  r.levels = levels;
  r.queries.assign(results.begin(), results.end());
  double corr = 0;
  for (const auto& q : results) {
    if (q.selected_level >= levels) throw ValueError("evaluation: selected level out of range");
    auto& c = r.categories[q.category];
    if (c.level_counts.empty()) c.level_counts.assign(levels, 0);
    (q.hit ? c.hits : c.misses) += 1;
    (q.hit ? r.hits : r.misses) += 1;
    c.correctness += q.correctness;
    c.level_counts[q.selected_level] += 1;
    corr += q.correctness;
  }
  r.pointing_accuracy = double(r.hits) / double(r.hits + r.misses);
  r.attention_correctness = corr / double(results.size());
  for (auto& [name, c] : r.categories) {
    const double n = double(c.hits + c.misses);
    c.accuracy = double(c.hits) / n;
    c.correctness /= n;
    for (auto k : c.level_counts) c.level_rates.push_back(100.0 * double(k) / n);
  }
  return r;
}

inline EvalReport summarize(std::span<const EvalItem> items, std::size_t levels, const std::string& mode) {
  std::vector<QueryResult> results;
  results.reserve(items.size());
  for (const auto& item : items) results.push_back(score_item(item));
  return summarize(std::span<const QueryResult>(results), levels, mode);
}

// Heatmap and level for one query given a grounding of its caption. In
// word mode a multi-token query reports the level of its highest-scoring
// token.
template <typename Scalar>
std::pair<std::vector<double>, std::size_t> query_heatmap(const Grounding<Scalar>& g, const Query& q,
                                                          EvalMode mode) {
  std::vector<double> out;
  std::size_t level = 0;
  if (mode == EvalMode::Word) {
    auto h = compose_query_heatmap(g.word_heatmaps, g.word_scores.data(),
                                   std::span<const std::size_t>(g.word_levels),
                                   std::span<const std::size_t>(q.tokens));
    out.assign(h.begin(), h.end());
    std::size_t best = q.tokens.front();
    for (auto t : q.tokens) {
      if (g.word_scores[t] > g.word_scores[best]) best = t;
    }
    level = g.word_levels[best];
  } else {
    const std::size_t n = g.sentence_heatmaps.dim(0), l = g.sentence_heatmaps.dim(1);
    level = g.sentence_level;
    for (std::size_t r = 0; r < n; ++r) out.push_back(double(g.sentence_heatmaps[r * l + level]));
  }
  return {std::move(out), level};
}

template <typename Scalar>
std::vector<EvalItem> eval_items(const Dataset& ds, std::size_t index, ParamSet<Scalar>& params,
                                 const ModelOptions& opts, EvalMode mode) {
  const auto& rec = ds.record(index);
  auto sample = ds.sample<Scalar>(index);
  auto g = ground(params, sample.visual, sample.text, opts);
  std::vector<EvalItem> items;
  for (std::size_t qi = 0; qi < rec.queries.size(); ++qi) {
    const auto& q = rec.queries[qi];
    auto [heat, level] = query_heatmap(g, q, mode);
    items.push_back({rec.id, qi, q.category, std::move(heat), g.grid, rec.image_width,
                     rec.image_height, q.boxes, level, q.planted_level});
  }
  return items;
}

template <typename Scalar>
EvalReport evaluate(const Dataset& ds, ParamSet<Scalar>& params, const ModelOptions& opts, EvalMode mode) {
  if (ds.size() == 0) throw ValueError("evaluation: empty dataset");
  std::vector<QueryResult> results;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (const auto& item : eval_items(ds, i, params, opts, mode)) results.push_back(score_item(item));
  }
  return summarize(std::span<const QueryResult>(results), ds.dims().visual_channels.size(),
                   eval_mode_name(mode));
}

inline nlohmann::json to_json(const QueryResult& q) {
  nlohmann::json j = {{"type", "query"},  {"sample", q.sample_id},
                      {"query", q.query}, {"category", q.category},
                      {"hit", q.hit},     {"point", {q.x, q.y}},
                      {"correctness", q.correctness}, {"level", q.selected_level}};
  j["planted_level"] = q.planted_level ? nlohmann::json(*q.planted_level) : nlohmann::json();
  return j;
}

inline nlohmann::json summary_json(const EvalReport& r) {
  nlohmann::json cats = nlohmann::json::object();
  for (const auto& [name, c] : r.categories) {
    cats[name] = {{"hits", c.hits},
                  {"misses", c.misses},
                  {"accuracy", c.accuracy},
                  {"attention_correctness", c.correctness},
                  {"level_counts", c.level_counts},
                  {"level_rates", c.level_rates}};
  }
  return {{"type", "summary"},
          {"mode", r.mode},
          {"levels", r.levels},
          {"hits", r.hits},
          {"misses", r.misses},
          {"pointing_accuracy", r.pointing_accuracy},
          {"attention_correctness", r.attention_correctness},
          {"categories", cats}};
}

// One line per query followed by one summary line.
inline void write_report(const EvalReport& r, const std::filesystem::path& path) {
  auto tmp = path;
  tmp += ".partial";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw IoError(detail::concat("cannot write '", tmp.string(), "'"));
    for (const auto& q : r.queries) out << to_json(q).dump() << '\n';
    out << summary_json(r).dump() << '\n';
    if (!out) throw IoError(detail::concat("cannot write '", tmp.string(), "'"));
  }
  std::filesystem::rename(tmp, path);
}

enum class HeatmapFormat { Pgm, Json };

inline HeatmapFormat parse_heatmap_format(const std::string& s) {
  if (s == "pgm") return HeatmapFormat::Pgm;
  if (s == "json") return HeatmapFormat::Json;
  throw ValueError(detail::concat("unknown heatmap format '", s, "' (pgm|json)"));
}

// 8-bit graymap with the maximum mapped to 255; negative values clamp to 0.
template <typename Scalar>
std::vector<std::uint8_t> graymap_pixels(const Tensor<Scalar>& map) {
  double hi = 0;
  for (auto v : map.data()) hi = std::max(hi, double(v));
  std::vector<std::uint8_t> px(map.size(), 0);
  if (hi <= 0) return px;
  for (std::size_t i = 0; i < map.size(); ++i) {
    const double v = std::clamp(double(map[i]) / hi, 0.0, 1.0);
    px[i] = static_cast<std::uint8_t>(std::lround(255.0 * v));
  }
  return px;
}

template <typename Scalar>
void export_heatmap(const Tensor<Scalar>& map, const std::filesystem::path& path, HeatmapFormat format,
                    const nlohmann::json& metadata = nlohmann::json::object()) {
  if (map.rank() != 2) throw ShapeError("export_heatmap expects an H x W map");
  auto tmp = path;
  tmp += ".partial";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(detail::concat("cannot write heatmap '", path.string(), "'"));
    if (format == HeatmapFormat::Pgm) {
      auto px = graymap_pixels(map);
      out << "P5\n" << map.dim(1) << ' ' << map.dim(0) << "\n255\n";
      out.write(reinterpret_cast<const char*>(px.data()), std::streamsize(px.size()));
    } else {
      const std::size_t idx = argmax(map.data());
      nlohmann::json values = nlohmann::json::array();
      for (std::size_t y = 0; y < map.dim(0); ++y) {
        nlohmann::json row = nlohmann::json::array();
        for (std::size_t x = 0; x < map.dim(1); ++x) row.push_back(double(map.at(y, x)));
        values.push_back(std::move(row));
      }
      nlohmann::json j = {{"height", map.dim(0)},
                          {"width", map.dim(1)},
                          {"argmax", {{"x", idx % map.dim(1)}, {"y", idx / map.dim(1)}}},
                          {"values", values},
                          {"metadata", metadata}};
      out << j.dump() << '\n';
    }
    if (!out) throw IoError(detail::concat("cannot write heatmap '", path.string(), "'"));
  }
  std::filesystem::rename(tmp, path);
}

inline Tensor<double> read_heatmap_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError(detail::concat("cannot open '", path.string(), "'"));
  auto j = nlohmann::json::parse(in);
  Tensor<double> t({j.at("height").get<std::size_t>(), j.at("width").get<std::size_t>()});
  for (std::size_t y = 0; y < t.dim(0); ++y) {
    for (std::size_t x = 0; x < t.dim(1); ++x) t.at(y, x) = j.at("values").at(y).at(x).get<double>();
  }
  return t;
}

struct Graymap {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> pixels;
};

inline Graymap read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::string magic;
  std::size_t maxval = 0;
  Graymap g;
  if (!(in >> magic >> g.width >> g.height >> maxval) || magic != "P5" || maxval != 255) {
    throw IoError(detail::concat("'", path.string(), "' is not an 8-bit P5 graymap"));
  }
  in.get();
  g.pixels.resize(g.width * g.height);
  if (!in.read(reinterpret_cast<char*>(g.pixels.data()), std::streamsize(g.pixels.size()))) {
    throw IoError(detail::concat("'", path.string(), "' is truncated"));
  }
  return g;
}

}  // namespace mlground
