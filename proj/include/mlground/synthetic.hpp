#pragma once

// Planted-correspondence data. Each image is an M x M grid where a few
// concepts occupy small rectangular patches and every other cell holds the
// image's scene vector, drawn from a small set that no caption mentions. Raw
// features are fixed random linear maps of these vectors plus gaussian noise,
// so the token-to-cell ground truth is known exactly.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mlground/container.hpp"
#include "mlground/dataset.hpp"
#include "mlground/error.hpp"

namespace mlground {

enum class Visibility {
  Full,    // every concept is recoverable at every level
  Single,  // concept c is recoverable only at level c mod L
};

inline Visibility parse_visibility(const std::string& s) {
  if (s == "full") return Visibility::Full;
  if (s == "single") return Visibility::Single;
  throw ValueError(detail::concat("unknown visibility '", s, "' (full|single)"));
}

inline const char* visibility_name(Visibility v) { return v == Visibility::Full ? "full" : "single"; }

struct SyntheticSpec {
  std::size_t concepts = 8;
  std::size_t grid = 8;
  std::vector<std::size_t> level_dims = {32, 48, 64};  // one entry per level
  std::size_t concept_dim = 32;
  std::size_t word_layers = 3;
  std::size_t word_width = 48;
  std::size_t sentence_items = 2;
  std::size_t sentence_width = 96;
  double noise = 0.05;
  Visibility visibility = Visibility::Full;
  bool identity_maps = false;
  std::size_t samples = 500;
  std::size_t cell_px = 8;
  std::size_t min_concepts = 1;
  std::size_t max_concepts = 4;
  std::size_t max_patch = 3;  // patch side length in cells
  std::size_t scenes = 16;  // background vectors; each image uses one
  std::uint64_t seed = 0;
  // Seeds image layouts and noise; defaults to `seed`. Changing it alone
  // gives a fresh split over the same concepts and maps.
  std::optional<std::uint64_t> sample_seed;

  std::size_t levels() const { return level_dims.size(); }

  bool visible(std::size_t concept_id, std::size_t level) const {
    return visibility == Visibility::Full || concept_id % levels() == level;
  }

  void validate() const {
    auto fail = [](auto&&... a) { throw ValueError(detail::concat("synthetic: ", a...)); };
    if (concepts < 2) fail("need at least 2 concepts");
    if (!(noise >= 0) || !std::isfinite(noise)) fail("noise must be finite and >= 0");
    if (grid == 0 || cell_px == 0 || samples == 0) fail("grid, cell_px and samples must be positive");
    if (level_dims.empty()) fail("need at least one level");
    if (scenes == 0) fail("need at least one scene");
    if (concepts + scenes > concept_dim) {
      fail(concepts, " concepts plus ", scenes, " scenes exceed the near-orthogonal capacity of concept_dim ",
           concept_dim);
    }
    for (auto d : level_dims) {
      if (d < concept_dim) fail("level dim ", d, " is below concept_dim ", concept_dim);
      if (identity_maps && d != concept_dim) fail("identity maps need level dims equal to concept_dim");
    }
    if (word_layers == 0 || sentence_items == 0) fail("text stacks need at least one layer");
    if (word_width < concept_dim || sentence_width < concept_dim) {
      fail("text widths must be at least concept_dim ", concept_dim);
    }
    if (identity_maps && (word_width != concept_dim || sentence_width != concept_dim)) {
      fail("identity maps need text widths equal to concept_dim");
    }
    if (min_concepts == 0 || min_concepts > max_concepts || max_concepts > concepts) {
      fail("need 1 <= min_concepts <= max_concepts <= concepts");
    }
    if (max_patch == 0 || max_concepts * max_patch * max_patch > grid * grid) {
      fail("patches of side ", max_patch, " for ", max_concepts, " concepts do not fit a ", grid, "x",
           grid, " grid");
    }
  }
};

// The fixed random quantities shared by all samples.
struct SyntheticWorld {
  Tensor<double> concepts;                   // C x dc, unit rows
  Tensor<double> scenes;                     // scenes x dc, unit rows
  std::vector<Tensor<double>> visual_maps;   // per level, c_l x dc
  std::vector<Tensor<double>> word_maps;     // per layer, E x dc
  std::vector<Tensor<double>> sentence_maps; // per item, S x dc
};

namespace detail {

inline Tensor<double> gaussian_map(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, 1.0 / std::sqrt(double(cols)));
  Tensor<double> m({rows, cols});
  for (auto& v : m.storage()) v = nd(rng);
  return m;
}

inline Tensor<double> identity_map(std::size_t n) {
  Tensor<double> m({n, n});
  for (std::size_t i = 0; i < n; ++i) m.at(i, i) = 1.0;
  return m;
}

inline std::vector<double> unit_gaussian(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> v(n);
  double sq = 0;
  do {
    sq = 0;
    for (auto& x : v) {
      x = nd(rng);
      sq += x * x;
    }
  } while (sq == 0);
  for (auto& x : v) x /= std::sqrt(sq);
  return v;
}

// m * (x + noise), written into out.
inline void apply_map(const Tensor<double>& m, const std::vector<double>& x, double sigma,
                      std::mt19937_64& rng, float* out) {
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> in(x);
  if (sigma > 0) {
    for (auto& v : in) v += sigma * nd(rng);
  }
  const std::size_t rows = m.dim(0), cols = m.dim(1);
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0;
    for (std::size_t c = 0; c < cols; ++c) acc += m.at(r, c) * in[c];
    out[r] = static_cast<float>(acc);
  }
}

inline std::seed_seq stream_seed(std::uint64_t seed, std::uint64_t stream) {
  return std::seed_seq{std::uint32_t(seed), std::uint32_t(seed >> 32), std::uint32_t(stream),
                       std::uint32_t(stream >> 32)};
}

}  // namespace detail

inline SyntheticWorld make_world(const SyntheticSpec& spec) {
  spec.validate();
  auto ss = detail::stream_seed(spec.seed, 0);
  std::mt19937_64 rng(ss);
  SyntheticWorld w;
  w.concepts = Tensor<double>({spec.concepts, spec.concept_dim});
  for (std::size_t c = 0; c < spec.concepts; ++c) {
    auto v = detail::unit_gaussian(spec.concept_dim, rng);
    std::copy(v.begin(), v.end(), w.concepts.storage().begin() + c * spec.concept_dim);
  }
  w.scenes = Tensor<double>({spec.scenes, spec.concept_dim});
  for (std::size_t k = 0; k < spec.scenes; ++k) {
    auto v = detail::unit_gaussian(spec.concept_dim, rng);
    std::copy(v.begin(), v.end(), w.scenes.storage().begin() + k * spec.concept_dim);
  }
  auto make = [&](std::size_t rows) {
    return spec.identity_maps ? detail::identity_map(spec.concept_dim)
                              : detail::gaussian_map(rows, spec.concept_dim, rng);
  };
  for (auto d : spec.level_dims) w.visual_maps.push_back(make(d));
  for (std::size_t k = 0; k < spec.word_layers; ++k) w.word_maps.push_back(make(spec.word_width));
  for (std::size_t k = 0; k < spec.sentence_items; ++k) {
    w.sentence_maps.push_back(make(spec.sentence_width));
  }
  return w;
}

inline TensorContainer world_container(const SyntheticWorld& w) {
  TensorContainer c;
  c.add("concepts", w.concepts);
  c.add("scenes", w.scenes);
  for (std::size_t l = 0; l < w.visual_maps.size(); ++l) c.add("visual.l" + std::to_string(l), w.visual_maps[l]);
  for (std::size_t k = 0; k < w.word_maps.size(); ++k) c.add("word.k" + std::to_string(k), w.word_maps[k]);
  for (std::size_t k = 0; k < w.sentence_maps.size(); ++k) {
    c.add("sentence.k" + std::to_string(k), w.sentence_maps[k]);
  }
  return c;
}

struct Patch {
  std::size_t concept_id = 0;
  std::size_t row = 0, col = 0, height = 1, width = 1;  // in grid cells
};

// Concept layout of one image: concept index per cell, -1 for background.
struct SyntheticLayout {
  std::vector<Patch> patches;
  std::vector<int> cells;  // M*M, row-major
};

inline SyntheticLayout draw_layout(const SyntheticSpec& spec, std::mt19937_64& rng) {
  const std::size_t m = spec.grid;
  std::uniform_int_distribution<std::size_t> count(spec.min_concepts, spec.max_concepts);
  std::uniform_int_distribution<std::size_t> side(1, spec.max_patch);
  std::vector<std::size_t> all(spec.concepts);
  for (std::size_t c = 0; c < spec.concepts; ++c) all[c] = c;
  std::shuffle(all.begin(), all.end(), rng);
  SyntheticLayout out;
  out.cells.assign(m * m, -1);
  const std::size_t n = count(rng);
  for (std::size_t i = 0; i < n; ++i) {
    bool placed = false;
    for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
      Patch p{all[i], 0, 0, std::min(side(rng), m), std::min(side(rng), m)};
      p.row = std::uniform_int_distribution<std::size_t>(0, m - p.height)(rng);
      p.col = std::uniform_int_distribution<std::size_t>(0, m - p.width)(rng);
      bool free = true;
      for (std::size_t r = p.row; r < p.row + p.height && free; ++r) {
        for (std::size_t c = p.col; c < p.col + p.width; ++c) free = free && out.cells[r * m + c] < 0;
      }
      if (!free) continue;
      for (std::size_t r = p.row; r < p.row + p.height; ++r) {
        for (std::size_t c = p.col; c < p.col + p.width; ++c) out.cells[r * m + c] = int(p.concept_id);
      }
      out.patches.push_back(p);
      placed = true;
    }
    if (!placed) throw ValueError("synthetic: could not place patches; lower max_patch or max_concepts");
  }
  return out;
}

struct SyntheticResult {
  std::filesystem::path index;
  std::vector<SampleRecord> records;
  SyntheticWorld world;
};

// Writes <out>/index.jsonl, <out>/world.gtf and one container per sample
// under <out>/features. Output is a pure function of `spec`.
inline SyntheticResult generate_synthetic(const SyntheticSpec& spec, const std::filesystem::path& out) {
  spec.validate();
  namespace fs = std::filesystem;
  fs::create_directories(out / "features");
  SyntheticResult res;
  res.world = make_world(spec);
  world_container(res.world).write(out / "world.gtf");

  const std::size_t m = spec.grid, dc = spec.concept_dim, L = spec.levels();
  auto ss = detail::stream_seed(spec.sample_seed.value_or(spec.seed), 1);
  std::mt19937_64 rng(ss);
  for (std::size_t s = 0; s < spec.samples; ++s) {
    const auto layout = draw_layout(spec, rng);
    const std::size_t scene = std::uniform_int_distribution<std::size_t>(0, spec.scenes - 1)(rng);
    auto scene_row = res.world.scenes.data().subspan(scene * dc, dc);
    TensorContainer c;
    SampleRecord r;
    char id[32];
    std::snprintf(id, sizeof id, "%05zu", s);
    r.id = std::string("s") + id;
    r.image_id = std::string("img") + id;
    r.container = fs::path("features") / (r.id + ".gtf");
    r.image_width = r.image_height = m * spec.cell_px;

    for (std::size_t l = 0; l < L; ++l) {
      Tensor<float> level({m, m, spec.level_dims[l]});
      for (std::size_t cell = 0; cell < m * m; ++cell) {
        const int k = layout.cells[cell];
        std::vector<double> x;
        if (k >= 0 && spec.visible(std::size_t(k), l)) {
          auto row = res.world.concepts.data().subspan(std::size_t(k) * dc, dc);
          x.assign(row.begin(), row.end());
        } else {
          // Background, or a concept hidden at this level: the scene shows.
          x.assign(scene_row.begin(), scene_row.end());
        }
        detail::apply_map(res.world.visual_maps[l], x, spec.noise, rng,
                          level.storage().data() + cell * spec.level_dims[l]);
      }
      r.levels.push_back("img/l" + std::to_string(l));
      c.add(r.levels.back(), std::move(level));
    }

    std::vector<std::size_t> order(layout.patches.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<double> mean(dc, 0.0);
    for (std::size_t t = 0; t < order.size(); ++t) {
      const auto& p = layout.patches[order[t]];
      auto row = res.world.concepts.data().subspan(p.concept_id * dc, dc);
      std::vector<double> x(row.begin(), row.end());
      for (std::size_t i = 0; i < dc; ++i) mean[i] += x[i] / double(order.size());
      Tensor<float> w({spec.word_layers, spec.word_width});
      for (std::size_t k = 0; k < spec.word_layers; ++k) {
        detail::apply_map(res.world.word_maps[k], x, spec.noise, rng,
                          w.storage().data() + k * spec.word_width);
      }
      r.tokens.push_back("c" + std::to_string(p.concept_id));
      r.words.push_back("cap/w" + std::to_string(t));
      c.add(r.words.back(), std::move(w));

      Query q;
      q.tokens = {t};
      q.boxes = {{std::int64_t(p.col * spec.cell_px), std::int64_t(p.row * spec.cell_px),
                  std::int64_t((p.col + p.width) * spec.cell_px),
                  std::int64_t((p.row + p.height) * spec.cell_px)}};
      q.category = r.tokens.back();
      if (spec.visibility == Visibility::Single) q.planted_level = p.concept_id % L;
      r.queries.push_back(std::move(q));
    }
    Tensor<float> sent({spec.sentence_items, spec.sentence_width});
    for (std::size_t k = 0; k < spec.sentence_items; ++k) {
      detail::apply_map(res.world.sentence_maps[k], mean, spec.noise, rng,
                        sent.storage().data() + k * spec.sentence_width);
    }
    r.sentence = "cap/sentence";
    c.add(r.sentence, std::move(sent));
    c.write(out / r.container);
    res.records.push_back(std::move(r));
  }
  res.index = out / "index.jsonl";
  write_index(res.index, res.records);
  return res;
}

}  // namespace mlground
