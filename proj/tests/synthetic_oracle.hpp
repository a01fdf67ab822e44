#pragma once

// Brute-force oracles over planted data. They read the generator's world
// file and the raw features only; no model code is involved.

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "mlground/container.hpp"
#include "mlground/dataset.hpp"
#include "mlground/evaluation.hpp"

namespace mlground::testing {

struct World {
  Tensor<double> concepts;
  Tensor<double> scenes;
  std::vector<Tensor<double>> visual;  // per level, c_l x dc

  static World load(const std::filesystem::path& file) {
    ContainerReader r(file);
    World w;
    w.concepts = r.read_as<double>("concepts");
    w.scenes = r.read_as<double>("scenes");
    for (std::size_t l = 0; r.contains("visual.l" + std::to_string(l)); ++l) {
      w.visual.push_back(r.read_as<double>("visual.l" + std::to_string(l)));
    }
    return w;
  }

  std::size_t concept_count() const { return concepts.dim(0); }

  // A_l x for every concept, then for every scene when `with_scenes`.
  std::vector<std::vector<double>> prototypes(std::size_t level, bool with_scenes = false) const {
    const auto& a = visual[level];
    const std::size_t dc = concepts.dim(1);
    std::vector<std::vector<double>> out;
    auto project = [&](const Tensor<double>& src, std::size_t row) {
      std::vector<double> p(a.dim(0), 0.0);
      for (std::size_t r = 0; r < a.dim(0); ++r) {
        for (std::size_t k = 0; k < dc; ++k) p[r] += a.at(r, k) * src.at(row, k);
      }
      out.push_back(std::move(p));
    };
    for (std::size_t c = 0; c < concept_count(); ++c) project(concepts, c);
    if (with_scenes) {
      for (std::size_t k = 0; k < scenes.dim(0); ++k) project(scenes, k);
    }
    return out;
  }
};

inline double cosine(const float* a, const std::vector<double>& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < b.size(); ++i) {
    ab += double(a[i]) * b[i];
    aa += double(a[i]) * a[i];
    bb += b[i] * b[i];
  }
  return ab / std::max(std::sqrt(aa * bb), 1e-12);
}

inline std::size_t concept_of(const std::string& token) { return std::stoul(token.substr(1)); }

// Fraction of patch cells whose nearest prototype at `level`, among concepts
// and scenes, is the planted concept.
inline double decode_accuracy(const Dataset& ds, const World& w, std::size_t level,
                              std::size_t concept_id) {
  const auto protos = w.prototypes(level, true);
  std::size_t right = 0, total = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& rec = ds.record(i);
    auto feat = ContainerReader(rec.container).read_as<float>(rec.levels[level]);
    const std::size_t m = feat.dim(0), c = feat.dim(2);
    const double cell_px = double(rec.image_width) / double(m);
    for (const auto& q : rec.queries) {
      if (concept_of(rec.tokens[q.tokens[0]]) != concept_id) continue;
      const auto& b = q.boxes[0];
      for (auto y = std::size_t(b.y0 / cell_px); y < std::size_t(b.y1 / cell_px); ++y) {
        for (auto x = std::size_t(b.x0 / cell_px); x < std::size_t(b.x1 / cell_px); ++x) {
          const float* v = feat.data().data() + (y * m + x) * c;
          std::size_t best = 0;
          double best_cos = -2;
          for (std::size_t k = 0; k < protos.size(); ++k) {
            const double cs = cosine(v, protos[k]);
            if (cs > best_cos) {
              best_cos = cs;
              best = k;
            }
          }
          right += best == concept_id;
          ++total;
        }
      }
    }
  }
  return total ? double(right) / double(total) : 0.0;
}

// Pointing report of the oracle that grounds each token at the cell with
// maximal cosine to its concept prototype over all levels.
inline EvalReport oracle_report(const Dataset& ds, const World& w) {
  const std::size_t L = w.visual.size();
  std::vector<std::vector<std::vector<double>>> protos;
  for (std::size_t l = 0; l < L; ++l) protos.push_back(w.prototypes(l));
  std::vector<EvalItem> items;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& rec = ds.record(i);
    ContainerReader reader(rec.container);
    std::vector<Tensor<float>> levels;
    for (const auto& name : rec.levels) levels.push_back(reader.read_as<float>(name));
    const std::size_t m = levels[0].dim(0);
    for (std::size_t qi = 0; qi < rec.queries.size(); ++qi) {
      const auto& q = rec.queries[qi];
      const std::size_t concept_id = concept_of(rec.tokens[q.tokens[0]]);
      EvalItem item{rec.id, qi, q.category, std::vector<double>(m * m, 0.0), m, rec.image_width,
                    rec.image_height, q.boxes, 0, q.planted_level};
      double best = -2;
      for (std::size_t l = 0; l < L; ++l) {
        const std::size_t c = levels[l].dim(2);
        for (std::size_t n = 0; n < m * m; ++n) {
          const double cs = cosine(levels[l].data().data() + n * c, protos[l][concept_id]);
          item.heatmap[n] = std::max(item.heatmap[n], std::max(cs, 0.0));
          if (cs > best) {
            best = cs;
            item.selected_level = l;
          }
        }
      }
      items.push_back(std::move(item));
    }
  }
  return summarize(std::span<const EvalItem>(items), L, "oracle");
}

}  // namespace mlground::testing
