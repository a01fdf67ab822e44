#pragma once

// Hand-built five-sample evaluation fixture and a from-scratch recount of
// its report. The recount shares no code with the evaluation module.

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mlground/evaluation.hpp"

namespace mlground::testing {

inline std::vector<EvalItem> five_sample_fixture() {
  // 2x2 grids upsampled to 6 wide x 4 high; three levels.
  auto item = [](std::string sample, std::size_t q, std::string cat, std::vector<double> h,
                 std::vector<Box> boxes, std::size_t level, std::optional<std::size_t> planted) {
    return EvalItem{std::move(sample), q, std::move(cat), std::move(h), 2, 6, 4, std::move(boxes),
                    level, planted};
  };
  return {
      item("a", 0, "dog", {0.9, 0.1, 0.0, 0.2}, {{0, 0, 3, 2}}, 0, 0),
      item("a", 1, "cat", {0.1, 0.2, 0.3, 0.8}, {{0, 0, 3, 2}}, 2, 1),
      item("b", 0, "dog", {0.0, 0.0, 0.0, 0.0}, {{3, 2, 6, 4}}, 1, 0),          // zero map
      item("c", 0, "car", {0.5, 0.5, 0.5, 0.5}, {{0, 0, 1, 1}}, 2, 2),          // tie at (0,0)
      item("d", 0, "cat", {0.2, 0.7, 0.1, 0.0}, {{0, 2, 2, 4}, {4, 0, 6, 2}}, 1, 1),
      item("e", 0, "dog", {0.3, 0.1, 0.6, 0.05}, {{1, 1, 5, 3}}, 0, 0),
  };
}

struct RecountQuery {
  bool hit;
  std::size_t x, y;
  double correctness;
};

// Direct half-pixel bilinear evaluation at one output pixel.
inline double recount_pixel(const std::vector<double>& g, std::size_t m, std::size_t w,
                            std::size_t h, std::size_t x, std::size_t y) {
  auto coord = [m](std::size_t i, std::size_t out, std::size_t& lo, std::size_t& hi, double& t) {
    double s = (double(i) + 0.5) * double(m) / double(out) - 0.5;
    s = std::min(std::max(s, 0.0), double(m - 1));
    lo = std::size_t(std::floor(s));
    hi = std::min(lo + 1, m - 1);
    t = s - double(lo);
  };
  std::size_t y0, y1, x0, x1;
  double ty, tx;
  coord(y, h, y0, y1, ty);
  coord(x, w, x0, x1, tx);
  auto at = [&](std::size_t r, std::size_t c) { return g[r * m + c]; };
  return (1 - ty) * ((1 - tx) * at(y0, x0) + tx * at(y0, x1)) +
         ty * ((1 - tx) * at(y1, x0) + tx * at(y1, x1));
}

inline RecountQuery recount_query(const EvalItem& it) {
  RecountQuery r{false, 0, 0, 0};
  double best = -INFINITY, inside = 0, total = 0;
  for (std::size_t y = 0; y < it.image_height; ++y) {
    for (std::size_t x = 0; x < it.image_width; ++x) {
      const double v = recount_pixel(it.heatmap, it.grid, it.image_width, it.image_height, x, y);
      if (v > best) {
        best = v;
        r.x = x;
        r.y = y;
      }
      bool in = false;
      for (const auto& b : it.boxes) {
        in = in || (std::int64_t(x) >= b.x0 && std::int64_t(x) < b.x1 && std::int64_t(y) >= b.y0 &&
                    std::int64_t(y) < b.y1);
      }
      total += std::max(v, 0.0);
      if (in) inside += std::max(v, 0.0);
    }
  }
  for (const auto& b : it.boxes) {
    r.hit = r.hit || (std::int64_t(r.x) >= b.x0 && std::int64_t(r.x) < b.x1 &&
                      std::int64_t(r.y) >= b.y0 && std::int64_t(r.y) < b.y1);
  }
  r.correctness = inside / std::max(total, 1e-8);
  return r;
}

// Compares a report against the recount; returns a description of the first
// mismatch, or an empty string.
inline std::string compare_with_recount(const EvalReport& rep, const std::vector<EvalItem>& items,
                                        std::size_t levels) {
  auto bad = [](auto&&... a) {
    std::ostringstream os;
    (os << ... << a);
    return os.str();
  };
  if (rep.queries.size() != items.size()) return bad("query count ", rep.queries.size());
  std::size_t hits = 0;
  double corr = 0;
  std::map<std::string, std::vector<std::size_t>> idx;
  std::vector<RecountQuery> rc;
  for (std::size_t i = 0; i < items.size(); ++i) {
    rc.push_back(recount_query(items[i]));
    const auto& q = rep.queries[i];
    const auto& r = rc.back();
    if (q.sample_id != items[i].sample_id || q.query != items[i].query || q.category != items[i].category)
      return bad("query ", i, " identity");
    if (q.hit != r.hit) return bad("query ", i, " hit");
    if (q.x != r.x || q.y != r.y) return bad("query ", i, " point (", q.x, ",", q.y, ") vs (", r.x, ",", r.y, ")");
    if (std::abs(q.correctness - r.correctness) > 1e-12) return bad("query ", i, " correctness");
    if (q.selected_level != items[i].selected_level) return bad("query ", i, " level");
    if (q.planted_level != items[i].planted_level) return bad("query ", i, " planted level");
    hits += r.hit;
    corr += r.correctness;
    idx[items[i].category].push_back(i);
  }
  const std::size_t n = items.size();
  if (rep.hits != hits || rep.misses != n - hits) return bad("hit/miss counts");
  if (rep.pointing_accuracy != double(hits) / double(n)) return bad("accuracy");
  if (std::abs(rep.attention_correctness - corr / double(n)) > 1e-12) return bad("mean correctness");
  if (rep.levels != levels) return bad("levels");
  if (rep.categories.size() != idx.size()) return bad("category count");
  for (const auto& [name, members] : idx) {
    auto it = rep.categories.find(name);
    if (it == rep.categories.end()) return bad("missing category ", name);
    const auto& c = it->second;
    std::size_t ch = 0;
    double cc = 0;
    std::vector<std::size_t> counts(levels, 0);
    for (auto i : members) {
      ch += rc[i].hit;
      cc += rc[i].correctness;
      counts[items[i].selected_level]++;
    }
    const double m = double(members.size());
    if (c.hits != ch || c.misses != members.size() - ch) return bad(name, " counts");
    if (c.accuracy != double(ch) / m) return bad(name, " accuracy");
    if (std::abs(c.correctness - cc / m) > 1e-12) return bad(name, " correctness");
    if (c.level_counts != counts) return bad(name, " level counts");
    double sum = 0;
    for (std::size_t l = 0; l < levels; ++l) {
      if (std::abs(c.level_rates[l] - 100.0 * double(counts[l]) / m) > 1e-12) return bad(name, " level rate");
      sum += c.level_rates[l];
    }
    if (std::abs(sum - 100.0) > 0.1) return bad(name, " level rates sum ", sum);
  }
  return "";
}

}  // namespace mlground::testing
