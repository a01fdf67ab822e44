#pragma once

// Non-linear mappings of raw visual and textual features into the shared
// D-dimensional space where every comparison is a cosine similarity.

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "mlground/autodiff.hpp"

namespace mlground {

struct MappingDims {
  std::vector<std::size_t> visual_channels;  // c_l for each level
  std::size_t word_layers = 3;               // K
  std::size_t word_width = 0;                // E
  std::size_t sentence_items = 2;            // K_s
  std::size_t sentence_width = 0;            // 2E
  std::size_t common_dim = 1024;             // D

  std::size_t levels() const { return visual_channels.size(); }
};

struct MappingOptions {
  std::size_t grid = 18;  // M; N = M * M regions
  double leaky_alpha = 0.25;
  bool linear_visual = false;
  bool linear_text = false;
};

template <typename Scalar>
struct RawVisualFeatures {
  std::vector<Tensor<Scalar>> levels;  // h_l x w_l x c_l each
};

template <typename Scalar>
struct RawTextFeatures {
  Tensor<Scalar> words;     // T x K x E
  Tensor<Scalar> sentence;  // K_s x 2E
};

// V in R^{N x L x D}, kept as one N x D node per level.
template <typename Scalar>
struct CommonSpaceImage {
  std::vector<Var<Scalar>> levels;

  std::size_t regions() const { return levels.front().value().dim(0); }
  std::size_t level_count() const { return levels.size(); }
  std::size_t dim() const { return levels.front().value().dim(1); }

  Tensor<Scalar> stacked() const {
    const std::size_t n = regions(), l = level_count(), d = dim();
    Tensor<Scalar> out({n, l, d});
    for (std::size_t li = 0; li < l; ++li) {
      const auto& v = levels[li].value();
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = 0; k < d; ++k) out.at(i, li, k) = v.at(i, k);
      }
    }
    return out;
  }
};

namespace names {

inline std::string visual(std::size_t level, int layer, char kind) {
  return detail::concat("vis.l", level, ".fc", layer, '.', kind);
}
inline std::string text(const std::string& path, int layer, char kind) {
  return detail::concat(path, ".fc", layer, '.', kind);
}

}  // namespace names

// Glorot-uniform weights, zero biases, mixing scalars at 1/K.
template <typename Scalar>
ParamSet<Scalar> init_params(std::uint64_t seed, const MappingDims& dims) {
  if (dims.visual_channels.empty() || dims.common_dim == 0 || dims.word_layers == 0 ||
      dims.word_width == 0 || dims.sentence_items == 0 || dims.sentence_width == 0) {
    throw ValueError("init_params: every mapping extent must be positive");
  }
  std::mt19937_64 rng(seed);
  ParamSet<Scalar> params;
  const std::size_t d = dims.common_dim;
  auto dense = [&](const std::string& w_name, const std::string& b_name,
                   std::size_t fan_in, std::size_t fan_out) {
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-a, a);
    Tensor<Scalar> w({fan_in, fan_out});
    for (auto& v : w.storage()) v = static_cast<Scalar>(dist(rng));
    params.add(w_name, std::move(w), true);
    params.add(b_name, Tensor<Scalar>({fan_out}), false);
  };
  for (std::size_t l = 0; l < dims.levels(); ++l) {
    dense(names::visual(l, 1, 'w'), names::visual(l, 1, 'b'), dims.visual_channels[l], d);
    dense(names::visual(l, 2, 'w'), names::visual(l, 2, 'b'), d, d);
    dense(names::visual(l, 3, 'w'), names::visual(l, 3, 'b'), d, d);
  }
  params.add("word.comb",
             Tensor<Scalar>({dims.word_layers}, Scalar(1) / static_cast<Scalar>(dims.word_layers)),
             false);
  dense(names::text("word", 1, 'w'), names::text("word", 1, 'b'), dims.word_width, d);
  dense(names::text("word", 2, 'w'), names::text("word", 2, 'b'), d, d);
  params.add("sent.comb",
             Tensor<Scalar>({dims.sentence_items},
                            Scalar(1) / static_cast<Scalar>(dims.sentence_items)),
             false);
  dense(names::text("sent", 1, 'w'), names::text("sent", 1, 'b'), dims.sentence_width, d);
  dense(names::text("sent", 2, 'w'), names::text("sent", 2, 'b'), d, d);
  return params;
}

// Recovers the mapping extents from a parameter set (e.g. a checkpoint).
template <typename Scalar>
MappingDims infer_dims(const ParamSet<Scalar>& params) {
  MappingDims dims;
  for (std::size_t l = 0; params.contains(names::visual(l, 1, 'w')); ++l) {
    dims.visual_channels.push_back(params.at(names::visual(l, 1, 'w')).value.dim(0));
  }
  if (dims.visual_channels.empty()) throw ValueError("parameter set has no visual levels");
  dims.common_dim = params.at(names::visual(0, 1, 'w')).value.dim(1);
  dims.word_layers = params.at("word.comb").value.size();
  dims.word_width = params.at(names::text("word", 1, 'w')).value.dim(0);
  dims.sentence_items = params.at("sent.comb").value.size();
  dims.sentence_width = params.at(names::text("sent", 1, 'w')).value.dim(0);
  return dims;
}

// Binds a parameter set into one graph, creating each leaf once.
template <typename Scalar>
class Binding {
 public:
  Binding(Graph<Scalar>& graph, ParamSet<Scalar>& params) : graph_(graph), params_(params) {}

  Var<Scalar> operator()(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    auto v = graph_.param(params_.at(name));
    bound_.emplace(name, v);
    return v;
  }

  Graph<Scalar>& graph() { return graph_; }
  ParamSet<Scalar>& params() { return params_; }

 private:
  Graph<Scalar>& graph_;
  ParamSet<Scalar>& params_;
  std::map<std::string, Var<Scalar>> bound_;
};

namespace detail {

template <typename Scalar>
Var<Scalar> dense(Binding<Scalar>& bind, const Var<Scalar>& x, const std::string& w,
                  const std::string& b) {
  auto wv = bind(w);
  if (wv.value().dim(0) != x.shape().back()) {
    throw ShapeError(concat("parameter '", w, "' expects ", wv.value().dim(0),
                            " input channels, got ", shape_str(x.shape())));
  }
  return ad::add_bias(ad::matmul(x, wv), bind(b));
}

template <typename Scalar>
Var<Scalar> activate(const Var<Scalar>& x, bool linear, double alpha) {
  return linear ? x : ad::leaky_relu(x, static_cast<Scalar>(alpha));
}

}  // namespace detail

// Per level: resize to M x M, three position-wise dense layers with LeakyReLU
// between them, flatten space, unit-normalize each region vector.
template <typename Scalar>
CommonSpaceImage<Scalar> map_visual(Binding<Scalar>& bind, const RawVisualFeatures<Scalar>& raw,
                                    const MappingOptions& opts) {
  if (raw.levels.empty()) throw ShapeError("map_visual: no feature levels");
  if (!bind.params().contains(names::visual(raw.levels.size() - 1, 1, 'w')) ||
      bind.params().contains(names::visual(raw.levels.size(), 1, 'w'))) {
    throw ShapeError(detail::concat("map_visual: ", raw.levels.size(),
                                    " feature levels do not match the parameter set"));
  }
  const std::size_t m = opts.grid, n = m * m;
  CommonSpaceImage<Scalar> out;
  for (std::size_t l = 0; l < raw.levels.size(); ++l) {
    const auto& fmap = raw.levels[l];
    if (fmap.rank() != 3) {
      throw ShapeError(detail::concat("visual level ", l, " must be h x w x c, got ",
                                      detail::shape_str(fmap.shape())));
    }
    Tensor<Scalar> resized = (fmap.dim(0) == m && fmap.dim(1) == m)
                                 ? fmap
                                 : bilinear_resize(fmap, m, m);
    auto x = bind.graph().constant(resized.reshaped({n, fmap.dim(2)}));
    x = detail::dense(bind, x, names::visual(l, 1, 'w'), names::visual(l, 1, 'b'));
    x = detail::activate(x, opts.linear_visual, opts.leaky_alpha);
    x = detail::dense(bind, x, names::visual(l, 2, 'w'), names::visual(l, 2, 'b'));
    x = detail::activate(x, opts.linear_visual, opts.leaky_alpha);
    x = detail::dense(bind, x, names::visual(l, 3, 'w'), names::visual(l, 3, 'b'));
    out.levels.push_back(ad::l2_normalize(x));
  }
  return out;
}

// Word path: mix the K layers, two shared dense layers, unit rows. T x D.
template <typename Scalar>
Var<Scalar> map_words(Binding<Scalar>& bind, const RawTextFeatures<Scalar>& raw,
                      const MappingOptions& opts) {
  if (raw.words.rank() != 3) {
    throw ShapeError(detail::concat("word stack must be T x K x E, got ",
                                    detail::shape_str(raw.words.shape())));
  }
  auto x = ad::combine(bind("word.comb"), bind.graph().constant(raw.words));
  x = detail::dense(bind, x, names::text("word", 1, 'w'), names::text("word", 1, 'b'));
  x = detail::activate(x, opts.linear_text, opts.leaky_alpha);
  x = detail::dense(bind, x, names::text("word", 2, 'w'), names::text("word", 2, 'b'));
  return ad::l2_normalize(x);
}

// Sentence path: mix the K_s sentence representations, two dense layers,
// unit norm. 1 x D.
template <typename Scalar>
Var<Scalar> map_sentence(Binding<Scalar>& bind, const RawTextFeatures<Scalar>& raw,
                         const MappingOptions& opts) {
  if (raw.sentence.rank() != 2) {
    throw ShapeError(detail::concat("sentence stack must be K_s x 2E, got ",
                                    detail::shape_str(raw.sentence.shape())));
  }
  auto x = ad::combine(bind("sent.comb"), bind.graph().constant(raw.sentence));
  x = ad::reshape(x, {1, raw.sentence.dim(1)});
  x = detail::dense(bind, x, names::text("sent", 1, 'w'), names::text("sent", 1, 'b'));
  x = detail::activate(x, opts.linear_text, opts.leaky_alpha);
  x = detail::dense(bind, x, names::text("sent", 2, 'w'), names::text("sent", 2, 'b'));
  return ad::l2_normalize(x);
}

}  // namespace mlground
