#pragma once

// Multi-level multimodal attention: ReLU-gated cosine heatmaps, attended
// visual features, per-level pertinence scores and hard level selection for
// words and for whole sentences.

#include <algorithm>
#include <cstddef>
#include <span>
#include <vector>

#include "mlground/autodiff.hpp"
#include "mlground/common_space.hpp"

namespace mlground {

struct AttentionOptions {
  double gamma1 = 5.0;
  // Ablation: softmax over regions instead of the ReLU gate.
  bool softmax_heatmaps = false;
  // Normalize the sentence attended feature like the word path does. Off by
  // default: the sentence feature is the raw weighted sum.
  bool normalize_sentence_attended = false;
  // Levels a word / a sentence may select from; empty means all levels.
  std::vector<std::size_t> word_levels;
  std::vector<std::size_t> sentence_levels;
};

namespace detail {

inline std::vector<std::size_t> resolve_levels(const std::vector<std::size_t>& wanted,
                                               std::size_t available) {
  if (wanted.empty()) {
    std::vector<std::size_t> all(available);
    for (std::size_t i = 0; i < available; ++i) all[i] = i;
    return all;
  }
  for (std::size_t l : wanted) {
    if (l >= available) {
      throw ValueError(concat("level ", l, " requested but the image has ", available));
    }
  }
  return wanted;
}

template <typename Scalar>
void check_common_dim(const CommonSpaceImage<Scalar>& image, const Var<Scalar>& text) {
  if (text.value().rank() != 2 || text.value().dim(1) != image.dim()) {
    throw ShapeError(concat("common-space dimension mismatch: image D=", image.dim(),
                            ", text ", shape_str(text.shape())));
  }
}

}  // namespace detail

// H[:, :, l] = max(0, V_l S^T) for every requested level; N x T each.
template <typename Scalar>
std::vector<Var<Scalar>> word_heatmaps(const CommonSpaceImage<Scalar>& image,
                                       const Var<Scalar>& words,
                                       const std::vector<std::size_t>& levels,
                                       bool softmax_heatmaps = false) {
  detail::check_common_dim(image, words);
  std::vector<Var<Scalar>> out;
  out.reserve(levels.size());
  for (std::size_t l : levels) {
    auto sim = ad::matmul(image.levels[l], words, false, true);
    out.push_back(softmax_heatmaps ? ad::softmax_rows(sim) : ad::relu(sim));
  }
  return out;
}

// a_{t,l} = sum_n H v_{n,l} / ||sum_n H v_{n,l}||; T x D per level.
template <typename Scalar>
std::vector<Var<Scalar>> attend_words(const CommonSpaceImage<Scalar>& image,
                                      const std::vector<Var<Scalar>>& heatmaps,
                                      const std::vector<std::size_t>& levels) {
  std::vector<Var<Scalar>> out;
  out.reserve(levels.size());
  for (std::size_t i = 0; i < levels.size(); ++i) {
    out.push_back(ad::l2_normalize(ad::matmul(heatmaps[i], image.levels[levels[i]], true, false)));
  }
  return out;
}

template <typename Scalar>
struct WordPertinence {
  Var<Scalar> per_level;                    // R_{t,l}: T x L'
  Var<Scalar> selected;                     // R_t: T
  std::vector<std::size_t> selected_level;  // per word, index into the image levels
  Var<Scalar> score;                        // R_w
};

template <typename Scalar>
WordPertinence<Scalar> word_pertinence(const std::vector<Var<Scalar>>& attended,
                                       const Var<Scalar>& words,
                                       const std::vector<std::size_t>& levels,
                                       double gamma1) {
  std::vector<Var<Scalar>> per_level;
  per_level.reserve(attended.size());
  for (const auto& a : attended) per_level.push_back(ad::rowdot(a, words));
  WordPertinence<Scalar> out;
  out.per_level = ad::stack_last(per_level);
  out.selected = ad::max_last(out.per_level);
  for (std::size_t idx : argmax_last(out.per_level.value())) {
    out.selected_level.push_back(levels[idx]);
  }
  out.score = ad::logsumexp_scaled(out.selected, static_cast<Scalar>(gamma1));
  return out;
}

template <typename Scalar>
struct WordAttention {
  std::vector<std::size_t> levels;
  std::vector<Var<Scalar>> heatmaps;  // N x T per considered level
  std::vector<Var<Scalar>> attended;  // T x D per considered level
  WordPertinence<Scalar> pertinence;

  // H as N x T x total_levels; levels that were not considered stay zero.
  Tensor<Scalar> heatmap_tensor(std::size_t total_levels) const {
    const auto& first = heatmaps.front().value();
    const std::size_t n = first.dim(0), t = first.dim(1);
    Tensor<Scalar> out({n, t, total_levels});
    for (std::size_t i = 0; i < levels.size(); ++i) {
      const auto& h = heatmaps[i].value();
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t w = 0; w < t; ++w) out.at(r, w, levels[i]) = h.at(r, w);
      }
    }
    return out;
  }
};

template <typename Scalar>
WordAttention<Scalar> attend_and_score_words(const CommonSpaceImage<Scalar>& image,
                                             const Var<Scalar>& words,
                                             const AttentionOptions& opts) {
  WordAttention<Scalar> out;
  out.levels = detail::resolve_levels(opts.word_levels, image.level_count());
  out.heatmaps = word_heatmaps(image, words, out.levels, opts.softmax_heatmaps);
  out.attended = attend_words(image, out.heatmaps, out.levels);
  out.pertinence = word_pertinence(out.attended, words, out.levels, opts.gamma1);
  return out;
}

template <typename Scalar>
struct SentencePertinence {
  std::vector<std::size_t> levels;
  std::vector<Var<Scalar>> heatmaps;  // Hs: N x 1 per considered level
  std::vector<Var<Scalar>> attended;  // a^s: 1 x D per considered level
  Var<Scalar> per_level;              // R_{s,l}: L'
  Var<Scalar> score;                  // R_s
  std::size_t selected_level = 0;

  Tensor<Scalar> heatmap_tensor(std::size_t total_levels) const {
    const std::size_t n = heatmaps.front().value().dim(0);
    Tensor<Scalar> out({n, total_levels});
    for (std::size_t i = 0; i < levels.size(); ++i) {
      for (std::size_t r = 0; r < n; ++r) out.at(r, levels[i]) = heatmaps[i].value()[r];
    }
    return out;
  }
};

template <typename Scalar>
SentencePertinence<Scalar> sentence_pertinence(const CommonSpaceImage<Scalar>& image,
                                               const Var<Scalar>& sentence,
                                               const AttentionOptions& opts) {
  detail::check_common_dim(image, sentence);
  SentencePertinence<Scalar> out;
  out.levels = detail::resolve_levels(opts.sentence_levels, image.level_count());
  std::vector<Var<Scalar>> scores;
  for (std::size_t l : out.levels) {
    auto sim = ad::matmul(image.levels[l], sentence, false, true);
    auto hs = opts.softmax_heatmaps ? ad::softmax_rows(sim) : ad::relu(sim);
    auto as = ad::matmul(hs, image.levels[l], true, false);
    if (opts.normalize_sentence_attended) as = ad::l2_normalize(as);
    scores.push_back(ad::rowdot(as, sentence));
    out.heatmaps.push_back(hs);
    out.attended.push_back(as);
  }
  out.per_level = ad::reshape(ad::stack_last(scores), {scores.size()});
  out.score = ad::max_last(out.per_level);
  out.selected_level = out.levels[argmax(out.per_level.value().data())];
  return out;
}

// Pointing heatmap for a multi-word query: the selected-level slice of each
// query word, averaged with weights max(R_t, 0) (uniform if all are zero).
template <typename Scalar>
std::vector<Scalar> compose_query_heatmap(const Tensor<Scalar>& heatmaps,
                                          std::span<const Scalar> word_scores,
                                          std::span<const std::size_t> selected_level,
                                          std::span<const std::size_t> query) {
  if (query.empty()) throw ValueError("compose_query_heatmap: empty query");
  if (heatmaps.rank() != 3) throw ShapeError("compose_query_heatmap expects N x T x L");
  const std::size_t n = heatmaps.dim(0), t = heatmaps.dim(1), l = heatmaps.dim(2);
  std::vector<Scalar> weights;
  Scalar total = 0;
  for (std::size_t tok : query) {
    if (tok >= t || tok >= word_scores.size() || tok >= selected_level.size()) {
      throw ValueError(detail::concat("query token ", tok, " out of range (T=", t, ")"));
    }
    if (selected_level[tok] >= l) throw ValueError("selected level out of range");
    weights.push_back(std::max(word_scores[tok], Scalar(0)));
    total += weights.back();
  }
  if (total > Scalar(0)) {
    for (auto& w : weights) w /= total;
  } else {
    std::fill(weights.begin(), weights.end(), Scalar(1) / static_cast<Scalar>(weights.size()));
  }
  std::vector<Scalar> out(n, Scalar(0));
  for (std::size_t q = 0; q < query.size(); ++q) {
    if (weights[q] == Scalar(0)) continue;
    for (std::size_t r = 0; r < n; ++r) {
      out[r] += weights[q] * heatmaps.at(r, query[q], selected_level[query[q]]);
    }
  }
  return out;
}

}  // namespace mlground
