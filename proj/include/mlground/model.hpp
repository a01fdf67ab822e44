#pragma once

// Full forward pass for a batch of image-caption pairs: map every image and
// caption once, score every caption against every image, and reduce to the
// matching loss.

#include <span>
#include <string>
#include <vector>

#include "mlground/attention.hpp"
#include "mlground/common_space.hpp"
#include "mlground/objective.hpp"

namespace mlground {

enum class LevelMode { Multi, Middle, Last };

inline LevelMode parse_level_mode(const std::string& s) {
  if (s == "multi") return LevelMode::Multi;
  if (s == "middle") return LevelMode::Middle;
  if (s == "last") return LevelMode::Last;
  throw ValueError(detail::concat("unknown level mode '", s, "' (multi|middle|last)"));
}

inline const char* level_mode_name(LevelMode m) {
  switch (m) {
    case LevelMode::Multi: return "multi";
    case LevelMode::Middle: return "middle";
    case LevelMode::Last: return "last";
  }
  return "multi";
}

// Fixed-level modes: `middle` compares words with the middle level and
// sentences with the last one; `last` uses the last level for both.
inline void apply_level_mode(LevelMode mode, std::size_t levels, AttentionOptions& opts) {
  opts.word_levels.clear();
  opts.sentence_levels.clear();
  if (mode == LevelMode::Middle) {
    opts.word_levels = {(levels - 1) / 2};
    opts.sentence_levels = {levels - 1};
  } else if (mode == LevelMode::Last) {
    opts.word_levels = {levels - 1};
    opts.sentence_levels = {levels - 1};
  }
}

struct ModelOptions {
  MappingOptions mapping;
  AttentionOptions attention;
  double gamma2 = 10.0;
  double reg_value = 0.0005;
};

template <typename Scalar>
struct PairInput {
  const RawVisualFeatures<Scalar>* image = nullptr;
  const RawTextFeatures<Scalar>* text = nullptr;
};

template <typename Scalar>
struct BatchForward {
  Var<Scalar> word_scores;      // B x B, (caption, image)
  Var<Scalar> sentence_scores;  // B x B
  BatchLoss<Scalar> loss;
};

template <typename Scalar>
BatchForward<Scalar> batch_forward(Binding<Scalar>& bind, std::span<const PairInput<Scalar>> batch,
                                   const ModelOptions& opts) {
  if (batch.empty()) throw ValueError("batch_forward: empty batch");
  const std::size_t b = batch.size();
  std::vector<CommonSpaceImage<Scalar>> images;
  std::vector<Var<Scalar>> words, sentences;
  images.reserve(b);
  for (const auto& pair : batch) {
    images.push_back(map_visual(bind, *pair.image, opts.mapping));
    words.push_back(map_words(bind, *pair.text, opts.mapping));
    sentences.push_back(map_sentence(bind, *pair.text, opts.mapping));
  }
  std::vector<Var<Scalar>> rw, rs;
  rw.reserve(b * b);
  rs.reserve(b * b);
  for (std::size_t cap = 0; cap < b; ++cap) {
    for (std::size_t img = 0; img < b; ++img) {
      rw.push_back(attend_and_score_words(images[img], words[cap], opts.attention)
                       .pertinence.score);
      rs.push_back(sentence_pertinence(images[img], sentences[cap], opts.attention).score);
    }
  }
  BatchForward<Scalar> out;
  out.word_scores = ad::gather_scalars(rw, {b, b});
  out.sentence_scores = ad::gather_scalars(rs, {b, b});
  out.loss = batch_loss(out.word_scores, out.sentence_scores, opts.gamma2, opts.reg_value, bind);
  return out;
}

// Grounding outputs of one caption against one image, as plain values.
template <typename Scalar>
struct Grounding {
  std::size_t grid = 0;
  Tensor<Scalar> word_heatmaps;               // N x T x L
  Tensor<Scalar> word_scores;                 // R_t
  std::vector<std::size_t> word_levels;       // selected level per word
  Scalar word_pertinence = 0;                 // R_w
  Tensor<Scalar> sentence_heatmaps;           // N x L
  std::size_t sentence_level = 0;
  Scalar sentence_pertinence = 0;             // R_s
};

template <typename Scalar>
Grounding<Scalar> ground(ParamSet<Scalar>& params, const RawVisualFeatures<Scalar>& image,
                         const RawTextFeatures<Scalar>& text, const ModelOptions& opts) {
  Graph<Scalar> g(false);
  Binding<Scalar> bind(g, params);
  auto v = map_visual(bind, image, opts.mapping);
  auto s = map_words(bind, text, opts.mapping);
  auto sbar = map_sentence(bind, text, opts.mapping);
  auto wa = attend_and_score_words(v, s, opts.attention);
  auto sp = sentence_pertinence(v, sbar, opts.attention);
  Grounding<Scalar> out;
  out.grid = opts.mapping.grid;
  out.word_heatmaps = wa.heatmap_tensor(v.level_count());
  out.word_scores = wa.pertinence.selected.value();
  out.word_levels = wa.pertinence.selected_level;
  out.word_pertinence = wa.pertinence.score.value().item();
  out.sentence_heatmaps = sp.heatmap_tensor(v.level_count());
  out.sentence_level = sp.selected_level;
  out.sentence_pertinence = sp.score.value().item();
  return out;
}

}  // namespace mlground
