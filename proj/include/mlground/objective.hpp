#pragma once

// In-batch matching posteriors and the combined word/sentence loss.
// Score matrices are indexed R(b, b') = R_x(S_b, I_b'): rows are captions,
// columns are images.

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "mlground/autodiff.hpp"
#include "mlground/common_space.hpp"

namespace mlground {

template <typename Scalar>
struct Posteriors {
  // (b', b) -> P(S_b' | I_b); every column sums to one.
  Tensor<Scalar> sentence_given_image;
  // (b, b') -> P(I_b' | S_b); every row sums to one.
  Tensor<Scalar> image_given_sentence;
};

namespace detail {

template <typename Scalar>
std::size_t check_score_matrix(const Tensor<Scalar>& scores) {
  if (scores.rank() != 2 || scores.dim(0) != scores.dim(1)) {
    throw ShapeError(concat("score matrix must be B x B, got ", shape_str(scores.shape())));
  }
  return scores.dim(0);
}

// Numerically stable log-softmax of gamma * scores along rows (axis 1) or
// columns (axis 0).
template <typename Scalar>
Tensor<Scalar> log_softmax(const Tensor<Scalar>& scores, double gamma, int axis) {
  const std::size_t b = scores.dim(0);
  Tensor<Scalar> out(scores.shape());
  for (std::size_t i = 0; i < b; ++i) {
    auto at = [&](std::size_t k) -> double {
      return axis == 1 ? scores.at(i, k) : scores.at(k, i);
    };
    double peak = gamma * at(0);
    for (std::size_t k = 1; k < b; ++k) peak = std::max(peak, gamma * at(k));
    double acc = 0;
    for (std::size_t k = 0; k < b; ++k) acc += std::exp(gamma * at(k) - peak);
    const double lse = peak + std::log(acc);
    for (std::size_t k = 0; k < b; ++k) {
      const auto v = static_cast<Scalar>(gamma * at(k) - lse);
      if (axis == 1) out.at(i, k) = v; else out.at(k, i) = v;
    }
  }
  return out;
}

}  // namespace detail

template <typename Scalar>
Posteriors<Scalar> posteriors(const Tensor<Scalar>& scores, double gamma2) {
  detail::check_score_matrix(scores);
  if (!(gamma2 > 0)) throw ValueError(detail::concat("gamma2 must be > 0, got ", gamma2));
  Posteriors<Scalar> out{detail::log_softmax(scores, gamma2, 0),
                         detail::log_softmax(scores, gamma2, 1)};
  for (auto& v : out.sentence_given_image.storage()) v = std::exp(v);
  for (auto& v : out.image_given_sentence.storage()) v = std::exp(v);
  return out;
}

namespace ad {

// -sum_b [log P(S_b | I_b) + log P(I_b | S_b)]
template <typename Scalar>
Var<Scalar> matching_loss(const Var<Scalar>& scores, double gamma2) {
  const std::size_t b = detail::check_score_matrix(scores.value());
  if (!(gamma2 > 0)) throw ValueError(detail::concat("gamma2 must be > 0, got ", gamma2));
  const auto log_col = detail::log_softmax(scores.value(), gamma2, 0);
  const auto log_row = detail::log_softmax(scores.value(), gamma2, 1);
  Scalar loss = 0;
  for (std::size_t i = 0; i < b; ++i) loss -= log_col.at(i, i) + log_row.at(i, i);
  const std::size_t is = scores.id();
  return scores.graph().make(
      Tensor<Scalar>::scalar(loss), {scores}, [=](Graph<Scalar>& g, std::size_t self) {
        const Scalar gy = g.grad(self)[0];
        auto& gs = g.grad_buffer(is);
        const auto k = static_cast<Scalar>(gamma2);
        for (std::size_t i = 0; i < b; ++i) {
          for (std::size_t j = 0; j < b; ++j) {
            Scalar d = k * (std::exp(log_col.at(i, j)) + std::exp(log_row.at(i, j)));
            if (i == j) d -= Scalar(2) * k;
            gs.at(i, j) += gy * d;
          }
        }
      });
}

}  // namespace ad

template <typename Scalar>
struct LossBreakdown {
  Scalar word = 0;      // L^w
  Scalar sentence = 0;  // L^s
  Scalar reg = 0;       // reg_value * sum ||W||^2
  Scalar total = 0;     // L^w + L^s + reg
};

template <typename Scalar>
struct BatchLoss {
  Var<Scalar> total;
  LossBreakdown<Scalar> parts;
};

// L = L^w + L^s, plus reg_value * sum ||W||^2 over the regularized mapping
// weights when reg_value > 0.
template <typename Scalar>
BatchLoss<Scalar> batch_loss(const Var<Scalar>& word_scores, const Var<Scalar>& sentence_scores,
                             double gamma2, double reg_value, Binding<Scalar>& bind) {
  if (word_scores.shape() != sentence_scores.shape()) {
    throw ShapeError(detail::concat("word and sentence score matrices differ: ",
                                    detail::shape_str(word_scores.shape()), " vs ",
                                    detail::shape_str(sentence_scores.shape())));
  }
  BatchLoss<Scalar> out;
  auto lw = ad::matching_loss(word_scores, gamma2);
  auto ls = ad::matching_loss(sentence_scores, gamma2);
  out.parts.word = lw.value().item();
  out.parts.sentence = ls.value().item();
  out.total = ad::add(lw, ls);
  if (reg_value > 0) {
    Var<Scalar> penalty;
    for (const auto& name : bind.params().names()) {
      if (!bind.params().at(name).regularized) continue;
      auto sq = ad::sum_squares(bind(name));
      penalty = penalty.valid() ? ad::add(penalty, sq) : sq;
    }
    if (penalty.valid()) {
      auto reg = ad::scale(penalty, static_cast<Scalar>(reg_value));
      out.parts.reg = reg.value().item();
      out.total = ad::add(out.total, reg);
    }
  }
  out.parts.total = out.total.value().item();
  return out;
}

}  // namespace mlground
