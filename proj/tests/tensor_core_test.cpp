#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "mlground/adam.hpp"
#include "mlground/autodiff.hpp"
#include "mlground/ops.hpp"
#include "test_util.hpp"

namespace mlground {
namespace {

using testing::random_tensor;

// Naive triple loop over the logical (transposed) operands.
Tensor<double> matmul_oracle(const Tensor<double>& a, const Tensor<double>& b, bool ta,
                             bool tb) {
  const std::size_t cols_a = a.shape().back();
  const std::size_t rows_a = a.size() / cols_a;
  const std::size_t m = ta ? cols_a : rows_a, k = ta ? rows_a : cols_a;
  const std::size_t n = tb ? b.dim(0) : b.dim(1);
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) {
        const double av = ta ? a[p * m + i] : a[i * k + p];
        const double bv = tb ? b[j * k + p] : b[p * n + j];
        out[i * n + j] += av * bv;
      }
  Shape shape = ta ? Shape{m, n} : Shape(a.shape().begin(), a.shape().end() - 1);
  if (!ta) shape.push_back(n);
  return Tensor<double>(shape, out);
}

TEST(Matmul, IdentityAndDotExamples) {
  auto id = Tensor<double>::matrix({{1, 0}, {0, 1}});
  auto col = Tensor<double>::matrix({{5}, {7}});
  EXPECT_EQ(matmul(id, col), col);
  auto r = matmul(Tensor<double>::matrix({{1, 2}}), Tensor<double>::matrix({{3}, {4}}));
  EXPECT_DOUBLE_EQ(r.item(), 11.0);
}

TEST(Matmul, MatchesScalarLoopOracle) {
  std::mt19937_64 rng(7);
  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({4, 2}, rng);
  auto got = matmul(a, b);
  auto want = matmul_oracle(a, b, false, false);
  ASSERT_EQ(got.shape(), want.shape());
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-6);
}

TEST(Matmul, BatchedAndTransposedAgreeWithOracle) {
  std::mt19937_64 rng(11);
  for (const Shape& sa : {Shape{2, 3, 4}, Shape{2, 2, 3, 4}, Shape{5, 4}}) {
    auto a = random_tensor(sa, rng);
    auto b = random_tensor({4, 3}, rng);
    auto got = matmul(a, b);
    auto want = matmul_oracle(a, b, false, false);
    ASSERT_EQ(got.shape(), want.shape());
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-6);
  }
  auto a = random_tensor({4, 3}, rng);
  auto b = random_tensor({2, 4}, rng);
  auto got = matmul(a, b, true, true);
  auto want = matmul_oracle(a, b, true, true);
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-6);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Tensor<double> a({2, 3}), b({4, 2});
  try {
    matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos);
    EXPECT_NE(msg.find("[4x2]"), std::string::npos);
  }
}

TEST(LeakyRelu, Examples) {
  auto y = leaky_relu(Tensor<double>::vector({2.0, -1.0, 0.0}), 0.25);
  EXPECT_DOUBLE_EQ(y[0], 2.0);
  EXPECT_DOUBLE_EQ(y[1], -0.25);
  EXPECT_DOUBLE_EQ(y[2], 0.0);
  EXPECT_DOUBLE_EQ(leaky_relu_slope(0.0, 0.25), 0.0);
  EXPECT_DOUBLE_EQ(leaky_relu_slope(-3.0, 0.25), 0.25);
  EXPECT_THROW(leaky_relu(y, 1.0), ValueError);
}

TEST(LeakyRelu, GradientIsZeroAtOrigin) {
  ParamSet<double> ps;
  ps.add("x", Tensor<double>::vector({0.0, -2.0, 3.0}), false);
  Graph<double> g;
  g.backward(ad::sum(ad::leaky_relu(g.param(ps.at("x")), 0.25)));
  EXPECT_DOUBLE_EQ(ps.at("x").grad[0], 0.0);
  EXPECT_DOUBLE_EQ(ps.at("x").grad[1], 0.25);
  EXPECT_DOUBLE_EQ(ps.at("x").grad[2], 1.0);
}

TEST(L2Normalize, Examples) {
  auto y = l2_normalize(Tensor<double>::vector({3, 4}));
  EXPECT_DOUBLE_EQ(y[0], 0.6);
  EXPECT_DOUBLE_EQ(y[1], 0.8);
  auto z = l2_normalize(Tensor<double>::vector({0, 0}));
  EXPECT_EQ(z[0], 0.0);
  EXPECT_EQ(z[1], 0.0);
}

TEST(L2Normalize, UnitNormPropertyAndOracleUpToRank4) {
  std::mt19937_64 rng(3);
  for (const Shape& s : {Shape{5}, Shape{3, 4}, Shape{2, 3, 5}, Shape{2, 2, 3, 6}}) {
    auto x = random_tensor(s, rng);
    auto y = l2_normalize(x);
    const std::size_t d = s.back();
    for (std::size_t r = 0; r < x.size() / d; ++r) {
      double sq = 0;
      for (std::size_t i = 0; i < d; ++i) sq += x[r * d + i] * x[r * d + i];
      double norm_out = 0;
      for (std::size_t i = 0; i < d; ++i) {
        EXPECT_NEAR(y[r * d + i], x[r * d + i] / std::sqrt(sq), 1e-6);
        norm_out += y[r * d + i] * y[r * d + i];
      }
      EXPECT_NEAR(std::sqrt(norm_out), 1.0, 1e-6);
    }
  }
}

TEST(BilinearResize, IdentityAndConstant) {
  std::mt19937_64 rng(5);
  auto x = random_tensor({3, 5, 2}, rng);
  EXPECT_EQ(bilinear_resize(x, 3, 5), x);
  Tensor<double> c({2, 3, 4}, 1.75);
  auto up = bilinear_resize(c, 7, 9);
  double mean = 0;
  for (double v : up.data()) {
    EXPECT_DOUBLE_EQ(v, 1.75);
    mean += v;
  }
  EXPECT_DOUBLE_EQ(mean / static_cast<double>(up.size()), 1.75);
}

TEST(BilinearResize, TwoByTwoToFourByFourMatchesSamplingFormula) {
  // Source coordinates (i + 0.5) * 2 / 4 - 0.5 clamped to [0, 1] are
  // {0, 0.25, 0.75, 1}; the input is the linear field 2r + c, so every output
  // is 2 * src_row + src_col.
  auto x = Tensor<double>::matrix({{0, 1}, {2, 3}});
  auto y = bilinear_resize(x, 4, 4);
  const double want[4][4] = {{0.0, 0.25, 0.75, 1.0},
                             {0.5, 0.75, 1.25, 1.5},
                             {1.5, 1.75, 2.25, 2.5},
                             {2.0, 2.25, 2.75, 3.0}};
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) EXPECT_NEAR(y.at(i, j), want[i][j], 1e-12);
}

TEST(BilinearResize, MatchesDirectEvaluationOnRandomInput) {
  std::mt19937_64 rng(9);
  auto x = random_tensor({3, 4, 2}, rng);
  const std::size_t oh = 5, ow = 7;
  auto y = bilinear_resize(x, oh, ow);
  auto coord = [](std::size_t i, std::size_t in, std::size_t out) {
    double s = (i + 0.5) * double(in) / double(out) - 0.5;
    return std::min(std::max(s, 0.0), double(in - 1));
  };
  for (std::size_t i = 0; i < oh; ++i)
    for (std::size_t j = 0; j < ow; ++j) {
      const double r = coord(i, 3, oh), c = coord(j, 4, ow);
      const auto r0 = std::size_t(r), c0 = std::size_t(c);
      const auto r1 = std::min<std::size_t>(r0 + 1, 2), c1 = std::min<std::size_t>(c0 + 1, 3);
      const double fr = r - r0, fc = c - c0;
      for (std::size_t ch = 0; ch < 2; ++ch) {
        const double v = (1 - fr) * (1 - fc) * x.at(r0, c0, ch) + (1 - fr) * fc * x.at(r0, c1, ch) +
                         fr * (1 - fc) * x.at(r1, c0, ch) + fr * fc * x.at(r1, c1, ch);
        EXPECT_NEAR(y.at(i, j, ch), v, 1e-6);
      }
    }
}

TEST(LogSumExpScaled, Examples) {
  std::vector<double> one{0.8};
  EXPECT_NEAR(logsumexp_scaled<double>(one, 3.0), 0.8, 1e-12);
  std::vector<double> two{1.0, 1.0};
  // 1 + ln(2) / 5
  EXPECT_NEAR(logsumexp_scaled<double>(two, 5.0), 1.1386294361119891, 1e-12);
  std::vector<double> empty;
  EXPECT_THROW(logsumexp_scaled<double>(empty, 5.0), ValueError);
  EXPECT_THROW(logsumexp_scaled<double>(two, 0.0), ValueError);
}

TEST(LogSumExpScaled, BoundedByMaxAndLogT) {
  std::mt19937_64 rng(21);
  std::uniform_int_distribution<int> len(1, 12);
  for (int trial = 0; trial < 300; ++trial) {
    auto r = random_tensor({std::size_t(len(rng))}, rng, -1, 1);
    const double peak = *std::max_element(r.data().begin(), r.data().end());
    for (double gamma : {1.0, 5.0, 10.0}) {
      const double v = logsumexp_scaled<double>(r.data(), gamma);
      EXPECT_GE(v, peak - 1e-12);
      EXPECT_LE(v, peak + std::log(double(r.size())) / gamma + 1e-12);
    }
  }
}

TEST(LogSumExpScaled, StableForLargeInputs) {
  std::vector<double> r{1000.0, 999.0};
  const double v = logsumexp_scaled<double>(r, 10.0);
  EXPECT_TRUE(std::isfinite(v));
  EXPECT_NEAR(v, 1000.0 + std::log1p(std::exp(-10.0)) / 10.0, 1e-9);
}

TEST(Backward, SumOfParamsGivesUnitGradient) {
  ParamSet<double> ps;
  ps.add("a", Tensor<double>({2, 3}, 0.5), false);
  Graph<double> g;
  g.backward(ad::sum(g.param(ps.at("a"))));
  for (double v : ps.at("a").grad.data()) EXPECT_DOUBLE_EQ(v, 1.0);
}

TEST(Backward, NormOfNormalizedVectorHasZeroGradient) {
  ParamSet<double> ps;
  ps.add("v", Tensor<double>::vector({0.3, -1.2, 2.0}), false);
  Graph<double> g;
  g.backward(ad::sum_squares(ad::l2_normalize(g.param(ps.at("v")))));
  for (double v : ps.at("v").grad.data()) EXPECT_LE(std::abs(v), 1e-5);
}

TEST(Backward, RejectsNonScalar) {
  ParamSet<double> ps;
  ps.add("v", Tensor<double>::vector({1, 2}), false);
  Graph<double> g;
  auto v = g.param(ps.at("v"));
  EXPECT_THROW(g.backward(v), ShapeError);
}

TEST(Backward, MaxRoutesToLowestIndexOnTies) {
  ParamSet<double> ps;
  ps.add("x", Tensor<double>::matrix({{0.5, 0.5, 0.1}, {0.1, 0.9, 0.9}}), false);
  Graph<double> g;
  g.backward(ad::sum(ad::max_last(g.param(ps.at("x")))));
  const auto& gr = ps.at("x").grad;
  EXPECT_EQ(std::vector<double>(gr.data().begin(), gr.data().end()),
            (std::vector<double>{1, 0, 0, 0, 1, 0}));
}

// Every differentiable op against central differences in 64-bit mode.
class OpGradient : public ::testing::Test {
 protected:
  void check(const std::vector<Shape>& shapes,
             const std::function<Var<double>(Graph<double>&, std::vector<Var<double>>&)>& op,
             double lo = -1, double hi = 1) {
    std::mt19937_64 rng(1234);
    ParamSet<double> ps;
    for (std::size_t i = 0; i < shapes.size(); ++i) {
      ps.add("in" + std::to_string(i), random_tensor(shapes[i], rng, lo, hi), false);
    }
    // Project the op output onto fixed random weights to get a scalar.
    Tensor<double> proj;
    auto loss = [&](Binding<double>& b) {
      std::vector<Var<double>> in;
      for (std::size_t i = 0; i < shapes.size(); ++i) in.push_back(b("in" + std::to_string(i)));
      auto y = op(b.graph(), in);
      if (proj.empty()) proj = random_tensor(y.shape(), rng);
      return ad::sum(ad::rowdot(ad::reshape(y, {1, y.value().size()}),
                                b.graph().constant(proj.reshaped({1, proj.size()}))));
    };
    for (const auto& [name, err] : testing::gradient_errors(ps, loss)) {
      EXPECT_LE(err, 1e-4) << name;
    }
  }
};

TEST_F(OpGradient, Matmul) {
  check({{3, 4}, {4, 2}}, [](auto&, auto& in) { return ad::matmul(in[0], in[1]); });
  check({{2, 3, 4}, {4, 2}}, [](auto&, auto& in) { return ad::matmul(in[0], in[1]); });
  check({{4, 3}, {4, 2}}, [](auto&, auto& in) { return ad::matmul(in[0], in[1], true, false); });
  check({{3, 4}, {2, 4}}, [](auto&, auto& in) { return ad::matmul(in[0], in[1], false, true); });
  check({{4, 3}, {2, 4}}, [](auto&, auto& in) { return ad::matmul(in[0], in[1], true, true); });
}

TEST_F(OpGradient, ElementwiseAndNormalization) {
  check({{3, 5}}, [](auto&, auto& in) { return ad::leaky_relu(in[0], 0.25); });
  check({{3, 5}}, [](auto&, auto& in) { return ad::relu(in[0]); });
  check({{2, 3, 4}}, [](auto&, auto& in) { return ad::l2_normalize(in[0]); });
  check({{4, 3}}, [](auto&, auto& in) { return ad::softmax_rows(in[0]); });
  check({{3, 4}, {4}}, [](auto&, auto& in) { return ad::add_bias(in[0], in[1]); });
  check({{3, 4}, {3, 4}}, [](auto&, auto& in) { return ad::rowdot(in[0], in[1]); });
  check({{3, 4}}, [](auto&, auto& in) { return ad::sum_squares(in[0]); });
}

TEST_F(OpGradient, ReductionsAndMixing) {
  check({{6}}, [](auto&, auto& in) { return ad::logsumexp_scaled(in[0], 5.0); });
  check({{4, 3}}, [](auto&, auto& in) { return ad::max_last(in[0]); });
  check({{3}, {2, 3, 5}}, [](auto&, auto& in) { return ad::combine(in[0], in[1]); });
  check({{4}, {4}}, [](auto&, auto& in) { return ad::stack_last<double>({in[0], in[1]}); });
}

TEST_F(OpGradient, BilinearResize) {
  check({{3, 2, 2}}, [](auto&, auto& in) { return ad::bilinear_resize(in[0], 5, 4); });
  check({{4, 4, 1}}, [](auto&, auto& in) { return ad::bilinear_resize(in[0], 2, 3); });
}

TEST(Adam, OneStepOnSquare) {
  // g = 2, m_hat = 2, v_hat = 4: step = lr * 2 / (2 + eps).
  ParamSet<double> ps;
  ps.add("x", Tensor<double>::scalar(1.0), false);
  ps.at("x").grad = Tensor<double>::scalar(2.0);
  Adam<double> opt;
  opt.step(ps, 0.001);
  EXPECT_NEAR(ps.at("x").value.item(), 0.999, 1e-9);
}

TEST(Adam, ZeroGradientLeavesParamsUnchanged) {
  ParamSet<double> ps;
  ps.add("w", Tensor<double>::vector({0.3, -0.7}), true);
  Adam<double> opt;
  opt.step(ps, 0.01);
  EXPECT_EQ(ps.at("w").value, Tensor<double>::vector({0.3, -0.7}));
}

TEST(Adam, TwoHundredStepsOnSquareMatchScalarSimulation) {
  // Independent scalar simulation of the textbook update.
  double x = 1.0, m = 0, v = 0;
  for (int t = 1; t <= 200; ++t) {
    const double g = 2 * x;
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    x -= 0.001 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
  }
  ParamSet<double> ps;
  ps.add("x", Tensor<double>::scalar(1.0), false);
  Adam<double> opt;
  for (int t = 0; t < 200; ++t) {
    ps.zero_grad();
    Graph<double> g;
    g.backward(ad::sum_squares(g.param(ps.at("x"))));
    opt.step(ps, 0.001);
  }
  EXPECT_NEAR(ps.at("x").value.item(), x, 1e-12);
  EXPECT_LT(std::abs(ps.at("x").value.item()), 0.9);
}

TEST(Adam, MissingGradientIsAnError) {
  ParamSet<double> ps;
  ps.add("x", Tensor<double>::scalar(1.0), false);
  ps.at("x").grad = Tensor<double>();
  Adam<double> opt;
  EXPECT_THROW(opt.step(ps, 0.001), ValueError);
}

TEST(ParamSet, RejectsDuplicateNames) {
  ParamSet<float> ps;
  ps.add("a", Tensor<float>::scalar(1), false);
  EXPECT_THROW(ps.add("a", Tensor<float>::scalar(2), false), ValueError);
}

}  // namespace
}  // namespace mlground
