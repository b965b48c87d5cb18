#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "eurobert/gradcheck.hpp"
#include "eurobert/tensor.hpp"

using namespace eurobert;

namespace {

template <class T>
Tensor<T> random_tensor(Shape shape, std::mt19937_64& rng, bool requires_grad = true, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = static_cast<T>(n(rng));
  return Tensor<T>(std::move(shape), std::move(v), requires_grad);
}

}  // namespace

TEST(Tensor, ShapeInvariant) {
  EXPECT_THROW(Tensor<float>(Shape{2, 3}, std::vector<float>(5)), DimensionError);
  Tensor<float> t(Shape{2, 3}, std::vector<float>(6, 1.f));
  EXPECT_EQ(t.size(), 6u);
  EXPECT_FALSE(t.has_grad());
}

TEST(Tensor, MatmulIdentity) {
  std::mt19937_64 rng(1);
  auto m = random_tensor<double>({3, 3}, rng, false);
  Tensor<double> eye(Shape{3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto r = matmul(eye, m);
  for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(r[i], m[i]);
}

TEST(Tensor, MatmulHandArithmetic) {
  Tensor<float> a(Shape{2, 2}, {1, 2, 3, 4});
  Tensor<float> b(Shape{2, 1}, {1, 1});
  auto c = matmul(a, b);
  ASSERT_EQ(c.shape(), (Shape{2, 1}));
  EXPECT_EQ(c[0], 3.f);
  EXPECT_EQ(c[1], 7.f);
}

TEST(Tensor, MatmulMatchesTripleLoop) {
  std::mt19937_64 rng(7);
  auto a = random_tensor<float>({4, 5}, rng, false);
  auto b = random_tensor<float>({5, 3}, rng, false);
  auto c = matmul(a, b);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      double acc = 0;
      for (std::size_t p = 0; p < 5; ++p) acc += double(a[i * 5 + p]) * double(b[p * 3 + j]);
      EXPECT_NEAR(c[i * 3 + j], acc, 1e-6);
    }
}

TEST(Tensor, MatmulShapeErrorNamesBothShapes) {
  Tensor<float> a = Tensor<float>::zeros({2, 3});
  Tensor<float> b = Tensor<float>::zeros({4, 2});
  try {
    matmul(a, b);
    FAIL();
  } catch (const DimensionError& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos);
    EXPECT_NE(msg.find("[4x2]"), std::string::npos);
  }
}

TEST(Tensor, ElementwiseBasics) {
  Tensor<float> x(Shape{3}, {1, -2, 3});
  auto y = add(x, Tensor<float>::zeros({3}));
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(y[i], x[i]);
  EXPECT_FLOAT_EQ(sigmoid(Tensor<float>::scalar(0.f)).item(), 0.5f);
  EXPECT_THROW(add(Tensor<float>::zeros({2, 3}), Tensor<float>::zeros({2})), DimensionError);
}

TEST(Tensor, ProductRuleGradient) {
  auto a = Tensor<double>::scalar(2.0, true);
  auto b = Tensor<double>::scalar(3.0, true);
  mul(a, b).backward();
  EXPECT_DOUBLE_EQ(a.grad()[0], 3.0);
  EXPECT_DOUBLE_EQ(b.grad()[0], 2.0);
}

TEST(Tensor, BroadcastEqualsExplicitExpansion) {
  std::mt19937_64 rng(3);
  auto a = random_tensor<double>({4, 3}, rng, false);
  auto b = random_tensor<double>({3}, rng, false);
  std::vector<double> expanded;
  for (int r = 0; r < 4; ++r) expanded.insert(expanded.end(), b.data().begin(), b.data().end());
  Tensor<double> bx(Shape{4, 3}, expanded);
  for (auto op : {add<double>, sub<double>, mul<double>, div<double>}) {
    auto lhs = op(a, b);
    auto rhs = op(a, bx);
    for (std::size_t i = 0; i < 12; ++i) EXPECT_EQ(lhs[i], rhs[i]);
    auto swapped = op(b, a);
    auto swapped_x = op(bx, a);
    for (std::size_t i = 0; i < 12; ++i) EXPECT_EQ(swapped[i], swapped_x[i]);
  }
}

TEST(Tensor, BackwardSimpleCases) {
  Tensor<double> x(Shape{4}, {1, 2, 3, 4}, true);
  sum(x).backward();
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);

  Tensor<double> y(Shape{2}, {1, 2}, true);
  sum(pow(y, 2.0)).backward();
  EXPECT_DOUBLE_EQ(y.grad()[0], 2.0);
  EXPECT_DOUBLE_EQ(y.grad()[1], 4.0);
}

TEST(Tensor, BackwardErrors) {
  Tensor<double> x(Shape{2}, {1, 2}, true);
  EXPECT_THROW(mul(x, x).backward(), GraphError);  // not a scalar
  auto loss = sum(mul(x, x));
  loss.backward();
  EXPECT_THROW(loss.backward(), GraphError);  // double backward
}

TEST(Tensor, NoGradientForConstants) {
  Tensor<double> w(Shape{2}, {1, 2}, true);
  Tensor<double> c(Shape{2}, {3, 4}, false);
  sum(mul(w, c)).backward();
  EXPECT_TRUE(w.has_grad());
  EXPECT_FALSE(c.has_grad());
}

TEST(Tensor, BackwardVisitsEachOperationOnce) {
  // x is used by two branches; a single visit per node yields exact sums.
  Tensor<double> x(Shape{3}, {0.5, -1.0, 2.0}, true);
  auto h = tanh(x);
  auto loss = sum(add(mul(h, h), h));
  loss.backward();
  for (std::size_t i = 0; i < 3; ++i) {
    const double t = std::tanh(x[i]);
    EXPECT_NEAR(x.grad()[i], (2 * t + 1) * (1 - t * t), 1e-12);
  }
}

TEST(Tensor, SoftmaxCrossEntropyUniform) {
  const std::size_t V = 1000;
  auto logits = Tensor<double>::zeros({1, V});
  std::vector<std::int32_t> t{17};
  std::vector<std::uint8_t> sel{1};
  EXPECT_NEAR(softmax_cross_entropy(logits, t, sel).item(), std::log(1000.0), 1e-12);
}

TEST(Tensor, SoftmaxCrossEntropyMarginVanishes) {
  double previous = 1e9;
  for (double margin : {1.0, 5.0, 10.0, 30.0}) {
    Tensor<double> logits(Shape{1, 4}, {0, margin, 0, 0});
    std::vector<std::int32_t> t{1};
    std::vector<std::uint8_t> sel{1};
    const double loss = softmax_cross_entropy(logits, t, sel).item();
    EXPECT_LT(loss, previous);
    previous = loss;
  }
  EXPECT_LT(previous, 1e-12);
}

TEST(Tensor, SoftmaxCrossEntropyMatchesLogSumExp) {
  std::mt19937_64 rng(11);
  auto logits = random_tensor<double>({6, 17}, rng, false, 3.0);
  std::vector<std::int32_t> t{0, 16, 3, 9, 9, 4};
  std::vector<std::uint8_t> sel{1, 0, 1, 1, 0, 1};
  double total = 0;
  int count = 0;
  for (std::size_t r = 0; r < 6; ++r) {
    if (!sel[r]) continue;
    double z = 0;
    for (std::size_t j = 0; j < 17; ++j) z += std::exp(logits[r * 17 + j]);
    total += std::log(z) - logits[r * 17 + t[r]];
    ++count;
  }
  EXPECT_NEAR(softmax_cross_entropy(logits, t, sel).item(), total / count, 1e-6);
}

TEST(Tensor, SoftmaxCrossEntropyEmptySelection) {
  auto logits = Tensor<float>::zeros({2, 3});
  std::vector<std::int32_t> t{0, 1};
  std::vector<std::uint8_t> sel{0, 0};
  EXPECT_THROW(softmax_cross_entropy(logits, t, sel), EmptySelectionError);
}

TEST(Tensor, GradientCheckComposedGraph) {
  std::mt19937_64 rng(5);
  auto a = random_tensor<double>({3, 4}, rng);
  auto b = random_tensor<double>({4, 5}, rng);
  auto g = random_tensor<double>({5}, rng);
  auto u = random_tensor<double>({3, 5}, rng, true, 0.5);
  std::vector<std::pair<std::string, Tensor<double>*>> params{{"a", &a}, {"b", &b}, {"g", &g}, {"u", &u}};
  auto loss = [&] {
    auto h = matmul(a, b);
    auto n = rmsnorm(h, g, 1e-5);
    auto s = add(mul(sigmoid(n), tanh(u)), div(exp(scale(u, 0.3)), add(pow(n, 2.0), Tensor<double>::scalar(1.0))));
    auto sel = std::vector<std::uint8_t>{1, 1, 0};
    auto tg = std::vector<std::int32_t>{2, 0, 4};
    return add(softmax_cross_entropy(s, tg, sel), mean(silu(sub(s, neg(u)))));
  };
  auto r = check_gradients(params, loss);
  EXPECT_LT(r.max_relative_error, 1e-5) << r.worst_parameter << "[" << r.worst_index << "]";
}

TEST(Tensor, GradientCheckFusedKernels) {
  std::mt19937_64 rng(9);
  auto q = random_tensor<double>({2, 3, 4, 4}, rng);
  auto k = random_tensor<double>({2, 3, 2, 4}, rng);
  auto v = random_tensor<double>({2, 3, 2, 4}, rng);
  auto e = random_tensor<double>({5, 3}, rng);
  auto w = random_tensor<double>({3, 4}, rng, false);
  std::vector<std::pair<std::string, Tensor<double>*>> params{{"q", &q}, {"k", &k}, {"v", &v}, {"e", &e}};
  std::vector<std::uint8_t> pad{0, 0, 1, 0, 0, 0};
  std::vector<std::int64_t> pos{0, 1, 2};
  std::vector<std::int32_t> ids{4, 0, 4, 2};
  std::vector<std::uint8_t> keep{1, 1, 0, 1, 0, 1};
  auto loss = [&] {
    auto qr = rope_rotate(q, pos, 100.0);
    auto kr = rope_rotate(k, pos, 100.0);
    auto o = grouped_attention(qr, kr, v, pad, 0.5);
    auto pooled = masked_mean_rows(reshape(o, Shape{2, 3, 16}), keep);
    auto emb = l2_normalize_rows(gather_rows(e, ids));
    return add(sum(pow(pooled, 2.0)), sum(mul(transpose(emb), w)));
  };
  auto r = check_gradients(params, loss);
  EXPECT_LT(r.max_relative_error, 1e-5) << r.worst_parameter << "[" << r.worst_index << "]";
}

TEST(Tensor, GradientCheckCatchesBrokenPaths) {
  // Half of the loss flows through a detached copy, so the analytic gradient
  // is off by a factor of two. Small parameters exercise the floor.
  for (double magnitude : {1.0, 1e-7}) {
    Tensor<double> p(Shape{3}, {0.5 * magnitude, -0.25 * magnitude, magnitude}, true);
    auto loss = [&] {
      auto detached = cast<double>(p, false);
      return add(sum(scale(p, 2.0)), sum(scale(detached, 2.0)));
    };
    auto r = check_gradients({{"p", &p}}, loss);
    EXPECT_NEAR(r.max_relative_error, 0.5, 1e-6) << magnitude;
  }
}

TEST(Tensor, Determinism) {
  std::mt19937_64 r1(42), r2(42);
  auto a1 = random_tensor<float>({16, 33}, r1), b1 = random_tensor<float>({33, 8}, r1);
  auto a2 = random_tensor<float>({16, 33}, r2), b2 = random_tensor<float>({33, 8}, r2);
  auto c1 = matmul(a1, b1), c2 = matmul(a2, b2);
  for (std::size_t i = 0; i < c1.size(); ++i) EXPECT_EQ(c1[i], c2[i]);
}

TEST(Tensor, NoGradGuardSkipsRecording) {
  Tensor<double> x(Shape{2}, {1, 2}, true);
  NoGradGuard guard;
  auto y = mul(x, x);
  EXPECT_FALSE(y.requires_grad());
}
