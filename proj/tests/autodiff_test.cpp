#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "das/autodiff.hpp"
#include "support.hpp"

using namespace das;
using das::testing::finite_difference_check;
using das::testing::random_leaf;

TEST(Autodiff, SquareHasDerivativeSix) {
  Tensor x = Tensor::scalar(3.0, true);
  auto g = backward(mul(x, x));
  EXPECT_DOUBLE_EQ(g.of(x)[0], 6.0);
}

TEST(Autodiff, TanhSlopeAtZeroIsOne) {
  Tensor x = Tensor::scalar(0.0, true);
  auto g = backward(sum(das::tanh(x)));
  EXPECT_DOUBLE_EQ(g.of(x)[0], 1.0);
}

TEST(Autodiff, RepeatedSubexpressionAccumulates) {
  Tensor x = Tensor::scalar(2.0, true);
  Tensor y = mul(x, x);
  auto g = backward(add(y, y));  // 2x^2
  EXPECT_DOUBLE_EQ(g.of(x)[0], 8.0);
}

TEST(Autodiff, NonScalarRootIsRejected) {
  Tensor x = Tensor::leaf({2}, {1.0, 2.0}, true);
  EXPECT_THROW(backward(x), ShapeError);
}

TEST(Autodiff, NonFiniteValueNamesTheOp) {
  Tensor x = Tensor::leaf({1}, {-1.0}, true);
  try {
    das::log(x);
    FAIL() << "log of a negative number should fail";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("log"), std::string::npos);
  }
}

TEST(Autodiff, ElementwiseOpsMatchFiniteDifferences) {
  Rng rng(1);
  Tensor a = random_leaf({3, 4}, rng), b = random_leaf({3, 4}, rng);
  Tensor pos = Tensor::leaf({3, 4}, std::vector<double>(12, 0.0), true);
  for (std::size_t i = 0; i < 12; ++i) pos.mutable_data()[i] = 0.5 + rng.uniform();
  auto loss = [&] {
    Tensor t = add(mul(das::tanh(a), das::exp(scale(b, 0.3))), sub(gelu(a), relu(b)));
    return add(mean(mul(t, t)), sum(das::log(pos)));
  };
  auto rep = finite_difference_check({{"a", a}, {"b", b}, {"pos", pos}}, loss);
  EXPECT_EQ(rep.failed, 0u) << rep.worst_at << " rel " << rep.worst_rel;
}

TEST(Autodiff, LinearSoftmaxLayernormMatchFiniteDifferences) {
  Rng rng(2);
  Tensor x = random_leaf({4, 5}, rng), w = random_leaf({5, 3}, rng), bias = random_leaf({3}, rng);
  Tensor g = random_leaf({5}, rng), beta = random_leaf({5}, rng), w2 = random_leaf({3, 3}, rng);
  auto loss = [&] {
    Tensor h = layernorm(x, g, beta);
    Tensor s = softmax(matmul(linear(h, w, bias), w2));
    return sum(mul(s, s));
  };
  auto rep = finite_difference_check({{"x", x}, {"w", w}, {"b", bias}, {"g", g}, {"beta", beta}, {"w2", w2}}, loss);
  EXPECT_EQ(rep.failed, 0u) << rep.worst_at << " rel " << rep.worst_rel;
}

TEST(Autodiff, AttentionMatchesFiniteDifferences) {
  Rng rng(3);
  const std::size_t n = 2, t = 3, h = 2, d = 4;
  Tensor q = random_leaf({n * t, d}, rng), k = random_leaf({n * t, d}, rng), v = random_leaf({n * t, d}, rng);
  std::vector<bool> valid{true, true, false, true, true, true};
  for (double p : {0.0, 0.3}) {
    auto loss = [&] {
      Tensor o = attention(q, k, v, n, t, h, valid, p, 77);
      return sum(mul(o, o));
    };
    auto rep = finite_difference_check({{"q", q}, {"k", k}, {"v", v}}, loss);
    EXPECT_EQ(rep.failed, 0u) << "p=" << p << " " << rep.worst_at << " rel " << rep.worst_rel;
  }
}

TEST(Autodiff, MaskedKeysGetNoAttention) {
  Rng rng(4);
  Tensor q = random_leaf({3, 2}, rng), k = random_leaf({3, 2}, rng);
  Tensor v = Tensor::leaf({3, 2}, {1, 1, 2, 2, 1000, 1000});
  Tensor o = attention(q, k, v, 1, 3, 1, {true, true, false}, 0.0, 0);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_LE(o[i], 2.0 + 1e-12);
}

TEST(Autodiff, FusedLossesMatchFiniteDifferences) {
  Rng rng(5);
  Tensor p = random_leaf({3, 4}, rng), q = random_leaf({3, 4}, rng);
  std::vector<std::size_t> labels{0, 3, 1};
  std::vector<double> w{0.5, 0.0, 0.25};
  auto loss = [&] { return add(weighted_cross_entropy(p, labels, w), weighted_kl(p, q, w)); };
  auto rep = finite_difference_check({{"p", p}, {"q", q}}, loss);
  EXPECT_EQ(rep.failed, 0u) << rep.worst_at << " rel " << rep.worst_rel;
}

TEST(Autodiff, GatherGateMulPoolMatchFiniteDifferences) {
  Rng rng(6);
  Tensor table = random_leaf({5, 4}, rng), gate = random_leaf({2, 2}, rng);
  std::vector<std::size_t> ids{1, 4, 1, 0};
  std::vector<double> pw{0.5, 0.5, 1.0, 0.0};
  auto loss = [&] {
    Tensor x = gate_mul(gather(table, ids), gate, 2, 2);
    Tensor pooled = pool_rows(x, pw, 2);
    return sum(mul(pooled, pooled));
  };
  auto rep = finite_difference_check({{"table", table}, {"gate", gate}}, loss);
  EXPECT_EQ(rep.failed, 0u) << rep.worst_at << " rel " << rep.worst_rel;
}

TEST(Autodiff, DropoutIsReproduciblePerKey) {
  Tensor x = Tensor::leaf({1, 64}, std::vector<double>(64, 1.0));
  Tensor a = dropout(x, 0.5, 11), b = dropout(x, 0.5, 11), c = dropout(x, 0.5, 12);
  EXPECT_TRUE(das::testing::bit_equal(a.data(), b.data()));
  EXPECT_FALSE(das::testing::bit_equal(a.data(), c.data()));
  for (double v : a.data()) EXPECT_TRUE(v == 0.0 || v == 2.0);
}

namespace {

struct HookFixture {
  Tensor w, x;
  HookFixture() {
    Rng rng(7);
    w = random_leaf({3, 2}, rng);
    x = random_leaf({4, 3}, rng, 1.0, false);
  }
  GradientMap run() const { return backward(sum(das::tanh(matmul(x, w)))); }
};

}  // namespace

TEST(Autodiff, StorageIsPacketAligned) {
  Rng rng(3);
  Tensor a = random_leaf({3, 5}, rng), b = random_leaf({5, 7}, rng);
  Tensor y = matmul(a, b);
  auto g = backward(sum(y));
  auto aligned = [](std::span<const double> v) {
    return reinterpret_cast<std::uintptr_t>(v.data()) % EIGEN_MAX_ALIGN_BYTES == 0;
  };
  EXPECT_TRUE(aligned(a.data()));
  EXPECT_TRUE(aligned(y.data()));
  EXPECT_TRUE(aligned(g.of(a)));
}

TEST(GradScaleHook, ZerosAnnihilate) {
  HookFixture f;
  attach_grad_scale(f.w, {std::vector<double>(6, 0.0)});
  auto g = f.run();
  for (double v : g.of(f.w)) EXPECT_EQ(v, 0.0);
}

TEST(GradScaleHook, OnesAreBitIdentical) {
  HookFixture f;
  auto plain = f.run();
  std::vector<double> before(plain.of(f.w).begin(), plain.of(f.w).end());
  attach_grad_scale(f.w, {std::vector<double>(6, 1.0)});
  EXPECT_TRUE(das::testing::bit_equal(f.run().of(f.w), before));
}

TEST(GradScaleHook, HalfHalves) {
  HookFixture f;
  auto plain = f.run();
  std::vector<double> before(plain.of(f.w).begin(), plain.of(f.w).end());
  attach_grad_scale(f.w, {std::vector<double>(6, 0.5)});
  auto g = f.run();
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(g.of(f.w)[i], 0.5 * before[i]);
}

TEST(GradScaleHook, BroadcastsAlongRowsAndCols) {
  HookFixture f;
  auto plain = f.run();
  std::vector<double> before(plain.of(f.w).begin(), plain.of(f.w).end());
  attach_grad_scale(f.w, {{0.0, 1.0}, GradScaleHook::Broadcast::cols});
  auto g = f.run();
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(g.of(f.w)[i], i % 2 ? before[i] : 0.0);
  clear_grad_scale(f.w);
  attach_grad_scale(f.w, {{1.0, 0.0, 1.0}, GradScaleHook::Broadcast::rows});
  g = f.run();
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(g.of(f.w)[i], i / 2 == 1 ? 0.0 : before[i]);
}

TEST(GradScaleHook, ScaleCommutesWithFanIn) {
  // w feeds two branches; scaling the summed gradient equals summing scaled parts.
  Rng rng(8);
  Tensor w = random_leaf({2, 2}, rng);
  auto branches = [&] { return add(sum(das::tanh(w)), sum(mul(w, w))); };
  auto g1 = backward(sum(das::tanh(w)));
  auto g2 = backward(sum(mul(w, w)));
  attach_grad_scale(w, {{0.3, 0.3, 0.3, 0.3}});
  auto g = backward(branches());
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(g.of(w)[i], 0.3 * (g1.of(w)[i] + g2.of(w)[i]), 1e-15);
}

TEST(GradScaleHook, RejectsBadShapesValuesAndDoubleAttach) {
  HookFixture f;
  EXPECT_THROW(attach_grad_scale(f.w, {std::vector<double>(5, 1.0)}), ShapeError);
  EXPECT_THROW(attach_grad_scale(f.w, {std::vector<double>(6, 1.5)}), Error);
  attach_grad_scale(f.w, {std::vector<double>(6, 1.0)});
  EXPECT_THROW(attach_grad_scale(f.w, {std::vector<double>(6, 1.0)}), Error);
}
