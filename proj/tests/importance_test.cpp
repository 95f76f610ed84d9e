#include <gtest/gtest.h>

#include <cmath>

#include "das/domain.hpp"
#include "das/importance.hpp"
#include "support.hpp"

using namespace das;
using das::testing::bit_equal;
using das::testing::random_tokens;
using das::testing::tiny_config;

namespace {

RawImportance raw_of(const ModelConfig& c, Rng& rng) {
  RawImportance r{UnitValues::filled(c, 0.0), 1};
  for (auto& l : r.scores.layers)
    for (auto k : all_unit_kinds)
      for (auto& v : l.of(k)) v = rng.uniform() * 3.0;
  return r;
}

NormalizedImportance norm_of(const ModelConfig& c, Rng& rng) {
  NormalizedImportance n{UnitValues::filled(c, 0.0)};
  for (auto& l : n.scores.layers)
    for (auto k : all_unit_kinds)
      for (auto& v : l.of(k)) v = rng.uniform();
  return n;
}

ModelConfig one_layer(std::size_t heads) {
  ModelConfig c = tiny_config();
  c.n_layers = 1;
  c.n_heads = heads;
  return c;
}

}  // namespace

TEST(Normalize, HandVector) {
  ModelConfig c = one_layer(2);
  c.d_model = 6;
  c.n_heads = 3;
  RawImportance r{UnitValues::filled(c, 1.0), 1};
  r.scores.layers[0].heads = {1.0, 2.0, 3.0};
  auto n = normalize_importance(r);
  const double z = 1.0 / std::sqrt(2.0 / 3.0);  // oracle: population std of [1,2,3]
  EXPECT_NEAR(z, 1.224745, 1e-6);
  EXPECT_NEAR(n.scores.layers[0].heads[0], 0.841048, 1e-6);
  EXPECT_EQ(n.scores.layers[0].heads[1], 0.0);
  EXPECT_NEAR(n.scores.layers[0].heads[2], 0.841048, 1e-6);
  EXPECT_NEAR(n.scores.layers[0].heads[0], std::tanh(z), 1e-15);
}

TEST(Normalize, ConstantVectorGivesZeros) {
  ModelConfig c = one_layer(2);
  RawImportance r{UnitValues::filled(c, 0.7), 1};
  auto n = normalize_importance(r);
  n.scores.for_each([](double v) { EXPECT_EQ(v, 0.0); });
}

TEST(Normalize, StaysInHalfOpenUnitInterval) {
  ModelConfig c = tiny_config();
  Rng rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    auto r = raw_of(c, rng);
    // One huge outlier drives tanh to 1.0 in floating point.
    r.scores.layers[0].inter[0] = 1e12;
    normalize_importance(r).scores.for_each([](double v) {
      EXPECT_GE(v, 0.0);
      EXPECT_LT(v, 1.0);
    });
  }
}

TEST(Normalize, ScaleInvariant) {
  ModelConfig c = tiny_config();
  Rng rng(2);
  auto r = raw_of(c, rng);
  auto scaled = r;
  for (auto& l : scaled.scores.layers)
    for (auto k : all_unit_kinds)
      for (auto& v : l.of(k)) v *= 8.0;  // a power of two keeps the arithmetic exact
  EXPECT_EQ(normalize_importance(r), normalize_importance(scaled));
}

TEST(Normalize, RejectsNegativeRaw) {
  ModelConfig c = one_layer(2);
  RawImportance r{UnitValues::filled(c, 1.0), 1};
  r.scores.layers[0].out[0] = -1.0;
  EXPECT_THROW(normalize_importance(r), Error);
}

TEST(Accumulate, ElementwiseMaxHandCase) {
  ModelConfig c = one_layer(2);
  auto store = ImportanceStore::zeros(c);
  NormalizedImportance a{UnitValues::filled(c, 0.0)}, b{UnitValues::filled(c, 0.0)};
  a.scores.layers[0].heads = {0.2, 0.5};
  b.scores.layers[0].heads = {0.4, 0.1};
  auto s = accumulate(accumulate(store, a, "a"), b, "b");
  EXPECT_EQ(s.accumulated.scores.layers[0].heads, (std::vector<double>{0.4, 0.5}));
  EXPECT_EQ(s.contributors, (std::vector<std::string>{"a", "b"}));
}

TEST(Accumulate, SemilatticeProperties) {
  ModelConfig c = tiny_config();
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    ImportanceStore s{norm_of(c, rng), {"general"}};
    auto a = norm_of(c, rng), b = norm_of(c, rng), d = norm_of(c, rng);
    EXPECT_EQ(accumulate(s, s.accumulated, "x").accumulated, s.accumulated);
    EXPECT_EQ(accumulate(accumulate(s, a, "a"), b, "b").accumulated,
              accumulate(accumulate(s, b, "b"), a, "a").accumulated);
    const auto ab = accumulate(ImportanceStore{a, {}}, b, "b").accumulated;
    EXPECT_EQ(accumulate(accumulate(accumulate(s, a, "a"), b, "b"), d, "d").accumulated,
              accumulate(accumulate(s, ab, "ab"), d, "d").accumulated);
    auto next = accumulate(s, a, "a");
    for (std::size_t l = 0; l < c.n_layers; ++l)
      for (auto k : all_unit_kinds)
        for (std::size_t i = 0; i < s.accumulated.scores.layers[l].of(k).size(); ++i)
          EXPECT_GE(next.accumulated.scores.layers[l].of(k)[i], s.accumulated.scores.layers[l].of(k)[i]);
  }
}

TEST(Accumulate, RejectsDuplicateLabelAndShapeMismatch) {
  ModelConfig c = one_layer(2);
  auto s = accumulate(ImportanceStore::zeros(c), NormalizedImportance{UnitValues::filled(c, 0.1)}, "d1");
  EXPECT_THROW(accumulate(s, NormalizedImportance{UnitValues::filled(c, 0.1)}, "d1"), Error);
  EXPECT_THROW(accumulate(s, NormalizedImportance{UnitValues::filled(tiny_config(), 0.1)}, "d2"), ShapeError);
}

TEST(ProxyKl, ZeroDropoutGivesExactlyZero) {
  GatedTransformer m(tiny_config(0.0), 1);
  Rng rng(1);
  auto b = random_tokens(3, 5, 20, rng);
  EXPECT_EQ(proxy_kl_loss(m, b, 4).item(), 0.0);
}

TEST(ProxyKl, HandDistributions) {
  Tensor p = Tensor::leaf({1, 2}, {std::log(0.9), std::log(0.1)});
  Tensor q = Tensor::leaf({1, 2}, {std::log(0.5), std::log(0.5)});
  const std::vector<double> w{1.0};
  const double oracle = 0.9 * std::log(1.8) + 0.1 * std::log(0.2);
  EXPECT_NEAR(oracle, 0.368064, 1e-6);
  EXPECT_NEAR(weighted_kl(p, q, w).item(), oracle, 1e-12);
}

TEST(ProxyKl, NonNegativeAndPositiveUnderDropout) {
  GatedTransformer m(tiny_config(0.2), 2);
  Rng rng(2);
  for (int i = 0; i < 50; ++i) {
    auto b = random_tokens(2, 4, 20, rng);
    EXPECT_GT(proxy_kl_loss(m, b, static_cast<std::uint64_t>(i)).item(), 0.0);
  }
}

TEST(ProxyKl, EmptyBatchIsAnError) {
  GatedTransformer m(tiny_config(0.2), 2);
  TokenBatch pad{1, 2, {Vocabulary::pad_id, Vocabulary::pad_id}};
  EXPECT_THROW(proxy_kl_loss(m, pad, 0), Error);
}

TEST(ComputeImportance, SingleSampleEqualsAbsoluteGateGradient) {
  const ModelConfig c = tiny_config(0.2);
  GatedTransformer m(c, 3);
  Rng rng(3);
  auto b = random_tokens(1, 5, 20, rng);
  std::vector<TokenBatch> data{b};
  auto raw = compute_importance(m, data, ImportanceLoss::proxy_kl, 9);
  // Oracle: shared gate leaves, the plain loss, and autodiff on it.
  auto gates = GateTensors::from(GateSet::ones(c), 1, true);
  auto g = backward(proxy_kl_loss(m, b, 9, 0, 1, &gates));
  for (std::size_t l = 0; l < c.n_layers; ++l)
    for (auto k : all_unit_kinds)
      for (std::size_t i = 0; i < raw.scores.layers[l].of(k).size(); ++i)
        EXPECT_NEAR(raw.scores.layers[l].of(k)[i], std::abs(g.of(gates.layers[l].of(k))[i]), 1e-12);
  EXPECT_EQ(raw.sample_count, 1u);
}

TEST(ComputeImportance, PerExampleAbsoluteValuesAreAveraged) {
  const ModelConfig c = tiny_config(0.0);
  GatedTransformer m(c, 4);
  Rng rng(4);
  auto b = random_tokens(3, 4, 20, rng);
  Rng mr(5);
  auto batch = mlm_corrupt(b, 0.5, c.vocab_size, mr);
  GateGradientAccumulator acc(c);
  add_mlm_importance(acc, m, batch);
  auto raw = acc.result();
  // Oracle: one backward per sequence with its own single-row batch.
  std::vector<double> expect(c.n_heads, 0.0);
  std::size_t counted = 0;
  for (std::size_t s = 0; s < 3; ++s) {
    MLMBatch one;
    one.inputs = TokenBatch{1, 4, {batch.inputs.ids.begin() + s * 4, batch.inputs.ids.begin() + (s + 1) * 4}};
    one.labels.assign(batch.labels.begin() + s * 4, batch.labels.begin() + (s + 1) * 4);
    one.mask_positions.assign(batch.mask_positions.begin() + s * 4, batch.mask_positions.begin() + (s + 1) * 4);
    if (one.masked_count() == 0) continue;
    ++counted;
    auto gates = GateTensors::from(GateSet::ones(c), 1, true);
    auto g = backward(mlm_loss(m.forward(one.inputs, &gates, ForwardMode::eval()).logits, one));
    for (std::size_t h = 0; h < c.n_heads; ++h) expect[h] += std::abs(g.of(gates.layers[1].heads)[h]);
  }
  ASSERT_GT(counted, 0u);
  for (std::size_t h = 0; h < c.n_heads; ++h) EXPECT_NEAR(raw.scores.layers[1].heads[h], expect[h] / counted, 1e-12);
}

TEST(ComputeImportance, SplitBatchesMergeBySampleCount) {
  const ModelConfig c = tiny_config(0.2);
  GatedTransformer m(c, 5);
  Rng rng(5);
  std::vector<TokenBatch> all{random_tokens(2, 4, 20, rng), random_tokens(3, 4, 20, rng)};
  auto whole = compute_importance(m, all, ImportanceLoss::mlm, 11);
  // Batch b uses stream (seed, b), so the split halves keep their streams by
  // calling the accumulator directly.
  GateGradientAccumulator a1(c), a2(c);
  for (std::size_t b = 0; b < 2; ++b) {
    Rng r(mix_key(11, b));
    add_mlm_importance(b == 0 ? a1 : a2, m, mlm_corrupt(all[b], 0.15, c.vocab_size, r));
  }
  auto merged = merge(a1.result(), a2.result());
  EXPECT_EQ(merged.sample_count, whole.sample_count);
  for (std::size_t l = 0; l < c.n_layers; ++l)
    for (auto k : all_unit_kinds)
      for (std::size_t i = 0; i < whole.scores.layers[l].of(k).size(); ++i)
        EXPECT_NEAR(merged.scores.layers[l].of(k)[i], whole.scores.layers[l].of(k)[i], 1e-12);
}

TEST(ComputeImportance, NeverChangesParametersAndScalesWithLoss) {
  const ModelConfig c = tiny_config(0.2);
  GatedTransformer m(c, 6);
  Rng rng(6);
  auto b = random_tokens(2, 4, 20, rng);
  const auto before = m.flat_parameters();
  GateGradientAccumulator plain(c), doubled(c);
  auto loss = [&](const GateTensors& g) { return proxy_kl_loss(m, b, 3, 0, 1, &g); };
  plain.add(1, 1, [&](const GateTensors& g) { return loss(g); });
  doubled.add(1, 1, [&](const GateTensors& g) { return scale(loss(g), 2.0); });
  EXPECT_TRUE(bit_equal(m.flat_parameters(), before));
  auto r1 = plain.result(), r2 = doubled.result();
  for (std::size_t i = 0; i < c.n_heads; ++i) EXPECT_EQ(r2.scores.layers[0].heads[i], 2.0 * r1.scores.layers[0].heads[i]);
  EXPECT_EQ(normalize_importance(r1), normalize_importance(r2));
}

TEST(ComputeImportance, ConstantLossGivesZeros) {
  const ModelConfig c = tiny_config(0.0);
  GatedTransformer m(c, 7);
  GateGradientAccumulator acc(c);
  acc.add(1, 1, [&](const GateTensors&) { return Tensor::scalar(1.0); });
  acc.result().scores.for_each([](double v) { EXPECT_EQ(v, 0.0); });
  std::vector<TokenBatch> none;
  EXPECT_THROW(compute_importance(m, none, ImportanceLoss::mlm, 0), Error);
}

TEST(GeneralImportance, ZeroDropoutChainsToZeros) {
  GatedTransformer m(tiny_config(0.0), 8);
  Rng rng(8);
  std::vector<TokenBatch> data{random_tokens(2, 4, 20, rng)};
  initialize_general_importance(m, data, 1).scores.for_each([](double v) { EXPECT_EQ(v, 0.0); });
}

TEST(GeneralImportance, EqualsManualComposition) {
  GatedTransformer m(tiny_config(0.1), 9);
  Rng rng(9);
  std::vector<TokenBatch> data{random_tokens(2, 4, 20, rng), random_tokens(2, 4, 20, rng)};
  EXPECT_EQ(initialize_general_importance(m, data, 5),
            normalize_importance(compute_importance(m, data, ImportanceLoss::proxy_kl, 5)));
}

TEST(Similarity, HandCases) {
  ModelConfig c = one_layer(3);
  c.d_model = 6;
  NormalizedImportance a{UnitValues::filled(c, 0.0)}, b{UnitValues::filled(c, 0.0)};
  a.scores.layers[0].heads = {1, 0, 1};
  b.scores.layers[0].heads = {1, 1, 0};
  EXPECT_NEAR(importance_similarity(a, b), 0.5, 1e-15);
  EXPECT_NEAR(importance_similarity(a, a), 1.0, 1e-15);
  b.scores.layers[0].heads = {0, 1, 0};
  EXPECT_EQ(importance_similarity(a, b), 0.0);
  b.scores.layers[0].heads = {0, 0, 0};
  EXPECT_THROW(importance_similarity(a, b), Error);
}

TEST(RandomImportance, SeededUniforms) {
  auto a = random_importance(tiny_config(), 3), b = random_importance(tiny_config(), 3);
  EXPECT_EQ(a, b);
  a.scores.for_each([](double v) {
    EXPECT_GE(v, 0.0);
    EXPECT_LT(v, 1.0);
  });
  EXPECT_NE(a, random_importance(tiny_config(), 4));
}

TEST(Snapshot, JsonRoundTrip) {
  Rng rng(10);
  ImportanceStore s{norm_of(tiny_config(), rng), {"general", "d1"}};
  auto back = snapshot_from_json(nlohmann::json::parse(snapshot_json(s).dump()));
  EXPECT_EQ(back.accumulated, s.accumulated);
  EXPECT_EQ(back.contributors, s.contributors);
}
