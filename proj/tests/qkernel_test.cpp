#include <gtest/gtest.h>

#include <cstring>
#include <random>
#include <set>
#include <thread>

#include "cmdq/qkernel.hpp"
#include "test_support.hpp"

namespace cmdq {
namespace {

PackedLinear random_layer(std::size_t k, std::size_t d, int bits, int groupsize, std::uint64_t seed,
                          bool bias = false) {
  std::mt19937_64 gen(seed);
  auto q = testing::random_quantized(k, d, bits, groupsize, gen);
  std::optional<std::vector<float>> b;
  if (bias) b = seeded_random_matrix(1, d, seed + 9).vector();
  return pack_linear(q, b);
}

bool same_bytes(const DenseMatrix& a, const DenseMatrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.values().data(), b.values().data(), a.size() * sizeof(float)) == 0;
}

std::vector<TileConfig> sweep(int bits) {
  std::vector<TileConfig> out;
  const std::size_t f = lanes_per_word(bits);
  for (const std::size_t bm : {8U, 16U, 64U})
    for (const std::size_t bd : {8U, 32U, 128U})
      for (const std::size_t bk : {8U, 16U, 32U, 256U})
        if (bk % f == 0) out.push_back({bm, bd, bk, 1, 1});
  return out;
}

TEST(TileConfig, Invariants) {
  EXPECT_TRUE(TileConfig({32, 32, 32, 1, 1}).problem(4).empty());
  EXPECT_FALSE(TileConfig({24, 32, 32, 1, 1}).problem(4).empty());
  EXPECT_FALSE(TileConfig({4, 32, 32, 1, 1}).problem(4).empty());
  EXPECT_FALSE(TileConfig({512, 32, 32, 1, 1}).problem(4).empty());
  EXPECT_FALSE(TileConfig({32, 32, 8, 1, 1}).problem(2).empty());  // 16 lanes per word
  EXPECT_FALSE(TileConfig({32, 32, 32, 0, 1}).problem(4).empty());
  EXPECT_THROW(TileConfig({32, 32, 8, 1, 1}).validate(2), InvariantError);
}

TEST(TileConfig, JsonRoundTrip) {
  const TileConfig c{16, 64, 128, 4, 3};
  const nlohmann::json j = c;
  EXPECT_EQ(j.get<TileConfig>(), c);
  const auto defaults = nlohmann::json::parse(R"({"block_m":8,"block_d":8,"block_k":8})").get<TileConfig>();
  EXPECT_EQ(defaults.workers, 1U);
  EXPECT_EQ(defaults.stages, 1U);
}

TEST(ReferenceMatmul, Basics) {
  const auto x = seeded_random_matrix(5, 7, 1);
  EXPECT_EQ(reference_matmul(DenseMatrix::identity(5), x), x);
  const auto one = reference_matmul(DenseMatrix(1, 1, 3.0F), DenseMatrix(1, 1, 2.0F), std::vector<float>{0.5F});
  EXPECT_EQ(one(0, 0), 6.5F);
  EXPECT_THROW(reference_matmul(x, DenseMatrix(6, 2)), InvariantError);
}

TEST(ReferenceMatmul, AgreesWithOuterProductOrdering) {
  const auto a = seeded_random_matrix(17, 33, 2);
  const auto w = seeded_random_matrix(33, 9, 3);
  // k outermost: rank-1 updates
  DenseMatrix outer(17, 9);
  for (std::size_t k = 0; k < 33; ++k)
    for (std::size_t i = 0; i < 17; ++i)
      for (std::size_t j = 0; j < 9; ++j) outer(i, j) += a(i, k) * w(k, j);
  EXPECT_LT(relative_frobenius_error(reference_matmul(a, w), outer), 1e-6);
}

TEST(QuantMatmul, IdentityWeight) {
  QuantizedMatrix q{IntGrid(16, 16), {DenseMatrix(1, 16, 1.0F), IntGrid(1, 16), std::vector<std::int32_t>(16, 0)}, 4};
  for (std::size_t i = 0; i < 16; ++i) q.qint(i, i) = 1;
  const auto a = seeded_random_matrix(5, 16, 4);
  EXPECT_EQ(quant_matmul(a, pack_linear(q), {8, 8, 8, 1, 1}), a);

  std::vector<float> bias(16, 0.25F);
  const auto with_bias = quant_matmul(a, pack_linear(q, bias), {8, 8, 8, 1, 1});
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(with_bias.values()[i], a.values()[i] + 0.25F);
}

TEST(QuantMatmul, ZeroInput) {
  const auto layer = random_layer(32, 12, 4, 16, 1, true);
  const auto out = quant_matmul(DenseMatrix(3, 32), layer, {8, 8, 8, 1, 1});
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t o = 0; o < 12; ++o) EXPECT_EQ(out(r, o), (*layer.bias)[o]);
  const auto plain = random_layer(32, 12, 4, 16, 1, false);
  EXPECT_EQ(quant_matmul(DenseMatrix(3, 32), plain, {8, 8, 8, 1, 1}), DenseMatrix(3, 12));
}

TEST(QuantMatmul, MatchesUnfusedOracleAcrossSweep) {
  const auto a = seeded_random_matrix(64, 128, 5);
  for (const int bits : {2, 4, 8}) {
    const auto layer = random_layer(128, 96, bits, 32, 6 + static_cast<std::uint64_t>(bits), true);
    const auto ref = reference_matmul(a, dequantize(layer), layer.bias);
    for (const auto& c : sweep(bits)) {
      const auto out = quant_matmul(a, layer, c);
      EXPECT_LE(relative_frobenius_error(out, ref), 1e-5) << c.describe() << " bits " << bits;
    }
  }
}

TEST(QuantMatmul, OracleEquivalenceOverRandomShapes) {
  std::mt19937_64 gen(12);
  std::uniform_int_distribution<std::size_t> m_dist(1, 40), d_dist(1, 70), words(1, 64);
  for (int trial = 0; trial < 60; ++trial) {
    const int bits = std::array{2, 4, 8}[static_cast<std::size_t>(trial % 3)];
    const std::size_t f = lanes_per_word(bits);
    const std::size_t k = std::min<std::size_t>(words(gen) * f, 512 / f * f);
    const std::size_t m = m_dist(gen), d = d_dist(gen);
    const auto layer = random_layer(k, d, bits, 16, 100 + static_cast<std::uint64_t>(trial), trial % 2 == 0);
    const auto a = seeded_random_matrix(m, k, 200 + static_cast<std::uint64_t>(trial));
    const TileConfig c{16, 32, std::max<std::size_t>(32, f), 1, 1};
    EXPECT_LE(relative_frobenius_error(quant_matmul(a, layer, c), reference_matmul(a, dequantize(layer), layer.bias)),
              1e-5);
  }
}

TEST(QuantMatmul, WorkerCountDoesNotChangeBytes) {
  const auto a = seeded_random_matrix(70, 256, 7);
  const auto layer = random_layer(256, 90, 4, 64, 8, true);
  const std::size_t max_workers = std::max(4U, std::thread::hardware_concurrency());
  for (const auto& base : sweep(4)) {
    TileConfig one = base, many = base;
    one.workers = 1;
    many.workers = max_workers;
    ASSERT_TRUE(same_bytes(quant_matmul(a, layer, one), quant_matmul(a, layer, many))) << base.describe();
  }
}

TEST(QuantMatmul, TracingDoesNotChangeBytes) {
  const auto a = seeded_random_matrix(33, 64, 9);
  const auto layer = random_layer(64, 40, 4, 16, 10, true);
  const TileConfig c{16, 16, 32, 3, 2};
  SpanRecorder rec(3);
  EXPECT_TRUE(same_bytes(quant_matmul(a, layer, c), quant_matmul(a, layer, c, &rec)));
}

TEST(QuantMatmul, Errors) {
  const auto layer = random_layer(32, 8, 4, 16, 1);
  EXPECT_THROW(quant_matmul(DenseMatrix(2, 16), layer, {8, 8, 8, 1, 1}), InvariantError);
  EXPECT_THROW(quant_matmul(DenseMatrix(2, 32), layer, {8, 8, 12, 1, 1}), InvariantError);
}

TEST(Spans, NoOpAndNesting) {
  SpanRecorder rec;
  const auto outer = with_span(rec, "forward", std::nullopt, [&](SpanId id) {
    const auto inner = with_span(rec, "tile", id, [] { return 42; });
    EXPECT_EQ(inner.value, 42);
    EXPECT_EQ(inner.span.parent, id);
  });
  EXPECT_GE(outer.end_ns, outer.start_ns);
  const auto spans = rec.spans();
  ASSERT_EQ(spans.size(), 2U);
  EXPECT_EQ(spans[0].label, "forward");
  EXPECT_LE(spans[0].start_ns, spans[1].start_ns);
  EXPECT_GE(spans[0].end_ns, spans[1].end_ns);
  EXPECT_THROW(with_span(rec, "", std::nullopt, [] {}), InvariantError);
}

TEST(Spans, InjectedClock) {
  std::int64_t t = 0;
  SpanRecorder rec(1, [&t] { return t += 10; });
  const auto s = with_span(rec, "forward", std::nullopt, [] {});
  EXPECT_EQ(s.start_ns, 10);
  EXPECT_EQ(s.end_ns, 20);
}

TEST(Spans, KernelEmitsForwardTree) {
  const auto a = seeded_random_matrix(40, 64, 3);
  const auto layer = random_layer(64, 48, 4, 16, 4, true);
  for (const std::size_t workers : {1U, 4U}) {
    SpanRecorder rec;
    quant_matmul(a, layer, {16, 16, 32, workers, 1}, &rec);
    const auto spans = rec.spans();
    std::size_t roots = 0, tiles = 0, dequants = 0, bias = 0;
    std::map<SpanId, const TimingSpan*> by_id;
    for (const auto& s : spans) by_id[s.id] = &s;
    for (const auto& s : spans) {
      EXPECT_GE(s.end_ns, s.start_ns);
      if (!s.parent) {
        ++roots;
        EXPECT_EQ(s.label, "forward");
        continue;
      }
      const auto* parent = by_id.at(*s.parent);
      EXPECT_LE(parent->start_ns, s.start_ns);
      EXPECT_GE(parent->end_ns, s.end_ns);
      if (s.label == "tile") {
        ++tiles;
        EXPECT_EQ(parent->label, "forward");
      } else if (s.label == "dequant") {
        ++dequants;
        EXPECT_EQ(parent->label, "tile");
      } else if (s.label == "bias_add") {
        ++bias;
        EXPECT_EQ(parent->label, "forward");
      }
    }
    EXPECT_EQ(roots, 1U);
    EXPECT_EQ(tiles, 3U * 3U);
    EXPECT_EQ(dequants, tiles * 2U);
    EXPECT_EQ(bias, 1U);
    const auto j = spans_to_json(spans);
    EXPECT_EQ(j.size(), spans.size());
    EXPECT_TRUE(j[0]["parent"].is_null());
  }
}

/// Each timed run reads the clock twice; returns start, start + duration.
struct ScriptedClock {
  std::vector<std::int64_t> durations;
  std::size_t calls = 0;
  std::int64_t now = 0;
  std::int64_t operator()() {
    const std::size_t run = calls / 2;
    if (calls++ % 2 == 1) now += durations.at(run);
    return now;
  }
};

TEST(Autotune, SingleCandidate) {
  const auto layer = random_layer(32, 16, 4, 16, 1);
  const TileConfig c{8, 8, 8, 1, 1};
  const auto r = autotune(4, 32, 16, layer, {c}, 3);
  EXPECT_EQ(r.best, c);
  ASSERT_EQ(r.table.size(), 1U);
  EXPECT_EQ(r.table[0].samples_ns.size(), 3U);
}

TEST(Autotune, FakeClockArgmin) {
  const auto layer = random_layer(32, 16, 4, 16, 1);
  const std::vector<TileConfig> cands = {{8, 8, 8, 1, 1}, {16, 16, 16, 1, 1}, {8, 16, 32, 1, 1}};
  for (int rep = 0; rep < 3; ++rep) {
    auto clock = std::make_shared<ScriptedClock>(ScriptedClock{{10, 10, 10, 5, 5, 5, 7, 7, 7}});
    const auto r = autotune(4, 32, 16, layer, cands, 3, [clock] { return (*clock)(); });
    EXPECT_EQ(r.best, cands[1]);
    EXPECT_EQ(r.table[0].median_ns, 10);
    EXPECT_EQ(r.table[1].median_ns, 5);
    EXPECT_EQ(r.table[2].median_ns, 7);
  }
}

TEST(Autotune, MedianResistsOutliers) {
  const auto layer = random_layer(32, 16, 4, 16, 1);
  const std::vector<TileConfig> cands = {{8, 8, 8, 1, 1}, {16, 16, 16, 1, 1}};
  auto clock = std::make_shared<ScriptedClock>(ScriptedClock{{1, 1, 1000, 3, 3, 3}});
  const auto r = autotune(4, 32, 16, layer, cands, 3, [clock] { return (*clock)(); });
  EXPECT_EQ(r.best, cands[0]);
}

TEST(Autotune, RealClockBookkeeping) {
  const auto layer = random_layer(256, 256, 4, 128, 2);
  const std::vector<TileConfig> cands = {{16, 32, 32, 1, 1}, {64, 64, 64, 1, 1}, {32, 128, 128, 1, 2}};
  const auto r = autotune(256, 256, 256, layer, cands, 3);
  ASSERT_EQ(r.table.size(), 3U);
  std::int64_t best_median = -1;
  for (const auto& e : r.table) {
    if (e.config == r.best) best_median = e.median_ns;
  }
  for (const auto& e : r.table) EXPECT_LE(best_median, e.median_ns);
}

TEST(Autotune, Errors) {
  const auto layer = random_layer(32, 16, 2, 16, 1);
  EXPECT_THROW(autotune(4, 32, 16, layer, {}, 3), InvariantError);
  EXPECT_THROW(autotune(4, 32, 16, layer, {{8, 8, 8, 1, 1}}, 3), InvariantError);  // 16 lanes > block_k
  EXPECT_THROW(autotune(4, 32, 16, layer, {{16, 16, 16, 1, 1}}, 2), InvariantError);
  const auto r = autotune(4, 32, 16, layer, {{8, 8, 8, 1, 1}, {16, 16, 16, 1, 1}}, 3);
  EXPECT_EQ(r.rejected.size(), 1U);
  EXPECT_EQ(r.best, TileConfig({16, 16, 16, 1, 1}));
}

TEST(TuningTable, DispatchesRecordedConfig) {
  const auto layer = random_layer(64, 32, 4, 16, 3);
  const auto a = seeded_random_matrix(8, 64, 1);
  TuningTable table;
  EXPECT_FALSE(table.find(8, 64, 32, 4));
  table.record(8, 64, 32, 4, {8, 8, 16, 1, 1});
  EXPECT_EQ(table.find(8, 64, 32, 4)->block_k, 16U);
  EXPECT_TRUE(same_bytes(table.run(a, layer, {64, 64, 64, 1, 1}), quant_matmul(a, layer, {8, 8, 16, 1, 1})));
}

}  // namespace
}  // namespace cmdq
