#ifndef CMDQ_QKERNEL_HPP
#define CMDQ_QKERNEL_HPP

#include <algorithm>
#include <atomic>
#include <bit>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "cmdq/error.hpp"
#include "cmdq/matrix.hpp"
#include "cmdq/packfmt.hpp"
#include "cmdq/spans.hpp"

namespace cmdq {

/// Output tile block_m x block_d, reduction slab block_k, worker count and
/// pipeline depth. `stages` has no CPU meaning and is carried for bookkeeping only.
struct TileConfig {
  std::size_t block_m = 32;
  std::size_t block_d = 32;
  std::size_t block_k = 32;
  std::size_t workers = 1;
  std::size_t stages = 1;

  /// Returns an empty string when valid for the given bit width.
  std::string problem(int bits) const {
    const auto tile_ok = [](std::size_t v) { return v >= 8 && v <= 256 && std::has_single_bit(v); };
    if (!tile_ok(block_m) || !tile_ok(block_d) || !tile_ok(block_k))
      return "tile sizes must be powers of two in [8, 256]";
    if (!supported_bits(bits)) return "unsupported bit width";
    if (block_k % lanes_per_word(bits) != 0) return "block_k must be a multiple of the lanes per word";
    if (workers == 0) return "workers must be at least 1";
    if (stages == 0) return "stages must be at least 1";
    return {};
  }

  void validate(int bits) const {
    if (auto p = problem(bits); !p.empty()) throw InvariantError("tile config " + describe() + ": " + p);
  }

  std::string describe() const {
    return "M" + std::to_string(block_m) + "xD" + std::to_string(block_d) + "xK" + std::to_string(block_k) +
           "/w" + std::to_string(workers) + "/s" + std::to_string(stages);
  }

  friend bool operator==(const TileConfig&, const TileConfig&) = default;
  friend auto operator<=>(const TileConfig&, const TileConfig&) = default;
};

inline void to_json(nlohmann::json& j, const TileConfig& c) {
  j = {{"block_m", c.block_m}, {"block_d", c.block_d}, {"block_k", c.block_k},
       {"workers", c.workers}, {"stages", c.stages}};
}

inline void from_json(const nlohmann::json& j, TileConfig& c) {
  j.at("block_m").get_to(c.block_m);
  j.at("block_d").get_to(c.block_d);
  j.at("block_k").get_to(c.block_k);
  c.workers = j.value("workers", std::size_t{1});
  c.stages = j.value("stages", std::size_t{1});
}

/// Naive product a * w (+ bias), k innermost.
inline DenseMatrix reference_matmul(const DenseMatrix& a, const DenseMatrix& w,
                                    const std::optional<std::vector<float>>& bias = std::nullopt) {
  detail::require(a.cols() == w.rows(), "reference_matmul: inner dimensions differ");
  if (bias) detail::require(bias->size() == w.cols(), "reference_matmul: bias length mismatch");
  DenseMatrix out(a.rows(), w.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < w.cols(); ++j) {
      float acc = 0.0F;
      for (std::size_t k = 0; k < a.cols(); ++k) acc += a(i, k) * w(k, j);
      out(i, j) = acc + (bias ? (*bias)[j] : 0.0F);
    }
  return out;
}

namespace detail {

struct KernelContext {
  const DenseMatrix& a;
  const PackedLinear& layer;
  const TileConfig& cfg;
  std::vector<float> scales;        // G x O widened
  std::vector<std::uint32_t> zeros;  // G x O unpacked
  DenseMatrix& out;
  SpanRecorder* tracer;
  SpanId root;
};

inline void run_tile(KernelContext& ctx, std::size_t tile, std::size_t tiles_d, std::size_t worker) {
  const auto& layer = ctx.layer;
  const std::size_t m_total = ctx.a.rows();
  const std::size_t k_total = layer.in_features;
  const std::size_t d_total = layer.out_features;
  const std::size_t f = layer.lanes();
  const int bits = layer.bits;
  const std::uint32_t mask = lane_mask(bits);

  const std::size_t m0 = (tile / tiles_d) * ctx.cfg.block_m;
  const std::size_t d0 = (tile % tiles_d) * ctx.cfg.block_d;
  const std::size_t m1 = std::min(m_total, m0 + ctx.cfg.block_m);
  const std::size_t d1 = std::min(d_total, d0 + ctx.cfg.block_d);
  const std::size_t width = d1 - d0;

  std::vector<float> acc((m1 - m0) * width, 0.0F);
  std::vector<float> b_tile(ctx.cfg.block_k * width);

  const auto dequant_slab = [&](std::size_t k0, std::size_t k1) {
    for (std::size_t kr = k0; kr < k1; kr += f) {
      const auto words = layer.qweight.row(kr / f);
      for (std::size_t lane = 0; lane < f; ++lane) {
        const std::size_t i = kr + lane;
        const auto g = static_cast<std::size_t>(layer.g_idx[i]);
        const float* sc = &ctx.scales[g * d_total];
        const std::uint32_t* zr = &ctx.zeros[g * d_total];
        const auto sh = static_cast<std::uint32_t>(lane * static_cast<std::size_t>(bits));
        float* dst = &b_tile[(i - k0) * width];
        for (std::size_t o = d0; o < d1; ++o) {
          const std::uint32_t v = (words[o] >> sh) & mask;
          dst[o - d0] = (static_cast<float>(v) - static_cast<float>(zr[o])) * sc[o];
        }
      }
    }
  };

  const auto body = [&](std::optional<SpanId> tile_span) {
    for (std::size_t k0 = 0; k0 < k_total; k0 += ctx.cfg.block_k) {
      const std::size_t k1 = std::min(k_total, k0 + ctx.cfg.block_k);
      if (ctx.tracer != nullptr)
        with_span(*ctx.tracer, "dequant", tile_span, [&] { dequant_slab(k0, k1); }, worker);
      else
        dequant_slab(k0, k1);
      for (std::size_t r = m0; r < m1; ++r) {
        const auto arow = ctx.a.row(r);
        float* crow = &acc[(r - m0) * width];
        for (std::size_t k = k0; k < k1; ++k) {
          const float av = arow[k];
          const float* brow = &b_tile[(k - k0) * width];
          for (std::size_t o = 0; o < width; ++o) crow[o] += av * brow[o];
        }
      }
    }
    for (std::size_t r = m0; r < m1; ++r)
      std::copy_n(&acc[(r - m0) * width], width, &ctx.out(r, d0));
  };

  if (ctx.tracer != nullptr)
    with_span(*ctx.tracer, "tile", ctx.root, [&](SpanId id) { body(id); }, worker);
  else
    body(std::nullopt);
}

}  // namespace detail

/// C = A * dequant(L) + bias, computed tile by tile. Each block_m x block_d output
/// tile accumulates over block_k reduction slabs; each slab of packed weights is
/// unpacked once and reused for every row of the tile. Tiles are independent, so
/// results do not depend on the worker count.
///
/// With a tracer, emits forward -> {tile -> dequant*, bias_add}.
inline DenseMatrix quant_matmul(const DenseMatrix& a, const PackedLinear& layer, const TileConfig& cfg,
                                SpanRecorder* tracer = nullptr) {
  if (a.cols() != layer.in_features)
    throw InvariantError("quant_matmul: input has " + std::to_string(a.cols()) + " columns, layer expects " +
                         std::to_string(layer.in_features));
  layer.validate();
  cfg.validate(layer.bits);

  const std::size_t d_total = layer.out_features;
  DenseMatrix out(a.rows(), d_total);
  const std::size_t tiles_m = (a.rows() + cfg.block_m - 1) / cfg.block_m;
  const std::size_t tiles_d = (d_total + cfg.block_d - 1) / cfg.block_d;
  const std::size_t tiles = tiles_m * tiles_d;
  const std::size_t workers = std::max<std::size_t>(1, std::min(cfg.workers, tiles));

  const auto forward = [&](std::optional<SpanId> root) {
    detail::KernelContext ctx{a, layer, cfg, {}, {}, out, tracer, root.value_or(0)};
    ctx.scales.resize(layer.scales.size());
    ctx.zeros.resize(layer.scales.size());
    for (std::size_t g = 0; g < layer.group_count(); ++g)
      for (std::size_t o = 0; o < d_total; ++o) {
        ctx.scales[g * d_total + o] = layer.scale(g, o);
        ctx.zeros[g * d_total + o] = layer.zero(g, o);
      }

    if (workers == 1) {
      for (std::size_t t = 0; t < tiles; ++t) detail::run_tile(ctx, t, tiles_d, 0);
    } else {
      std::atomic<std::size_t> next{0};
      std::vector<std::jthread> pool;
      pool.reserve(workers);
      for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&, w] {
          for (std::size_t t = next.fetch_add(1); t < tiles; t = next.fetch_add(1)) detail::run_tile(ctx, t, tiles_d, w);
        });
    }

    if (layer.bias) {
      const auto add_bias = [&] {
        for (std::size_t r = 0; r < out.rows(); ++r) {
          auto row = out.row(r);
          for (std::size_t o = 0; o < d_total; ++o) row[o] += (*layer.bias)[o];
        }
      };
      if (tracer != nullptr)
        with_span(*tracer, "bias_add", root, add_bias);
      else
        add_bias();
    }
  };

  if (tracer != nullptr) {
    tracer->reserve_workers(workers);
    with_span(*tracer, "forward", std::nullopt, [&](SpanId id) { forward(id); });
  } else {
    forward(std::nullopt);
  }
  return out;
}

struct TuneEntry {
  TileConfig config;
  std::int64_t median_ns = 0;
  std::vector<std::int64_t> samples_ns;
};

struct AutotuneResult {
  TileConfig best;
  std::vector<TuneEntry> table;
  std::vector<std::pair<TileConfig, std::string>> rejected;
};

inline std::int64_t median_of(std::vector<std::int64_t> v) {
  detail::require(!v.empty(), "median of nothing");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : (v[n / 2 - 1] + v[n / 2]) / 2;
}

/// Times every valid candidate on a seeded random M x K input: one untimed warmup,
/// then `runs` timed executions, each bracketed by exactly two clock reads. Picks
/// the smallest median; ties go to the earlier candidate.
inline AutotuneResult autotune(std::size_t m, std::size_t k, std::size_t d, const PackedLinear& layer,
                               const std::vector<TileConfig>& candidates, std::size_t runs,
                               const Clock& clock = steady_now_ns, std::uint64_t seed = 0) {
  if (candidates.empty()) throw InvariantError("autotune: no candidate configurations");
  if (runs < 3) throw InvariantError("autotune: need at least 3 timed runs");
  if (layer.in_features != k || layer.out_features != d)
    throw InvariantError("autotune: layer shape does not match K x D");

  const DenseMatrix a = seeded_random_matrix(std::max<std::size_t>(m, 1), k, seed);
  AutotuneResult result;
  for (const auto& c : candidates) {
    if (auto p = c.problem(layer.bits); !p.empty()) {
      result.rejected.emplace_back(c, p);
      continue;
    }
    quant_matmul(a, layer, c);
    TuneEntry e{c, 0, {}};
    e.samples_ns.reserve(runs);
    for (std::size_t r = 0; r < runs; ++r) {
      const std::int64_t t0 = clock();
      quant_matmul(a, layer, c);
      const std::int64_t t1 = clock();
      e.samples_ns.push_back(t1 - t0);
    }
    e.median_ns = median_of(e.samples_ns);
    result.table.push_back(std::move(e));
  }
  if (result.table.empty()) throw InvariantError("autotune: every candidate configuration is invalid");
  const auto best = std::min_element(result.table.begin(), result.table.end(),
                                     [](const TuneEntry& x, const TuneEntry& y) { return x.median_ns < y.median_ns; });
  result.best = best->config;
  return result;
}

/// Tuned configurations keyed by problem shape, consulted at dispatch time.
class TuningTable {
 public:
  using Key = std::tuple<std::size_t, std::size_t, std::size_t, int>;  // M, K, D, bits

  void record(std::size_t m, std::size_t k, std::size_t d, int bits, const TileConfig& c) {
    table_[{m, k, d, bits}] = c;
  }

  std::optional<TileConfig> find(std::size_t m, std::size_t k, std::size_t d, int bits) const {
    const auto it = table_.find({m, k, d, bits});
    if (it == table_.end()) return std::nullopt;
    return it->second;
  }

  /// Uses the tuned entry for this shape, or `fallback` if none was recorded.
  DenseMatrix run(const DenseMatrix& a, const PackedLinear& layer, const TileConfig& fallback,
                  SpanRecorder* tracer = nullptr) const {
    const auto c = find(a.rows(), layer.in_features, layer.out_features, layer.bits);
    return quant_matmul(a, layer, c.value_or(fallback), tracer);
  }

 private:
  std::map<Key, TileConfig> table_;
};

/// A modest sweep of square-ish tiles valid for `bits`.
inline std::vector<TileConfig> default_tile_candidates(int bits, std::size_t workers = 1) {
  std::vector<TileConfig> out;
  const std::size_t f = lanes_per_word(bits);
  for (const std::size_t bm : {16U, 32U, 64U})
    for (const std::size_t bd : {32U, 64U, 128U})
      for (const std::size_t bk : {32U, 64U, 128U})
        if (bk % f == 0) out.push_back({bm, bd, bk, workers, 2});
  return out;
}

}  // namespace cmdq

#endif  // CMDQ_QKERNEL_HPP
