#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "ach/common.hpp"
#include "ach/pairing.hpp"
#include "ach/tensor.hpp"
#include "ach/worker_pool.hpp"

// Parallel execution of the pairwise channel-product expansion. Work is cut
// into logical blocks, blocks are multiplexed onto a fixed worker pool, and
// every block writes a disjoint set of output channels, so results are
// bit-identical for any strategy and worker count.

namespace ach {

enum class Strategy { naive, direct, parity };

inline const char* strategy_name(Strategy s) {
  switch (s) {
    case Strategy::naive: return "naive";
    case Strategy::direct: return "direct";
    case Strategy::parity: return "parity";
  }
  return "?";
}

inline Strategy strategy_from_name(const std::string& name) {
  if (name == "naive") return Strategy::naive;
  if (name == "direct") return Strategy::direct;
  if (name == "parity") return Strategy::parity;
  throw ConfigError("unknown strategy '" + name + "'");
}

struct DispatchPlan {
  Strategy strategy = Strategy::naive;
  int workers = 1;
  std::int64_t c = 0;  // input channel count
  // Pairs each worker computes, in execution order.
  std::vector<std::vector<std::pair<std::int64_t, std::int64_t>>> assignments;
};

// naive: one worker walks all pairs in index order.
// direct: one logical block per pair; contiguous index ranges per worker.
// parity: one logical block per channel; blocks round-robin over workers.
inline DispatchPlan make_plan(Strategy strategy, int workers, std::int64_t c) {
  detail::require(workers >= 1, "make_plan: need at least one worker");
  detail::require(c >= 2, "make_plan: need at least two channels");
  DispatchPlan plan;
  plan.strategy = strategy;
  plan.c = c;
  const PairMap pm(c);
  switch (strategy) {
    case Strategy::naive: {
      plan.workers = 1;
      plan.assignments.resize(1);
      for (std::int64_t p = 0; p < pm.total; ++p)
        plan.assignments[0].push_back(pm.pair(p));
      break;
    }
    case Strategy::direct: {
      plan.workers = workers;
      plan.assignments.resize(static_cast<std::size_t>(workers));
      const std::int64_t base = pm.total / workers;
      const std::int64_t extra = pm.total % workers;
      std::int64_t p = 0;
      for (int w = 0; w < workers; ++w) {
        const std::int64_t take = base + (w < extra ? 1 : 0);
        for (std::int64_t t = 0; t < take; ++t, ++p)
          plan.assignments[static_cast<std::size_t>(w)].push_back(pm.pair(p));
      }
      break;
    }
    case Strategy::parity: {
      plan.workers = workers;
      plan.assignments.resize(static_cast<std::size_t>(workers));
      const auto blocks = parity_blocks(c);
      for (const auto& block : blocks) {
        auto& dst = plan.assignments[static_cast<std::size_t>(
            block.block_id % workers)];
        dst.insert(dst.end(), block.pairs.begin(), block.pairs.end());
      }
      break;
    }
  }
  return plan;
}

// z: [N, C, H, W] -> [N, C*(C-1)/2, H, W], channel p = z_i * z_j with
// (i, j) = pair_from_index(p, C). Value-level; no tape is consulted.
template <typename T>
Tensor<T> run_dispatch(const Tensor<T>& z, const DispatchPlan& plan,
                       WorkerPool& pool) {
  detail::require(z.shape.size() == 4, "run_dispatch: expected [N, C, H, W]");
  detail::require(z.dim(1) == plan.c, "run_dispatch: channel count mismatch");
  detail::require(pool.workers() >= plan.workers,
                  "run_dispatch: pool smaller than plan");
  const std::int64_t n = z.dim(0), c = z.dim(1), hw = z.dim(2) * z.dim(3);
  const PairMap pm(c);
  Tensor<T> out(Shape{n, pm.total, z.dim(2), z.dim(3)});
  const T* zp = z.data();
  T* op = out.data();
  pool.run([&](int w) {
    if (w >= plan.workers) return;
    for (const auto& [i, j] : plan.assignments[static_cast<std::size_t>(w)]) {
      const std::int64_t p = pm.index(i, j);
      for (std::int64_t b = 0; b < n; ++b) {
        const T* zi = zp + (b * c + i) * hw;
        const T* zj = zp + (b * c + j) * hw;
        T* dst = op + (b * pm.total + p) * hw;
        for (std::int64_t s = 0; s < hw; ++s) dst[s] = zi[s] * zj[s];
      }
    }
  });
  return out;
}

template <typename T>
std::uint64_t checksum(const Tensor<T>& t) {
  return fnv1a64(t.data(), static_cast<std::size_t>(t.numel()) * sizeof(T));
}

// (a - b) / (a + b + eps); the relative-difference cell of a timing heatmap.
inline double normalized_diff(double a, double b, double eps = 1e-12) {
  return (a - b) / (a + b + eps);
}

struct BenchRecord {
  std::int64_t batch = 0, channels = 0, spatial = 0;
  std::string strategy;
  double median_s = 0.0;
  std::uint64_t sum = 0;
  bool skipped = false;
};

struct BenchConfig {
  std::vector<std::int64_t> batches;
  std::vector<std::int64_t> channels;
  std::vector<std::int64_t> spatials;
  std::vector<Strategy> strategies;
  int repeats = 7;
  int warmups = 2;
  int workers = 1;
  std::uint64_t seed = 0;
  // Cells whose input + output bytes exceed this are skipped.
  std::int64_t memory_budget_bytes = 1536ll * 1024 * 1024;
};

// Times every grid cell for every strategy: two warmups, then the median of
// `repeats` runs on a monotonic clock. All strategies are checked against the
// naive reference checksum before timing.
template <typename T>
std::vector<BenchRecord> benchmark_grid(const BenchConfig& cfg,
                                        WorkerPool& pool) {
  detail::require(cfg.repeats >= 5, "benchmark_grid: need at least 5 repeats");
  detail::require(cfg.warmups >= 0, "benchmark_grid: negative warmups");
  detail::require(!cfg.strategies.empty(), "benchmark_grid: no strategies");
  std::vector<BenchRecord> records;
  for (const std::int64_t b : cfg.batches)
    for (const std::int64_t c : cfg.channels)
      for (const std::int64_t sp : cfg.spatials) {
        detail::require(b >= 1 && c >= 2 && sp >= 1,
                        "benchmark_grid: bad cell");
        const std::int64_t pairs = c * (c - 1) / 2;
        const std::int64_t bytes =
            static_cast<std::int64_t>(sizeof(T)) * b * sp * sp * (c + pairs);
        if (bytes > cfg.memory_budget_bytes) {
          for (const Strategy st : cfg.strategies) {
            BenchRecord r;
            r.batch = b;
            r.channels = c;
            r.spatial = sp;
            r.strategy = strategy_name(st);
            r.median_s = std::numeric_limits<double>::quiet_NaN();
            r.skipped = true;
            records.push_back(std::move(r));
          }
          continue;
        }
        RngStream rng(cfg.seed, fnv1a64(&bytes, sizeof(bytes)) ^
                                    static_cast<std::uint64_t>(b * 131071 +
                                                               c * 8191 + sp));
        Tensor<T> z(Shape{b, c, sp, sp});
        fill_uniform(z, rng, -1.0, 1.0);
        const DispatchPlan ref_plan = make_plan(Strategy::naive, 1, c);
        const std::uint64_t ref_sum = checksum(run_dispatch(z, ref_plan, pool));
        for (const Strategy st : cfg.strategies) {
          const DispatchPlan plan = make_plan(st, cfg.workers, c);
          BenchRecord r;
          r.batch = b;
          r.channels = c;
          r.spatial = sp;
          r.strategy = strategy_name(st);
          r.sum = checksum(run_dispatch(z, plan, pool));
          detail::require_state(r.sum == ref_sum,
                                "benchmark_grid: strategy output diverged");
          for (int i = 0; i < cfg.warmups; ++i) run_dispatch(z, plan, pool);
          std::vector<double> times;
          times.reserve(static_cast<std::size_t>(cfg.repeats));
          for (int i = 0; i < cfg.repeats; ++i) {
            const auto t0 = std::chrono::steady_clock::now();
            run_dispatch(z, plan, pool);
            const auto t1 = std::chrono::steady_clock::now();
            times.push_back(std::chrono::duration<double>(t1 - t0).count());
          }
          std::sort(times.begin(), times.end());
          r.median_s = times[times.size() / 2];
          records.push_back(std::move(r));
        }
      }
  return records;
}

}  // namespace ach
