#include "ach/pairing.hpp"

#include <cmath>

#include "ach/common.hpp"

namespace ach {

namespace {

inline std::int64_t row_offset(std::int64_t i, std::int64_t n) {
  return i * (2 * n - i - 1) / 2;
}

}  // namespace

std::int64_t isqrt64(std::int64_t v) {
  detail::require(v >= 0, "isqrt64: negative input");
  if (v < 2) return v;
  auto r = static_cast<std::int64_t>(std::sqrt(static_cast<double>(v)));
  if (r < 1) r = 1;
  // Compare by division: squaring the candidate can overflow near 2^63.
  while (r > v / r) --r;
  while (r + 1 <= v / (r + 1)) ++r;
  return r;
}

std::pair<std::int64_t, std::int64_t> pair_from_index(std::int64_t p,
                                                      std::int64_t n) {
  detail::require(n >= 2, "pair_from_index: n must be >= 2");
  detail::require(p >= 0 && p < n * (n - 1) / 2,
                  "pair_from_index: p out of range");
  const std::int64_t t = 2 * n - 1;
  std::int64_t i = (t - isqrt64(t * t - 8 * p)) / 2;
  // The estimate can land one row off; settle it against exact offsets.
  while (i > 0 && row_offset(i, n) > p) --i;
  while (i < n - 2 && row_offset(i + 1, n) <= p) ++i;
  const std::int64_t j = i + 1 + (p - row_offset(i, n));
  return {i, j};
}

std::int64_t index_from_pair(std::int64_t i, std::int64_t j, std::int64_t n) {
  detail::require(n >= 2, "index_from_pair: n must be >= 2");
  detail::require(i >= 0 && i < j && j < n,
                  "index_from_pair: need 0 <= i < j < n");
  return row_offset(i, n) + (j - i - 1);
}

PairMap::PairMap(std::int64_t n_) : n(n_), total(n_ * (n_ - 1) / 2) {
  detail::require(n_ >= 2, "PairMap: n must be >= 2");
}

std::vector<BlockAssignment> parity_blocks(std::int64_t c) {
  detail::require(c >= 2, "parity_blocks: c must be >= 2");
  std::vector<BlockAssignment> blocks(static_cast<std::size_t>(c));
  for (std::int64_t id = 0; id < c; ++id) {
    auto& block = blocks[static_cast<std::size_t>(id)];
    block.block_id = id;
    for (std::int64_t it = 0; it < c; ++it) {
      if (it < id && (id - it) % 2 == 0) {
        block.pairs.emplace_back(it, id);
      } else if (it > id && (it - id) % 2 == 1) {
        block.pairs.emplace_back(id, it);
      }
    }
  }
  return blocks;
}

}  // namespace ach
