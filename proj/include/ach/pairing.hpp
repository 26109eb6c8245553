#pragma once

#include <cstdint>
#include <utility>
#include <vector>

namespace ach {

// Channel pairs (i, j), 0 <= i < j < n, are linearized row-major:
//   p = i*(2n - i - 1)/2 + (j - i - 1)
// so row i starts at offset i*(2n - i - 1)/2 and holds n - 1 - i pairs.
// The inverse solves the row boundary with an integer square root; no
// floating point is trusted for the final answer.

std::int64_t isqrt64(std::int64_t v);

std::pair<std::int64_t, std::int64_t> pair_from_index(std::int64_t p,
                                                      std::int64_t n);
std::int64_t index_from_pair(std::int64_t i, std::int64_t j, std::int64_t n);

struct PairMap {
  std::int64_t n = 0;
  std::int64_t total = 0;

  explicit PairMap(std::int64_t n_);
  std::pair<std::int64_t, std::int64_t> pair(std::int64_t p) const {
    return pair_from_index(p, n);
  }
  std::int64_t index(std::int64_t i, std::int64_t j) const {
    return index_from_pair(i, j, n);
  }
};

// One work block of the parity-balanced schedule. Block `id` owns every pair
// whose smaller-index partner it is at odd distance from, and every pair
// whose larger-index partner it is at even distance from.
struct BlockAssignment {
  std::int64_t block_id = 0;
  std::vector<std::pair<std::int64_t, std::int64_t>> pairs;
};

// Splits all c*(c-1)/2 pairs of c channels into c blocks whose sizes differ
// by at most one. Requires c >= 2.
std::vector<BlockAssignment> parity_blocks(std::int64_t c);

}  // namespace ach
