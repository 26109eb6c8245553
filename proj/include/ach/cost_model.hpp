#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ach/arch_spec.hpp"

// Static cost accounting. All counts are exact integers of multiply-
// accumulate operations (MACs); FLOPs = 2 * MACs exactly once, at the
// reporting boundary. Conventions:
//   conv            cin * k^2 * cout * Hout * Wout   (per-channel for depthwise)
//   fully connected in * out
//   batch norm      one MAC per output element
//   hadamard        one MAC per product element
//   bounded norm    two MACs per element
//   channel scores  C * k_eca
//   activations, pooling, bias adds, residual adds: free

namespace ach {

// One channel-expansion stage: m input channels to n output channels over an
// f x f frame; s primary channels and cheap-op kernel k for the ghost path.
struct ExpansionSpec {
  std::int64_t m = 0;
  std::int64_t n = 0;
  std::int64_t f = 0;
  std::int64_t k = 3;
  std::int64_t s = 0;
};

std::int64_t pointwise_macs(std::int64_t m, std::int64_t n, std::int64_t f);
std::int64_t ghost_macs(std::int64_t m, std::int64_t n, std::int64_t s,
                        std::int64_t k, std::int64_t f);
std::int64_t ach_macs(std::int64_t m, std::int64_t n, std::int64_t f);

std::int64_t pointwise_macs(const ExpansionSpec& e);
std::int64_t ghost_macs(const ExpansionSpec& e);
std::int64_t ach_macs(const ExpansionSpec& e);

// Cost relative to the pointwise expansion, as exact quotients.
double ratio_ghost(std::int64_t m, std::int64_t n, std::int64_t s,
                   std::int64_t k);
double ratio_ach(std::int64_t m, std::int64_t n);

struct LayerCost {
  std::string name;
  std::int64_t params = 0;
  std::int64_t macs = 0;
  std::int64_t out_c = 0, out_h = 0, out_w = 0;
};

struct CostReport {
  std::vector<LayerCost> layers;
  std::int64_t total_params = 0;
  std::int64_t total_macs = 0;
  std::int64_t input_hw = 0;
  std::int64_t total_flops() const { return 2 * total_macs; }
};

// Walks an architecture at the given input resolution (3 input channels).
CostReport model_report(const ArchSpec& arch, std::int64_t input_hw,
                        std::int64_t eca_kernel = 3,
                        std::int64_t ghost_cheap_kernel = 3);

struct CurvePoint {
  std::int64_t m = 0, n = 0, f = 0, s = 0, k = 0;
  std::int64_t pw_macs = 0, ghost_macs = 0, ach_macs = 0;
  double r_ghost = 0.0, r_ach = 0.0;
};

// Fixed expansion ratio n = 4m, m swept 16..512.
std::vector<CurvePoint> ratio_curve_channels(std::int64_t f = 224);
// Fixed m = 64, expansion ratio swept 4..24.
std::vector<CurvePoint> ratio_curve_ratio(std::int64_t f = 224);

}  // namespace ach
