#include "ach/cost_model.hpp"

#include "ach/common.hpp"

namespace ach {

namespace {

// ceil(a / b) for positive operands.
std::int64_t ceil_div(std::int64_t a, std::int64_t b) {
  return (a + b - 1) / b;
}

void require_frame(std::int64_t f) {
  detail::require(f >= 1, "cost model: frame size must be positive");
}

}  // namespace

std::int64_t pointwise_macs(std::int64_t m, std::int64_t n, std::int64_t f) {
  detail::require(m >= 1 && n >= 1, "pointwise_macs: widths must be positive");
  require_frame(f);
  return m * n * f * f;
}

std::int64_t ghost_macs(std::int64_t m, std::int64_t n, std::int64_t s,
                        std::int64_t k, std::int64_t f) {
  detail::require(m >= 1 && n >= 1, "ghost_macs: widths must be positive");
  detail::require(s >= 1 && s <= n, "ghost_macs: need 1 <= s <= n");
  detail::require(k >= 1, "ghost_macs: kernel must be positive");
  require_frame(f);
  return m * s * f * f + (n - s) * k * k * f * f;
}

std::int64_t ach_macs(std::int64_t m, std::int64_t n, std::int64_t f) {
  detail::require(m >= 2, "ach_macs: need m >= 2");
  detail::require(n >= m, "ach_macs: need n >= m");
  detail::require(n - m <= m * (m - 1) / 2,
                  "ach_macs: pair deficit, n - m exceeds m*(m-1)/2");
  require_frame(f);
  return m * m * f * f + (n - m) * f * f;
}

std::int64_t pointwise_macs(const ExpansionSpec& e) {
  return pointwise_macs(e.m, e.n, e.f);
}
std::int64_t ghost_macs(const ExpansionSpec& e) {
  return ghost_macs(e.m, e.n, e.s, e.k, e.f);
}
std::int64_t ach_macs(const ExpansionSpec& e) { return ach_macs(e.m, e.n, e.f); }

double ratio_ghost(std::int64_t m, std::int64_t n, std::int64_t s,
                   std::int64_t k) {
  detail::require(m >= 1 && n >= 1 && s >= 1 && s <= n && k >= 1,
                  "ratio_ghost: bad arguments");
  return static_cast<double>(m * s + (n - s) * k * k) /
         static_cast<double>(m * n);
}

double ratio_ach(std::int64_t m, std::int64_t n) {
  detail::require(m >= 2 && n >= m, "ratio_ach: bad arguments");
  return static_cast<double>(m * m + n - m) / static_cast<double>(m * n);
}

CostReport model_report(const ArchSpec& arch, std::int64_t input_hw,
                        std::int64_t eca_kernel,
                        std::int64_t ghost_cheap_kernel) {
  detail::require(input_hw >= 1, "model_report: input size must be positive");
  detail::require(eca_kernel >= 1 && eca_kernel % 2 == 1,
                  "model_report: eca kernel must be odd");
  detail::require(ghost_cheap_kernel >= 1,
                  "model_report: ghost cheap kernel must be positive");
  CostReport report;
  report.input_hw = input_hw;
  std::int64_t h = input_hw, w = input_hw;
  int index = 0;
  for (const auto& layer : arch.layers) {
    LayerCost cost;
    if (const auto* cna = std::get_if<CnaSpec>(&layer)) {
      const std::int64_t ho = ceil_div(h, cna->stride);
      const std::int64_t wo = ceil_div(w, cna->stride);
      cost.name = "cna" + std::to_string(index);
      cost.params = cna->in * cna->out * cna->k * cna->k;
      cost.macs = cna->in * cna->out * cna->k * cna->k * ho * wo;
      if (cna->norm == "bn") {
        cost.params += 2 * cna->out;
        cost.macs += cna->out * ho * wo;
      }
      cost.out_c = cna->out;
      h = ho;
      w = wo;
    } else if (const auto* ab = std::get_if<AbSpec>(&layer)) {
      const std::int64_t ho = ceil_div(h, ab->stride);
      const std::int64_t wo = ceil_div(w, ab->stride);
      std::int64_t expanded = 0;
      if (ab->kind == AbSpec::Kind::ghost) {
        const auto n = static_cast<std::int64_t>(
            static_cast<double>(ab->in) * ab->arg);
        detail::require(n >= 2, "model_report: ghost expansion too small");
        const std::int64_t s = n / 2;
        const std::int64_t kc = ghost_cheap_kernel;
        cost.name = "ab_ghost" + std::to_string(index);
        cost.params = ab->in * s + (n - s) * kc * kc + 2 * n;
        cost.macs = ghost_macs(ab->in, n, s, kc, h) + n * h * w;
        expanded = n;
      } else {
        const auto cs = static_cast<std::int64_t>(ab->arg);
        const std::int64_t pairs = cs * (cs - 1) / 2;
        const std::int64_t n = ab->in + pairs;
        cost.name = "ab_hada" + std::to_string(index);
        // pointwise + bn + channel scores + products + bounded norm
        cost.params = ab->in * ab->in + 2 * ab->in + (eca_kernel + 1) +
                      3 * pairs;
        cost.macs = ach_macs(ab->in, n, h) + ab->in * h * w +
                    ab->in * eca_kernel + 2 * pairs * h * w;
        expanded = n;
      }
      // depthwise + bn, then projection + bn
      cost.params += expanded * ab->k * ab->k + 2 * expanded +
                     expanded * ab->out + 2 * ab->out;
      cost.macs += expanded * ab->k * ab->k * ho * wo + expanded * ho * wo +
                   expanded * ab->out * ho * wo + ab->out * ho * wo;
      cost.out_c = ab->out;
      h = ho;
      w = wo;
    } else {
      const auto& fn = std::get<FnSpec>(layer);
      cost.name = "fn" + std::to_string(index);
      cost.params = fn.in * fn.hidden + fn.hidden +
                    fn.hidden * fn.classes + fn.classes;
      cost.macs = fn.in * fn.hidden + fn.hidden * fn.classes;
      cost.out_c = fn.classes;
      h = 1;
      w = 1;
    }
    cost.out_h = h;
    cost.out_w = w;
    report.total_params += cost.params;
    report.total_macs += cost.macs;
    report.layers.push_back(std::move(cost));
    ++index;
  }
  return report;
}

std::vector<CurvePoint> ratio_curve_channels(std::int64_t f) {
  std::vector<CurvePoint> out;
  for (std::int64_t m = 16; m <= 512; m += 16) {
    CurvePoint p;
    p.m = m;
    p.n = 4 * m;
    p.f = f;
    p.s = p.n / 2;
    p.k = 3;
    p.pw_macs = pointwise_macs(p.m, p.n, f);
    p.ghost_macs = ghost_macs(p.m, p.n, p.s, p.k, f);
    p.ach_macs = ach_macs(p.m, p.n, f);
    p.r_ghost = ratio_ghost(p.m, p.n, p.s, p.k);
    p.r_ach = ratio_ach(p.m, p.n);
    out.push_back(p);
  }
  return out;
}

std::vector<CurvePoint> ratio_curve_ratio(std::int64_t f) {
  std::vector<CurvePoint> out;
  for (std::int64_t r = 4; r <= 24; ++r) {
    CurvePoint p;
    p.m = 64;
    p.n = r * p.m;
    p.f = f;
    p.s = p.n / 2;
    p.k = 3;
    p.pw_macs = pointwise_macs(p.m, p.n, f);
    p.ghost_macs = ghost_macs(p.m, p.n, p.s, p.k, f);
    p.ach_macs = ach_macs(p.m, p.n, f);
    p.r_ghost = ratio_ghost(p.m, p.n, p.s, p.k);
    p.r_ach = ratio_ach(p.m, p.n);
    out.push_back(p);
  }
  return out;
}

}  // namespace ach
