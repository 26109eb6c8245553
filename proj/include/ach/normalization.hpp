#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ach/common.hpp"
#include "ach/tensor.hpp"

// Dynamic bounded normalization for product channels:
//   y = curve(alpha_c * x) * w_c + b_c
// with a per-channel learnable slope, gain, and shift. Three bounded curves
// are supported; softsign is the default.

namespace ach {

enum class DyNormVariant { softsign, sigmoid, algebraic };

inline const char* dynorm_variant_name(DyNormVariant v) {
  switch (v) {
    case DyNormVariant::softsign: return "softsign";
    case DyNormVariant::sigmoid: return "sigmoid";
    case DyNormVariant::algebraic: return "algebraic";
  }
  return "?";
}

// curve(u) and curve'(u) for each variant.
inline double dynorm_curve(DyNormVariant v, double u) {
  switch (v) {
    case DyNormVariant::softsign:
      return u / (1.0 + std::fabs(u));
    case DyNormVariant::sigmoid:
      return 1.0 / (1.0 + std::exp(-u));
    case DyNormVariant::algebraic:
      return u / std::sqrt(1.0 + u * u);
  }
  return 0.0;
}

inline double dynorm_curve_deriv(DyNormVariant v, double u) {
  switch (v) {
    case DyNormVariant::softsign: {
      const double d = 1.0 + std::fabs(u);
      return 1.0 / (d * d);
    }
    case DyNormVariant::sigmoid: {
      const double s = 1.0 / (1.0 + std::exp(-u));
      return s * (1.0 - s);
    }
    case DyNormVariant::algebraic: {
      const double d = 1.0 + u * u;
      return 1.0 / (d * std::sqrt(d));
    }
  }
  return 0.0;
}

template <typename T>
class DyNorm {
 public:
  DyNorm(std::string name, std::int64_t channels,
         DyNormVariant variant = DyNormVariant::softsign)
      : alpha(name + ".alpha",
              Tensor<T>::from_values(
                  {channels},
                  std::vector<T>(static_cast<std::size_t>(channels), T(1)))),
        w(name + ".w",
          Tensor<T>::from_values(
              {channels},
              std::vector<T>(static_cast<std::size_t>(channels), T(1)))),
        b(name + ".b", Tensor<T>({channels})),
        variant_(variant), channels_(channels) {}

  // x: [N, C, H, W] or [N, C] with C == channels.
  Tensor<T> forward(Tape<T>* tape, const Tensor<T>& x) {
    detail::require(x.shape.size() == 4 || x.shape.size() == 2,
                    "DyNorm: expected [N, C, H, W] or [N, C]");
    detail::require(x.dim(1) == channels_, "DyNorm: channel mismatch");
    const std::int64_t n = x.dim(0), c = channels_;
    const std::int64_t hw = x.shape.size() == 4 ? x.dim(2) * x.dim(3) : 1;

    Tensor<T> at, wt, bt;
    if (tape) {
      at = tape->leaf(alpha);
      wt = tape->leaf(w);
      bt = tape->leaf(b);
    } else {
      at = alpha.value;
      wt = w.value;
      bt = b.value;
    }

    Tensor<T> out(x.shape, tape);
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t ci = 0; ci < c; ++ci) {
        const T av = at[ci], wv = wt[ci], bv = bt[ci];
        const T* xp = x.data() + (i * c + ci) * hw;
        T* op = out.data() + (i * c + ci) * hw;
        for (std::int64_t s = 0; s < hw; ++s) {
          const double u = static_cast<double>(av) * static_cast<double>(xp[s]);
          op[s] = static_cast<T>(dynorm_curve(variant_, u)) * wv + bv;
        }
      }

    if (tape) {
      out.node = tape->record(
          out.numel(),
          detail::live_parents({x.node, at.node, wt.node, bt.node}),
          [px = x.node, pa = at.node, pw = wt.node, pb = bt.node, vx = x.elems,
           va = at.elems, vw = wt.elems, variant = variant_, n, c,
           hw](Tape<T>& tp, int self) {
            const auto& g = tp.grad_buf(self);
            for (std::int64_t ci = 0; ci < c; ++ci) {
              const auto cs = static_cast<std::size_t>(ci);
              const T av = (*va)[cs], wv = (*vw)[cs];
              T da = T(0), dw = T(0), db = T(0);
              for (std::int64_t i = 0; i < n; ++i) {
                const T* gp = g.data() + (i * c + ci) * hw;
                const T* xp = (*vx).data() + (i * c + ci) * hw;
                T* gxp = px >= 0
                             ? tp.grad_buf(px).data() + (i * c + ci) * hw
                             : nullptr;
                for (std::int64_t s = 0; s < hw; ++s) {
                  const double xv = static_cast<double>(xp[s]);
                  const double u = static_cast<double>(av) * xv;
                  const double cu = dynorm_curve(variant, u);
                  const double du = dynorm_curve_deriv(variant, u);
                  const T gv = gp[s];
                  if (gxp)
                    gxp[s] += gv * wv * static_cast<T>(du) * av;
                  da += gv * wv * static_cast<T>(du * xv);
                  dw += gv * static_cast<T>(cu);
                  db += gv;
                }
              }
              if (pa >= 0) tp.grad_buf(pa)[cs] += da;
              if (pw >= 0) tp.grad_buf(pw)[cs] += dw;
              if (pb >= 0) tp.grad_buf(pb)[cs] += db;
            }
          });
    }
    detail::check_all_finite(out, "dynorm");
    return out;
  }

  std::vector<Parameter<T>*> params() { return {&alpha, &w, &b}; }
  DyNormVariant variant() const { return variant_; }

  Parameter<T> alpha, w, b;

 private:
  DyNormVariant variant_;
  std::int64_t channels_;
};

// ---- closed-form product moments ----

struct MomentPair {
  double mean = 0.0;
  double var = 0.0;
};

// Moments of X_i * X_j for independent X_i ~ N(mu_i, var_i), X_j ~ N(mu_j, var_j).
MomentPair cross_hadamard_moments(double mu_i, double var_i, double mu_j,
                                  double var_j);

// Moments of Z^2 for Z ~ N(mu, var).
MomentPair self_hadamard_moments(double mu, double var);

// Row-averaged moments of y = A z + b for z with iid N(mu, var) entries and
// fixed A (k rows), b: mean over i of E[y_i] and of Var[y_i]. Inputs are the
// row-averaged aggregates weight_sum_over_rows = (sum of all entries of A)/k,
// frobenius_sq_over_rows = ||A||_F^2 / k, bias_mean = (sum b)/k.
MomentPair linear_map_moments(double mu, double var,
                              double frobenius_sq_over_rows,
                              double weight_sum_over_rows, double bias_mean);

}  // namespace ach
