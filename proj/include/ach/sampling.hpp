#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <vector>

#include "ach/common.hpp"
#include "ach/tensor.hpp"

// Stochastic channel selection: Gumbel-perturbed tempered softmax over
// channel scores, hard top-k with a straight-through backward, and the
// temperature controllers (gradient-norm feedback and fixed schedules).

namespace ach {

inline constexpr double kTauMin = 0.01;
inline constexpr double kTauMax = 4.0;
inline constexpr double kUniformClamp = 1e-12;

// -log(-log u). u is validated to lie strictly inside (0, 1).
inline double gumbel_from_uniform(double u) {
  detail::require(u > 0.0 && u < 1.0, "gumbel_from_uniform: u outside (0, 1)");
  u = std::min(std::max(u, kUniformClamp), 1.0 - kUniformClamp);
  return -std::log(-std::log(u));
}

// A constant tensor of c Gumbel draws.
template <typename T>
Tensor<T> gumbel_noise(RngStream& rng, std::int64_t c) {
  detail::require(c >= 1, "gumbel_noise: c must be positive");
  Tensor<T> out(Shape{c});
  for (std::int64_t i = 0; i < c; ++i)
    out[i] = static_cast<T>(gumbel_from_uniform(rng.next_uniform()));
  return out;
}

// softmax((xi + noise) / tau). Differentiable through xi.
template <typename T>
Tensor<T> soft_probs(const Tensor<T>& xi, const Tensor<T>& noise, double tau) {
  detail::require(tau > 0.0, "soft_probs: tau must be positive");
  detail::require(xi.shape.size() == 1 && xi.shape == noise.shape,
                  "soft_probs: xi and noise must be matching vectors");
  return softmax(scale(add(xi, noise), static_cast<T>(1.0 / tau)));
}

// Deterministic top-k positions of a score vector; ties resolve to the
// lowest index. Returned indices are ascending.
template <typename T>
std::vector<std::int64_t> topk_indices(const std::vector<T>& scores,
                                       std::int64_t k) {
  const auto c = static_cast<std::int64_t>(scores.size());
  detail::require(k >= 1 && k <= c, "topk_indices: k out of range");
  std::vector<std::int64_t> order(static_cast<std::size_t>(c));
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + k, order.end(),
                    [&scores](std::int64_t a, std::int64_t b) {
                      const T va = scores[static_cast<std::size_t>(a)];
                      const T vb = scores[static_cast<std::size_t>(b)];
                      if (va != vb) return va > vb;
                      return a < b;
                    });
  std::vector<std::int64_t> idx(order.begin(), order.begin() + k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

template <typename T>
struct HardSelection {
  Tensor<T> hard;                     // 0/1 mask over all channels
  std::vector<std::int64_t> indices;  // ascending positions of the ones
};

// Hard indicator for a given index set with straight-through backward: the
// forward emits an exact 0/1 mask, the backward passes the incoming gradient
// to the probabilities unchanged.
template <typename T>
HardSelection<T> hard_mask_ste(const Tensor<T>& probs,
                               std::vector<std::int64_t> idx) {
  detail::require(probs.shape.size() == 1, "hard_mask_ste: expected a vector");
  const std::int64_t c = probs.dim(0);
  for (auto i : idx)
    detail::require(i >= 0 && i < c, "hard_mask_ste: index out of range");
  Tensor<T> hard(Shape{c}, probs.tape);
  for (auto i : idx) hard[i] = T(1);
  if (probs.tape) {
    hard.node = probs.tape->record(
        c, detail::live_parents({probs.node}),
        [pp = probs.node, c](Tape<T>& tp, int self) {
          if (pp < 0) return;
          const auto& g = tp.grad_buf(self);
          auto& gp = tp.grad_buf(pp);
          for (std::int64_t i = 0; i < c; ++i) gp[i] += g[i];
        });
  }
  return {std::move(hard), std::move(idx)};
}

// Hard top-k of the probabilities, same straight-through backward.
template <typename T>
HardSelection<T> hard_topk_ste(const Tensor<T>& probs, std::int64_t k) {
  detail::require(probs.shape.size() == 1, "hard_topk_ste: expected a vector");
  return hard_mask_ste(probs, topk_indices(*probs.elems, k));
}

// Inference-path selection: top-k over the raw scores, no sampling.
template <typename T>
std::vector<std::int64_t> inference_select(const std::vector<T>& xi,
                                           std::int64_t k) {
  return topk_indices(xi, k);
}

// Mutable state of one selector instance.
template <typename T>
struct SelectionState {
  std::int64_t k = 0;
  double tau = 1.0;
  double tau_hist = 0.0;
  double alpha = 0.01;
  std::vector<T> xi;
  std::vector<T> probs;
  std::vector<T> hard;
  std::vector<std::int64_t> indices;
};

// Gradient-norm feedback: raise tau when the score gradient grew (or held),
// lower it when it shrank; then remember the new norm. A missing gradient
// leaves everything untouched except that no history update happens either.
template <typename T>
void adjust_tau(SelectionState<T>& state, std::optional<double> grad_norm) {
  if (grad_norm.has_value()) {
    detail::require(*grad_norm >= 0.0, "adjust_tau: negative gradient norm");
    if (state.tau_hist != 0.0) {
      const double delta = *grad_norm >= state.tau_hist ? 1.0 : -1.0;
      state.tau = std::clamp(state.tau * (1.0 + state.alpha * delta), kTauMin,
                             kTauMax);
    }
    state.tau_hist = *grad_norm;
  }
}

struct AnnealSchedule {
  enum class Kind { linear, exponential, cosine };
  Kind kind = Kind::linear;
  double tau_max = kTauMax;
  double tau_min = 0.1;
  std::int64_t total_epochs = 1;
};

// Scheduled temperature at epoch e, 0 <= e <= total_epochs. Both endpoints
// are returned exactly.
inline double anneal_tau(std::int64_t e, const AnnealSchedule& s) {
  detail::require(s.total_epochs >= 1, "anneal_tau: total_epochs must be >= 1");
  detail::require(s.tau_max >= s.tau_min && s.tau_min > 0.0,
                  "anneal_tau: need tau_max >= tau_min > 0");
  detail::require(e >= 0 && e <= s.total_epochs, "anneal_tau: epoch out of range");
  if (e == 0) return s.tau_max;
  if (e == s.total_epochs) return s.tau_min;
  const double t = static_cast<double>(e) / static_cast<double>(s.total_epochs);
  switch (s.kind) {
    case AnnealSchedule::Kind::linear:
      return s.tau_max - (s.tau_max - s.tau_min) * t;
    case AnnealSchedule::Kind::exponential:
      return s.tau_max * std::pow(s.tau_min / s.tau_max, t);
    case AnnealSchedule::Kind::cosine:
      return s.tau_min +
             0.5 * (s.tau_max - s.tau_min) *
                 (1.0 + std::cos(3.14159265358979323846 * t));
  }
  throw std::logic_error("anneal_tau: unknown schedule kind");
}

}  // namespace ach
