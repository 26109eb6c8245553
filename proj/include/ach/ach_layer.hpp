#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "ach/common.hpp"
#include "ach/normalization.hpp"
#include "ach/pairing.hpp"
#include "ach/sampling.hpp"
#include "ach/tensor.hpp"

// The adaptive cross-product channel expansion. A pointwise convolution and
// batch norm produce features X'; channel scores pick a subset S of C_s
// channels; the selected channels are multiplied pairwise to append
// C_s*(C_s-1)/2 product channels, passed through a bounded dynamic
// normalization, and concatenated after the originals.

namespace ach {

// ---- pairwise products ----

// z: [N, C, H, W] -> [N, C*(C-1)/2, H, W]; product channel p multiplies the
// channel pair pair_from_index(p, C). Product-rule backward to both factors.
template <typename T>
Tensor<T> cross_hadamard_expand(const Tensor<T>& z) {
  detail::require(z.shape.size() == 4, "cross_hadamard_expand: expected 4-d");
  const std::int64_t n = z.dim(0), c = z.dim(1), hw = z.dim(2) * z.dim(3);
  detail::require(c >= 2, "cross_hadamard_expand: need at least two channels");
  const PairMap pm(c);
  Tensor<T> out(Shape{n, pm.total, z.dim(2), z.dim(3)}, z.tape);
  for (std::int64_t p = 0; p < pm.total; ++p) {
    const auto [i, j] = pm.pair(p);
    for (std::int64_t b = 0; b < n; ++b) {
      const T* zi = z.data() + (b * c + i) * hw;
      const T* zj = z.data() + (b * c + j) * hw;
      T* op = out.data() + (b * pm.total + p) * hw;
      for (std::int64_t s = 0; s < hw; ++s) op[s] = zi[s] * zj[s];
    }
  }
  if (z.tape) {
    out.node = z.tape->record(
        out.numel(), detail::live_parents({z.node}),
        [pz = z.node, vz = z.elems, n, c, hw, total = pm.total](Tape<T>& tp,
                                                               int self) {
          if (pz < 0) return;
          const auto& g = tp.grad_buf(self);
          auto& gz = tp.grad_buf(pz);
          for (std::int64_t p = 0; p < total; ++p) {
            const auto [i, j] = pair_from_index(p, c);
            for (std::int64_t b = 0; b < n; ++b) {
              const T* gp = g.data() + (b * total + p) * hw;
              const T* zi = (*vz).data() + (b * c + i) * hw;
              const T* zj = (*vz).data() + (b * c + j) * hw;
              T* gi = gz.data() + (b * c + i) * hw;
              T* gj = gz.data() + (b * c + j) * hw;
              for (std::int64_t s = 0; s < hw; ++s) {
                gi[s] += gp[s] * zj[s];
                gj[s] += gp[s] * zi[s];
              }
            }
          }
        });
  }
  detail::check_all_finite(out, "cross_hadamard_expand");
  return out;
}

// ---- selection application ----

// out[:, s] = mask[idx[s]] * x[:, idx[s]]. The mask entries carry the
// selection gradient; the gather itself is index bookkeeping.
template <typename T>
Tensor<T> masked_gather(const Tensor<T>& x, const Tensor<T>& mask,
                        const std::vector<std::int64_t>& idx) {
  detail::require(x.shape.size() == 4, "masked_gather: expected 4-d input");
  detail::require(mask.shape.size() == 1 && mask.dim(0) == x.dim(1),
                  "masked_gather: mask must cover all channels");
  const std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  const std::int64_t k = static_cast<std::int64_t>(idx.size());
  detail::require(k >= 1, "masked_gather: empty selection");
  for (auto s : idx)
    detail::require(s >= 0 && s < c, "masked_gather: index out of range");
  Tape<T>* tape = detail::merge_tape(x, mask);
  Tensor<T> out(Shape{n, k, x.dim(2), x.dim(3)}, tape);
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t s = 0; s < k; ++s) {
      const std::int64_t src = idx[static_cast<std::size_t>(s)];
      const T mv = mask[src];
      const T* xp = x.data() + (b * c + src) * hw;
      T* op = out.data() + (b * k + s) * hw;
      for (std::int64_t t = 0; t < hw; ++t) op[t] = mv * xp[t];
    }
  if (tape) {
    out.node = tape->record(
        out.numel(), detail::live_parents({x.node, mask.node}),
        [px = x.node, pm = mask.node, vx = x.elems, vm = mask.elems, idx, n, c,
         k, hw](Tape<T>& tp, int self) {
          const auto& g = tp.grad_buf(self);
          for (std::int64_t b = 0; b < n; ++b)
            for (std::int64_t s = 0; s < k; ++s) {
              const std::int64_t src = idx[static_cast<std::size_t>(s)];
              const T* gp = g.data() + (b * k + s) * hw;
              if (px >= 0) {
                const T mv = (*vm)[static_cast<std::size_t>(src)];
                T* xp = tp.grad_buf(px).data() + (b * c + src) * hw;
                for (std::int64_t t = 0; t < hw; ++t) xp[t] += mv * gp[t];
              }
              if (pm >= 0) {
                const T* xp = (*vx).data() + (b * c + src) * hw;
                T acc = T(0);
                for (std::int64_t t = 0; t < hw; ++t) acc += gp[t] * xp[t];
                tp.grad_buf(pm)[static_cast<std::size_t>(src)] += acc;
              }
            }
        });
  }
  detail::check_all_finite(out, "masked_gather");
  return out;
}

// Dense reference for the selection matrices: row s of m_prime is one-hot at
// idx[s]; m additionally scales each row by the mask entry.
template <typename T>
struct MappingMatrices {
  Tensor<T> m_prime;  // [k, C]
  Tensor<T> m;        // [k, C]
};

template <typename T>
MappingMatrices<T> build_mapping(const std::vector<std::int64_t>& idx,
                                 const Tensor<T>& mask) {
  detail::require(mask.shape.size() == 1, "build_mapping: mask must be 1-d");
  const std::int64_t c = mask.dim(0);
  const std::int64_t k = static_cast<std::int64_t>(idx.size());
  MappingMatrices<T> mm;
  mm.m_prime = Tensor<T>(Shape{k, c});
  mm.m = Tensor<T>(Shape{k, c});
  for (std::int64_t s = 0; s < k; ++s) {
    const std::int64_t src = idx[static_cast<std::size_t>(s)];
    detail::require(src >= 0 && src < c, "build_mapping: index out of range");
    mm.m_prime[s * c + src] = T(1);
    mm.m[s * c + src] = mask[src];
  }
  return mm;
}

// Z = M X as a dense matrix product over the channel axis; value-level.
template <typename T>
Tensor<T> mapping_apply_dense(const Tensor<T>& m, const Tensor<T>& x) {
  detail::require(m.shape.size() == 2 && x.shape.size() == 4 &&
                      m.dim(1) == x.dim(1),
                  "mapping_apply_dense: shape mismatch");
  const std::int64_t k = m.dim(0), c = m.dim(1);
  const std::int64_t n = x.dim(0), hw = x.dim(2) * x.dim(3);
  Tensor<T> out(Shape{n, k, x.dim(2), x.dim(3)});
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t s = 0; s < k; ++s) {
      T* op = out.data() + (b * k + s) * hw;
      for (std::int64_t ci = 0; ci < c; ++ci) {
        const T mv = m[s * c + ci];
        if (mv == T(0)) continue;
        const T* xp = x.data() + (b * c + ci) * hw;
        for (std::int64_t t = 0; t < hw; ++t) op[t] += mv * xp[t];
      }
    }
  return out;
}

// Channel scores: spatial average of each channel, then a shared 1-d
// convolution across the channel axis.
template <typename T>
Tensor<T> eca_scores(const Tensor<T>& x, const Tensor<T>& w,
                     const Tensor<T>& b) {
  return conv1d_same(global_avg_pool(x), w, b);
}

// ---- the layer ----

struct AchConfig {
  std::int64_t c_in = 0;
  std::int64_t c_sel = 0;
  std::int64_t eca_kernel = 3;
  DyNormVariant norm_variant = DyNormVariant::softsign;
  bool noise_enabled = true;
  // Ablation toggles. Defaults give the full operator.
  bool use_eca = true;            // false: scores are a free learnable vector
  bool learnable_selection = true;  // false: random subset frozen at init
  bool products_batchnorm = false;  // true: batch norm instead of DyNorm
};

enum class MaskMode {
  hard,  // exact 0/1 mask (training path)
  soft   // mask carries the softmax probabilities; fully differentiable
         // surrogate used by gradient checking
};

template <typename T>
class AchLayer {
  // Declared first: everything below is initialized from these.
  AchConfig cfg_;
  std::string name_;
  RngStream rng_;

 public:
  AchLayer(std::string name, AchConfig cfg, std::uint64_t seed,
           std::uint64_t stream)
      : cfg_(validate(cfg)), name_(std::move(name)), rng_(seed, stream),
        pw_w(name_ + ".pw", Tensor<T>({cfg_.c_in, cfg_.c_in})),
        eca_w(name_ + ".eca_w", Tensor<T>({cfg_.eca_kernel})),
        eca_b(name_ + ".eca_b", Tensor<T>({1})),
        free_scores(name_ + ".scores", Tensor<T>({cfg_.c_in})),
        bn_(name_ + ".bn", cfg_.c_in),
        dynorm_(name_ + ".dynorm", pairs(), cfg_.norm_variant),
        prod_bn_(name_ + ".prod_bn", pairs()) {
    fill_normal(pw_w.value, rng_, 1.0 / std::sqrt(double(cfg_.c_in)));
    fill_normal(eca_w.value, rng_,
                1.0 / std::sqrt(double(cfg_.eca_kernel)));
    state_.k = cfg_.c_sel;
    if (!cfg_.learnable_selection) {
      // Frozen random subset, drawn once.
      std::vector<std::int64_t> all(static_cast<std::size_t>(cfg_.c_in));
      for (std::int64_t i = 0; i < cfg_.c_in; ++i)
        all[static_cast<std::size_t>(i)] = i;
      for (std::int64_t i = 0; i < cfg_.c_sel; ++i) {
        const std::int64_t j = i + rng_.next_index(cfg_.c_in - i);
        std::swap(all[static_cast<std::size_t>(i)],
                  all[static_cast<std::size_t>(j)]);
      }
      all.resize(static_cast<std::size_t>(cfg_.c_sel));
      std::sort(all.begin(), all.end());
      fixed_indices_ = std::move(all);
      state_.indices = fixed_indices_;
    }
  }

  std::int64_t pairs() const { return cfg_.c_sel * (cfg_.c_sel - 1) / 2; }
  std::int64_t out_channels() const { return cfg_.c_in + pairs(); }
  const AchConfig& config() const { return cfg_; }
  SelectionState<T>& state() { return state_; }
  const SelectionState<T>& state() const { return state_; }
  BatchNorm<T>& bn() { return bn_; }
  DyNorm<T>& dynorm() { return dynorm_; }

  // Training path: batch statistics, sampled selection, straight-through
  // mask. MaskMode::soft swaps the 0/1 mask values for the probabilities so
  // the whole layer becomes finite-difference checkable.
  Tensor<T> forward(Tape<T>& tape, const Tensor<T>& x,
                    MaskMode mode = MaskMode::hard) {
    check_input(x);
    const Tensor<T> xp =
        bn_.forward(&tape, pointwise_conv(x, tape.leaf(pw_w)), true);

    Tensor<T> z;
    last_xi_node_ = -1;
    if (!cfg_.learnable_selection) {
      Tensor<T> ones = Tensor<T>::from_values(
          {cfg_.c_in},
          std::vector<T>(static_cast<std::size_t>(cfg_.c_in), T(1)));
      z = masked_gather(xp, ones, fixed_indices_);
      snapshot(nullptr, nullptr, nullptr, fixed_indices_);
    } else {
      Tensor<T> xi;
      if (cfg_.use_eca) {
        xi = mean_rows(eca_scores(xp, tape.leaf(eca_w), tape.leaf(eca_b)));
      } else {
        xi = tape.leaf(free_scores);
      }
      last_xi_node_ = xi.node;
      const Tensor<T> noise = cfg_.noise_enabled
                                  ? gumbel_noise<T>(rng_, cfg_.c_in)
                                  : Tensor<T>(Shape{cfg_.c_in});
      const Tensor<T> probs = soft_probs(xi, noise, state_.tau);
      HardSelection<T> sel =
          forced_indices_.empty()
              ? hard_topk_ste(probs, cfg_.c_sel)
              : hard_mask_ste(probs, forced_indices_);
      const Tensor<T>& mask = mode == MaskMode::hard ? sel.hard : probs;
      z = masked_gather(xp, mask, sel.indices);
      snapshot(&xi, &probs, &sel.hard, sel.indices);
    }

    const Tensor<T> products = cross_hadamard_expand(z);
    const Tensor<T> y = cfg_.products_batchnorm
                            ? prod_bn_.forward(&tape, products, true)
                            : dynorm_.forward(&tape, products);
    return concat_channels(xp, y);
  }

  // Inference path: running statistics, deterministic top-k over the raw
  // scores, no noise, no tape.
  Tensor<T> infer(const Tensor<T>& x) {
    check_input(x);
    const Tensor<T> xp =
        bn_.forward(nullptr, pointwise_conv(x, pw_w.value), false);
    std::vector<std::int64_t> idx;
    if (!cfg_.learnable_selection) {
      idx = fixed_indices_;
      snapshot(nullptr, nullptr, nullptr, idx);
    } else {
      Tensor<T> xi;
      if (cfg_.use_eca) {
        xi = mean_rows(eca_scores(xp, eca_w.value, eca_b.value));
      } else {
        xi = free_scores.value;
      }
      idx = inference_select(*xi.elems, cfg_.c_sel);
      snapshot(&xi, nullptr, nullptr, idx);
    }
    const Tensor<T> z = gather_channels(xp, idx);
    const Tensor<T> products = cross_hadamard_expand(z);
    const Tensor<T> y = cfg_.products_batchnorm
                            ? prod_bn_.forward(nullptr, products, false)
                            : dynorm_.forward(nullptr, products);
    return concat_channels(xp, y);
  }

  // Diagnostic: pin the training-path selection to a fixed set, keeping the
  // mask differentiable machinery intact. Used by the finite-difference
  // harness to condition on one realized selection; inference ignores it.
  void force_indices(std::vector<std::int64_t> idx) {
    detail::require(static_cast<std::int64_t>(idx.size()) == cfg_.c_sel,
                    "force_indices: need exactly c_sel indices");
    forced_indices_ = std::move(idx);
  }

  // Squared L2 mass of dL/dxi from the last backward, if the selection was
  // learnable this pass.
  std::optional<double> xi_grad_sqsum(Tape<T>& tape) const {
    if (last_xi_node_ < 0) return std::nullopt;
    detail::require_state(tape.ran(), "xi_grad_sqsum: backward has not run");
    const auto& g = tape.grad_buf(last_xi_node_);
    double acc = 0.0;
    for (const T v : g) acc += static_cast<double>(v) * static_cast<double>(v);
    return acc;
  }

  std::vector<Parameter<T>*> params() {
    std::vector<Parameter<T>*> out{&pw_w, &bn_.gamma, &bn_.beta};
    if (cfg_.learnable_selection) {
      if (cfg_.use_eca) {
        out.push_back(&eca_w);
        out.push_back(&eca_b);
      } else {
        out.push_back(&free_scores);
      }
    }
    if (cfg_.products_batchnorm) {
      out.push_back(&prod_bn_.gamma);
      out.push_back(&prod_bn_.beta);
    } else {
      out.push_back(&dynorm_.alpha);
      out.push_back(&dynorm_.w);
      out.push_back(&dynorm_.b);
    }
    return out;
  }

  Parameter<T> pw_w;
  Parameter<T> eca_w, eca_b;
  Parameter<T> free_scores;

 private:
  static AchConfig validate(const AchConfig& cfg) {
    if (cfg.c_in < 2) throw ConfigError("AchLayer: c_in must be >= 2");
    if (cfg.c_sel < 2 || cfg.c_sel > cfg.c_in)
      throw ConfigError("AchLayer: need 2 <= c_sel <= c_in");
    if (cfg.eca_kernel < 1 || cfg.eca_kernel % 2 == 0)
      throw ConfigError("AchLayer: eca_kernel must be odd");
    return cfg;
  }

  void check_input(const Tensor<T>& x) const {
    detail::require(x.shape.size() == 4 && x.dim(1) == cfg_.c_in,
                    "AchLayer: expected [N, c_in, H, W]");
  }

  void snapshot(const Tensor<T>* xi, const Tensor<T>* probs,
                const Tensor<T>* hard, const std::vector<std::int64_t>& idx) {
    state_.xi = xi ? *xi->elems : std::vector<T>{};
    state_.probs = probs ? *probs->elems : std::vector<T>{};
    state_.hard = hard ? *hard->elems : std::vector<T>{};
    state_.indices = idx;
  }

 public:
  BatchNorm<T> bn_;

 private:
  DyNorm<T> dynorm_;
  BatchNorm<T> prod_bn_;
  SelectionState<T> state_;
  std::vector<std::int64_t> fixed_indices_;
  std::vector<std::int64_t> forced_indices_;
  int last_xi_node_ = -1;
};

// ---- ghost expansion ----

struct GhostConfig {
  std::int64_t c_in = 0;    // m
  std::int64_t c_out = 0;   // n
  std::int64_t primary = 0; // s; 0 means n/2
  std::int64_t cheap_kernel = 3;
  std::int64_t replication = 0;  // r; 0 means ceil((n-s)/s)
};

// Pointwise convolution to s primary channels, then one cheap depthwise map
// per ghost channel, sourced cyclically from the primaries; batch norm over
// the concatenated result.
template <typename T>
class GhostLayer {
  GhostConfig cfg_;
  std::string name_;

 public:
  GhostLayer(std::string name, GhostConfig cfg, std::uint64_t seed,
             std::uint64_t stream)
      : cfg_(validate(cfg)), name_(std::move(name)),
        pw_w(name_ + ".pw", Tensor<T>({cfg_.primary, cfg_.c_in})),
        cheap_w(name_ + ".cheap",
                Tensor<T>({cfg_.c_out - cfg_.primary, cfg_.cheap_kernel,
                           cfg_.cheap_kernel})),
        bn_(name_ + ".bn", cfg_.c_out) {
    RngStream rng(seed, stream);
    fill_normal(pw_w.value, rng, 1.0 / std::sqrt(double(cfg_.c_in)));
    fill_normal(cheap_w.value, rng, 1.0 / double(cfg_.cheap_kernel));
    ghost_src_.resize(static_cast<std::size_t>(cfg_.c_out - cfg_.primary));
    for (std::size_t g = 0; g < ghost_src_.size(); ++g)
      ghost_src_[g] = static_cast<std::int64_t>(g) % cfg_.primary;
  }

  Tensor<T> forward(Tape<T>& tape, const Tensor<T>& x, bool train) {
    return run(&tape, x, train);
  }
  Tensor<T> infer(const Tensor<T>& x) { return run(nullptr, x, false); }

  std::vector<Parameter<T>*> params() {
    std::vector<Parameter<T>*> out{&pw_w, &bn_.gamma, &bn_.beta};
    if (cheap_w.value.numel() > 0) out.insert(out.begin() + 1, &cheap_w);
    return out;
  }

  const GhostConfig& config() const { return cfg_; }

  Parameter<T> pw_w, cheap_w;
  BatchNorm<T> bn_;

 private:
  static GhostConfig validate(GhostConfig cfg) {
    if (cfg.c_in < 1 || cfg.c_out < 1)
      throw ConfigError("GhostLayer: widths must be positive");
    if (cfg.primary == 0) cfg.primary = cfg.c_out / 2;
    if (cfg.primary < 1 || cfg.primary > cfg.c_out)
      throw ConfigError("GhostLayer: need 1 <= primary <= c_out");
    if (cfg.cheap_kernel < 1 || cfg.cheap_kernel % 2 == 0)
      throw ConfigError("GhostLayer: cheap kernel must be odd");
    const std::int64_t ghosts = cfg.c_out - cfg.primary;
    if (cfg.replication == 0 && ghosts > 0)
      cfg.replication = (ghosts + cfg.primary - 1) / cfg.primary;
    if (ghosts > cfg.primary * cfg.replication)
      throw ConfigError(
          "GhostLayer: ghost channels exceed primary * replication");
    return cfg;
  }

  Tensor<T> run(Tape<T>* tape, const Tensor<T>& x, bool train) {
    detail::require(x.shape.size() == 4 && x.dim(1) == cfg_.c_in,
                    "GhostLayer: expected [N, c_in, H, W]");
    const Tensor<T> pw = tape ? tape->leaf(pw_w) : pw_w.value;
    const Tensor<T> primaries = pointwise_conv(x, pw);
    if (ghost_src_.empty()) return bn_.forward(tape, primaries, train);
    const Tensor<T> cw = tape ? tape->leaf(cheap_w) : cheap_w.value;
    const Tensor<T> rep = gather_channels(primaries, ghost_src_);
    const Tensor<T> ghosts = depthwise_conv(rep, cw, 1);
    return bn_.forward(tape, concat_channels(primaries, ghosts), train);
  }

  std::vector<std::int64_t> ghost_src_;
};

// ---- bottleneck wrapper ----

// expansion -> depthwise (stride) -> pointwise projection -> residual when
// the shape is preserved.
template <typename T>
class AdaptiveBottleneck {
 public:
  using Expansion = std::variant<GhostLayer<T>, AchLayer<T>>;

 private:
  std::string name_;
  Expansion expansion_;
  std::int64_t c_in_, c_out_, k_, stride_, expanded_;

 public:
  AdaptiveBottleneck(std::string name, Expansion expansion, std::int64_t c_in,
                     std::int64_t c_out, std::int64_t k, std::int64_t stride,
                     std::uint64_t seed, std::uint64_t stream)
      : name_(std::move(name)), expansion_(std::move(expansion)), c_in_(c_in),
        c_out_(c_out), k_(k), stride_(stride),
        expanded_(expanded_channels(expansion_)),
        dw_w(name_ + ".dw", Tensor<T>({expanded_, k, k})),
        proj_w(name_ + ".proj", Tensor<T>({c_out, expanded_})),
        bn_dw_(name_ + ".bn_dw", expanded_),
        bn_proj_(name_ + ".bn_proj", c_out) {
    if (k < 1 || k % 2 == 0)
      throw ConfigError("AdaptiveBottleneck: kernel must be odd to execute");
    if (stride != 1 && stride != 2)
      throw ConfigError("AdaptiveBottleneck: stride must be 1 or 2");
    RngStream rng(seed, stream);
    fill_normal(dw_w.value, rng, 1.0 / double(k));
    fill_normal(proj_w.value, rng, 1.0 / std::sqrt(double(expanded_)));
    residual_ = stride == 1 && c_in == c_out;
  }

  Tensor<T> forward(Tape<T>& tape, const Tensor<T>& x,
                    MaskMode mode = MaskMode::hard) {
    const Tensor<T> e = std::visit(
        [&](auto& layer) -> Tensor<T> {
          using L = std::decay_t<decltype(layer)>;
          if constexpr (std::is_same_v<L, GhostLayer<T>>)
            return layer.forward(tape, x, true);
          else
            return layer.forward(tape, x, mode);
        },
        expansion_);
    const Tensor<T> d =
        bn_dw_.forward(&tape, depthwise_conv(e, tape.leaf(dw_w), stride_), true);
    const Tensor<T> p =
        bn_proj_.forward(&tape, pointwise_conv(d, tape.leaf(proj_w)), true);
    return residual_ ? add(p, x) : p;
  }

  Tensor<T> infer(const Tensor<T>& x) {
    const Tensor<T> e = std::visit(
        [&](auto& layer) -> Tensor<T> { return layer.infer(x); }, expansion_);
    const Tensor<T> d =
        bn_dw_.forward(nullptr, depthwise_conv(e, dw_w.value, stride_), false);
    const Tensor<T> p =
        bn_proj_.forward(nullptr, pointwise_conv(d, proj_w.value), false);
    return residual_ ? add(p, x) : p;
  }

  std::vector<Parameter<T>*> params() {
    std::vector<Parameter<T>*> out = std::visit(
        [](auto& layer) { return layer.params(); }, expansion_);
    out.push_back(&dw_w);
    out.push_back(&bn_dw_.gamma);
    out.push_back(&bn_dw_.beta);
    out.push_back(&proj_w);
    out.push_back(&bn_proj_.gamma);
    out.push_back(&bn_proj_.beta);
    return out;
  }

  AchLayer<T>* ach() { return std::get_if<AchLayer<T>>(&expansion_); }
  GhostLayer<T>* ghost() { return std::get_if<GhostLayer<T>>(&expansion_); }
  std::int64_t out_channels() const { return c_out_; }

  Parameter<T> dw_w, proj_w;

 private:
  static std::int64_t expanded_channels(const Expansion& e) {
    if (const auto* g = std::get_if<GhostLayer<T>>(&e))
      return g->config().c_out;
    return std::get<AchLayer<T>>(e).out_channels();
  }

 public:
  BatchNorm<T> bn_dw_, bn_proj_;

 private:
  bool residual_ = false;
};

}  // namespace ach
