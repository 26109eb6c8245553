#include "ach/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <utility>

#include "ach/ach_layer.hpp"
#include "ach/normalization.hpp"
#include "ach/sampling.hpp"
#include "ach/tensor.hpp"

namespace ach {

double fd_rel_err(double analytic, double fd, double rel_floor,
                  double zero_tol) {
  const double aa = std::fabs(analytic), af = std::fabs(fd);
  if (aa <= zero_tol && af <= zero_tol) return 0.0;
  return std::fabs(analytic - fd) / std::max({aa, af, rel_floor});
}

CheckOptions f32_options(std::uint64_t seed) {
  CheckOptions o;
  o.seed = seed;
  o.h = 1e-2;  // float forward noise swamps smaller steps
  o.tol = 1e-2;
  o.rel_floor = 1e-3;
  o.zero_tol = 1e-4;
  o.f32 = true;
  return o;
}

CheckResult run_fd(const FdProblem& p, const CheckOptions& o) {
  const std::vector<double> g = p.analytic();
  detail::require_state(g.size() == p.x0.size(),
                        "run_fd: gradient/point size mismatch");
  CheckResult r;
  r.name = p.name;
  r.points = static_cast<std::int64_t>(p.x0.size());
  r.tol = o.tol;
  std::vector<double> x = p.x0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + o.h;
    const double fp = p.loss(x);
    x[i] = keep - o.h;
    const double fm = p.loss(x);
    x[i] = keep;
    const double fd = (fp - fm) / (2.0 * o.h);
    r.max_rel =
        std::max(r.max_rel, fd_rel_err(g[i], fd, o.rel_floor, o.zero_tol));
  }
  r.pass = r.max_rel < o.tol;
  return r;
}

namespace {

template <typename T>
void append_flat(std::vector<double>& out, const Tensor<T>& t) {
  for (std::int64_t i = 0; i < t.numel(); ++i)
    out.push_back(static_cast<double>(t[i]));
}

template <typename T>
void load_flat(Tensor<T>& t, const std::vector<double>& x, std::size_t& pos) {
  for (std::int64_t i = 0; i < t.numel(); ++i)
    t[i] = static_cast<T>(x[pos++]);
}

// A check over free leaf tensors: `f` consumes the tape-bound leaves (plus
// whatever constants it captured) and returns a scalar tensor.
template <typename T>
FdProblem op_problem(
    std::string name, std::vector<Tensor<T>> init,
    std::function<Tensor<T>(Tape<T>&, std::vector<Tensor<T>>&)> f) {
  FdProblem prob;
  prob.name = std::move(name);
  for (const auto& t : init) append_flat(prob.x0, t);

  auto shapes = std::make_shared<std::vector<Shape>>();
  for (const auto& t : init) shapes->push_back(t.shape);

  auto build = [shapes](const std::vector<double>& x) {
    std::vector<Tensor<T>> ts;
    std::size_t pos = 0;
    for (const auto& s : *shapes) {
      Tensor<T> t(s);
      load_flat(t, x, pos);
      ts.push_back(std::move(t));
    }
    return ts;
  };

  prob.loss = [build, f](const std::vector<double>& x) {
    std::vector<Tensor<T>> ts = build(x);
    Tape<T> tape;
    std::vector<Tensor<T>> leaves;
    for (auto& t : ts) leaves.push_back(tape.leaf(t));
    return static_cast<double>(f(tape, leaves)[0]);
  };
  prob.analytic = [build, f, x0 = prob.x0]() {
    std::vector<Tensor<T>> ts = build(x0);
    Tape<T> tape;
    std::vector<Tensor<T>> leaves;
    for (auto& t : ts) leaves.push_back(tape.leaf(t));
    Tensor<T> l = f(tape, leaves);
    tape.backward(l);
    std::vector<double> g;
    for (const auto& leaf : leaves)
      for (const T v : tape.grad_buf(leaf.node)) g.push_back(double(v));
    return g;
  };
  return prob;
}

// A check over a stateful layer: input tensor first, then every parameter in
// params() order. The layer is rebuilt from the seed for each evaluation.
template <typename T, typename L>
FdProblem layer_problem(
    std::string name, Shape in_shape, std::uint64_t seed,
    std::function<L()> build,
    std::function<Tensor<T>(L&, Tape<T>&, const Tensor<T>&)> fwd) {
  FdProblem prob;
  prob.name = std::move(name);

  Tensor<T> in0(in_shape);
  {
    RngStream rng(seed, 901);
    fill_uniform(in0, rng, -1.0, 1.0);
  }
  append_flat(prob.x0, in0);
  {
    L proto = build();
    for (auto* p : proto.params()) append_flat(prob.x0, p->value);
  }

  // Loss is linear in the output against a fixed random direction; a squared
  // loss on top of batch norm is nearly constant in the input and starves
  // the difference quotient of signal.
  auto eval = [in_shape, build, fwd, seed](const std::vector<double>& x,
                                           bool want_grads) {
    L layer = build();
    Tensor<T> in(in_shape);
    std::size_t pos = 0;
    load_flat(in, x, pos);
    for (auto* p : layer.params()) load_flat(p->value, x, pos);
    detail::require_state(pos == x.size(), "layer_problem: layout drift");
    Tape<T> tape;
    Tensor<T> xin = tape.leaf(in);
    Tensor<T> y = fwd(layer, tape, xin);
    Tensor<T> c(y.shape);
    {
      RngStream crng(seed, 902);
      fill_uniform(c, crng, -1.0, 1.0);
    }
    Tensor<T> l = sum(mul(y, c));
    std::vector<double> g;
    if (want_grads) {
      tape.backward(l);
      for (const T v : tape.grad_buf(xin.node)) g.push_back(double(v));
      for (auto* p : layer.params()) {
        p->zero_grad();
        accumulate_grad(tape, *p);
        for (const T v : p->grad) g.push_back(double(v));
      }
    }
    return std::make_pair(static_cast<double>(l[0]), std::move(g));
  };

  prob.loss = [eval](const std::vector<double>& x) {
    return eval(x, false).first;
  };
  prob.analytic = [eval, x0 = prob.x0]() { return eval(x0, true).second; };
  return prob;
}

template <typename T>
Tensor<T> ssq(const Tensor<T>& y) {
  return sum(mul(y, y));
}

// Values bounded away from the relu/abs kink so the difference quotient
// stays one-sided.
template <typename T>
Tensor<T> off_kink(Shape s, RngStream& rng) {
  Tensor<T> t(std::move(s));
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    const double m = 0.2 + 0.8 * rng.next_uniform();
    t[i] = static_cast<T>(rng.next_uniform() < 0.5 ? -m : m);
  }
  return t;
}

template <typename T>
Tensor<T> rand_t(Shape s, RngStream& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(std::move(s));
  fill_uniform(t, rng, lo, hi);
  return t;
}

template <typename T>
std::vector<FdProblem> op_problems(const CheckOptions& o) {
  std::vector<FdProblem> out;
  RngStream rng(o.seed, 77);
  const auto run = [&](FdProblem p) { out.push_back(std::move(p)); };
  using TT = Tensor<T>;
  using F = std::function<TT(Tape<T>&, std::vector<TT>&)>;

  run(op_problem<T>(
      "op.add_sub_mul", {rand_t<T>({2, 3}, rng), rand_t<T>({2, 3}, rng)},
      F([](Tape<T>&, std::vector<TT>& v) {
        return sum(mul(add(v[0], v[1]), sub(v[0], v[1])));
      })));

  run(op_problem<T>("op.scale_abs_relu", {off_kink<T>({2, 4}, rng)},
                    F([](Tape<T>&, std::vector<TT>& v) {
                      return sum(add(relu(v[0]), abs(scale(v[0], T(0.7)))));
                    })));

  run(op_problem<T>("op.mean_rows", {rand_t<T>({3, 4}, rng)},
                    F([](Tape<T>&, std::vector<TT>& v) {
                      return ssq(mean_rows(v[0]));
                    })));

  run(op_problem<T>(
      "op.linear",
      {rand_t<T>({3, 4}, rng), rand_t<T>({2, 4}, rng), rand_t<T>({2}, rng)},
      F([](Tape<T>&, std::vector<TT>& v) {
        return ssq(linear(v[0], v[1], v[2]));
      })));

  run(op_problem<T>(
      "op.pointwise_conv",
      {rand_t<T>({2, 3, 3, 3}, rng), rand_t<T>({4, 3}, rng),
       rand_t<T>({4}, rng)},
      F([](Tape<T>&, std::vector<TT>& v) {
        return ssq(pointwise_conv(v[0], v[1], v[2]));
      })));

  for (int stride : {1, 2})
    run(op_problem<T>(
        std::string("op.depthwise_s") + char('0' + stride),
        {rand_t<T>({2, 3, 5, 5}, rng), rand_t<T>({3, 3, 3}, rng)},
        F([stride](Tape<T>&, std::vector<TT>& v) {
          return ssq(depthwise_conv(v[0], v[1], stride));
        })));

  run(op_problem<T>("op.global_avg_pool", {rand_t<T>({2, 3, 4, 4}, rng)},
                    F([](Tape<T>&, std::vector<TT>& v) {
                      return ssq(global_avg_pool(v[0]));
                    })));

  run(op_problem<T>(
      "op.conv1d_same",
      {rand_t<T>({2, 5}, rng), rand_t<T>({3}, rng), rand_t<T>({1}, rng)},
      F([](Tape<T>&, std::vector<TT>& v) {
        return ssq(conv1d_same(v[0], v[1], v[2]));
      })));

  {
    TT c = rand_t<T>({7}, rng);
    run(op_problem<T>("op.softmax", {rand_t<T>({7}, rng)},
                      F([c](Tape<T>&, std::vector<TT>& v) {
                        return sum(mul(softmax(v[0]), c));
                      })));
  }

  {
    std::vector<std::int64_t> labels{0, 3, 1, 4};
    run(op_problem<T>("op.cross_entropy", {rand_t<T>({4, 5}, rng)},
                      F([labels](Tape<T>&, std::vector<TT>& v) {
                        return cross_entropy(v[0], labels);
                      })));
  }

  {
    const std::uint64_t seed = o.seed;
    run(op_problem<T>("op.dropout_train", {rand_t<T>({3, 6}, rng)},
                      F([seed](Tape<T>&, std::vector<TT>& v) {
                        RngStream r(seed, 1234);
                        return ssq(dropout(v[0], 0.4, r, true));
                      })));
  }

  run(op_problem<T>(
      "op.concat_gather",
      {rand_t<T>({2, 3, 3, 3}, rng), rand_t<T>({2, 4, 3, 3}, rng)},
      F([](Tape<T>&, std::vector<TT>& v) {
        // the repeated index exercises scatter-add accumulation
        return ssq(concat_channels(v[0], gather_channels(v[1], {1, 3, 1})));
      })));

  run(op_problem<T>(
      "op.masked_gather",
      {rand_t<T>({2, 5, 3, 3}, rng), rand_t<T>({5}, rng, 0.3, 1.0)},
      F([](Tape<T>&, std::vector<TT>& v) {
        return ssq(masked_gather(v[0], v[1], {0, 2, 4}));
      })));

  run(op_problem<T>("op.cross_hadamard", {rand_t<T>({2, 5, 3, 3}, rng)},
                    F([](Tape<T>&, std::vector<TT>& v) {
                      return ssq(cross_hadamard_expand(v[0]));
                    })));

  {
    RngStream nrng(o.seed, 55);
    TT noise = gumbel_noise<T>(nrng, 8);
    TT c = rand_t<T>({8}, rng);
    run(op_problem<T>("op.soft_probs", {rand_t<T>({8}, rng)},
                      F([noise, c](Tape<T>&, std::vector<TT>& v) {
                        return sum(mul(soft_probs(v[0], noise, 0.7), c));
                      })));
  }

  run(op_problem<T>(
      "op.eca_scores",
      {rand_t<T>({2, 6, 4, 4}, rng), rand_t<T>({3}, rng), rand_t<T>({1}, rng)},
      F([](Tape<T>&, std::vector<TT>& v) {
        return ssq(mean_rows(eca_scores(v[0], v[1], v[2])));
      })));

  // stateful normalizers
  run(layer_problem<T, BatchNorm<T>>(
      "op.batchnorm_train", {3, 4, 2, 2}, o.seed,
      []() { return BatchNorm<T>("bn", 4); },
      [](BatchNorm<T>& bn, Tape<T>& tape, const Tensor<T>& x) {
        return bn.forward(&tape, x, true);
      }));

  run(layer_problem<T, BatchNorm<T>>(
      "op.batchnorm_eval", {3, 4, 2, 2}, o.seed,
      []() {
        BatchNorm<T> bn("bn", 4);
        for (std::size_t i = 0; i < 4; ++i) {
          bn.running_mean[i] = T(0.2) * T(double(i) - 1.5);
          bn.running_var[i] = T(0.5) + T(0.4) * T(i);
        }
        return bn;
      },
      [](BatchNorm<T>& bn, Tape<T>& tape, const Tensor<T>& x) {
        return bn.forward(&tape, x, false);
      }));

  for (auto v : {DyNormVariant::softsign, DyNormVariant::sigmoid,
                 DyNormVariant::algebraic})
    run(layer_problem<T, DyNorm<T>>(
        std::string("op.dynorm_") + dynorm_variant_name(v), {2, 6, 2, 2},
        o.seed, [v]() { return DyNorm<T>("dn", 6, v); },
        [](DyNorm<T>& dn, Tape<T>& tape, const Tensor<T>& x) {
          return dn.forward(&tape, x);
        }));

  return out;
}

// The finite-difference sweep conditions on the selection realized at the
// base point; a probe forward recovers that set, and every evaluation pins
// it. Without this, an FD step across a top-k boundary measures the set
// change, not the gradient.
template <typename T>
FdProblem ach_problem(std::string name, AchConfig cfg, MaskMode mode,
                      std::uint64_t seed) {
  std::vector<std::int64_t> frozen;
  if (cfg.learnable_selection) {
    // The probe always runs in double so that float and double builds of the
    // same problem condition on the identical selection.
    AchLayer<double> probe("ach", cfg, seed, 11);
    Tensor<double> in({2, cfg.c_in, 4, 4});
    RngStream r(seed, 901);
    fill_uniform(in, r, -1.0, 1.0);
    Tape<double> tape;
    probe.forward(tape, in, mode);
    frozen = probe.state().indices;
  }
  return layer_problem<T, AchLayer<T>>(
      std::move(name), {2, cfg.c_in, 4, 4}, seed,
      [cfg, seed, frozen]() {
        AchLayer<T> l("ach", cfg, seed, 11);
        if (!frozen.empty()) l.force_indices(frozen);
        return l;
      },
      [mode](AchLayer<T>& l, Tape<T>& tape, const Tensor<T>& x) {
        return l.forward(tape, x, mode);
      });
}

template <typename T>
std::vector<FdProblem> module_problems(const CheckOptions& o) {
  std::vector<FdProblem> out;
  const auto run = [&](FdProblem p) { out.push_back(std::move(p)); };

  AchConfig base;
  base.c_in = 8;
  base.c_sel = 4;

  run(ach_problem<T>("module.ach_soft", base, MaskMode::soft, o.seed));

  {
    AchConfig c = base;
    c.noise_enabled = false;
    run(ach_problem<T>("module.ach_soft_quiet", c, MaskMode::soft, o.seed));
  }
  {
    // Frozen selection makes even the hard path smooth in its inputs.
    AchConfig c = base;
    c.learnable_selection = false;
    run(ach_problem<T>("module.ach_fixed_hard", c, MaskMode::hard, o.seed));
  }
  {
    AchConfig c = base;
    c.use_eca = false;
    run(ach_problem<T>("module.ach_free_scores", c, MaskMode::soft, o.seed));
  }
  {
    AchConfig c = base;
    c.products_batchnorm = true;
    run(ach_problem<T>("module.ach_prod_bn", c, MaskMode::soft, o.seed));
  }
  {
    AchConfig c = base;
    c.norm_variant = DyNormVariant::sigmoid;
    run(ach_problem<T>("module.ach_sigmoid", c, MaskMode::soft, o.seed));
    c.norm_variant = DyNormVariant::algebraic;
    run(ach_problem<T>("module.ach_algebraic", c, MaskMode::soft, o.seed));
  }

  {
    GhostConfig gc;
    gc.c_in = 6;
    gc.c_out = 10;
    run(layer_problem<T, GhostLayer<T>>(
        "module.ghost", {2, 6, 4, 4}, o.seed,
        [gc, seed = o.seed]() { return GhostLayer<T>("g", gc, seed, 21); },
        [](GhostLayer<T>& l, Tape<T>& tape, const Tensor<T>& x) {
          return l.forward(tape, x, true);
        }));
  }

  {
    GhostConfig gc;
    gc.c_in = 6;
    gc.c_out = 10;
    const std::uint64_t seed = o.seed;
    run(layer_problem<T, AdaptiveBottleneck<T>>(
        "module.bottleneck_ghost", {2, 6, 4, 4}, o.seed,
        [gc, seed]() {
          return AdaptiveBottleneck<T>(
              "ab", GhostLayer<T>("ab.exp", gc, seed, 22), 6, 6, 3, 1, seed,
              23);
        },
        [](AdaptiveBottleneck<T>& l, Tape<T>& tape, const Tensor<T>& x) {
          return l.forward(tape, x);
        }));
    run(layer_problem<T, AdaptiveBottleneck<T>>(
        "module.bottleneck_ghost_s2", {2, 6, 5, 5}, o.seed,
        [gc, seed]() {
          return AdaptiveBottleneck<T>(
              "ab", GhostLayer<T>("ab.exp", gc, seed, 22), 6, 8, 3, 2, seed,
              23);
        },
        [](AdaptiveBottleneck<T>& l, Tape<T>& tape, const Tensor<T>& x) {
          return l.forward(tape, x);
        }));
  }

  {
    const std::uint64_t seed = o.seed;
    AchConfig c = base;
    std::vector<std::int64_t> frozen;
    {
      AdaptiveBottleneck<double> probe(
          "ab", AchLayer<double>("ab.exp", c, seed, 24), 8, 8, 3, 1, seed, 25);
      Tensor<double> in({2, 8, 4, 4});
      RngStream r(seed, 901);
      fill_uniform(in, r, -1.0, 1.0);
      Tape<double> tape;
      probe.forward(tape, in, MaskMode::soft);
      frozen = probe.ach()->state().indices;
    }
    run(layer_problem<T, AdaptiveBottleneck<T>>(
        "module.bottleneck_ach", {2, 8, 4, 4}, o.seed,
        [c, seed, frozen]() {
          AdaptiveBottleneck<T> ab(
              "ab", AchLayer<T>("ab.exp", c, seed, 24), 8, 8, 3, 1, seed, 25);
          ab.ach()->force_indices(frozen);
          return ab;
        },
        [](AdaptiveBottleneck<T>& l, Tape<T>& tape, const Tensor<T>& x) {
          return l.forward(tape, x, MaskMode::soft);
        }));
  }

  return out;
}

// The float gradients cannot be certified by finite differences: the layer
// losses lose too many float digits for the quotient to resolve 1e-2. In f32
// mode each check instead compares the float analytic gradient against the
// double analytic gradient of the same problem, which the double FD run has
// already certified.
CheckResult compare_analytic(const FdProblem& lo, const FdProblem& hi,
                             const CheckOptions& o) {
  detail::require(lo.name == hi.name, "compare_analytic: problem mismatch");
  const std::vector<double> g32 = lo.analytic();
  const std::vector<double> g64 = hi.analytic();
  detail::require_state(g32.size() == g64.size(),
                        "compare_analytic: layout mismatch");
  CheckResult r;
  r.name = lo.name;
  r.points = static_cast<std::int64_t>(g32.size());
  r.tol = o.tol;
  for (std::size_t i = 0; i < g32.size(); ++i)
    r.max_rel = std::max(
        r.max_rel, fd_rel_err(g32[i], g64[i], o.rel_floor, o.zero_tol));
  r.pass = r.max_rel < o.tol;
  return r;
}

std::vector<CheckResult> run_suite(std::vector<FdProblem> lo,
                                   std::vector<FdProblem> hi,
                                   const CheckOptions& o) {
  std::vector<CheckResult> out;
  if (!o.f32) {
    for (const auto& p : hi) out.push_back(run_fd(p, o));
    return out;
  }
  detail::require_state(lo.size() == hi.size(), "run_suite: suite mismatch");
  for (std::size_t i = 0; i < hi.size(); ++i)
    out.push_back(compare_analytic(lo[i], hi[i], o));
  return out;
}

}  // namespace

std::vector<CheckResult> op_checks(const CheckOptions& o) {
  return run_suite(o.f32 ? op_problems<float>(o) : std::vector<FdProblem>{},
                   op_problems<double>(o), o);
}

std::vector<CheckResult> module_checks(const CheckOptions& o) {
  return run_suite(
      o.f32 ? module_problems<float>(o) : std::vector<FdProblem>{},
      module_problems<double>(o), o);
}

std::vector<CheckResult> all_checks(const CheckOptions& o) {
  std::vector<CheckResult> out = op_checks(o);
  std::vector<CheckResult> m = module_checks(o);
  out.insert(out.end(), m.begin(), m.end());
  return out;
}

CheckResult ach_layer_fd(const CheckOptions& o) {
  AchConfig cfg;
  cfg.c_in = 8;
  cfg.c_sel = 4;
  FdProblem p64 =
      ach_problem<double>("module.ach_soft", cfg, MaskMode::soft, o.seed);
  if (!o.f32) return run_fd(p64, o);
  return compare_analytic(
      ach_problem<float>("module.ach_soft", cfg, MaskMode::soft, o.seed), p64,
      o);
}

CheckResult dysoft_sign_sentinel(const CheckOptions& o) {
  FdProblem p = layer_problem<double, DyNorm<double>>(
      "sentinel.dysoft_sign_bug", {2, 5, 2, 2}, o.seed,
      [s = o.seed]() { return DyNorm<double>("dn", 5); },
      [](DyNorm<double>& dn, Tape<double>& tape, const Tensor<double>& x) {
        return dn.forward(&tape, x);
      });
  // Corrupt the alpha slice of the analytic gradient (it sits right after
  // the input coordinates); the harness must notice.
  const std::size_t n_in = 2 * 5 * 2 * 2;
  auto good = p.analytic;
  p.analytic = [good, n_in]() {
    std::vector<double> g = good();
    for (std::size_t i = n_in; i < n_in + 5; ++i) g[i] = -g[i];
    return g;
  };
  CheckResult r = run_fd(p, o);
  const bool detected = r.max_rel > 10.0 * o.tol;
  r.pass = detected;
  return r;
}

}  // namespace ach
