#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "ach/ach_layer.hpp"
#include "ach/pairing.hpp"
#include "doctest.h"

using namespace ach;

namespace {

using T64 = Tensor<double>;

T64 random_input(Shape s, std::uint64_t seed) {
  RngStream rng(seed, 7);
  T64 x(s);
  for (std::int64_t i = 0; i < x.numel(); ++i) x[i] = rng.next_normal();
  return x;
}

bool close(double a, double b, double tol = 1e-11) {
  return std::fabs(a - b) <= tol * std::max({1.0, std::fabs(a), std::fabs(b)});
}

// Naive top-k: repeated max scan, strict > so ties keep the lower index.
std::vector<std::int64_t> naive_topk(std::vector<double> v, std::int64_t k) {
  std::vector<std::int64_t> out;
  for (std::int64_t t = 0; t < k; ++t) {
    std::int64_t best = -1;
    for (std::int64_t i = 0; i < std::int64_t(v.size()); ++i)
      if (best < 0 || v[i] > v[best]) best = i;
    out.push_back(best);
    v[best] = -1e300;
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

TEST_CASE("forward matches a from-scratch reconstruction") {
  AchConfig cfg;
  cfg.c_in = 6;
  cfg.c_sel = 3;
  cfg.noise_enabled = false;
  AchLayer<double> layer("op", cfg, 99, 0);
  // distinct affine params: channel means, and with them the scores, separate
  for (std::int64_t ci = 0; ci < 6; ++ci) {
    layer.bn().gamma.value[ci] = 1.0 + 0.1 * double(ci);
    layer.bn().beta.value[ci] = 0.3 * double(ci - 2);
  }
  const std::int64_t n = 2, c = 6, h = 3, w = 3, hw = h * w;
  const T64 x = random_input({n, c, h, w}, 5);

  Tape<double> tape;
  const T64 got = layer.forward(tape, x, MaskMode::hard);
  REQUIRE(got.dim(1) == 6 + 3);

  // 1. pointwise convolution
  const auto& W = *layer.pw_w.value.elems;
  std::vector<double> pre(std::size_t(n * c * hw), 0.0);
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t o = 0; o < c; ++o)
      for (std::int64_t i = 0; i < c; ++i)
        for (std::int64_t s = 0; s < hw; ++s)
          pre[std::size_t((b * c + o) * hw + s)] +=
              W[std::size_t(o * c + i)] * x[(b * c + i) * hw + s];

  // 2. batch norm, biased variance over batch and space
  const double m = double(n * hw);
  std::vector<double> xp(pre.size());
  for (std::int64_t ci = 0; ci < c; ++ci) {
    double mu = 0, var = 0;
    for (std::int64_t b = 0; b < n; ++b)
      for (std::int64_t s = 0; s < hw; ++s)
        mu += pre[std::size_t((b * c + ci) * hw + s)];
    mu /= m;
    for (std::int64_t b = 0; b < n; ++b)
      for (std::int64_t s = 0; s < hw; ++s) {
        const double d = pre[std::size_t((b * c + ci) * hw + s)] - mu;
        var += d * d;
      }
    var /= m;
    const double g = layer.bn().gamma.value[ci], be = layer.bn().beta.value[ci];
    for (std::int64_t b = 0; b < n; ++b)
      for (std::int64_t s = 0; s < hw; ++s) {
        const auto at = std::size_t((b * c + ci) * hw + s);
        xp[at] = g * (pre[at] - mu) / std::sqrt(var + 1e-5) + be;
      }
  }

  // 3. channel scores: pooled means, shared conv across channels, batch mean
  const auto& ew = *layer.eca_w.value.elems;
  const double eb = layer.eca_b.value[0];
  std::vector<double> xi(std::size_t(c), 0.0);
  for (std::int64_t b = 0; b < n; ++b) {
    std::vector<double> gap(std::size_t(c), 0.0);
    for (std::int64_t ci = 0; ci < c; ++ci) {
      for (std::int64_t s = 0; s < hw; ++s)
        gap[std::size_t(ci)] += xp[std::size_t((b * c + ci) * hw + s)];
      gap[std::size_t(ci)] /= double(hw);
    }
    for (std::int64_t ci = 0; ci < c; ++ci) {
      double acc = eb;
      for (std::int64_t j = 0; j < 3; ++j) {
        const std::int64_t src = ci + j - 1;
        if (src >= 0 && src < c) acc += ew[std::size_t(j)] * gap[std::size_t(src)];
      }
      xi[std::size_t(ci)] += acc / double(n);
    }
  }

  // 4. tempered softmax, then hard top-k on the probabilities
  const double tau = layer.state().tau;
  double hi = xi[0];
  for (double v : xi) hi = std::max(hi, v);
  std::vector<double> probs(static_cast<std::size_t>(c));
  double zsum = 0;
  for (std::int64_t ci = 0; ci < c; ++ci) {
    probs[std::size_t(ci)] = std::exp((xi[std::size_t(ci)] - hi) / tau);
    zsum += probs[std::size_t(ci)];
  }
  for (auto& p : probs) p /= zsum;
  const auto idx = naive_topk(probs, cfg.c_sel);
  REQUIRE(layer.state().indices == idx);
  for (std::int64_t ci = 0; ci < c; ++ci)
    CHECK(close(layer.state().probs[std::size_t(ci)], probs[std::size_t(ci)]));

  // 5. gather (hard mask is exactly one), pairwise products, bounded norm
  const std::int64_t np = cfg.c_sel * (cfg.c_sel - 1) / 2;
  std::vector<double> prod(std::size_t(n * np * hw));
  for (std::int64_t p = 0; p < np; ++p) {
    const auto [i, j] = pair_from_index(p, cfg.c_sel);
    for (std::int64_t b = 0; b < n; ++b)
      for (std::int64_t s = 0; s < hw; ++s)
        prod[std::size_t((b * np + p) * hw + s)] =
            xp[std::size_t((b * c + idx[std::size_t(i)]) * hw + s)] *
            xp[std::size_t((b * c + idx[std::size_t(j)]) * hw + s)];
  }
  std::vector<double> y(prod.size());
  for (std::int64_t p = 0; p < np; ++p) {
    const double av = layer.dynorm().alpha.value[p];
    const double wv = layer.dynorm().w.value[p];
    const double bv = layer.dynorm().b.value[p];
    for (std::int64_t b = 0; b < n; ++b)
      for (std::int64_t s = 0; s < hw; ++s) {
        const auto at = std::size_t((b * np + p) * hw + s);
        const double u = av * prod[at];
        y[at] = (u / (1.0 + std::fabs(u))) * wv + bv;
      }
  }

  // 6. concatenation: originals first, products after
  const std::int64_t co = c + np;
  for (std::int64_t b = 0; b < n; ++b) {
    for (std::int64_t ci = 0; ci < c; ++ci)
      for (std::int64_t s = 0; s < hw; ++s)
        CHECK(close(got[(b * co + ci) * hw + s],
                    xp[std::size_t((b * c + ci) * hw + s)]));
    for (std::int64_t p = 0; p < np; ++p)
      for (std::int64_t s = 0; s < hw; ++s)
        CHECK(close(got[(b * co + c + p) * hw + s],
                    y[std::size_t((b * np + p) * hw + s)]));
  }
}

TEST_CASE("output channel law") {
  for (auto [cin, csel, want] :
       {std::array<std::int64_t, 3>{96, 16, 216},
        std::array<std::int64_t, 3>{128, 32, 624},
        std::array<std::int64_t, 3>{8, 4, 14},
        std::array<std::int64_t, 3>{2, 2, 3}}) {
    AchConfig cfg;
    cfg.c_in = cin;
    cfg.c_sel = csel;
    AchLayer<double> layer("law", cfg, 3, 0);
    CHECK(layer.out_channels() == want);
  }
  // and the realized tensor agrees
  AchConfig cfg;
  cfg.c_in = 96;
  cfg.c_sel = 16;
  cfg.noise_enabled = false;
  AchLayer<double> layer("law96", cfg, 3, 0);
  const T64 x = random_input({1, 96, 2, 2}, 11);
  Tape<double> tape;
  CHECK(layer.forward(tape, x).dim(1) == 216);
  CHECK(layer.infer(x).dim(1) == 216);
}

TEST_CASE("masked gather equals the dense mapping product") {
  const T64 x = random_input({2, 7, 3, 2}, 21);
  RngStream rng(22, 0);
  T64 mask({7});
  for (int i = 0; i < 7; ++i) mask[i] = rng.next_uniform();
  const std::vector<std::int64_t> idx{1, 4, 6};

  const T64 got = masked_gather(x, mask, idx);
  const auto mm = build_mapping(idx, mask);
  const T64 want = mapping_apply_dense(mm.m, x);
  REQUIRE(got.shape == want.shape);
  for (std::int64_t i = 0; i < got.numel(); ++i) CHECK(got[i] == want[i]);

  // m_prime rows are one-hot at the selected channels
  for (std::int64_t s = 0; s < 3; ++s)
    for (std::int64_t ci = 0; ci < 7; ++ci)
      CHECK(mm.m_prime[s * 7 + ci] == (ci == idx[std::size_t(s)] ? 1.0 : 0.0));
  // and the plain gather is the m_prime product
  const T64 plain = mapping_apply_dense(mm.m_prime, x);
  const T64 gathered = gather_channels(x, idx);
  for (std::int64_t i = 0; i < plain.numel(); ++i)
    CHECK(plain[i] == gathered[i]);
}

TEST_CASE("training and inference paths agree once statistics converge") {
  AchConfig cfg;
  cfg.c_in = 5;
  cfg.c_sel = 3;
  cfg.noise_enabled = false;
  AchLayer<double> layer("eq", cfg, 17, 0);
  layer.bn().set_momentum(1.0);  // running stats become the batch stats
  // separate the channel means so the selection is not a round-off tie
  for (std::int64_t ci = 0; ci < 5; ++ci)
    layer.bn().beta.value[ci] = 0.4 * double(ci) - 0.8;

  const T64 x = random_input({3, 5, 4, 4}, 31);
  Tape<double> tape;
  const T64 tr = layer.forward(tape, x, MaskMode::hard);
  const T64 ev = layer.infer(x);
  REQUIRE(tr.shape == ev.shape);
  for (std::int64_t i = 0; i < tr.numel(); ++i) CHECK(tr[i] == ev[i]);

  // inference is deterministic
  const T64 ev2 = layer.infer(x);
  for (std::int64_t i = 0; i < ev.numel(); ++i) CHECK(ev[i] == ev2[i]);
}

TEST_CASE("parameter sets track the ablation switches") {
  AchConfig cfg;
  cfg.c_in = 6;
  cfg.c_sel = 3;

  AchLayer<double> full("a", cfg, 1, 0);
  CHECK(full.params().size() == 8);  // pw, bn(2), eca(2), dynorm(3)

  AchConfig no_eca = cfg;
  no_eca.use_eca = false;
  AchLayer<double> frees("b", no_eca, 1, 0);
  const auto fp = frees.params();
  CHECK(fp.size() == 7);
  CHECK(std::find(fp.begin(), fp.end(), &frees.free_scores) != fp.end());

  AchConfig fixed = cfg;
  fixed.learnable_selection = false;
  AchLayer<double> froz("c", fixed, 1, 0);
  CHECK(froz.params().size() == 6);

  AchConfig pbn = cfg;
  pbn.products_batchnorm = true;
  AchLayer<double> bnl("d", pbn, 1, 0);
  CHECK(bnl.params().size() == 7);
}

TEST_CASE("frozen selection is a valid sorted subset and carries no score grad") {
  AchConfig cfg;
  cfg.c_in = 10;
  cfg.c_sel = 4;
  cfg.learnable_selection = false;
  AchLayer<double> layer("fz", cfg, 23, 1);
  const auto& idx = layer.state().indices;
  REQUIRE(idx.size() == 4);
  CHECK(std::is_sorted(idx.begin(), idx.end()));
  CHECK(std::adjacent_find(idx.begin(), idx.end()) == idx.end());
  for (auto i : idx) CHECK((i >= 0 && i < 10));

  const T64 x = random_input({2, 10, 3, 3}, 41);
  Tape<double> tape;
  const T64 out = layer.forward(tape, x);
  const T64 loss = sum(out);
  tape.backward(loss);
  CHECK(!layer.xi_grad_sqsum(tape).has_value());

  // identical draw seeds give the identical frozen subset
  AchLayer<double> again("fz", cfg, 23, 1);
  CHECK(again.state().indices == idx);
}

TEST_CASE("learnable selection reports score gradient mass") {
  AchConfig cfg;
  cfg.c_in = 6;
  cfg.c_sel = 3;
  AchLayer<double> layer("lg", cfg, 29, 0);
  const T64 x = random_input({2, 6, 3, 3}, 43);
  Tape<double> tape;
  const T64 out = layer.forward(tape, x);
  CHECK_THROWS_AS((void)layer.xi_grad_sqsum(tape), std::logic_error);
  tape.backward(sum(out));
  const auto g = layer.xi_grad_sqsum(tape);
  REQUIRE(g.has_value());
  CHECK(*g >= 0.0);
}

TEST_CASE("forced selection is honored and validated") {
  AchConfig cfg;
  cfg.c_in = 6;
  cfg.c_sel = 3;
  cfg.noise_enabled = false;
  AchLayer<double> layer("fi", cfg, 31, 0);
  CHECK_THROWS_AS(layer.force_indices({0, 1}), std::invalid_argument);
  layer.force_indices({0, 2, 5});
  const T64 x = random_input({2, 6, 3, 3}, 47);
  Tape<double> tape;
  (void)layer.forward(tape, x);
  CHECK(layer.state().indices == std::vector<std::int64_t>{0, 2, 5});
}

TEST_CASE("configuration guards") {
  AchConfig bad;
  bad.c_in = 1;
  bad.c_sel = 1;
  CHECK_THROWS_AS(AchLayer<double>("x", bad, 1, 0), ConfigError);
  bad.c_in = 8;
  bad.c_sel = 9;
  CHECK_THROWS_AS(AchLayer<double>("x", bad, 1, 0), ConfigError);
  bad.c_sel = 1;
  CHECK_THROWS_AS(AchLayer<double>("x", bad, 1, 0), ConfigError);
  bad.c_sel = 4;
  bad.eca_kernel = 2;
  CHECK_THROWS_AS(AchLayer<double>("x", bad, 1, 0), ConfigError);

  AchConfig ok;
  ok.c_in = 4;
  ok.c_sel = 2;
  AchLayer<double> layer("x", ok, 1, 0);
  const T64 wrong = random_input({2, 3, 2, 2}, 51);
  Tape<double> tape;
  CHECK_THROWS_AS((void)layer.forward(tape, wrong), std::invalid_argument);

  const T64 one = random_input({1, 1, 2, 2}, 52);
  CHECK_THROWS_AS((void)cross_hadamard_expand(one), std::invalid_argument);
  const T64 x = random_input({1, 4, 2, 2}, 53);
  T64 mask({3});
  CHECK_THROWS_AS((void)masked_gather(x, mask, {0}), std::invalid_argument);
  T64 mask4({4});
  CHECK_THROWS_AS((void)masked_gather(x, mask4, {}), std::invalid_argument);
  CHECK_THROWS_AS((void)masked_gather(x, mask4, {4}), std::invalid_argument);
}

TEST_CASE("ghost layer matches a from-scratch reconstruction") {
  GhostConfig cfg;
  cfg.c_in = 3;
  cfg.c_out = 7;
  cfg.primary = 3;
  GhostLayer<double> layer("gh", cfg, 61, 0);
  const std::int64_t n = 2, h = 4, w = 4, hw = h * w;
  const T64 x = random_input({n, 3, h, w}, 55);
  Tape<double> tape;
  const T64 got = layer.forward(tape, x, true);
  REQUIRE(got.dim(1) == 7);

  const auto& W = *layer.pw_w.value.elems;
  const auto& CW = *layer.cheap_w.value.elems;
  std::vector<double> full(std::size_t(n * 7 * hw), 0.0);
  // primaries
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t o = 0; o < 3; ++o)
      for (std::int64_t i = 0; i < 3; ++i)
        for (std::int64_t s = 0; s < hw; ++s)
          full[std::size_t((b * 7 + o) * hw + s)] +=
              W[std::size_t(o * 3 + i)] * x[(b * 3 + i) * hw + s];
  // ghosts: cheap 3x3 depthwise over primary (g % 3), zero padded
  for (std::int64_t g = 0; g < 4; ++g) {
    const std::int64_t src = g % 3;
    for (std::int64_t b = 0; b < n; ++b)
      for (std::int64_t r = 0; r < h; ++r)
        for (std::int64_t cc = 0; cc < w; ++cc) {
          double acc = 0;
          for (std::int64_t kr = 0; kr < 3; ++kr)
            for (std::int64_t kc = 0; kc < 3; ++kc) {
              const std::int64_t rr = r + kr - 1, c2 = cc + kc - 1;
              if (rr < 0 || rr >= h || c2 < 0 || c2 >= w) continue;
              acc += CW[std::size_t((g * 3 + kr) * 3 + kc)] *
                     full[std::size_t((b * 7 + src) * hw + rr * w + c2)];
            }
          full[std::size_t((b * 7 + 3 + g) * hw + r * w + cc)] = acc;
        }
  }
  // batch norm over all 7 channels
  const double m = double(n * hw);
  for (std::int64_t ci = 0; ci < 7; ++ci) {
    double mu = 0, var = 0;
    for (std::int64_t b = 0; b < n; ++b)
      for (std::int64_t s = 0; s < hw; ++s)
        mu += full[std::size_t((b * 7 + ci) * hw + s)];
    mu /= m;
    for (std::int64_t b = 0; b < n; ++b)
      for (std::int64_t s = 0; s < hw; ++s) {
        const double d = full[std::size_t((b * 7 + ci) * hw + s)] - mu;
        var += d * d;
      }
    var /= m;
    for (std::int64_t b = 0; b < n; ++b)
      for (std::int64_t s = 0; s < hw; ++s) {
        const auto at = std::size_t((b * 7 + ci) * hw + s);
        CHECK(close(got[(b * 7 + ci) * hw + s],
                    (full[at] - mu) / std::sqrt(var + 1e-5)));
      }
  }
}

TEST_CASE("ghost configuration rules") {
  GhostConfig d;
  d.c_in = 4;
  d.c_out = 10;  // primary defaults to 5, replication to 1
  GhostLayer<double> layer("gd", d, 1, 0);
  CHECK(layer.config().primary == 5);
  CHECK(layer.config().replication == 1);

  GhostConfig bad;
  bad.c_in = 3;
  bad.c_out = 9;
  bad.primary = 2;
  bad.replication = 2;  // 7 ghosts > 2 * 2
  CHECK_THROWS_AS(GhostLayer<double>("gb", bad, 1, 0), ConfigError);

  GhostConfig even;
  even.c_in = 3;
  even.c_out = 6;
  even.cheap_kernel = 4;
  CHECK_THROWS_AS(GhostLayer<double>("ge", even, 1, 0), ConfigError);

  // all-primary: no cheap parameters, plain pointwise plus norm
  GhostConfig prim;
  prim.c_in = 3;
  prim.c_out = 4;
  prim.primary = 4;
  GhostLayer<double> pl("gp", prim, 1, 0);
  CHECK(pl.params().size() == 3);
  const T64 x = random_input({2, 3, 3, 3}, 59);
  Tape<double> tape;
  CHECK(pl.forward(tape, x, true).dim(1) == 4);
}

TEST_CASE("bottleneck residual and shapes") {
  using AB = AdaptiveBottleneck<double>;
  GhostConfig g;
  g.c_in = 6;
  g.c_out = 12;
  AB ab("res", GhostLayer<double>("res.exp", g, 71, 0), 6, 6, 3, 1, 71, 1);
  REQUIRE(ab.ghost() != nullptr);
  CHECK(ab.ach() == nullptr);

  // zero projection: the proj batch norm output collapses to beta = 0,
  // so the residual returns the input exactly
  std::fill(ab.proj_w.value.elems->begin(), ab.proj_w.value.elems->end(), 0.0);
  const T64 x = random_input({2, 6, 4, 4}, 61);
  Tape<double> tape;
  const T64 out = ab.forward(tape, x);
  REQUIRE(out.shape == x.shape);
  for (std::int64_t i = 0; i < out.numel(); ++i) CHECK(out[i] == x[i]);

  // stride 2 halves space (ceiling) and disables the residual
  AchConfig ac;
  ac.c_in = 6;
  ac.c_sel = 3;
  ac.noise_enabled = false;
  AB ab2("s2", AchLayer<double>("s2.exp", ac, 73, 0), 6, 8, 3, 2, 73, 1);
  REQUIRE(ab2.ach() != nullptr);
  const T64 x5 = random_input({2, 6, 5, 5}, 67);
  Tape<double> tape2;
  const T64 o2 = ab2.forward(tape2, x5);
  CHECK(o2.shape == Shape{2, 8, 3, 3});
  CHECK(o2.shape == ab2.infer(x5).shape);
  // expansion params (8) plus dw, proj, and two norms (6)
  CHECK(ab2.params().size() == 14);

  CHECK_THROWS_AS(AB("bk", GhostLayer<double>("bk.exp", g, 1, 0), 6, 6, 4, 1,
                     1, 0),
                  ConfigError);
  CHECK_THROWS_AS(AB("bs", GhostLayer<double>("bs.exp", g, 1, 0), 6, 6, 3, 3,
                     1, 0),
                  ConfigError);
}

TEST_CASE("bottleneck trains end to end") {
  using AB = AdaptiveBottleneck<double>;
  AchConfig ac;
  ac.c_in = 5;
  ac.c_sel = 3;
  AB ab("tr", AchLayer<double>("tr.exp", ac, 79, 0), 5, 5, 3, 1, 79, 1);
  const T64 x = random_input({2, 5, 4, 4}, 71);
  Tape<double> tape;
  const T64 out = ab.forward(tape, x);
  tape.backward(sum(out));
  for (auto* p : ab.params()) {
    accumulate_grad(tape, *p);
    double mass = 0;
    for (double gv : p->grad) mass += gv * gv;
    CAPTURE(p->name);
    CHECK(std::isfinite(mass));
  }
}
