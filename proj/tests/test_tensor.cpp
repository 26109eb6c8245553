#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "ach/tensor.hpp"
#include "doctest.h"

using namespace ach;
using T64 = Tensor<double>;

namespace {

T64 rand4(Shape s, RngStream& rng) {
  T64 t(std::move(s));
  fill_uniform(t, rng, -1.0, 1.0);
  return t;
}

}  // namespace

TEST_CASE("conv1d frozen value") {
  T64 v = T64::from_values({1, 3}, {1, 1, 1});
  T64 w = T64::from_values({3}, {1, 2, 3});
  T64 b = T64::from_values({1}, {0});
  T64 y = conv1d_same(v, w, b);
  CHECK(y[0] == doctest::Approx(5));  // pad | 1 1 -> 2 + 3
  CHECK(y[1] == doctest::Approx(6));  // 1 1 1 -> 1 + 2 + 3
  CHECK(y[2] == doctest::Approx(3));  // 1 1 | pad -> 1 + 2
  T64 b2 = T64::from_values({1}, {0.5});
  T64 y2 = conv1d_same(v, w, b2);
  CHECK(y2[0] == doctest::Approx(5.5));
}

TEST_CASE("pointwise conv matches per-pixel matmul") {
  RngStream rng(11, 0);
  T64 x = rand4({2, 3, 4, 4}, rng);
  T64 w = rand4({5, 3}, rng);
  T64 b = rand4({5}, rng);
  T64 y = pointwise_conv(x, w, b);
  REQUIRE(y.shape == Shape{2, 5, 4, 4});
  for (std::int64_t n = 0; n < 2; ++n)
    for (std::int64_t o = 0; o < 5; ++o)
      for (std::int64_t s = 0; s < 16; ++s) {
        double acc = b[o];
        for (std::int64_t c = 0; c < 3; ++c)
          acc += w[o * 3 + c] * x[(n * 3 + c) * 16 + s];
        CHECK(y[(n * 5 + o) * 16 + s] == doctest::Approx(acc));
      }
}

TEST_CASE("depthwise conv matches padded loops") {
  RngStream rng(12, 0);
  for (int stride : {1, 2})
    for (std::int64_t h : {4, 5}) {
      T64 x = rand4({2, 3, h, h}, rng);
      T64 w = rand4({3, 3, 3}, rng);
      T64 y = depthwise_conv(x, w, stride);
      const std::int64_t ho = (h + 2 - 3) / stride + 1;
      REQUIRE(y.dim(2) == ho);
      REQUIRE(y.dim(3) == ho);
      // ho == ceil(h / stride) for k = 3, pad = 1
      REQUIRE(ho == (h + stride - 1) / stride);
      for (std::int64_t n = 0; n < 2; ++n)
        for (std::int64_t c = 0; c < 3; ++c)
          for (std::int64_t oy = 0; oy < ho; ++oy)
            for (std::int64_t ox = 0; ox < ho; ++ox) {
              double acc = 0;
              for (std::int64_t ky = 0; ky < 3; ++ky)
                for (std::int64_t kx = 0; kx < 3; ++kx) {
                  const std::int64_t iy = oy * stride + ky - 1;
                  const std::int64_t ix = ox * stride + kx - 1;
                  if (iy < 0 || iy >= h || ix < 0 || ix >= h) continue;
                  acc += w[(c * 3 + ky) * 3 + kx] *
                         x[((n * 3 + c) * h + iy) * h + ix];
                }
              CHECK(y[((n * 3 + c) * ho + oy) * ho + ox] ==
                    doctest::Approx(acc));
            }
    }
}

TEST_CASE("pool, mean_rows and linear match loops") {
  RngStream rng(13, 0);
  T64 x = rand4({3, 4, 2, 5}, rng);
  T64 g = global_avg_pool(x);
  REQUIRE(g.shape == Shape{3, 4});
  for (std::int64_t n = 0; n < 3; ++n)
    for (std::int64_t c = 0; c < 4; ++c) {
      double acc = 0;
      for (std::int64_t s = 0; s < 10; ++s) acc += x[(n * 4 + c) * 10 + s];
      CHECK(g[n * 4 + c] == doctest::Approx(acc / 10.0));
    }

  T64 m = mean_rows(g);
  REQUIRE(m.shape == Shape{4});
  for (std::int64_t c = 0; c < 4; ++c)
    CHECK(m[c] ==
          doctest::Approx((g[c] + g[4 + c] + g[8 + c]) / 3.0));

  T64 w = rand4({2, 4}, rng);
  T64 b = rand4({2}, rng);
  T64 y = linear(g, w, b);
  REQUIRE(y.shape == Shape{3, 2});
  for (std::int64_t n = 0; n < 3; ++n)
    for (std::int64_t o = 0; o < 2; ++o) {
      double acc = b[o];
      for (std::int64_t c = 0; c < 4; ++c) acc += w[o * 4 + c] * g[n * 4 + c];
      CHECK(y[n * 2 + o] == doctest::Approx(acc));
    }
}

TEST_CASE("softmax and cross entropy match direct formulas") {
  T64 v = T64::from_values({4}, {0.5, -1.0, 2.0, 0.0});
  T64 p = softmax(v);
  double z = 0;
  for (int i = 0; i < 4; ++i) z += std::exp(v[i] - 2.0);
  double total = 0;
  for (int i = 0; i < 4; ++i) {
    CHECK(p[i] == doctest::Approx(std::exp(v[i] - 2.0) / z));
    total += p[i];
  }
  CHECK(total == doctest::Approx(1.0));

  RngStream rng(14, 0);
  T64 logits = rand4({3, 5}, rng);
  std::vector<std::int64_t> labels{2, 0, 4};
  T64 l = cross_entropy(logits, labels);
  double expect = 0;
  for (std::int64_t n = 0; n < 3; ++n) {
    double mx = logits[n * 5];
    for (std::int64_t k = 1; k < 5; ++k)
      mx = std::max(mx, logits[n * 5 + k]);
    double zz = 0;
    for (std::int64_t k = 0; k < 5; ++k)
      zz += std::exp(logits[n * 5 + k] - mx);
    expect -= logits[n * 5 + labels[static_cast<std::size_t>(n)]] - mx -
              std::log(zz);
  }
  CHECK(l[0] == doctest::Approx(expect / 3.0));
}

TEST_CASE("batch norm train and eval statistics") {
  RngStream rng(15, 0);
  T64 x = rand4({4, 3, 2, 2}, rng);
  BatchNorm<double> bn("bn", 3);
  T64 y = bn.forward(nullptr, x, true);

  for (std::int64_t c = 0; c < 3; ++c) {
    double mu = 0;
    for (std::int64_t n = 0; n < 4; ++n)
      for (std::int64_t s = 0; s < 4; ++s) mu += x[(n * 3 + c) * 4 + s];
    mu /= 16.0;
    double var = 0;
    for (std::int64_t n = 0; n < 4; ++n)
      for (std::int64_t s = 0; s < 4; ++s) {
        const double d = x[(n * 3 + c) * 4 + s] - mu;
        var += d * d;
      }
    var /= 16.0;  // biased
    CHECK(y[c * 4] ==
          doctest::Approx((x[c * 4] - mu) / std::sqrt(var + 1e-5)));
    // running stats moved one momentum step from (0, 1)
    CHECK(bn.running_mean[static_cast<std::size_t>(c)] ==
          doctest::Approx(0.1 * mu));
    CHECK(bn.running_var[static_cast<std::size_t>(c)] ==
          doctest::Approx(0.9 + 0.1 * var));
  }

  // eval normalizes with the running statistics
  T64 ye = bn.forward(nullptr, x, false);
  const double rm = bn.running_mean[0], rv = bn.running_var[0];
  CHECK(ye[0] == doctest::Approx((x[0] - rm) / std::sqrt(rv + 1e-5)));
}

TEST_CASE("dropout semantics") {
  RngStream rng(16, 0);
  T64 x = rand4({4, 8}, rng);
  {
    RngStream r(1, 2);
    T64 y = dropout(x, 0.0, r, true);
    for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(y[i] == x[i]);
  }
  {
    RngStream r(1, 2);
    T64 y = dropout(x, 0.5, r, false);
    for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(y[i] == x[i]);
  }
  {
    RngStream r1(9, 2), r2(9, 2);
    T64 a = dropout(x, 0.5, r1, true);
    T64 b = dropout(x, 0.5, r2, true);
    int kept = 0;
    for (std::int64_t i = 0; i < x.numel(); ++i) {
      CHECK(a[i] == b[i]);  // same stream, same mask
      if (a[i] != 0.0) {
        CHECK(a[i] == doctest::Approx(x[i] / 0.5));
        ++kept;
      }
    }
    CHECK(kept > 4);
    CHECK(kept < 28);
  }
  CHECK_THROWS_AS(
      [&] {
        RngStream r(1, 1);
        (void)dropout(x, 1.0, r, true);
      }(),
      std::invalid_argument);
}

TEST_CASE("concat and gather layouts") {
  RngStream rng(17, 0);
  T64 a = rand4({2, 2, 2, 2}, rng);
  T64 b = rand4({2, 3, 2, 2}, rng);
  T64 cat = concat_channels(a, b);
  REQUIRE(cat.shape == Shape{2, 5, 2, 2});
  for (std::int64_t n = 0; n < 2; ++n) {
    for (std::int64_t c = 0; c < 2; ++c)
      for (std::int64_t s = 0; s < 4; ++s)
        CHECK(cat[(n * 5 + c) * 4 + s] == a[(n * 2 + c) * 4 + s]);
    for (std::int64_t c = 0; c < 3; ++c)
      for (std::int64_t s = 0; s < 4; ++s)
        CHECK(cat[(n * 5 + 2 + c) * 4 + s] == b[(n * 3 + c) * 4 + s]);
  }

  T64 g = gather_channels(b, {2, 0, 2});
  REQUIRE(g.shape == Shape{2, 3, 2, 2});
  for (std::int64_t n = 0; n < 2; ++n)
    for (std::int64_t s = 0; s < 4; ++s) {
      CHECK(g[(n * 3 + 0) * 4 + s] == b[(n * 3 + 2) * 4 + s]);
      CHECK(g[(n * 3 + 1) * 4 + s] == b[(n * 3 + 0) * 4 + s]);
      CHECK(g[(n * 3 + 2) * 4 + s] == b[(n * 3 + 2) * 4 + s]);
    }
}

TEST_CASE("duplicate gather accumulates on backward") {
  Tape<double> tape;
  T64 x = T64::from_values({1, 2, 1, 1}, {3.0, 5.0});
  T64 xl = tape.leaf(x);
  T64 g = gather_channels(xl, {1, 1, 0});
  T64 loss = sum(g);
  tape.backward(loss);
  const auto& gx = tape.grad_buf(xl.node);
  CHECK(gx[0] == 1.0);
  CHECK(gx[1] == 2.0);  // two copies both feed back
}

TEST_CASE("tape discipline") {
  Tape<double> tape;
  T64 x = T64::from_values({2}, {1.0, 2.0});
  T64 xl = tape.leaf(x);
  T64 loss = sum(mul(xl, xl));
  CHECK_THROWS_AS(tape.backward(xl), std::invalid_argument);  // not a scalar
  tape.backward(loss);
  CHECK_THROWS_AS(tape.backward(loss), std::logic_error);  // single use

  Tape<double> t2;
  T64 a = t2.leaf(x);
  Tape<double> t3;
  T64 b = t3.leaf(x);
  CHECK_THROWS_AS((void)add(a, b), std::invalid_argument);  // mixed tapes
}

TEST_CASE("parameter accumulation guards") {
  Parameter<double> p("p", T64::from_values({2}, {1.0, -1.0}));
  Tape<double> tape;
  CHECK_THROWS_AS(accumulate_grad(tape, p), std::logic_error);  // never bound
  T64 pl = tape.leaf(p);
  T64 loss = sum(mul(pl, pl));
  CHECK_THROWS_AS(accumulate_grad(tape, p), std::logic_error);  // no backward
  tape.backward(loss);
  accumulate_grad(tape, p);
  CHECK(p.grad[0] == doctest::Approx(2.0));
  CHECK(p.grad[1] == doctest::Approx(-2.0));
}

TEST_CASE("finite checks trip on poisoned values") {
  const bool saved = finite_checks();
  finite_checks() = true;
  T64 x = T64::from_values({2}, {1.0, 1e308});
  CHECK_THROWS_AS((void)scale(x, 10.0), std::runtime_error);  // overflows
  finite_checks() = false;
  T64 y = scale(x, 10.0);
  CHECK(std::isinf(y[1]));
  finite_checks() = saved;
}

TEST_CASE("sgd takes a momentum step") {
  Parameter<double> p("p", T64::from_values({1}, {1.0}));
  Sgd<double> opt(0.1, 0.9);
  p.grad[0] = 1.0;
  opt.step({&p});
  CHECK(p.value[0] == doctest::Approx(0.9));
  p.grad[0] = 1.0;
  opt.step({&p});
  // velocity = 0.9 * 1 + 1 = 1.9
  CHECK(p.value[0] == doctest::Approx(0.9 - 0.19));
}
