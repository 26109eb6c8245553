#include <cmath>

#include "ach/grad_check.hpp"
#include "doctest.h"

using namespace ach;

TEST_CASE("relative error metric") {
  CHECK(fd_rel_err(1.0, 1.0, 1e-6, 1e-7) == 0.0);
  CHECK(fd_rel_err(2.0, 1.0, 1e-6, 1e-7) == doctest::Approx(0.5));
  // both sides structurally zero: exact match regardless of round-off
  CHECK(fd_rel_err(0.0, 3e-8, 1e-6, 1e-7) == 0.0);
  // one side clearly nonzero: the floor keeps the quotient honest
  CHECK(fd_rel_err(0.0, 1e-3, 1e-6, 1e-7) == doctest::Approx(1.0));
}

TEST_CASE("a quadratic bowl passes and a corrupted gradient fails") {
  FdProblem p;
  p.name = "bowl";
  p.x0 = {0.3, -1.2, 0.8};
  p.loss = [](const std::vector<double>& x) {
    double acc = 0;
    for (double v : x) acc += v * v;
    return acc;
  };
  p.analytic = [&p]() {
    std::vector<double> g;
    for (double v : p.x0) g.push_back(2.0 * v);
    return g;
  };
  CheckOptions o;
  const CheckResult ok = run_fd(p, o);
  CHECK(ok.pass);
  CHECK(ok.points == 3);
  CHECK(ok.max_rel < o.tol);

  p.analytic = [&p]() {
    std::vector<double> g;
    for (double v : p.x0) g.push_back(2.0 * v);
    g[1] = -g[1];
    return g;
  };
  CHECK(!run_fd(p, o).pass);
}

TEST_CASE("primitive sweeps") {
  CheckOptions o;
  const auto results = op_checks(o);
  REQUIRE(results.size() >= 20);
  for (const auto& r : results) {
    CAPTURE(r.name);
    CHECK(r.pass);
    CHECK(r.points > 0);
  }
}

TEST_CASE("module sweeps") {
  CheckOptions o;
  const auto results = module_checks(o);
  REQUIRE(results.size() >= 10);
  for (const auto& r : results) {
    CAPTURE(r.name);
    CHECK(r.pass);
  }
}

TEST_CASE("full layer sweep across seeds") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    CheckOptions o;
    o.seed = seed;
    const CheckResult r = ach_layer_fd(o);
    CAPTURE(seed);
    CAPTURE(r.max_rel);
    CHECK(r.pass);
  }
}

TEST_CASE("float path with widened tolerances") {
  const CheckOptions o = f32_options(3);
  CHECK(o.f32);
  CHECK(o.tol > 1e-4);
  const CheckResult r = ach_layer_fd(o);
  CAPTURE(r.max_rel);
  CHECK(r.pass);
}

TEST_CASE("the harness notices a planted sign error") {
  CheckOptions o;
  const CheckResult r = dysoft_sign_sentinel(o);
  CHECK(r.pass);  // pass means the corruption was flagged
  CHECK(r.max_rel > 10.0 * o.tol);
}
