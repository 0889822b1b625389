#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "ctb/error.hpp"
#include "ctb/kernel.hpp"
#include "ctb/parallel.hpp"
#include "ctb/rng.hpp"

using namespace ctb;

namespace {

DecayFunction fam(DecayFamily f, double p) { return DecayFunction(f, p); }

AdmissibleTriple example_triple() {
  return AdmissibleTriple::detect(fam(DecayFamily::power, 1), fam(DecayFamily::saturating, 1),
                                  fam(DecayFamily::inverse_power, 1));
}

AdmissibleTriple cauchy_triple() {
  return AdmissibleTriple::detect(fam(DecayFamily::power, 1), fam(DecayFamily::saturating, 0.5),
                                  fam(DecayFamily::inverse_power, 1));
}

Cube unit_cube(std::int64_t k) { return DyadicCube{0, {k, 0}, 1}.to_cube(); }

}  // namespace

TEST_CASE("decay families") {
  CHECK(fam(DecayFamily::power, 2)(1.0) == doctest::Approx(0.25));
  CHECK(fam(DecayFamily::exponential, 1)(1.0) == doctest::Approx(std::exp(-1.0)));
  CHECK(fam(DecayFamily::saturating, 0.5)(0.25) == doctest::Approx(0.5));
  CHECK(fam(DecayFamily::saturating, 0.5)(4.0) == 1.0);
  CHECK(fam(DecayFamily::constant, 3)(7.0) == 3.0);
  CHECK(fam(DecayFamily::inverse_power, 1)(1.5) == doctest::Approx(2.0 / 3));
  CHECK(DecayFunction::parse("power:1.5").parameter() == 1.5);
  CHECK(DecayFunction::parse("constant").family() == DecayFamily::constant);
  CHECK_THROWS_AS(DecayFunction::parse("cubic:1"), ConfigError);
  CHECK_THROWS_AS(DecayFunction::parse("power:x"), ConfigError);
  CHECK_THROWS_AS(DecayFunction::parse("power:-1"), ConfigError);
  CHECK(DecayFunction::parse(fam(DecayFamily::power, 0.1).describe()).parameter() == 0.1);
}

TEST_CASE("triple validation") {
  const auto t = example_triple();
  CHECK(t.limit_L());
  CHECK(t.limit_S());
  CHECK(t.limit_D());
  CHECK_FALSE(AdmissibleTriple::constant().limit_L());
  // S must be non-decreasing and L, D non-increasing.
  CHECK_THROWS_AS(AdmissibleTriple(fam(DecayFamily::saturating, 1), fam(DecayFamily::constant, 1),
                                   fam(DecayFamily::constant, 1), false, false, false),
                  ConfigError);
  CHECK_THROWS_AS(AdmissibleTriple(fam(DecayFamily::constant, 1), fam(DecayFamily::power, 1),
                                   fam(DecayFamily::constant, 1), false, false, false),
                  ConfigError);
  // Declared limit that the samples contradict.
  CHECK_THROWS_AS(AdmissibleTriple(fam(DecayFamily::constant, 1), fam(DecayFamily::constant, 1),
                                   fam(DecayFamily::constant, 1), true, false, false),
                  ConfigError);
  CHECK_THROWS_AS(AdmissibleTriple(fam(DecayFamily::constant, 1), fam(DecayFamily::constant, 1),
                                   DecayFunction::custom([](double a) { return -a; }, "neg"), false,
                                   false, false),
                  ConfigError);
}

TEST_CASE("triple F") {
  const auto t = example_triple();
  CHECK(t.F(1, 1, 1.5) == doctest::Approx(1.0 / 3).epsilon(1e-15));
  CHECK(t.F(3, 0, 2) == 0.0);
  CHECK(AdmissibleTriple::constant().F(0.3, 7, 100) == 1.0);
}

TEST_CASE("tilde L against direct summation") {
  const auto c = AdmissibleTriple::constant();
  CHECK(tilde_L(c, 1.0, 1).value == doctest::Approx(2.0).epsilon(1e-13));
  CHECK(tilde_L(c, 1.0, 2).value == doctest::Approx(4.0 / 3).epsilon(1e-13));
  const auto t = example_triple();
  for (double side : {0.25, 1.0, 8.0}) {
    long double oracle = 0;
    for (int k = 0; k < 300; ++k) oracle += std::ldexp(1.0L, -k) / (1.0L + std::ldexp((long double)side, -k));
    const auto got = tilde_L(t, side, 1, 1e-12);
    CHECK(std::abs(got.value - static_cast<double>(oracle)) < 1e-12);
    CHECK(got.terms <= kSeriesCap);
  }
  const auto def = tilde_L(t, 1.0, 1);
  CHECK(def.tail_bound < kSeriesTolerance);
}

TEST_CASE("tilde D against exact rdist") {
  const auto t = example_triple();
  for (std::int64_t k : {-3, 0, 2, 9}) {
    const Cube I = unit_cube(k);
    double oracle = 0;
    for (int j = 0; j < 50; ++j) {
      const Rational r = rdist(I.dilate(Rational::pow2(j)), unit_ball(1));
      oracle += std::pow(2.0, -j) / std::max(1.0, r.to_double());
    }
    CHECK(tilde_D(t, I, 1.0).value == doctest::Approx(oracle).epsilon(1e-13));
  }
}

TEST_CASE("tilde functions vanish along the declared limits") {
  const auto t = example_triple();
  double prev = tilde_L(t, 1.0, 1).value;
  for (int s = 1; s <= 5; ++s) {
    const double v = tilde_L(t, std::ldexp(1.0, 3 * s), 1).value;
    CHECK(v < prev - 1e-12);
    prev = v;
  }
  CHECK(prev < 0.1);
  prev = tilde_D(t, unit_cube(0), 1.0).value;
  for (int s = 1; s <= 5; ++s) {
    const double v = tilde_D(t, unit_cube(std::int64_t{1} << (3 * s)), 1.0).value;
    CHECK(v < prev - 1e-12);
    prev = v;
  }
}

TEST_CASE("pointwise profiles") {
  const auto t = example_triple();
  const double one = 1, zero = 0;
  CHECK(fk_pointwise(t, {&one, 1}, {&zero, 1}) == doctest::Approx(1.0 / 3));
  const double a = 0.7, b = -0.7;
  const double r = 1.4;
  CHECK(fk_pointwise(t, {&a, 1}, {&b, 1}) == doctest::Approx(t.L()(r) * t.S()(r) * t.D()(1.0)));
  CHECK(fk_smooth(t, {&a, 1}, {&b, 1}, {&a, 1}, {&b, 1}) == 0.0);
  CHECK_THROWS_AS(fk_pointwise(t, {&a, 1}, {&a, 1}), DomainError);
}

TEST_CASE("shell bound") {
  CHECK(shell_bound(AdmissibleTriple::constant(), unit_cube(4), unit_cube(0)) == 1.0);
  const auto t = example_triple();
  // <I,J> = [0,5), whose envelope with [-1/2,1/2) has side 11/2.
  CHECK(shell_bound(t, unit_cube(4), unit_cube(0)) == doctest::Approx((1.0 / 6) * 1.0 * (5.0 / 5.5)));

  // Non-increasing as the pair moves away from the origin.
  double prev = 2;
  for (std::int64_t shift = 0; shift < 200; shift += 7) {
    const double v = shell_bound(t, unit_cube(shift + 3), unit_cube(shift));
    CHECK(v <= prev * (1 + 1e-15));
    prev = v;
  }

  // Dominance on t in I with l<I,J>/2 < |t - c(J)| <= l<I,J>, x in J.
  Rng rng(5);
  double worst = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const DyadicCube Id{static_cast<int>(rng.integer(-3, 2)), {rng.integer(-20, 20), 0}, 1};
    const DyadicCube Jd{static_cast<int>(rng.integer(-3, 2)), {rng.integer(-20, 20), 0}, 1};
    const Cube I = Id.to_cube(), J = Jd.to_cube();
    const double env = enclosing(I, J).side.to_double();
    const double c = J.center(0).to_double();
    const double ts = rng.uniform(I.corner[0].to_double(), (I.corner[0] + I.side).to_double());
    if (!(std::abs(ts - c) > env / 2 && std::abs(ts - c) <= env)) continue;
    const double xs = rng.uniform(J.corner[0].to_double(), (J.corner[0] + J.side).to_double());
    worst = std::max(worst, fk_centered(t, {&ts, 1}, {&xs, 1}, {&c, 1}) / shell_bound(t, I, J));
  }
  CHECK(worst > 0);
  CHECK(worst <= 16);
}

TEST_CASE("built-in kernels") {
  KernelParams p;
  CHECK(make_kernel("hilbert", p)(1.0, 0.0) == Scalar(1.0));
  CHECK_THROWS_AS(make_kernel("hilbert", p)(1.0, 1.0), DomainError);
  p.triple = cauchy_triple();
  const auto k = make_kernel("compact_cauchy", p);
  Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    const double t = rng.uniform(-5, 5), x = rng.uniform(-5, 5);
    CHECK(k(t, x) == -k(x, t));
  }
  CHECK(k(1.0, 0.0).real() == doctest::Approx(fk_pointwise(p.triple, std::vector<double>{1.0},
                                                           std::vector<double>{0.0})));
  p.amplitude = 0.0;
  const auto flat = make_kernel("dlp_graph", p);
  CHECK(flat(0.3, -1.2) == Scalar(0.0));
  CHECK_FALSE(flat.antisymmetric());
  CHECK(make_kernel("zero", p)(0.2, 0.1) == Scalar(0.0));
  CHECK_THROWS_AS(make_kernel("nope", p), ConfigError);
  CHECK_THROWS_AS(make_kernel("custom", p), ConfigError);
  p.dim = 2;
  CHECK_THROWS_AS(make_kernel("hilbert", p), ConfigError);
  p.delta = 0;
  CHECK_THROWS_AS(make_kernel("zero", p), ConfigError);
}

TEST_CASE("smoothness and decay checks") {
  KernelParams p;
  const auto zero = make_kernel("zero", p);
  CHECK(check_smoothness(zero, log_radial_sampler(1, 1, 4, 1e-3, 1e2), 1000).worst_ratio == 0);
  CHECK(check_decay(zero, log_radial_sampler(1, 1, 4, 1e-3, 1e2), 1000).worst_ratio == 0);

  // |1/r - 1/r'| <= h / (r r') with r' >= r/2 gives ratio <= 2 in closed form.
  const auto hil = make_kernel("hilbert", p);
  const auto hs = check_smoothness(hil, log_radial_sampler(2, 1, 4, 1e-3, 1e2), 100000);
  CHECK(hs.samples_checked == 100000);
  CHECK(hs.worst_ratio <= 2.0 + 1e-12);
  CHECK(hs.worst_ratio <= 8.0);
  CHECK(hs.worst_configuration.size() == 4);
  const auto hd = check_decay(hil, log_radial_sampler(2, 1, 4, 1e-3, 1e2), 10000);
  CHECK(hd.worst_ratio == doctest::Approx(1.0).epsilon(1e-14));

  p.triple = cauchy_triple();
  const auto cc = make_kernel("compact_cauchy", p);
  const double r1 = check_smoothness(cc, log_radial_sampler(9, 1, 20, 1e-3, 1e3), 20000).worst_ratio;
  const double r2 = check_smoothness(cc, log_radial_sampler(9, 1, 20, 1e-3, 1e3), 40000).worst_ratio;
  CHECK(std::isfinite(r1));
  CHECK(r2 >= r1);
  CHECK(r2 <= 1.25 * r1);
  CHECK(check_decay(cc, log_radial_sampler(9, 1, 20, 1e-3, 1e3), 1000).worst_ratio ==
        doctest::Approx(1.0).epsilon(1e-12));

  p.triple = AdmissibleTriple::constant();
  p.amplitude = 1.0;
  p.alpha = 0.5;
  const auto dlp = make_kernel("dlp_graph", p);
  const double d1 = check_decay(dlp, log_radial_sampler(4, 1, 2, 1e-3, 1), 20000).worst_ratio;
  const double d2 = check_decay(dlp, log_radial_sampler(4, 1, 2, 1e-3, 1), 40000).worst_ratio;
  CHECK(std::isfinite(d1));
  CHECK(d2 <= 1.25 * d1);

  // Parallel evaluation does not change the report.
  set_thread_count(4);
  const auto hs4 = check_smoothness(hil, log_radial_sampler(2, 1, 4, 1e-3, 1e2), 100000);
  set_thread_count(1);
  CHECK(hs4.worst_ratio == hs.worst_ratio);
  CHECK(hs4.worst_configuration == hs.worst_configuration);

  int calls = 0;
  KernelSampler limited = [&]() -> std::optional<KernelSample> {
    if (calls++ >= 10) return std::nullopt;
    return KernelSample{{1.0}, {0.0}, {1.0}, {0.1}};
  };
  const auto short_rep = check_smoothness(hil, limited, 100);
  CHECK(short_rep.exhausted);
  CHECK(short_rep.samples_checked == 10);
}

TEST_CASE("holder kernel keeps its exponent") {
  KernelParams p;
  p.delta = 0.5;
  const auto k = make_kernel("holder_cauchy", p);
  const auto rep = check_smoothness(k, log_radial_sampler(8, 1, 2, 1e-3, 1e2), 20000);
  CHECK(std::isfinite(rep.worst_ratio));
  // Perturbing x off the anchor: the difference scales like h^delta, so the
  // delta = 1/2 ratio stays bounded while a Lipschitz claim blows up.
  const CompactKernel claimed("holder_claim",
                              [&](std::span<const double> t, std::span<const double> x) { return k(t, x); },
                              AdmissibleTriple::constant(), 1.0, 1);
  double prev_claim = 0;
  for (int e = 2; e <= 10; e += 2) {
    const double h = std::pow(10.0, -e);
    bool used = false;
    KernelSampler one = [&]() -> std::optional<KernelSample> {
      if (used) return std::nullopt;
      used = true;
      return KernelSample{{1.0}, {0.0}, {1.0}, {h}};
    };
    const double honest = check_smoothness(k, one, 1).worst_ratio;
    used = false;
    const double claim = check_smoothness(claimed, one, 1).worst_ratio;
    CHECK(honest <= 4.0);
    CHECK(claim > prev_claim * 5);
    prev_claim = claim;
  }
}
