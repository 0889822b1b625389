#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <sstream>
#include <vector>

#include "ctb/error.hpp"
#include "ctb/wavelets.hpp"
#include "test_support.hpp"

using namespace ctb;
using namespace ctb::testing;

namespace {

GridFunction ones(const Region& r) { return GridFunction::constant(r, 1.0); }

double norm_q(const GridFunction& f, double q) { return f.lp_norm(q); }

GridFunction direct_synthesis(const WaveletSystem& sys, const WaveletCoeffs& c, bool dual) {
  GridFunction out(sys.region());
  for (std::size_t I = 1; I < c.size(); ++I) {
    out += c[I] * (dual ? dual_wavelet(sys, I) : wavelet(sys, I));
  }
  return out;
}

}  // namespace

TEST_CASE("averages on simple testing functions") {
  const Region r = interval(0, 0, -6);
  const WaveletSystem one(ones(r));
  for (std::size_t f = 0; f < r.cube_count(); ++f) {
    CHECK(std::abs(one.average(f) - 1.0) < 1e-15);
    CHECK(one.q_average(f, 2.0) == doctest::Approx(1.0));
    CHECK(one.q_average(f, kInfinity) == 1.0);
  }
  const GridFunction x = GridFunction::sample(r, [](std::span<const double> p) { return Scalar(p[0]); });
  CHECK(std::abs(WaveletSystem(x).average(0) - 0.5) < 1e-15);

  Rng rng(11);
  const WaveletSystem sys(random_b(r, rng));
  for (std::size_t f = 0; f < r.cube_count(); ++f) {
    CHECK(std::abs(sys.average(f)) <= sys.q_average(f, 1.0) * (1 + 1e-14));
    CHECK(sys.q_average(f, 1.0) <= sys.q_average(f, 2.0) * (1 + 1e-14));
    CHECK(sys.q_average(f, 2.0) <= sys.q_average(f, kInfinity) * (1 + 1e-14));
  }
}

TEST_CASE("tree averages agree with direct cell sums") {
  Rng rng(3);
  for (const Region& r : {interval(2, 1, -3), square(0, -1, 0, -3)}) {
    const GridFunction f = random_f(r, rng);
    const auto avg = tree_averages(r, f.values());
    for (std::size_t q = 0; q < r.cube_count(); ++q) {
      CHECK(std::abs(avg[q] - direct_average(r, f.values(), r.cube(q))) < 1e-13);
    }
  }
}

TEST_CASE("maximal function") {
  const Region r = interval(0, 0, -5);
  for (double m : maximal(r, ones(r).values(), 2.0)) CHECK(m == doctest::Approx(1.0));

  GridFunction spike(r);
  spike[7] = 3.0;
  const auto ms = maximal(r, spike.values(), 2.0);
  CHECK(ms[7] == doctest::Approx(3.0));
  CHECK(ms[8] < 3.0);

  Rng rng(5);
  const GridFunction b = random_b(r, rng);
  const auto mb = maximal(r, b.values(), 1.5);
  const auto qa = tree_q_averages(r, b.values(), 1.5);
  for (std::size_t c = 0; c < r.cell_count(); ++c) {
    for (int d = 0; d <= r.depth(); ++d) CHECK(mb[c] >= qa[r.ancestor_of_cell(c, d)]);
  }
  const std::size_t sub = 1;
  const auto mr = maximal_restricted(r, b.values(), 1.5, sub);
  for (std::size_t c = 0; c < r.cell_count(); ++c) {
    if (r.ancestor_of_cell(c, 1) != sub) CHECK(mr[c] <= mb[c]);
    CHECK(mr[c] <= mb[c] + 1e-15);
  }
}

TEST_CASE("accretivity constants") {
  const Region r = interval(0, 0, -4);
  const WaveletSystem one(ones(r));
  const CbConstants c1 = cb_constants(one, 3, 2.0);
  CHECK(c1.C == doctest::Approx(2.0));
  CHECK(c1.B == doctest::Approx(2.0));

  const WaveletSystem cst(GridFunction::constant(r, Scalar(0, -0.25)));
  const CbConstants c2 = cb_constants(cst, 5, 3.0);
  CHECK(c2.C == doctest::Approx(8.0));
  CHECK(c2.B == doctest::Approx(2.0));
  CHECK_THROWS_AS(cb_constants(one, 0, 2.0), DomainError);

  Rng rng(8);
  const GridFunction b = random_b(r, rng);
  const WaveletSystem sys(b);
  for (std::size_t I = 1; I < r.cube_count(); ++I) {
    const DyadicCube q = r.cube(I), p = r.cube(r.parent_flat(I));
    std::vector<Scalar> b2(b.size());
    for (std::size_t k = 0; k < b2.size(); ++k) b2[k] = std::norm(b[k]);
    const double aI = std::abs(direct_average(r, b.values(), q));
    const double aP = std::abs(direct_average(r, b.values(), p));
    const double sI = std::sqrt(direct_average(r, b2, q).real());
    const double sP = std::sqrt(direct_average(r, b2, p).real());
    const CbConstants c = cb_constants(sys, I, 2.0);
    CHECK(c.C == doctest::Approx(1 / aI + 1 / aP).epsilon(1e-12));
    CHECK(c.B == doctest::Approx(sI / aI + sP / aP).epsilon(1e-12));
  }
}

TEST_CASE("degenerate testing functions are rejected") {
  const Region r = interval(0, 0, -3);
  std::vector<Scalar> v(r.cell_count(), 1.0);
  for (std::size_t i = 4; i < 8; ++i) v[i] = -1.0;
  try {
    WaveletSystem sys(GridFunction(r, v));
    FAIL("expected a degenerate average");
  } catch (const DegenerateError& e) {
    CHECK(std::string(e.what()).find("0:0") != std::string::npos);
  }
  v[0] = 0;
  v[1] = 0;
  v[4] = 1;
  CHECK_THROWS_AS(WaveletSystem(GridFunction(r, v)), DegenerateError);
  CHECK_THROWS_AS(TestingPair(ones(r), ones(r), 2.0, 2.0), ConfigError);
  CHECK_NOTHROW(TestingPair(ones(r), ones(r), 3.0, 2.0));
}

TEST_CASE("Haar bump") {
  const Region r = interval(0, 0, -3);
  const WaveletSystem one(ones(r));
  const auto left = r.find(DyadicCube{-1, {0, 0}, 1});
  REQUIRE(left);
  const GridFunction h = haar_bump(one, *left);
  const double s = std::sqrt(0.5);
  for (std::size_t c = 0; c < 4; ++c) CHECK(h[c].real() == doctest::Approx(s));
  for (std::size_t c = 4; c < 8; ++c) CHECK(h[c].real() == doctest::Approx(-s));
  CHECK_THROWS_AS(haar_bump(one, 0), DomainError);

  Rng rng(9);
  const Region r2 = interval(1, -1, -4);
  const WaveletSystem sys(random_b(r2, rng));
  for (std::size_t I = 1; I < r2.cube_count(); ++I) {
    const GridFunction hb = haar_bump(sys, I);
    CHECK(std::abs(pairing(hb, sys.b())) < 1e-12);
    const double vol = cube_volume(r2, I);
    for (double q : {1.5, 2.0, 4.0}) {
      const CbConstants c = cb_constants(sys, I, q);
      const double scale = std::pow(vol, 1 / q - 0.5);
      CHECK(norm_q(hb, q) <= 2 * c.C * scale * (1 + 1e-12));
      CHECK(norm_q(hb * sys.b(), q) <= 2 * c.B * scale * (1 + 1e-12));
    }
  }
}

TEST_CASE("wavelets have the mean-zero identities") {
  Rng rng(10);
  const Region r = square(0, 0, 0, -3);
  const WaveletSystem sys(random_b(r, rng));
  for (std::size_t I = 1; I < r.cube_count(); ++I) {
    CHECK(std::abs(wavelet(sys, I).integral()) < 1e-12);
    CHECK(std::abs(pairing(dual_wavelet(sys, I), sys.b())) < 1e-12);
  }
  const Region r1 = interval(0, 0, -3);
  const WaveletSystem one(ones(r1));
  for (std::size_t I = 1; I < r1.cube_count(); ++I) {
    CHECK(max_abs_diff(wavelet(one, I), dual_wavelet(one, I)) < 1e-15);
  }
}

TEST_CASE("expectations and differences") {
  Rng rng(12);
  const Region r = interval(0, 0, -5);
  const GridFunction b = random_b(r, rng);
  const WaveletSystem sys(b);
  for (std::size_t Q = 0; Q < r.level_offset(r.depth()); ++Q) {
    CHECK(max_abs_diff(expectation(sys, b, Q), b.restricted(Q)) < 1e-14);
    CHECK(difference(sys, b, Q).sup_norm() < 1e-14);
  }
  CHECK_THROWS_AS(difference(sys, b, r.cube_count() - 1), DomainError);

  // Classical conditional expectation for b = 1.
  const WaveletSystem one(ones(r));
  const GridFunction f = random_f(r, rng);
  const GridFunction e = expectation_level(one, f, 2);
  for (std::size_t c = 0; c < r.cell_count(); ++c) {
    const DyadicCube a = r.cube(r.ancestor_of_cell(c, 2));
    CHECK(std::abs(e[c] - direct_average(r, f.values(), a)) < 1e-13);
  }

  // Telescoping over every window of levels.
  for (int k0 = 0; k0 < r.depth(); ++k0) {
    for (int k1 = k0 + 1; k1 <= r.depth(); ++k1) {
      GridFunction sum(r);
      for (int k = k0; k < k1; ++k) sum += difference_level(sys, f, k);
      const GridFunction want = expectation_level(sys, f, k1) - expectation_level(sys, f, k0);
      CHECK(max_abs_diff(sum, want) < 1e-12);
    }
  }

  // Level difference is the sum of cube differences, and each one expands into
  // the children's wavelets.
  const WaveletCoeffs c = analyze(sys, f);
  const WaveletCoeffs cd = dual_analyze(sys, f);
  for (std::size_t Q = 0; Q < r.level_offset(r.depth()); ++Q) {
    GridFunction exp(r), exp_adj(r);
    for (std::size_t I : r.children_flat(Q)) {
      exp += c[I] * wavelet(sys, I);
      exp_adj += cd[I] * dual_wavelet(sys, I);
    }
    CHECK(max_abs_diff(difference(sys, f, Q), exp) < 1e-12);
    CHECK(max_abs_diff(difference_adjoint(sys, f, Q), exp_adj) < 1e-12);
  }
  GridFunction lvl(r);
  for (std::size_t Q = r.level_offset(3); Q < r.level_offset(4); ++Q) lvl += difference(sys, f, Q);
  CHECK(max_abs_diff(lvl, difference_level(sys, f, 3)) < 1e-12);
}

TEST_CASE("analysis is the pairing with each dual wavelet") {
  Rng rng(13);
  for (const Region& r : {interval(1, 0, -4), square(0, 0, -1, -2)}) {
    const WaveletSystem sys(random_b(r, rng));
    const GridFunction f = random_f(r, rng);
    const WaveletCoeffs c = analyze(sys, f);
    const WaveletCoeffs cd = dual_analyze(sys, f);
    CHECK(c[0] == Scalar(0));
    for (std::size_t I = 1; I < r.cube_count(); ++I) {
      CHECK(std::abs(c[I] - pairing(f, dual_wavelet(sys, I))) < 1e-12);
      CHECK(std::abs(cd[I] - pairing(f, wavelet(sys, I))) < 1e-12);
    }
    CHECK(max_abs_diff(synthesize(sys, c), direct_synthesis(sys, c, false)) < 1e-11);
    CHECK(max_abs_diff(dual_synthesize(sys, cd), direct_synthesis(sys, cd, true)) < 1e-11);
  }
}

TEST_CASE("classical transform for the constant testing function") {
  // Independent classical martingale coefficients |I|^(1/2) (<f>_I - <f>_P).
  Rng rng(14);
  const Region r = interval(0, 0, -6);
  const WaveletSystem one(ones(r));
  const GridFunction f = mean_zero(random_f(r, rng));
  const WaveletCoeffs c = analyze(one, f);
  for (std::size_t I = 1; I < r.cube_count(); ++I) {
    const DyadicCube q = r.cube(I);
    const Scalar want = std::sqrt(q.side_d()) * (direct_average(r, f.values(), q) -
                                                 direct_average(r, f.values(), parent(q)));
    CHECK(std::abs(c[I] - want) < 1e-13);
  }
  CHECK(max_abs_diff(synthesize(one, c), f) < 1e-12);
  GridFunction classical(r);
  for (std::size_t I = 1; I < r.cube_count(); ++I) {
    // h_I = |I|^(-1/2) on I minus |I|^(1/2)/|P| on P.
    const auto pc = r.cells_of(r.parent_flat(I));
    const double vi = cube_volume(r, I);
    for (std::size_t k : pc) classical[k] -= c[I] * std::sqrt(vi) / (2 * vi);
    for (std::size_t k : r.cells_of(I)) classical[k] += c[I] / std::sqrt(vi);
  }
  CHECK(max_abs_diff(classical, f) < 1e-12);
}

TEST_CASE("reconstruction and dual reconstruction") {
  Rng rng(15);
  for (const Region& r : {interval(0, 0, -10), square(1, -1, 0, -3)}) {
    for (int trial = 0; trial < 5; ++trial) {
      const WaveletSystem sys(random_b(r, rng));
      const GridFunction f = mean_zero(random_f(r, rng));
      const GridFunction back = synthesize(sys, analyze(sys, f)) + root_expectation(sys, f);
      CHECK(max_abs_diff(back, f) <= 1e-10 * f.sup_norm());
      const GridFunction g = mean_zero_against(random_f(r, rng), sys.b());
      CHECK(root_expectation_adjoint(sys, g).sup_norm() < 1e-12 * g.sup_norm());
      const GridFunction dback = dual_synthesize(sys, dual_analyze(sys, g));
      CHECK(max_abs_diff(dback, g) <= 1e-10 * g.sup_norm());
    }
  }
  // Without mean zero the coarse terms carry the rest.
  const Region r = interval(0, 0, -5);
  const WaveletSystem sys(random_b(r, rng));
  const GridFunction f = random_f(r, rng);
  CHECK(max_abs_diff(dual_synthesize(sys, dual_analyze(sys, f)) + root_expectation_adjoint(sys, f), f) < 1e-12);
}

TEST_CASE("bilinearity") {
  Rng rng(16);
  const Region r = interval(0, 0, -6);
  const WaveletSystem sys(random_b(r, rng));
  const GridFunction f = random_f(r, rng), g = random_f(r, rng);
  const Scalar a(0.3, -1.2), s(-2.0, 0.5);
  const WaveletCoeffs cf = analyze(sys, f), cg = analyze(sys, g), cs = analyze(sys, a * f + s * g);
  double worst = 0, scale = 0;
  std::vector<Scalar> mix(r.cube_count());
  for (std::size_t I = 1; I < cs.size(); ++I) {
    mix[I] = a * cf[I] + s * cg[I];
    worst = std::max(worst, std::abs(cs[I] - mix[I]));
    scale = std::max(scale, std::abs(cs[I]));
  }
  CHECK(worst <= 1e-12 * scale);
  const GridFunction lhs = synthesize(sys, WaveletCoeffs(r, mix));
  const GridFunction rhs = a * synthesize(sys, cf) + s * synthesize(sys, cg);
  CHECK(max_abs_diff(lhs, rhs) <= 1e-12 * rhs.sup_norm());
}

TEST_CASE("Gram closed form") {
  const Region r1 = interval(0, 0, -3);
  const WaveletSystem one(ones(r1));
  const std::size_t left = *r1.find(DyadicCube{-1, {0, 0}, 1});
  CHECK(gram(one, left, left) == Scalar(0.5));
  CHECK(gram(one, 3, 5) == Scalar(0.0));

  Rng rng(17);
  for (const Region& r : {interval(0, 0, -6), square(0, 0, 0, -2)}) {
    const WaveletSystem sys(random_b(r, rng));
    std::vector<GridFunction> psi, dual;
    for (std::size_t I = 0; I < r.cube_count(); ++I) {
      psi.push_back(I ? wavelet(sys, I) : GridFunction(r));
      dual.push_back(I ? dual_wavelet(sys, I) : GridFunction(r));
    }
    double worst = 0;
    for (std::size_t I = 1; I < r.cube_count(); ++I) {
      for (std::size_t J = 1; J < r.cube_count(); ++J) {
        worst = std::max(worst, std::abs(gram(sys, I, J) - pairing(psi[I], dual[J])));
      }
    }
    CHECK(worst <= 1e-12);

    // Sibling sums: the dual wavelets of a family cancel; the wavelets cancel
    // with weights |I| <b>_I.
    for (std::size_t Q = 0; Q < r.level_offset(r.depth()); ++Q) {
      GridFunction sd(r), sw(r);
      for (std::size_t I : r.children_flat(Q)) {
        sd += dual[I];
        sw += (cube_volume(r, I) * sys.average(I)) * psi[I];
      }
      CHECK(sd.sup_norm() <= 1e-12);
      CHECK(sw.sup_norm() <= 1e-12);
    }
  }
}

TEST_CASE("coefficient round trip") {
  Rng rng(18);
  const Region r = interval(0, 0, -5);
  const WaveletSystem sys(random_b(r, rng));
  std::vector<Scalar> alpha(r.cube_count());
  for (std::size_t I = 1; I < alpha.size(); ++I) alpha[I] = Scalar(rng.normal(), rng.normal());
  const WaveletCoeffs back = analyze(sys, synthesize(sys, WaveletCoeffs(r, alpha)));

  // Arbitrary sequences come back with the sibling correction.
  for (std::size_t I = 1; I < alpha.size(); ++I) {
    const std::size_t p = r.parent_flat(I);
    Scalar sib = 0;
    for (std::size_t J : r.children_flat(p)) sib += alpha[J];
    const Scalar want = alpha[I] - cube_volume(r, I) * sys.average(I) / (cube_volume(r, p) * sys.average(p)) * sib;
    CHECK(std::abs(back[I] - want) < 1e-11);
  }
  // Sequences with vanishing sibling sums are reproduced exactly.
  for (std::size_t Q = 0; Q < r.level_offset(r.depth()); ++Q) {
    const auto ch = r.children_flat(Q);
    Scalar s = 0;
    for (std::size_t J : ch) s += alpha[J];
    for (std::size_t J : ch) alpha[J] -= s / static_cast<double>(ch.size());
  }
  const WaveletCoeffs again = analyze(sys, synthesize(sys, WaveletCoeffs(r, alpha)));
  for (std::size_t I = 1; I < alpha.size(); ++I) CHECK(std::abs(again[I] - alpha[I]) < 1e-11);
}

TEST_CASE("coefficient CSV round trip") {
  Rng rng(19);
  const Region r = square(0, 0, 0, -2);
  const WaveletSystem sys(random_b(r, rng));
  const WaveletCoeffs c = analyze(sys, random_f(r, rng));
  std::stringstream ss;
  c.write_csv(ss);
  const WaveletCoeffs back = WaveletCoeffs::read_csv(r, ss);
  for (std::size_t I = 0; I < c.size(); ++I) CHECK(back[I] == c[I]);
  std::stringstream bad("cube,re,im\n5:0,0,1,2\n");
  CHECK_THROWS_AS(WaveletCoeffs::read_csv(r, bad), IoError);

  std::stringstream gs;
  const GridFunction f = random_f(r, rng);
  f.write_csv(gs);
  const GridFunction fb = GridFunction::read_csv(r, gs);
  CHECK(max_abs_diff(f, fb) == 0.0);
  std::stringstream short_csv("cell,re,im\n0,1,0\n");
  CHECK_THROWS_AS(GridFunction::read_csv(r, short_csv), IoError);
}

TEST_CASE("lagom projections") {
  Rng rng(20);
  const Region r = interval(0, 0, -6);
  const WaveletSystem sys(random_b(r, rng));
  const GridFunction f = random_f(r, rng);

  // Every cube of [0,1) down to 2^-6 is moderate for M = 6.
  const GridFunction perp = lagom_project(sys, f, 6, LagomVariant::P_perp);
  CHECK(max_abs_diff(perp, root_expectation(sys, f)) < 1e-12);
  const GridFunction sperp = lagom_project(sys, f, 6, LagomVariant::P_star_perp);
  CHECK(max_abs_diff(sperp, root_expectation_adjoint(sys, f)) < 1e-12);

  // M = 3 keeps levels down to 2^-3, whole sibling families.
  for (std::size_t I = 1; I < r.cube_count(); ++I) {
    if (r.depth_of(I) > 3) continue;
    const GridFunction psi = wavelet(sys, I);
    CHECK(max_abs_diff(lagom_project(sys, psi, 3, LagomVariant::P), psi) < 1e-12);
  }
  for (LagomVariant v : {LagomVariant::P, LagomVariant::P_star}) {
    const GridFunction p1 = lagom_project(sys, f, 3, v);
    const GridFunction p2 = lagom_project(sys, p1, 3, v);
    CHECK(max_abs_diff(p1, p2) <= 1e-10 * p1.sup_norm());
  }
}

TEST_CASE("lagom projection on a split sibling family") {
  // For M = 2 the siblings [0,4) and [4,8) fall on opposite sides of the
  // moderate family, so idempotence fails by exactly the sibling correction.
  Rng rng(21);
  const Region r = interval(4, 0, -1);
  const auto mask = moderate_mask(r, 2);
  const std::size_t a = *r.find(DyadicCube{2, {0, 0}, 1});
  const std::size_t b = *r.find(DyadicCube{2, {1, 0}, 1});
  REQUIRE(mask[a]);
  REQUIRE_FALSE(mask[b]);
  const WaveletSystem sys(random_b(r, rng));
  const GridFunction f = random_f(r, rng);
  const GridFunction p1 = lagom_project(sys, f, 2, LagomVariant::P);
  const GridFunction p2 = lagom_project(sys, p1, 2, LagomVariant::P);
  CHECK(max_abs_diff(p1, p2) > 1e-6);

  WaveletCoeffs c = analyze(sys, f);
  for (std::size_t I = 1; I < c.size(); ++I) {
    if (!mask[I]) c[I] = 0;
  }
  const WaveletCoeffs c2 = analyze(sys, p1);
  for (std::size_t I = 1; I < c.size(); ++I) {
    if (!mask[I]) continue;
    const std::size_t p = r.parent_flat(I);
    Scalar sib = 0;
    for (std::size_t J : r.children_flat(p)) sib += c[J];
    const Scalar want = c[I] - cube_volume(r, I) * sys.average(I) / (cube_volume(r, p) * sys.average(p)) * sib;
    CHECK(std::abs(c2[I] - want) < 1e-10);
  }
}

TEST_CASE("Carleson embedding") {
  Rng rng(22);
  const Region r = interval(0, 0, -4);
  const WaveletSystem one(ones(r));
  const GridFunction f = random_f(r, rng);
  const std::vector<double> zero(r.cube_count(), 0.0);
  const CarlesonReport z = carleson_check(one, zero, f, kCarlesonEmbed);
  CHECK(z.packing_constant == 0.0);
  CHECK(z.embedding_ratio == 0.0);

  std::vector<double> a(r.cube_count());
  for (std::size_t I = 0; I < a.size(); ++I) a[I] = cube_volume(r, I);
  const CarlesonReport rep = carleson_check(one, a, f, kCarlesonEmbed);
  double brute = 0;
  for (std::size_t I = 0; I < a.size(); ++I) {
    brute += a[I] * std::norm(direct_average(r, f.values(), r.cube(I)));
  }
  CHECK(std::abs(rep.embedding_sum - brute) <= 1e-12 * brute);
  CHECK(rep.packing_constant == doctest::Approx(5.0));
  CHECK(rep.within_bound);

  // Random b, random sequences, and adversarial f = indicator of a small cube.
  for (int trial = 0; trial < 50; ++trial) {
    const Region rr = interval(0, 0, -5);
    const WaveletSystem sys(random_b(rr, rng));
    std::vector<double> aa(rr.cube_count());
    for (double& v : aa) v = rng.uniform() < 0.3 ? rng.uniform() : 0.0;
    GridFunction g = trial % 2 ? random_f(rr, rng) : GridFunction(rr);
    if (trial % 2 == 0) g[static_cast<std::size_t>(rng.integer(0, 31))] = 1.0;
    const CarlesonReport rr_rep = carleson_check(sys, aa, g, kCarlesonEmbed);
    CHECK(rr_rep.within_bound);
  }

  std::vector<double> w(r.cube_count());
  for (double& v : w) v = rng.uniform(0.5, 2.0);
  const CarlesonReport wr = carleson_weighted(r, a, w, f, kCarlesonEmbed);
  double wbrute = 0, pack = 0;
  for (std::size_t I = 0; I < a.size(); ++I) {
    wbrute += a[I] * w[I] * std::norm(direct_average(r, f.values(), r.cube(I)));
    double sub = 0;
    const DyadicCube q = r.cube(I);
    for (std::size_t J = 0; J < a.size(); ++J) {
      const DyadicCube k = r.cube(J);
      if (k.level <= q.level && q.contains(k)) sub += a[J];
    }
    pack = std::max(pack, w[I] * sub / cube_volume(r, I));
  }
  CHECK(std::abs(wr.embedding_sum - wbrute) <= 1e-12 * wbrute);
  CHECK(wr.packing_constant == doctest::Approx(pack).epsilon(1e-12));
  CHECK_THROWS_AS(carleson_check(one, std::vector<double>(3), f, 4.0), DomainError);
}

TEST_CASE("Planche sums") {
  Rng rng(23);
  const Region r = interval(0, 0, -6);
  const WaveletSystem one(ones(r));
  const GridFunction f = random_f(r, rng);
  const auto unit = [](std::size_t, std::size_t) { return 1.0; };
  const auto all = [](std::size_t, std::size_t) { return true; };
  const PlancheReport rep = planche_check(one, f, 3, unit, all);
  // Orthogonality for b = 1: the sum is the squared norm of f minus its mean.
  const double want = std::pow(mean_zero(f).lp_norm(2) / f.lp_norm(2), 2);
  CHECK(rep.bounded == doctest::Approx(want).epsilon(1e-12));
  CHECK(rep.real_sum == doctest::Approx(want).epsilon(1e-12));
  CHECK(rep.dual_sum == doctest::Approx(want).epsilon(1e-12));
  CHECK(rep.bounded <= 1.0);

  // A single wavelet with a weight that selects it.
  const std::size_t I0 = 9;
  const GridFunction psi = wavelet(one, I0);
  const auto pick = [&](std::size_t I, std::size_t) { return I == I0 ? 1.0 : 0.0; };
  const PlancheReport single = planche_check(one, psi, 3, pick, all);
  CHECK(single.bounded == doctest::Approx(std::norm(gram(one, I0, I0)) / std::pow(psi.lp_norm(2), 2)));

  // The tail shrinks as the moderate family grows.
  const WaveletSystem sys(random_b(r, rng));
  double prev = 1e300;
  for (int M = 1; M <= 6; ++M) {
    const double t = planche_check(sys, f, M, unit, all).tail;
    CHECK(t <= prev * (1 + 1e-12));
    prev = t;
  }
  CHECK(prev == 0.0);
}
