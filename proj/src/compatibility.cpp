#include "ctb/compatibility.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "ctb/error.hpp"
#include "ctb/parallel.hpp"

namespace ctb {

namespace {

std::vector<Scalar> as_scalar(const std::vector<double>& v) {
  return std::vector<Scalar>(v.begin(), v.end());
}

std::vector<double> real_tree_averages(const Region& r, const std::vector<double>& cells) {
  const std::vector<Scalar> avg = tree_averages(r, as_scalar(cells));
  std::vector<double> out(avg.size());
  for (std::size_t i = 0; i < avg.size(); ++i) out[i] = avg[i].real();
  return out;
}

void tabulate(const WaveletSystem& sys, double q, std::vector<double>& c, std::vector<double>& m,
              std::vector<double>& restricted, std::vector<double>& ratio,
              std::vector<double>& pratio) {
  const Region& r = sys.region();
  const std::size_t n = r.cube_count();
  c.assign(n, 0.0);
  ratio.assign(n, 0.0);
  pratio.assign(n, 0.0);
  const std::vector<double>& qa = sys.q_averages(q);
  for (std::size_t I = 0; I < n; ++I) {
    ratio[I] = qa[I] / std::abs(sys.average(I));
    if (I == 0) continue;
    const std::size_t p = r.parent_flat(I);
    c[I] = cb_constants(sys, I, q).C;
    pratio[I] = qa[p] / (std::abs(sys.average(I)) * std::abs(sys.average(p)));
  }
  m = real_tree_averages(r, maximal(r, sys.b().values(), q));
  restricted.assign(n * n, 0.0);
  parallel_for(n, [&](std::size_t begin, std::size_t end) {
    for (std::size_t I = begin; I < end; ++I) {
      const std::vector<double> row =
          real_tree_averages(r, maximal_restricted(r, sys.b().values(), q, I));
      std::copy(row.begin(), row.end(), restricted.begin() + static_cast<std::ptrdiff_t>(I * n));
    }
  });
}

void require_pair(std::size_t I, std::size_t J, std::size_t n) {
  if (I == 0 || J == 0) throw DomainError("the B.F weight needs non-root cubes");
  if (I >= n || J >= n) throw DomainError("cube index outside the tree");
}

}  // namespace

BFWeight::BFWeight(TestingPair pair, AdmissibleTriple triple, double delta, std::vector<double> fw,
                   double theta)
    : pair_(std::move(pair)), triple_(std::move(triple)), delta_(delta), fw_(std::move(fw)),
      theta_(theta) {
  const std::size_t n = region().cube_count();
  if (n > kBFMaxCubes) throw ConfigError("tree too large for the B.F weight tables");
  if (!(theta_ > 0 && theta_ < 1)) throw ConfigError("theta must lie in (0,1)");
  if (!(delta_ > 0 && delta_ <= 1)) throw ConfigError("kernel delta must lie in (0,1]");
  if (!fw_.empty() && fw_.size() != n) throw ConfigError("F_W table length does not match the tree");
  const Region& r = region();
  for (int d = 0; d <= r.depth(); ++d) {
    const double side = std::ldexp(1.0, r.root().level - d);
    ls_.push_back(tilde_L(triple_, side, r.dim()).value * triple_.S()(side));
  }
  tabulate(pair_.first, pair_.q1, c1_, m1_, restricted1_, ratio1_, pratio1_);
  tabulate(pair_.second, pair_.q2, c2_, m2_, restricted2_, ratio2_, pratio2_);
}

std::size_t smaller_cube(const Region& region, std::size_t I, std::size_t J) {
  const int di = region.depth_of(I), dj = region.depth_of(J);
  if (di != dj) return dj > di ? J : I;
  return std::min(I, J);
}

std::size_t larger_cube(const Region& region, std::size_t I, std::size_t J) {
  const int di = region.depth_of(I), dj = region.depth_of(J);
  if (di != dj) return dj < di ? J : I;
  return std::max(I, J);
}

double BFWeight::b_weight(std::size_t I, std::size_t J) const {
  const Region& r = region();
  const std::size_t n = r.cube_count();
  require_pair(I, J, n);
  const std::size_t s = smaller_cube(r, I, J);
  const std::size_t l = larger_cube(r, I, J);
  double inner = m1_[I] * m2_[J];
  if (rdist(r.cube(s).to_cube(), r.cube(l).to_cube()) <= Rational(3)) {
    inner += restricted1_[I * n + s] * restricted2_[J * n + s];
  }
  return c1_[I] * c2_[J] * inner;
}

double BFWeight::f_weight(std::size_t I, std::size_t J) const {
  const Region& r = region();
  require_pair(I, J, r.cube_count());
  const Cube env = enclosing(r.cube(I).to_cube(), r.cube(J).to_cube());
  double f = ls_[r.depth_of(smaller_cube(r, I, J))] * tilde_D(triple_, env, delta_).value;
  if (I == J && !fw_.empty()) f += fw_[I];
  return f;
}

bool fm_member(const DyadicCube& I, const DyadicCube& J, int M, double theta) {
  if (dm_member(I, M) || dm_member(J, M)) throw DomainError("F_M pairs must lie outside D_M");
  const int small_level = std::min(I.level, J.level);
  if (small_level > M || small_level < -M) return true;
  const Cube env = enclosing(I.to_cube(), J.to_cube());
  return rdist_to_unit_ball(env) > std::pow(static_cast<double>(M), theta);
}

namespace {

struct RowResult {
  double sup = 0, tb_sup = 0;
  std::vector<double> tails, tb_tails;
  std::vector<bool> seen;
};

bool non_increasing(const std::vector<std::pair<int, double>>& t) {
  for (std::size_t k = 1; k < t.size(); ++k) {
    if (t[k].second > t[k - 1].second * (1 + 1e-12)) return false;
  }
  return true;
}

std::string verdict_of(double sup, const std::vector<std::pair<int, double>>& tails,
                       const std::vector<bool>& seen) {
  if (!std::isfinite(sup)) return "incompatible";
  std::vector<double> vals;
  for (std::size_t k = 0; k < tails.size(); ++k) {
    if (seen[k]) vals.push_back(tails[k].second);
  }
  if (vals.empty()) return "inconclusive";
  if (vals.front() == 0) return "compatible";
  if (vals.size() == 1) return "inconclusive";
  return vals.back() <= kTailDecayVerdict * vals.front() ? "compatible" : "incompatible";
}

}  // namespace

CompatReport compat_scan(const BFWeight& bf, const std::vector<int>& M_list) {
  const Region& r = bf.region();
  const std::size_t n = r.cube_count();
  const std::size_t nm = M_list.size();
  std::vector<std::vector<bool>> outside(nm);
  for (std::size_t k = 0; k < nm; ++k) {
    const std::vector<bool> mask = moderate_mask(r, M_list[k]);
    outside[k].resize(n);
    for (std::size_t f = 0; f < n; ++f) outside[k][f] = !mask[f];
  }
  std::vector<RowResult> rows(n);
  parallel_for(n, [&](std::size_t begin, std::size_t end) {
    for (std::size_t I = std::max<std::size_t>(begin, 1); I < end; ++I) {
      RowResult& row = rows[I];
      row.tails.assign(nm, 0.0);
      row.tb_tails.assign(nm, 0.0);
      row.seen.assign(nm, false);
      const DyadicCube ci = r.cube(I);
      for (std::size_t J = 1; J < n; ++J) {
        const DyadicCube cj = r.cube(J);
        const int small_level = std::min(ci.level, cj.level);
        std::optional<double> env_rdist;
        const double w = bf(I, J);
        const double v = w * std::pow(bf.ratio1(I), 2) * std::pow(bf.ratio2(J), 2);
        const double tb = w * (std::pow(bf.parent_ratio1(I), 2) + std::pow(bf.parent_ratio2(J), 2));
        row.sup = std::max(row.sup, v);
        row.tb_sup = std::max(row.tb_sup, tb);
        for (std::size_t k = 0; k < nm; ++k) {
          if (!outside[k][I] || !outside[k][J]) continue;
          const int M = M_list[k];
          if (small_level <= M && small_level >= -M) {
            // Same test as fm_member, with the enclosing cube computed once per pair.
            if (!env_rdist) env_rdist = rdist_to_unit_ball(enclosing(ci.to_cube(), cj.to_cube()));
            if (!(*env_rdist > std::pow(static_cast<double>(M), bf.theta()))) continue;
          }
          row.seen[k] = true;
          row.tails[k] = std::max(row.tails[k], v);
          row.tb_tails[k] = std::max(row.tb_tails[k], tb);
        }
      }
    }
  });
  CompatReport rep;
  rep.theta = bf.theta();
  std::vector<double> tails(nm, 0.0), tb_tails(nm, 0.0);
  std::vector<bool> seen(nm, false);
  for (std::size_t I = 1; I < n; ++I) {
    rep.sup = std::max(rep.sup, rows[I].sup);
    rep.tb_sup = std::max(rep.tb_sup, rows[I].tb_sup);
    for (std::size_t k = 0; k < nm; ++k) {
      tails[k] = std::max(tails[k], rows[I].tails[k]);
      tb_tails[k] = std::max(tb_tails[k], rows[I].tb_tails[k]);
      seen[k] = seen[k] || rows[I].seen[k];
    }
  }
  for (std::size_t k = 0; k < nm; ++k) {
    rep.tails.emplace_back(M_list[k], tails[k]);
    rep.tb_tails.emplace_back(M_list[k], tb_tails[k]);
  }
  rep.tails_monotone = non_increasing(rep.tails);
  rep.tb_tails_monotone = non_increasing(rep.tb_tails);
  rep.verdict = verdict_of(rep.sup, rep.tails, seen);
  rep.tb_verdict = verdict_of(rep.tb_sup, rep.tb_tails, seen);
  return rep;
}

std::string to_string(SmallFCase c) {
  switch (c) {
    case SmallFCase::small_F: return "small_F";
    case SmallFCase::eccentric: return "eccentric";
    case SmallFCase::separated: return "separated";
  }
  return "unknown";
}

double smallf_threshold(const AdmissibleTriple& triple, double delta, int dim, int M) {
  if (M <= 0) throw DomainError("smallF needs a positive M");
  const double r = std::pow(static_cast<double>(M), 1.0 / 8.0);
  Cube unit = unit_ball(dim);
  if (r > 1.5) {
    // Unit cube [a, a+1) in the first coordinate has rdist a + 3/2 to the unit
    // ball; a is rounded down to a dyadic rational.
    constexpr std::int64_t scale = std::int64_t{1} << 20;
    unit.corner[0] = Rational(static_cast<std::int64_t>(std::floor((r - 1.5) * scale)), scale);
  }
  return tilde_L(triple, std::ldexp(1.0, M), dim).value + triple.S()(std::ldexp(1.0, -M)) +
         tilde_D(triple, unit, delta).value;
}

std::optional<SmallFCase> SmallFDisjuncts::first() const {
  if (small_F) return SmallFCase::small_F;
  if (eccentric) return SmallFCase::eccentric;
  if (separated) return SmallFCase::separated;
  return std::nullopt;
}

SmallFDisjuncts smallf_classify(const BFWeight& bf, std::size_t I, std::size_t J, int M,
                                double eps) {
  const Region& r = bf.region();
  const DyadicCube a = r.cube(I), b = r.cube(J);
  const double two_m = 2.0 * M;
  SmallFDisjuncts d;
  d.small_F = bf.f_weight(I, J) < eps;
  d.eccentric = std::abs(a.level - b.level) >= std::log2(two_m) / 8.0;
  d.separated = rdist(a.to_cube(), b.to_cube()).to_double() >= std::pow(two_m, 1.0 / 8.0);
  return d;
}

SmallFCase smallf_case(const BFWeight& bf, std::size_t I, std::size_t J, int M, double eps) {
  const Region& r = bf.region();
  if (dm_member(r.cube(I), 2 * M)) throw DomainError("smallF needs I outside D_2M");
  if (dm_member(r.cube(J), M)) throw DomainError("smallF needs J outside D_M");
  const double t = smallf_threshold(bf.triple(), bf.delta(), r.dim(), M);
  if (!(t < eps)) {
    throw DomainError("M too small for smallF: L~(2^M)+S(2^-M)+D~(M^1/8) = " + format_double(t) +
                      " is not below eps = " + format_double(eps));
  }
  const auto c = smallf_classify(bf, I, J, M, eps).first();
  if (!c) {
    throw InvariantError("smallF trichotomy fell through for " + r.cube(I).token() + " and " +
                         r.cube(J).token());
  }
  return *c;
}

SmallFScan smallf_scan(const BFWeight& bf, int M, double eps) {
  const Region& r = bf.region();
  const std::size_t n = r.cube_count();
  const double t = smallf_threshold(bf.triple(), bf.delta(), r.dim(), M);
  if (!(t < eps)) {
    throw DomainError("M too small for smallF: threshold " + format_double(t) +
                      " is not below eps = " + format_double(eps));
  }
  const std::vector<bool> in2m = moderate_mask(r, 2 * M);
  const std::vector<bool> inm = moderate_mask(r, M);
  std::vector<SmallFScan> rows(n);
  parallel_for(n, [&](std::size_t begin, std::size_t end) {
    for (std::size_t I = std::max<std::size_t>(begin, 1); I < end; ++I) {
      if (in2m[I]) continue;
      SmallFScan& row = rows[I];
      for (std::size_t J = 1; J < n; ++J) {
        if (inm[J]) continue;
        ++row.admissible_pairs;
        const auto c = smallf_classify(bf, I, J, M, eps).first();
        if (!c) {
          ++row.fall_throughs;
        } else if (*c == SmallFCase::small_F) {
          ++row.small_F;
        } else if (*c == SmallFCase::eccentric) {
          ++row.eccentric;
        } else {
          ++row.separated;
        }
      }
    }
  });
  SmallFScan out;
  for (const SmallFScan& row : rows) {
    out.admissible_pairs += row.admissible_pairs;
    out.small_F += row.small_F;
    out.eccentric += row.eccentric;
    out.separated += row.separated;
    out.fall_throughs += row.fall_throughs;
  }
  return out;
}

}  // namespace ctb
