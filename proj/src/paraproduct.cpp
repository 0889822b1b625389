#include "ctb/paraproduct.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <optional>

#include "ctb/error.hpp"
#include "ctb/parallel.hpp"
#include "ctb/rng.hpp"

namespace ctb {

namespace {

void check_field(const WaveletCoeffs& field, const TestingPair& pair) {
  if (!(field.region() == pair.first.region())) {
    throw DomainError("coefficient field and testing pair live on different grids");
  }
}

// max over non-root I of (B_{I,q}^{main})^2 (|I|^-1 sum_{J in I} beta_J^2 |c_J|^2)^(1/2)
double bmo_variant(const WaveletCoeffs& field, const WaveletSystem& main, double q,
                   const WaveletSystem& other, const std::vector<bool>* skip) {
  const Region& r = main.region();
  const std::size_t n = r.cube_count();
  const std::vector<double>& two = main.q_averages(2.0);
  std::vector<double> s(n, 0.0);
  for (std::size_t J = 1; J < n; ++J) {
    if (skip && (*skip)[J]) continue;
    const double beta = (1.0 + 1.0 / std::abs(other.average(J))) * two[J] / std::abs(main.average(J));
    s[J] = beta * beta * std::norm(field[J]);
  }
  for (std::size_t J = n - 1; J >= 1; --J) s[r.parent_flat(J)] += s[J];
  double best = 0;
  for (std::size_t I = 1; I < n; ++I) {
    if (s[I] == 0) continue;
    const double B = cb_constants(main, I, q).B;
    best = std::max(best, B * B * std::sqrt(s[I] / cube_volume(r, I)));
  }
  return best;
}

double lp(std::span<const Scalar> v, std::span<const std::size_t> cells, double p, double vol) {
  if (std::isinf(p)) {
    double m = 0;
    for (std::size_t c : cells) m = std::max(m, std::abs(v[c]));
    return m;
  }
  double s = 0;
  for (std::size_t c : cells) s += std::pow(std::abs(v[c]), p);
  return std::pow(s * vol, 1.0 / p);
}

double inv_conjugate(double p) { return std::isinf(p) ? 1.0 : 1.0 - 1.0 / p; }

void check_exponent(double p) {
  if (!(p > 1)) throw ConfigError("atom exponent must exceed 1");
}

}  // namespace

BmoParts bmo_b_parts(const WaveletCoeffs& field, const TestingPair& pair, int M) {
  check_field(field, pair);
  std::vector<bool> mask;
  if (M > 0) mask = moderate_mask(field.region(), M);
  const std::vector<bool>* skip = M > 0 ? &mask : nullptr;
  return {bmo_variant(field, pair.second, pair.q2, pair.first, skip),
          bmo_variant(field, pair.first, pair.q1, pair.second, skip)};
}

double bmo_b_norm(const WaveletCoeffs& field, const TestingPair& pair) {
  const BmoParts parts = bmo_b_parts(field, pair);
  return std::max(parts.literal, parts.mirrored);
}

double cmo_tail(const WaveletCoeffs& field, const TestingPair& pair, int M) {
  if (M < 1) throw ConfigError("cmo_tail needs M >= 1");
  const BmoParts parts = bmo_b_parts(field, pair, M);
  return std::max(parts.literal, parts.mirrored);
}

Atom make_atom(const WaveletSystem& sys, std::size_t I, double p, const GridFunction& profile) {
  check_exponent(p);
  const Region& r = sys.region();
  if (!(profile.region() == r)) throw DomainError("profile and testing function grids differ");
  if (I == 0 || I >= r.cube_count()) throw DomainError("atoms need a non-root tree cube");
  const std::size_t Q = r.parent_flat(I);
  const auto cells = r.cells_of(Q);
  Scalar pb = 0, bb = 0;
  double peak = 0;
  for (std::size_t c : cells) {
    pb += profile[c] * sys.b()[c];
    bb += sys.b()[c];
    peak = std::max(peak, std::abs(profile[c]));
  }
  GridFunction a(r);
  const Scalar m = pb / bb;
  double left = 0;
  for (std::size_t c : cells) {
    a[c] = profile[c] - m;
    left = std::max(left, std::abs(a[c]));
  }
  if (peak == 0 || left <= 1e-12 * peak) {
    throw DegenerateError("profile has no b-mean-zero part on " + r.cube(Q).token());
  }
  const double vol = r.cell_volume();
  const double size = lp((a * sys.b()).values(), cells, p, vol);
  const double target = cb_constants(sys, I, p).B * std::pow(cube_volume(r, I), -inv_conjugate(p));
  const Scalar scale = target / size;
  a *= scale;
  return {I, std::move(a), p, scale};
}

double atom_size_ratio(const WaveletSystem& sys, const Atom& atom) {
  const Region& r = sys.region();
  const auto cells = r.cells_of(r.parent_flat(atom.cube));
  const double size = lp((atom.values * sys.b()).values(), cells, atom.p, r.cell_volume());
  return size / (cb_constants(sys, atom.cube, atom.p).B *
                 std::pow(cube_volume(r, atom.cube), -inv_conjugate(atom.p)));
}

double h1_norm(const GridFunction& f, const WaveletSystem& sys, double p) {
  check_exponent(p);
  const Region& r = sys.region();
  if (!(f.region() == r)) throw DomainError("function and testing function grids differ");
  const GridFunction fb = f * sys.b();
  double mass = 0;
  for (const Scalar& v : fb.values()) mass += std::abs(v);
  const Scalar total = fb.integral();
  if (std::abs(total) > kMeanZeroTolerance * mass * r.cell_volume()) {
    throw DomainError("h1_norm needs int f b = 0 over the region");
  }
  const std::size_t n = r.cube_count();
  const std::vector<Scalar> afb = tree_averages(r, fb.values());
  // m_Q = <f b>_Q / <b>_Q; f - m_Q is b-mean-zero on Q.
  std::vector<Scalar> m(n);
  for (std::size_t Q = 0; Q < n; ++Q) m[Q] = afb[Q] / sys.average(Q);
  const double vol = r.cell_volume();
  const double children = std::ldexp(1.0, r.dim());
  const double finf = std::isinf(p);
  std::vector<double> bp(r.cell_count());
  for (std::size_t c = 0; c < bp.size(); ++c) {
    bp[c] = finf ? std::abs(sys.b()[c]) : std::pow(std::abs(sys.b()[c]), p);
  }
  const auto sum_power = [&](double acc, double term) { return finf ? std::max(acc, term) : acc + term; };
  const auto finish = [&](double acc) { return finf ? acc : std::pow(acc * vol, 1.0 / p); };
  std::vector<double> cost(n, 0.0);
  const std::size_t first_cell = r.level_offset(r.depth());
  for (std::size_t Q = first_cell; Q-- > 0;) {
    const double weight = std::pow(cube_volume(r, Q) / children, inv_conjugate(p));
    double whole = 0;
    for (std::size_t c : r.cells_of(Q)) {
      const double d = std::abs(f[c] - m[Q]);
      whole = sum_power(whole, (finf ? d : std::pow(d, p)) * bp[c]);
    }
    double block = 0, below = 0;
    for (std::size_t R : r.children_flat(Q)) {
      const double d = std::abs(m[R] - m[Q]);
      for (std::size_t c : r.cells_of(R)) block = sum_power(block, (finf ? d : std::pow(d, p)) * bp[c]);
      below += cost[R];
    }
    cost[Q] = std::min(finish(whole) * weight, finish(block) * weight + below);
  }
  return cost[0];
}

DualityResult duality_check(const WaveletCoeffs& field, const GridFunction& g,
                            const TestingPair& pair, double p) {
  check_field(field, pair);
  DualityResult out;
  const GridFunction f = synthesize(pair.second, field);
  out.pairing = pairing(f * g, pair.second.b());
  out.bmo = bmo_b_norm(field, pair);
  out.h1 = h1_norm(g, pair.second, p);
  if (out.pairing != Scalar(0)) {
    out.ratio = out.bmo > 0 && out.h1 > 0 ? std::abs(out.pairing) / (out.bmo * out.h1) : kInfinity;
  }
  return out;
}

ParaproductOperator::ParaproductOperator(TestingPair pair, WaveletCoeffs coeffs, bool bold)
    : pair_(std::move(pair)), coeffs_(std::move(coeffs)), bold_(bold) {
  check_field(coeffs_, pair_);
}

namespace {

// dual wavelet_I^{b}(x) for x in I_p, split by whether x lies in I.
struct DualValues {
  Scalar inside, outside;
};

DualValues dual_values(const WaveletSystem& sys, std::size_t I) {
  const Region& r = sys.region();
  const std::size_t Q = r.parent_flat(I);
  const double vi = cube_volume(r, I), vq = cube_volume(r, Q);
  const Scalar outside = -std::sqrt(vi) * sys.average(I) / (vq * sys.average(Q));
  return {outside + 1.0 / std::sqrt(vi), outside};
}

}  // namespace

GridFunction ParaproductOperator::apply(const GridFunction& f) const {
  const Region& r = region();
  if (!(f.region() == r)) throw DomainError("function and paraproduct grids differ");
  const std::vector<Scalar> af = tree_averages(r, f.values());
  const WaveletSystem& s1 = pair_.first;
  const WaveletSystem& s2 = pair_.second;
  const int depth = r.depth();
  std::vector<Scalar> out(r.cell_count());
  parallel_for(out.size(), [&](std::size_t begin, std::size_t end) {
    for (std::size_t x = begin; x < end; ++x) {
      Scalar s = 0;
      for (int d = 0; d < depth; ++d) {
        const std::size_t Q = r.ancestor_of_cell(x, d);
        const std::size_t below = r.ancestor_of_cell(x, d + 1);
        const Scalar factor = af[Q] / s1.average(Q);
        for (std::size_t I : r.children_flat(Q)) {
          const DualValues v = dual_values(s2, I);
          s += coeffs_[I] * factor * (I == below ? v.inside : v.outside);
        }
      }
      out[x] = bold_ ? s * s2.b()[x] : s;
    }
  });
  return GridFunction(r, std::move(out));
}

GridFunction ParaproductOperator::apply_telescoped(const GridFunction& f) const {
  const Region& r = region();
  if (!(f.region() == r)) throw DomainError("function and paraproduct grids differ");
  const std::vector<Scalar> af = tree_averages(r, f.values());
  const WaveletSystem& s1 = pair_.first;
  const WaveletSystem& s2 = pair_.second;
  const GridFunction g = dual_synthesize(s2, coeffs_);
  const GridFunction source = bold_ ? g * s2.b() : g;
  GridFunction out(r);
  const std::size_t last = r.level_offset(r.depth());
  for (std::size_t Q = 0; Q < last; ++Q) {
    const GridFunction delta = bold_ ? difference(s2, source, Q) : difference_adjoint(s2, source, Q);
    const Scalar e = af[Q] / s1.average(Q);
    for (std::size_t c : r.cells_of(Q)) out[c] += delta[c] * e;
  }
  return out;
}

GridFunction ParaproductOperator::apply_transpose(const GridFunction& g) const {
  const Region& r = region();
  if (!(g.region() == r)) throw DomainError("function and paraproduct grids differ");
  const WaveletCoeffs a = analyze(pair_.second, bold_ ? g * pair_.second.b() : g);
  const WaveletSystem& s1 = pair_.first;
  const std::size_t last = r.level_offset(r.depth());
  // Per parent cube Q: sum over children of c_I a_I, divided by |Q| <b1>_Q.
  std::vector<Scalar> weight(last);
  for (std::size_t Q = 0; Q < last; ++Q) {
    Scalar s = 0;
    for (std::size_t I : r.children_flat(Q)) s += coeffs_[I] * a[I];
    weight[Q] = s / (cube_volume(r, Q) * s1.average(Q));
  }
  std::vector<Scalar> out(r.cell_count());
  for (std::size_t t = 0; t < out.size(); ++t) {
    Scalar s = 0;
    for (int d = 0; d < r.depth(); ++d) s += weight[r.ancestor_of_cell(t, d)];
    out[t] = s;
  }
  return GridFunction(r, std::move(out));
}

Scalar ParaproductOperator::pair_with(const GridFunction& f, const GridFunction& g) const {
  const Region& r = region();
  if (!(f.region() == r) || !(g.region() == r)) throw DomainError("function and paraproduct grids differ");
  const WaveletCoeffs a = analyze(pair_.second, bold_ ? g * pair_.second.b() : g);
  const std::vector<Scalar> af = tree_averages(r, f.values());
  Scalar s = 0;
  for (std::size_t I = 1; I < r.cube_count(); ++I) {
    const std::size_t Q = r.parent_flat(I);
    s += coeffs_[I] * (af[Q] / pair_.first.average(Q)) * a[I];
  }
  return s;
}

Scalar ParaproductOperator::kernel(std::size_t t, std::size_t x) const {
  const Region& r = region();
  if (t >= r.cell_count() || x >= r.cell_count()) throw DomainError("cell index outside the grid");
  Scalar s = 0;
  for (int d = 0; d < r.depth(); ++d) {
    const std::size_t Q = r.ancestor_of_cell(x, d);
    if (r.ancestor_of_cell(t, d) != Q) break;
    const std::size_t below = r.ancestor_of_cell(x, d + 1);
    const Scalar norm = cube_volume(r, Q) * pair_.first.average(Q);
    for (std::size_t I : r.children_flat(Q)) {
      const DualValues v = dual_values(pair_.second, I);
      s += coeffs_[I] * (I == below ? v.inside : v.outside) / norm;
    }
  }
  return bold_ ? s * pair_.second.b()[x] : s;
}

OperatorMatrix ParaproductOperator::matrix() const {
  const Region& r = region();
  const std::size_t N = r.cell_count();
  const int depth = r.depth();
  std::vector<Scalar> e(N * N);
  parallel_for(N, [&](std::size_t begin, std::size_t end) {
    std::vector<Scalar> prefix(depth);
    std::vector<std::size_t> chain(depth + 1);
    for (std::size_t x = begin; x < end; ++x) {
      Scalar acc = 0;
      for (int d = 0; d <= depth; ++d) chain[d] = r.ancestor_of_cell(x, d);
      for (int d = 0; d < depth; ++d) {
        const std::size_t Q = chain[d];
        Scalar s = 0;
        for (std::size_t I : r.children_flat(Q)) {
          const DualValues v = dual_values(pair_.second, I);
          s += coeffs_[I] * (I == chain[d + 1] ? v.inside : v.outside);
        }
        acc += s / (cube_volume(r, Q) * pair_.first.average(Q));
        prefix[d] = bold_ ? acc * pair_.second.b()[x] : acc;
      }
      for (std::size_t t = 0; t < N; ++t) {
        // Deepest shared non-cell ancestor.
        int d = 0;
        while (d + 1 < depth && r.ancestor_of_cell(t, d + 1) == chain[d + 1]) ++d;
        e[x * N + t] = depth > 0 ? prefix[d] : Scalar(0);
      }
    }
  });
  OperatorInfo info;
  info.kernel = bold_ ? "paraproduct_bold" : "paraproduct";
  info.quadrature.diagonal = DiagonalRule::supplied;
  return OperatorMatrix(r, std::move(e), std::move(info));
}

namespace {

std::optional<std::size_t> locate(const Region& r, std::span<const double> pt) {
  const DyadicCube& root = r.root();
  const double h = std::ldexp(1.0, r.finest_level());
  const std::int64_t per_side = std::int64_t{1} << r.depth();
  DyadicCube cell{r.finest_level(), {0, 0}, r.dim()};
  for (int i = 0; i < r.dim(); ++i) {
    const double lo = root.corner(i).to_double();
    const double k = std::floor((pt[i] - lo) / h);
    if (!(k >= 0 && k < static_cast<double>(per_side))) return std::nullopt;
    cell.index[i] = root.index[i] * per_side + static_cast<std::int64_t>(k);
  }
  const auto flat = r.find(cell);
  if (!flat) return std::nullopt;
  return *flat - r.level_offset(r.depth());
}

// Depth of the smallest tree cube holding both cells.
int shared_depth(const Region& r, std::size_t a, std::size_t b) {
  int d = 0;
  while (d < r.depth() && r.ancestor_of_cell(a, d + 1) == r.ancestor_of_cell(b, d + 1)) ++d;
  return d;
}

}  // namespace

ParaKernelReport paraproduct_kernel_check(const ParaproductOperator& P, const KernelSampler& sampler,
                                          std::size_t count) {
  const Region& r = P.region();
  const int n = r.dim();
  ParaKernelReport rep;
  for (std::size_t drawn = 0; drawn < count; ++drawn) {
    const std::optional<KernelSample> s = sampler();
    if (!s) {
      rep.envelope.exhausted = true;
      break;
    }
    if (s->t.size() != static_cast<std::size_t>(n) || s->x.size() != s->t.size() ||
        s->xp.size() != s->t.size()) {
      throw DomainError("sample dimension differs from the region");
    }
    const auto t = locate(r, s->t), x = locate(r, s->x), xp = locate(r, s->xp);
    if (!t || !x || !xp) continue;
    const double tx = sup_dist(s->t, s->x);
    if (!(2 * sup_dist(s->x, s->xp) < tx)) continue;
    const Scalar diff = P.kernel(*t, *x) - P.kernel(*t, *xp);
    const int d_xx = shared_depth(r, *x, *xp);
    const int d_tx = shared_depth(r, *t, *x);
    const int d_txx = std::min(d_tx, shared_depth(r, *t, *xp));
    if (!P.bold() && d_xx > d_tx && d_tx == d_txx) {
      ++rep.vanishing_cases;
      if (diff != Scalar(0)) ++rep.vanishing_violations;
    }
    const double ell = std::ldexp(1.0, r.root().level - d_xx);
    const double ratio = std::abs(diff) * std::pow(tx, n + 1) / ell;
    ++rep.envelope.samples_checked;
    if (ratio > rep.envelope.worst_ratio) {
      rep.envelope.worst_ratio = ratio;
      rep.envelope.worst_configuration.assign(s->t.begin(), s->t.end());
      rep.envelope.worst_configuration.insert(rep.envelope.worst_configuration.end(), s->x.begin(),
                                              s->x.end());
      rep.envelope.worst_configuration.insert(rep.envelope.worst_configuration.end(), s->xp.begin(),
                                              s->xp.end());
    }
  }
  rep.envelope.empirical_constant = rep.envelope.worst_ratio;
  return rep;
}

KernelSampler region_sampler(const Region& region, std::uint64_t seed) {
  auto rng = std::make_shared<Rng>(seed);
  const int n = region.dim();
  std::array<double, kMaxDim> lo{};
  for (int i = 0; i < n; ++i) lo[i] = region.root().corner(i).to_double();
  const double side = region.root().side_d();
  const double h = std::ldexp(1.0, region.finest_level());
  return [rng, n, lo, side, h]() -> std::optional<KernelSample> {
    KernelSample s;
    s.t.resize(n);
    s.x.resize(n);
    s.xp.resize(n);
    for (int i = 0; i < n; ++i) {
      s.t[i] = lo[i] + side * rng->uniform();
      s.x[i] = lo[i] + side * rng->uniform();
    }
    const double tx = std::max(sup_dist(s.t, s.x), h);
    const double radius = h * std::pow(tx / h, rng->uniform()) / 2;
    for (int i = 0; i < n; ++i) s.xp[i] = s.x[i] + radius * rng->uniform(-1.0, 1.0);
    s.tp = s.t;
    return s;
  };
}

namespace {

double worst_coefficient(const WaveletCoeffs& c, std::size_t& worst) {
  double m = 0;
  for (std::size_t J = 1; J < c.size(); ++J) {
    if (std::abs(c[J]) > m) {
      m = std::abs(c[J]);
      worst = J;
    }
  }
  return m;
}

}  // namespace

Reduction reduce(const OperatorMatrix& T, const TestingPair& pair) {
  const Region& r = T.region();
  if (!(pair.first.region() == r)) throw DomainError("testing pair and operator grids differ");
  const ParaproductOperator p1(pair, estimate_tb1(T, pair).coeffs);
  const ParaproductOperator p2(swapped(pair), estimate_tstar_b2(T, pair).coeffs);
  const OperatorMatrix diff = T - p1.matrix() - p2.matrix().transpose();
  OperatorInfo info = T.info();
  info.kernel = T.info().kernel + ":reduced";
  Reduction out{OperatorMatrix(r, std::vector<Scalar>(diff.entries().begin(), diff.entries().end()), info)};
  const double scale = T.max_norm();
  const GridFunction tb1 = out.reduced.apply(pair.first.b());
  std::size_t w1 = 0, w2 = 0;
  const double d1 = worst_coefficient(dual_analyze(pair.second, tb1), w1);
  const double d2 =
      worst_coefficient(dual_analyze(pair.first, out.reduced.apply_transpose(pair.second.b())), w2);
  out.tb1_defect = scale > 0 ? d1 / scale : 0.0;
  out.tstar_b2_defect = scale > 0 ? d2 / scale : 0.0;
  out.root_term = std::abs(pairing(tb1, pair.second.b()));
  if (out.tb1_defect > kCancellationTolerance) {
    throw DomainError("reduced operator keeps T b1 coefficient " + format_double(d1) + " at cube " +
                      r.cube(w1).token());
  }
  if (out.tstar_b2_defect > kCancellationTolerance) {
    throw DomainError("reduced operator keeps T* b2 coefficient " + format_double(d2) +
                      " at cube " + r.cube(w2).token());
  }
  return out;
}

}  // namespace ctb
