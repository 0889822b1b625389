#include "ctb/wavelets.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <sstream>
#include <string>

#include "ctb/error.hpp"

namespace ctb {

struct WaveletSystem::QCache {
  std::mutex mutex;
  std::map<double, std::vector<double>> by_q;
};

WaveletSystem::WaveletSystem(GridFunction b)
    : b_(std::move(b)), cache_(std::make_shared<QCache>()) {
  const Region& r = b_.region();
  averages_ = tree_averages(r, b_.values());
  const std::vector<double>& l1 = q_averages(1.0);
  for (std::size_t f = 0; f < averages_.size(); ++f) {
    if (!(std::abs(averages_[f]) > kAverageEpsilon * (l1[f] + kAverageEpsilon))) {
      throw DegenerateError("testing function has a vanishing average on cube " +
                            r.cube(f).token());
    }
  }
}

const std::vector<double>& WaveletSystem::q_averages(double q) const {
  std::lock_guard lock(cache_->mutex);
  auto it = cache_->by_q.find(q);
  if (it == cache_->by_q.end()) {
    it = cache_->by_q.emplace(q, tree_q_averages(region(), b_.values(), q)).first;
  }
  return it->second;
}

TestingPair::TestingPair(GridFunction b1, GridFunction b2, double q1_, double q2_)
    : first(std::move(b1)), second(std::move(b2)), q1(q1_), q2(q2_) {
  if (!(q1 > 1) || !(q2 > 1)) throw ConfigError("testing exponents must exceed 1");
  if (!(1.0 / q1 + 1.0 / q2 < 1.0)) throw ConfigError("testing exponents need 1/q1 + 1/q2 < 1");
  if (!(first.region() == second.region())) {
    throw DomainError("testing functions live on different regions");
  }
}

WaveletCoeffs::WaveletCoeffs(Region region) : region_(region), values_(region.cube_count()) {}

WaveletCoeffs::WaveletCoeffs(Region region, std::vector<Scalar> values)
    : region_(region), values_(std::move(values)) {
  if (values_.size() != region_.cube_count()) {
    throw DomainError("coefficient vector length does not match the tree size");
  }
  values_[0] = 0;
}

double WaveletCoeffs::l2_norm() const {
  double s = 0;
  for (const Scalar& v : values_) s += std::norm(v);
  return std::sqrt(s);
}

void WaveletCoeffs::write_csv(std::ostream& os) const {
  os << "cube,re,im\n";
  for (std::size_t f = 1; f < values_.size(); ++f) {
    os << region_.cube(f).token() << ',' << format_double(values_[f].real()) << ','
       << format_double(values_[f].imag()) << '\n';
  }
}

WaveletCoeffs WaveletCoeffs::read_csv(Region region, std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != "cube,re,im") {
    throw IoError("coefficient CSV must start with 'cube,re,im'");
  }
  WaveletCoeffs c(region);
  std::size_t row = 1;
  while (std::getline(is, line)) {
    ++row;
    if (line.empty()) continue;
    // Tokens contain a comma in two dimensions, so split from the right.
    const auto p2 = line.rfind(',');
    const auto p1 = p2 == std::string::npos ? p2 : line.rfind(',', p2 - 1);
    if (p1 == std::string::npos) throw IoError("malformed coefficient row " + std::to_string(row));
    const auto flat = region.find(DyadicCube::parse_token(line.substr(0, p1)));
    if (!flat || *flat == 0) throw IoError("coefficient row " + std::to_string(row) + " names a cube outside the tree");
    try {
      c[*flat] = Scalar(std::stod(line.substr(p1 + 1, p2 - p1 - 1)), std::stod(line.substr(p2 + 1)));
    } catch (const std::logic_error&) {
      throw IoError("unparsable number in coefficient row " + std::to_string(row));
    }
  }
  return c;
}

std::vector<double> maximal(const Region& region, std::span<const Scalar> cells, double q) {
  const std::vector<double> qa = tree_q_averages(region, cells, q);
  std::vector<double> out(region.cell_count(), 0.0);
  for (std::size_t c = 0; c < out.size(); ++c) {
    double m = 0;
    for (int d = 0; d <= region.depth(); ++d) m = std::max(m, qa[region.ancestor_of_cell(c, d)]);
    out[c] = m;
  }
  return out;
}

std::vector<double> maximal_restricted(const Region& region, std::span<const Scalar> cells,
                                       double q, std::size_t flat) {
  std::vector<Scalar> v(cells.size(), 0.0);
  for (std::size_t c : region.cells_of(flat)) v[c] = cells[c];
  return maximal(region, v, q);
}

namespace {

void require_non_root(std::size_t flat, const char* what) {
  if (flat == 0) throw DomainError(std::string(what) + " is undefined on the root cube");
}

std::vector<Scalar> product_cells(const GridFunction& f, const GridFunction& b) {
  std::vector<Scalar> v(f.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = f[i] * b[i];
  return v;
}

void check_region(const WaveletSystem& sys, const GridFunction& f) {
  if (!(sys.region() == f.region())) throw DomainError("function and testing function regions differ");
}

// Pushes per-cube constants down to the finest cells.
std::vector<Scalar> push_down(const Region& r, std::vector<Scalar> w) {
  for (int d = 0; d < r.depth(); ++d) {
    const std::size_t off = r.level_offset(d);
    for (std::size_t f = off; f < off + r.level_count(d); ++f) {
      for (std::size_t ch : r.children_flat(f)) w[ch] += w[f];
    }
  }
  const std::size_t leaf = r.level_offset(r.depth());
  return std::vector<Scalar>(w.begin() + static_cast<std::ptrdiff_t>(leaf), w.end());
}

}  // namespace

CbConstants cb_constants(const WaveletSystem& sys, std::size_t flat, double q) {
  require_non_root(flat, "C_I and B_I");
  const std::size_t p = sys.region().parent_flat(flat);
  const double ai = std::abs(sys.average(flat)), ap = std::abs(sys.average(p));
  return {1.0 / ai + 1.0 / ap, sys.q_average(flat, q) / ai + sys.q_average(p, q) / ap};
}

GridFunction haar_bump(const WaveletSystem& sys, std::size_t flat) {
  require_non_root(flat, "the Haar bump");
  const Region& r = sys.region();
  const std::size_t p = r.parent_flat(flat);
  const double vi = cube_volume(r, flat), vp = cube_volume(r, p);
  GridFunction h(r);
  const Scalar outer = -std::sqrt(vi) / (vp * sys.average(p));
  const Scalar inner = 1.0 / (std::sqrt(vi) * sys.average(flat));
  for (std::size_t c : r.cells_of(p)) h[c] = outer;
  for (std::size_t c : r.cells_of(flat)) h[c] += inner;
  return h;
}

GridFunction wavelet(const WaveletSystem& sys, std::size_t flat) {
  return haar_bump(sys, flat) * sys.b();
}

GridFunction dual_wavelet(const WaveletSystem& sys, std::size_t flat) {
  return haar_bump(sys, flat) * sys.average(flat);
}

GridFunction expectation(const WaveletSystem& sys, const GridFunction& f, std::size_t flat) {
  check_region(sys, f);
  const Region& r = sys.region();
  const auto cells = r.cells_of(flat);
  Scalar s = 0;
  for (std::size_t c : cells) s += f[c];
  const Scalar ratio = s / static_cast<double>(cells.size()) / sys.average(flat);
  GridFunction out(r);
  for (std::size_t c : cells) out[c] = ratio * sys.b()[c];
  return out;
}

GridFunction difference(const WaveletSystem& sys, const GridFunction& f, std::size_t flat) {
  check_region(sys, f);
  const Region& r = sys.region();
  if (r.depth_of(flat) == r.depth()) throw DomainError("difference operator needs a non-finest cube");
  const std::vector<Scalar> af = tree_averages(r, f.values());
  GridFunction out(r);
  const Scalar base = af[flat] / sys.average(flat);
  for (std::size_t ch : r.children_flat(flat)) {
    const Scalar k = af[ch] / sys.average(ch) - base;
    for (std::size_t c : r.cells_of(ch)) out[c] = k * sys.b()[c];
  }
  return out;
}

GridFunction difference_adjoint(const WaveletSystem& sys, const GridFunction& f,
                                std::size_t flat) {
  check_region(sys, f);
  const Region& r = sys.region();
  if (r.depth_of(flat) == r.depth()) throw DomainError("difference operator needs a non-finest cube");
  const std::vector<Scalar> afb = tree_averages(r, product_cells(f, sys.b()));
  GridFunction out(r);
  const Scalar base = afb[flat] / sys.average(flat);
  for (std::size_t ch : r.children_flat(flat)) {
    const Scalar k = afb[ch] / sys.average(ch) - base;
    for (std::size_t c : r.cells_of(ch)) out[c] = k;
  }
  return out;
}

GridFunction expectation_level(const WaveletSystem& sys, const GridFunction& f, int depth) {
  check_region(sys, f);
  const Region& r = sys.region();
  if (depth < 0 || depth > r.depth()) throw DomainError("level outside the tree");
  const std::vector<Scalar> af = tree_averages(r, f.values());
  GridFunction out(r);
  for (std::size_t c = 0; c < out.size(); ++c) {
    const std::size_t a = r.ancestor_of_cell(c, depth);
    out[c] = af[a] / sys.average(a) * sys.b()[c];
  }
  return out;
}

GridFunction difference_level(const WaveletSystem& sys, const GridFunction& f, int depth) {
  if (depth < 0 || depth >= sys.region().depth()) throw DomainError("level outside the tree");
  return expectation_level(sys, f, depth + 1) - expectation_level(sys, f, depth);
}

GridFunction root_expectation(const WaveletSystem& sys, const GridFunction& f) {
  return expectation(sys, f, 0);
}

GridFunction root_expectation_adjoint(const WaveletSystem& sys, const GridFunction& f) {
  check_region(sys, f);
  Scalar s = 0;
  for (std::size_t c = 0; c < f.size(); ++c) s += f[c] * sys.b()[c];
  return GridFunction::constant(f.region(), s / static_cast<double>(f.size()) / sys.average(0));
}

WaveletCoeffs analyze(const WaveletSystem& sys, const GridFunction& f) {
  check_region(sys, f);
  const Region& r = sys.region();
  const std::vector<Scalar> af = tree_averages(r, f.values());
  WaveletCoeffs c(r);
  for (std::size_t I = 1; I < c.size(); ++I) {
    const std::size_t p = r.parent_flat(I);
    c[I] = std::sqrt(cube_volume(r, I)) * (af[I] - sys.average(I) * af[p] / sys.average(p));
  }
  return c;
}

WaveletCoeffs dual_analyze(const WaveletSystem& sys, const GridFunction& f) {
  check_region(sys, f);
  const Region& r = sys.region();
  const std::vector<Scalar> afb = tree_averages(r, product_cells(f, sys.b()));
  WaveletCoeffs c(r);
  for (std::size_t I = 1; I < c.size(); ++I) {
    const std::size_t p = r.parent_flat(I);
    c[I] = std::sqrt(cube_volume(r, I)) *
           (afb[I] / sys.average(I) - afb[p] / sys.average(p));
  }
  return c;
}

GridFunction synthesize(const WaveletSystem& sys, const WaveletCoeffs& c) {
  const Region& r = sys.region();
  if (!(c.region() == r)) throw DomainError("coefficients and testing function regions differ");
  std::vector<Scalar> w(r.cube_count(), 0.0);
  for (std::size_t I = 1; I < c.size(); ++I) {
    if (c[I] == Scalar(0)) continue;
    const std::size_t p = r.parent_flat(I);
    const double vi = cube_volume(r, I);
    w[I] += c[I] / (std::sqrt(vi) * sys.average(I));
    w[p] -= c[I] * std::sqrt(vi) / (cube_volume(r, p) * sys.average(p));
  }
  std::vector<Scalar> cells = push_down(r, std::move(w));
  for (std::size_t i = 0; i < cells.size(); ++i) cells[i] *= sys.b()[i];
  return GridFunction(r, std::move(cells));
}

GridFunction dual_synthesize(const WaveletSystem& sys, const WaveletCoeffs& c) {
  const Region& r = sys.region();
  if (!(c.region() == r)) throw DomainError("coefficients and testing function regions differ");
  std::vector<Scalar> w(r.cube_count(), 0.0);
  for (std::size_t I = 1; I < c.size(); ++I) {
    if (c[I] == Scalar(0)) continue;
    const std::size_t p = r.parent_flat(I);
    const double vi = cube_volume(r, I);
    w[I] += c[I] / std::sqrt(vi);
    w[p] -= c[I] * sys.average(I) * std::sqrt(vi) / (cube_volume(r, p) * sys.average(p));
  }
  return GridFunction(r, push_down(r, std::move(w)));
}

Scalar gram(const WaveletSystem& sys, std::size_t I, std::size_t J) {
  require_non_root(I, "the Gram entry");
  require_non_root(J, "the Gram entry");
  const Region& r = sys.region();
  const std::size_t p = r.parent_flat(I);
  if (p != r.parent_flat(J)) return 0;
  const Scalar delta = I == J ? 1.0 : 0.0;
  return delta - cube_volume(r, J) * sys.average(J) / (cube_volume(r, p) * sys.average(p));
}

std::vector<bool> moderate_mask(const Region& region, int M) {
  std::vector<bool> mask(region.cube_count());
  for (std::size_t f = 0; f < mask.size(); ++f) mask[f] = dm_member(region.cube(f), M);
  return mask;
}

GridFunction lagom_project(const WaveletSystem& sys, const GridFunction& f, int M,
                           LagomVariant variant) {
  const std::vector<bool> mask = moderate_mask(sys.region(), M);
  const bool dual = variant == LagomVariant::P_star || variant == LagomVariant::P_star_perp;
  WaveletCoeffs c = dual ? dual_analyze(sys, f) : analyze(sys, f);
  for (std::size_t I = 1; I < c.size(); ++I) {
    if (!mask[I]) c[I] = 0;
  }
  GridFunction p = dual ? dual_synthesize(sys, c) : synthesize(sys, c);
  if (variant == LagomVariant::P_perp || variant == LagomVariant::P_star_perp) return f - p;
  return p;
}

namespace {

std::vector<double> subtree_sums(const Region& r, std::span<const double> a) {
  std::vector<double> s(a.begin(), a.end());
  for (int d = r.depth() - 1; d >= 0; --d) {
    const std::size_t off = r.level_offset(d);
    for (std::size_t f = off; f < off + r.level_count(d); ++f) {
      for (std::size_t ch : r.children_flat(f)) s[f] += s[ch];
    }
  }
  return s;
}

CarlesonReport carleson_core(const Region& r, std::span<const double> a,
                             std::span<const double> w, const GridFunction& f, double c_embed) {
  if (a.size() != r.cube_count() || w.size() != r.cube_count()) {
    throw DomainError("Carleson sequence length does not match the tree size");
  }
  if (!(r == f.region())) throw DomainError("function region differs from the tree");
  for (double v : a) {
    if (!(v >= 0)) throw DomainError("Carleson sequence must be non-negative");
  }
  const std::vector<double> sub = subtree_sums(r, a);
  const std::vector<Scalar> af = tree_averages(r, f.values());
  CarlesonReport rep;
  for (std::size_t I = 0; I < sub.size(); ++I) {
    rep.packing_constant = std::max(rep.packing_constant, w[I] * sub[I] / cube_volume(r, I));
    rep.embedding_sum += w[I] * a[I] * std::norm(af[I]);
  }
  const double f2 = std::pow(f.lp_norm(2), 2);
  rep.embedding_ratio = f2 > 0 ? rep.embedding_sum / f2 : 0;
  rep.within_bound = rep.embedding_ratio <= c_embed * rep.packing_constant * (1 + 1e-12);
  return rep;
}

}  // namespace

CarlesonReport carleson_check(const WaveletSystem& sys, std::span<const double> a,
                              const GridFunction& f, double c_embed) {
  const std::vector<double>& b2 = sys.q_averages(2.0);
  std::vector<double> w(b2.size());
  for (std::size_t I = 0; I < w.size(); ++I) w[I] = 1.0 / (b2[I] * b2[I]);
  return carleson_core(sys.region(), a, w, f, c_embed);
}

CarlesonReport carleson_weighted(const Region& region, std::span<const double> a,
                                 std::span<const double> w, const GridFunction& f,
                                 double c_embed) {
  return carleson_core(region, a, w, f, c_embed);
}

PlancheReport planche_check(const WaveletSystem& sys, const GridFunction& f, int M,
                            const CubePairWeight& bf, const CubePairPredicate& exceptional) {
  const Region& r = sys.region();
  const WaveletCoeffs c = analyze(sys, f);
  const WaveletCoeffs cd = dual_analyze(sys, f);
  const double f2 = std::pow(f.lp_norm(2), 2);
  const double fb2 = std::pow((f * sys.b()).lp_norm(2), 2);
  const std::vector<bool> mask = moderate_mask(r, M);
  const std::vector<double>& b2 = sys.q_averages(2.0);
  PlancheReport rep;
  if (f2 == 0) return rep;
  const std::size_t n = r.cube_count();
  for (std::size_t J = 1; J < n; ++J) {
    double s = 0;
    for (std::size_t I = 1; I < n; ++I) s += bf(I, J) * std::norm(c[I]);
    if (s / f2 > rep.bounded) {
      rep.bounded = s / f2;
      rep.worst_J = J;
    }
  }
  for (std::size_t I = 1; I < n; ++I) {
    const std::size_t p = r.parent_flat(I);
    const double ap = std::abs(sys.average(p)), ai = std::abs(sys.average(I));
    rep.real_sum += std::pow(ap / b2[p], 2) * std::norm(c[I]);
    rep.dual_sum += std::pow(ai * ap / b2[p], 2) * std::norm(cd[I]);
    if (mask[I]) continue;
    double sup = 0;
    for (std::size_t J = 1; J < n; ++J) {
      if (!mask[J] && exceptional(I, J)) sup = std::max(sup, bf(I, J));
    }
    rep.tail += sup * std::norm(c[I]);
  }
  rep.tail /= f2;
  rep.real_sum /= f2;
  rep.dual_sum = fb2 > 0 ? rep.dual_sum / fb2 : 0;
  return rep;
}

}  // namespace ctb
