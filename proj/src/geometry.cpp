#include "ctb/geometry.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <sstream>

#include "ctb/error.hpp"

namespace ctb {
namespace {

// Gap between [a_lo, a_hi] and [b_lo, b_hi]; zero when they meet.
Rational interval_gap(const Rational& a_lo, const Rational& a_hi, const Rational& b_lo,
                      const Rational& b_hi) {
  return max(Rational(0), max(a_lo - b_hi, b_lo - a_hi));
}

void check_same_dim(const Cube& a, const Cube& b) {
  if (a.dim != b.dim) throw DomainError("cubes of different dimension");
}

std::int64_t floor_div2(std::int64_t k) { return k >= 0 ? k / 2 : -((-k + 1) / 2); }

}  // namespace

Rational Cube::volume() const {
  Rational v(1);
  for (int i = 0; i < dim; ++i) v *= side;
  return v;
}

Cube Cube::dilate(const Rational& lambda) const {
  if (lambda <= Rational(0)) throw DomainError("dilation factor must be positive");
  Cube out = *this;
  out.side = side * lambda;
  for (int i = 0; i < dim; ++i) out.corner[i] = center(i) - out.side / Rational(2);
  return out;
}

bool Cube::contains(const Cube& other) const {
  check_same_dim(*this, other);
  for (int i = 0; i < dim; ++i) {
    if (other.corner[i] < corner[i]) return false;
    if (other.corner[i] + other.side > corner[i] + side) return false;
  }
  return true;
}

Cube DyadicCube::to_cube() const {
  Cube c;
  c.dim = dim;
  c.side = side();
  for (int i = 0; i < dim; ++i) c.corner[i] = corner(i);
  return c;
}

double DyadicCube::side_d() const { return std::ldexp(1.0, level); }

double DyadicCube::center_d(int i) const {
  return std::ldexp(static_cast<double>(index[i]) + 0.5, level);
}

bool DyadicCube::contains(const DyadicCube& other) const {
  if (other.dim != dim || other.level > level) return false;
  const int shift = level - other.level;
  for (int i = 0; i < dim; ++i) {
    // Arithmetic right shift is floor division for negative indices.
    if ((other.index[i] >> shift) != index[i]) return false;
  }
  return true;
}

std::string DyadicCube::token() const {
  std::ostringstream os;
  os << level << ':';
  for (int i = 0; i < dim; ++i) {
    if (i) os << ',';
    os << index[i];
  }
  return os.str();
}

DyadicCube DyadicCube::parse_token(const std::string& token) {
  const auto colon = token.find(':');
  if (colon == std::string::npos) throw DomainError("cube token without ':': " + token);
  DyadicCube c;
  auto parse_int = [&](std::string_view s, auto& out) {
    const auto res = std::from_chars(s.data(), s.data() + s.size(), out);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
      throw DomainError("malformed cube token: " + token);
    }
  };
  const std::string_view view(token);
  parse_int(view.substr(0, colon), c.level);
  std::string_view rest = view.substr(colon + 1);
  c.dim = 0;
  while (true) {
    const auto comma = rest.find(',');
    if (c.dim == kMaxDim) throw DomainError("cube token has too many indices: " + token);
    parse_int(rest.substr(0, comma), c.index[c.dim]);
    ++c.dim;
    if (comma == std::string_view::npos) break;
    rest = rest.substr(comma + 1);
  }
  return c;
}

Cube unit_ball(int dim) {
  Cube b;
  b.dim = dim;
  b.side = Rational(1);
  for (int i = 0; i < dim; ++i) b.corner[i] = Rational(-1, 2);
  return b;
}

Cube ball(int dim, const Rational& lambda) { return unit_ball(dim).dilate(lambda); }

std::vector<DyadicCube> children(const DyadicCube& cube) {
  std::vector<DyadicCube> out;
  const int count = 1 << cube.dim;
  out.reserve(count);
  for (int bits = 0; bits < count; ++bits) {
    DyadicCube c = cube;
    c.level = cube.level - 1;
    for (int i = 0; i < cube.dim; ++i) {
      // Most significant bit drives the first coordinate: lexicographic order.
      const int bit = (bits >> (cube.dim - 1 - i)) & 1;
      c.index[i] = 2 * cube.index[i] + bit;
    }
    out.push_back(c);
  }
  return out;
}

DyadicCube parent(const DyadicCube& cube) {
  DyadicCube p = cube;
  p.level = cube.level + 1;
  for (int i = 0; i < cube.dim; ++i) p.index[i] = floor_div2(cube.index[i]);
  return p;
}

Cube enclosing(const Cube& a, const Cube& b) {
  check_same_dim(a, b);
  Cube out;
  out.dim = a.dim;
  std::array<Rational, kMaxDim> hi{};
  Rational side(0);
  for (int i = 0; i < a.dim; ++i) {
    const Rational lo = min(a.corner[i], b.corner[i]);
    hi[i] = max(a.corner[i] + a.side, b.corner[i] + b.side);
    side = max(side, hi[i] - lo);
  }
  out.side = side;
  // Admissible corners in coordinate i form [hi_i - side, lo_i]; the left end
  // minimizes the centre coordinate.
  for (int i = 0; i < a.dim; ++i) out.corner[i] = hi[i] - side;
  return out;
}

Rational distance(const Cube& a, const Cube& b) {
  check_same_dim(a, b);
  Rational d(0);
  for (int i = 0; i < a.dim; ++i) {
    d = max(d, interval_gap(a.corner[i], a.corner[i] + a.side, b.corner[i], b.corner[i] + b.side));
  }
  return d;
}

Rational eccentricity(const Cube& a, const Cube& b) {
  check_same_dim(a, b);
  return min(a.side, b.side) / max(a.side, b.side);
}

Rational rdist(const Cube& a, const Cube& b) {
  return enclosing(a, b).side / max(a.side, b.side);
}

InnerBoundary::InnerBoundary(const DyadicCube& cube) : span_(cube.to_cube()) {
  const Rational half = span_.side / Rational(2);
  for (int axis = 0; axis < cube.dim; ++axis) {
    for (int s = 0; s < 3; ++s) {
      faces_.push_back(Face{axis, span_.corner[axis] + half * Rational(s)});
    }
  }
}

Rational InnerBoundary::distance(const Cube& target) const {
  check_same_dim(span_, target);
  Rational best(-1);
  for (const Face& f : faces_) {
    Rational d = interval_gap(f.offset, f.offset, target.corner[f.axis],
                              target.corner[f.axis] + target.side);
    for (int i = 0; i < span_.dim; ++i) {
      if (i == f.axis) continue;
      d = max(d, interval_gap(span_.corner[i], span_.corner[i] + span_.side, target.corner[i],
                              target.corner[i] + target.side));
    }
    if (best < Rational(0) || d < best) best = d;
  }
  return best;
}

Rational inrdist_unchecked(const DyadicCube& outer, const Cube& inner) {
  return Rational(1) + InnerBoundary(outer).distance(inner) / inner.side;
}

Rational inrdist(const DyadicCube& outer, const Cube& inner) {
  if (!outer.to_cube().dilate(Rational(3)).contains(inner)) {
    throw DomainError("inrdist requires J inside 3I");
  }
  return inrdist_unchecked(outer, inner);
}

bool dm_member(const DyadicCube& cube, int M) {
  if (M <= 0) throw DomainError("dm_member requires a positive M");
  if (cube.level < -M || cube.level > M) return false;
  return rdist(cube.to_cube(), ball(cube.dim, Rational::pow2(M))) <= Rational(M);
}

double rdist_dilate_to_unit_ball(const Cube& cube, int k) {
  const double base = cube.side.to_double();
  const double side = std::ldexp(base, k);
  double envelope = 0.0;
  for (int i = 0; i < cube.dim; ++i) {
    const double c = cube.corner[i].to_double() + base / 2;
    const double hi = std::max(c + side / 2, 0.5);
    const double lo = std::min(c - side / 2, -0.5);
    envelope = std::max(envelope, hi - lo);
  }
  return envelope / std::max(side, 1.0);
}

double rdist_to_unit_ball(const Cube& cube) { return rdist_dilate_to_unit_ball(cube, 0); }

Region::Region(DyadicCube root, int finest_level) : root_(root), finest_level_(finest_level) {
  if (root.dim < 1 || root.dim > kMaxDim) throw DomainError("region dimension must be 1 or 2");
  if (finest_level > root.level) throw DomainError("finest level above the root level");
  if (depth() * root.dim > 40) throw DomainError("region too deep");
}

double Region::cell_volume() const { return std::ldexp(1.0, finest_level_ * dim()); }

std::size_t Region::level_offset(int d) const {
  std::size_t off = 0;
  for (int e = 0; e < d; ++e) off += level_count(e);
  return off;
}

int Region::depth_of(std::size_t flat) const {
  int d = 0;
  std::size_t off = 0;
  while (d <= depth()) {
    const std::size_t cnt = level_count(d);
    if (flat < off + cnt) return d;
    off += cnt;
    ++d;
  }
  throw DomainError("tree index out of range");
}

std::array<std::int64_t, kMaxDim> Region::local_coords(std::size_t local, int d) const {
  std::array<std::int64_t, kMaxDim> c{};
  if (dim() == 1) {
    c[0] = static_cast<std::int64_t>(local);
  } else {
    const std::size_t width = std::size_t{1} << d;
    c[0] = static_cast<std::int64_t>(local / width);
    c[1] = static_cast<std::int64_t>(local % width);
  }
  return c;
}

DyadicCube Region::cube(std::size_t flat) const {
  const int d = depth_of(flat);
  const auto c = local_coords(flat - level_offset(d), d);
  DyadicCube out;
  out.dim = dim();
  out.level = root_.level - d;
  for (int i = 0; i < dim(); ++i) out.index[i] = (root_.index[i] << d) + c[i];
  return out;
}

std::optional<std::size_t> Region::find(const DyadicCube& cube) const {
  if (cube.dim != dim() || cube.level > root_.level || cube.level < finest_level_) {
    return std::nullopt;
  }
  const int d = root_.level - cube.level;
  const std::int64_t width = std::int64_t{1} << d;
  std::size_t local = 0;
  for (int i = 0; i < dim(); ++i) {
    const std::int64_t c = cube.index[i] - (root_.index[i] << d);
    if (c < 0 || c >= width) return std::nullopt;
    local = local * static_cast<std::size_t>(width) + static_cast<std::size_t>(c);
  }
  return level_offset(d) + local;
}

std::size_t Region::parent_flat(std::size_t flat) const {
  const int d = depth_of(flat);
  if (d == 0) throw DomainError("the root has no parent in the region");
  const auto c = local_coords(flat - level_offset(d), d);
  std::size_t local = 0;
  const std::size_t width = std::size_t{1} << (d - 1);
  for (int i = 0; i < dim(); ++i) local = local * width + static_cast<std::size_t>(c[i] / 2);
  return level_offset(d - 1) + local;
}

std::vector<std::size_t> Region::children_flat(std::size_t flat) const {
  const int d = depth_of(flat);
  if (d == depth()) return {};
  const auto c = local_coords(flat - level_offset(d), d);
  const std::size_t width = std::size_t{1} << (d + 1);
  const std::size_t base = level_offset(d + 1);
  std::vector<std::size_t> out;
  const int count = 1 << dim();
  out.reserve(count);
  for (int bits = 0; bits < count; ++bits) {
    std::size_t local = 0;
    for (int i = 0; i < dim(); ++i) {
      const int bit = (bits >> (dim() - 1 - i)) & 1;
      local = local * width + static_cast<std::size_t>(2 * c[i] + bit);
    }
    out.push_back(base + local);
  }
  return out;
}

std::vector<std::size_t> Region::cells_of(std::size_t flat) const {
  const int d = depth_of(flat);
  const auto c = local_coords(flat - level_offset(d), d);
  const int shift = depth() - d;
  const std::size_t span = std::size_t{1} << shift;
  std::vector<std::size_t> out;
  if (dim() == 1) {
    out.reserve(span);
    const std::size_t start = static_cast<std::size_t>(c[0]) << shift;
    for (std::size_t t = 0; t < span; ++t) out.push_back(start + t);
  } else {
    const std::size_t width = std::size_t{1} << depth();
    out.reserve(span * span);
    const std::size_t r0 = static_cast<std::size_t>(c[0]) << shift;
    const std::size_t c0 = static_cast<std::size_t>(c[1]) << shift;
    for (std::size_t r = 0; r < span; ++r) {
      for (std::size_t s = 0; s < span; ++s) out.push_back((r0 + r) * width + c0 + s);
    }
  }
  return out;
}

std::size_t Region::ancestor_of_cell(std::size_t cell_index, int d) const {
  const auto c = local_coords(cell_index, depth());
  const int shift = depth() - d;
  const std::size_t width = std::size_t{1} << d;
  std::size_t local = 0;
  for (int i = 0; i < dim(); ++i) local = local * width + static_cast<std::size_t>(c[i] >> shift);
  return level_offset(d) + local;
}

double Region::cell_center(std::size_t cell_index, int i) const {
  const auto c = local_coords(cell_index, depth());
  const double base = std::ldexp(static_cast<double>(root_.index[i]), root_.level);
  return base + std::ldexp(static_cast<double>(c[i]) + 0.5, finest_level_);
}

std::vector<DyadicCube> shell_family(const DyadicCube& J, int e, int m, std::optional<int> k,
                                     const Region& region) {
  std::vector<DyadicCube> out;
  const int level = J.level + e;
  if (level < region.finest_level() || level > region.root().level) return out;
  const int d = region.root().level - level;
  const Cube jc = J.to_cube();
  const std::size_t off = region.level_offset(d);
  for (std::size_t t = 0; t < region.level_count(d); ++t) {
    const DyadicCube I = region.cube(off + t);
    const Cube ic = I.to_cube();
    if (floor(rdist(ic, jc)) != m) continue;
    if (k && m <= 3) {
      // Measured from the larger cube, as in the bump estimates.
      const Rational in = e >= 0 ? inrdist_unchecked(I, jc) : inrdist_unchecked(J, ic);
      if (floor(in) != *k) continue;
    }
    out.push_back(I);
  }
  return out;
}

}  // namespace ctb
