#include "ctb/grid_function.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <sstream>
#include <string>

#include "ctb/error.hpp"

namespace ctb {

GridFunction::GridFunction(Region region) : region_(region), values_(region.cell_count()) {}

GridFunction::GridFunction(Region region, std::vector<Scalar> values)
    : region_(region), values_(std::move(values)) {
  if (values_.size() != region_.cell_count()) {
    throw DomainError("grid function length does not match the region cell count");
  }
  for (const Scalar& v : values_) {
    if (!std::isfinite(v.real()) || !std::isfinite(v.imag())) {
      throw DomainError("grid function with non-finite value");
    }
  }
}

GridFunction GridFunction::constant(Region region, Scalar value) {
  return GridFunction(region, std::vector<Scalar>(region.cell_count(), value));
}

GridFunction GridFunction::sample(Region region,
                                  const std::function<Scalar(std::span<const double>)>& f) {
  std::vector<Scalar> v(region.cell_count());
  std::array<double, kMaxDim> p{};
  for (std::size_t c = 0; c < v.size(); ++c) {
    for (int i = 0; i < region.dim(); ++i) p[i] = region.cell_center(c, i);
    v[c] = f(std::span<const double>(p.data(), region.dim()));
  }
  return GridFunction(region, std::move(v));
}

Scalar GridFunction::integral() const {
  Scalar s = 0;
  for (const Scalar& v : values_) s += v;
  return s * region_.cell_volume();
}

double GridFunction::sup_norm() const {
  double m = 0;
  for (const Scalar& v : values_) m = std::max(m, std::abs(v));
  return m;
}

double GridFunction::lp_norm(double p) const {
  if (p == kInfinity) return sup_norm();
  if (!(p >= 1)) throw DomainError("Lp norm needs p >= 1");
  double s = 0;
  for (const Scalar& v : values_) s += std::pow(std::abs(v), p);
  return std::pow(s * region_.cell_volume(), 1.0 / p);
}

GridFunction GridFunction::restricted(std::size_t flat) const {
  GridFunction out(region_);
  for (std::size_t c : region_.cells_of(flat)) out.values_[c] = values_[c];
  return out;
}

void GridFunction::check_same(const GridFunction& o) const {
  if (!(region_ == o.region_)) throw DomainError("grid functions on different regions");
}

GridFunction& GridFunction::operator+=(const GridFunction& o) {
  check_same(o);
  for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += o.values_[i];
  return *this;
}

GridFunction& GridFunction::operator-=(const GridFunction& o) {
  check_same(o);
  for (std::size_t i = 0; i < values_.size(); ++i) values_[i] -= o.values_[i];
  return *this;
}

GridFunction& GridFunction::operator*=(const GridFunction& o) {
  check_same(o);
  for (std::size_t i = 0; i < values_.size(); ++i) values_[i] *= o.values_[i];
  return *this;
}

GridFunction& GridFunction::operator*=(Scalar s) {
  for (Scalar& v : values_) v *= s;
  return *this;
}

std::string format_double(double v) {
  if (v == 0) return "0";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

void GridFunction::write_csv(std::ostream& os) const {
  os << "cell,re,im\n";
  for (std::size_t c = 0; c < values_.size(); ++c) {
    os << c << ',' << format_double(values_[c].real()) << ',' << format_double(values_[c].imag()) << '\n';
  }
}

GridFunction GridFunction::read_csv(Region region, std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw IoError("empty grid function CSV");
  if (line != "cell,re,im") throw IoError("grid function CSV must start with 'cell,re,im'");
  std::vector<Scalar> v(region.cell_count());
  std::vector<bool> seen(v.size(), false);
  std::size_t row = 1;
  while (std::getline(is, line)) {
    ++row;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string a, b, c;
    if (!std::getline(ls, a, ',') || !std::getline(ls, b, ',') || !std::getline(ls, c)) {
      throw IoError("malformed grid function CSV row " + std::to_string(row));
    }
    try {
      const std::size_t cell = std::stoull(a);
      if (cell >= v.size() || seen[cell]) throw IoError("bad or repeated cell index in row " + std::to_string(row));
      v[cell] = Scalar(std::stod(b), std::stod(c));
      seen[cell] = true;
    } catch (const std::logic_error&) {
      throw IoError("unparsable number in grid function CSV row " + std::to_string(row));
    }
  }
  if (std::find(seen.begin(), seen.end(), false) != seen.end()) {
    throw IoError("grid function CSV does not cover every cell");
  }
  return GridFunction(region, std::move(v));
}

Scalar pairing(const GridFunction& f, const GridFunction& g) {
  if (!(f.region() == g.region())) throw DomainError("pairing of functions on different regions");
  Scalar s = 0;
  for (std::size_t i = 0; i < f.size(); ++i) s += f[i] * g[i];
  return s * f.region().cell_volume();
}

std::vector<Scalar> tree_averages(const Region& region, std::span<const Scalar> cells) {
  if (cells.size() != region.cell_count()) throw DomainError("cell vector length mismatch");
  std::vector<Scalar> avg(region.cube_count());
  const std::size_t leaf = region.level_offset(region.depth());
  std::copy(cells.begin(), cells.end(), avg.begin() + static_cast<std::ptrdiff_t>(leaf));
  const double inv = 1.0 / static_cast<double>(1 << region.dim());
  for (int d = region.depth() - 1; d >= 0; --d) {
    const std::size_t off = region.level_offset(d);
    for (std::size_t f = off; f < off + region.level_count(d); ++f) {
      Scalar s = 0;
      for (std::size_t ch : region.children_flat(f)) s += avg[ch];
      avg[f] = s * inv;
    }
  }
  return avg;
}

std::vector<double> tree_q_averages(const Region& region, std::span<const Scalar> cells, double q) {
  if (cells.size() != region.cell_count()) throw DomainError("cell vector length mismatch");
  if (!(q >= 1)) throw DomainError("q-average needs q >= 1");
  std::vector<double> out(region.cube_count());
  const std::size_t leaf = region.level_offset(region.depth());
  const bool sup = q == kInfinity;
  for (std::size_t c = 0; c < cells.size(); ++c) {
    out[leaf + c] = sup ? std::abs(cells[c]) : std::pow(std::abs(cells[c]), q);
  }
  const double inv = 1.0 / static_cast<double>(1 << region.dim());
  for (int d = region.depth() - 1; d >= 0; --d) {
    const std::size_t off = region.level_offset(d);
    for (std::size_t f = off; f < off + region.level_count(d); ++f) {
      double s = 0;
      for (std::size_t ch : region.children_flat(f)) s = sup ? std::max(s, out[ch]) : s + out[ch];
      out[f] = sup ? s : s * inv;
    }
  }
  if (!sup) {
    for (double& v : out) v = std::pow(v, 1.0 / q);
  }
  return out;
}

double cube_volume(const Region& region, std::size_t flat) {
  return std::ldexp(1.0, region.dim() * (region.root().level - region.depth_of(flat)));
}

}  // namespace ctb
