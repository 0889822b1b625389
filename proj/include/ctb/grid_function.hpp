#pragma once

#include <complex>
#include <functional>
#include <istream>
#include <limits>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "ctb/geometry.hpp"

namespace ctb {

using Scalar = std::complex<double>;

inline constexpr double kInfinity = std::numeric_limits<double>::infinity();

// Piecewise constant function on the finest cells of a region; each value is
// the average over its cell.
class GridFunction {
 public:
  explicit GridFunction(Region region);
  GridFunction(Region region, std::vector<Scalar> values);
  static GridFunction constant(Region region, Scalar value);
  // Cell averages of f approximated by the value at the cell centre.
  static GridFunction sample(Region region, const std::function<Scalar(std::span<const double>)>& f);

  const Region& region() const { return region_; }
  std::size_t size() const { return values_.size(); }
  std::span<const Scalar> values() const { return values_; }
  std::span<Scalar> values() { return values_; }
  Scalar operator[](std::size_t cell) const { return values_[cell]; }
  Scalar& operator[](std::size_t cell) { return values_[cell]; }

  Scalar integral() const;
  double sup_norm() const;
  double lp_norm(double p) const;
  // Restriction to a tree cube.
  GridFunction restricted(std::size_t flat) const;

  GridFunction& operator+=(const GridFunction& o);
  GridFunction& operator-=(const GridFunction& o);
  GridFunction& operator*=(const GridFunction& o);
  GridFunction& operator*=(Scalar s);
  friend GridFunction operator+(GridFunction a, const GridFunction& b) { return a += b; }
  friend GridFunction operator-(GridFunction a, const GridFunction& b) { return a -= b; }
  friend GridFunction operator*(GridFunction a, const GridFunction& b) { return a *= b; }
  friend GridFunction operator*(GridFunction a, Scalar s) { return a *= s; }
  friend GridFunction operator*(Scalar s, GridFunction a) { return a *= s; }

  // "cell,re,im" rows.
  void write_csv(std::ostream& os) const;
  static GridFunction read_csv(Region region, std::istream& is);

 private:
  void check_same(const GridFunction& o) const;

  Region region_;
  std::vector<Scalar> values_;
};

// Bilinear pairing sum f g vol, no conjugation.
Scalar pairing(const GridFunction& f, const GridFunction& g);

// Averages of cell values over every tree cube, indexed by flat tree index.
std::vector<Scalar> tree_averages(const Region& region, std::span<const Scalar> cells);
// [f]_{I,q} for every tree cube; q = kInfinity gives cell maxima.
std::vector<double> tree_q_averages(const Region& region, std::span<const Scalar> cells, double q);

double cube_volume(const Region& region, std::size_t flat);

// Formats a double with round-trip precision; used by every text report.
std::string format_double(double v);

}  // namespace ctb
