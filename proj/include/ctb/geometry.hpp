#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ctb/rational.hpp"

namespace ctb {

inline constexpr int kMaxDim = 2;

// Half-open box prod_i [corner_i, corner_i + side). Used for <I,J>, 3I and
// other cubes that need not be dyadic.
struct Cube {
  std::array<Rational, kMaxDim> corner{};
  Rational side{1};
  int dim = 1;

  Rational center(int i) const { return corner[i] + side / Rational(2); }
  Rational volume() const;
  // Centre-preserving scaling, the lambda*I of the notation.
  Cube dilate(const Rational& lambda) const;
  // Half-open containment of another box.
  bool contains(const Cube& other) const;
  bool operator==(const Cube& other) const = default;
};

// The dyadic cube 2^level * prod_i [k_i, k_i + 1).
struct DyadicCube {
  int level = 0;
  std::array<std::int64_t, kMaxDim> index{};
  int dim = 1;

  Rational side() const { return Rational::pow2(level); }
  Rational corner(int i) const { return Rational(index[i]) * side(); }
  Cube to_cube() const;
  double side_d() const;
  double center_d(int i) const;
  bool contains(const DyadicCube& other) const;
  // "j:k1" or "j:k1,k2".
  std::string token() const;
  static DyadicCube parse_token(const std::string& token);

  bool operator==(const DyadicCube& other) const = default;
  auto operator<=>(const DyadicCube& other) const = default;
};

// Unit ball B = [-1/2, 1/2)^n and its dilates B_lambda.
Cube unit_ball(int dim);
Cube ball(int dim, const Rational& lambda);

std::vector<DyadicCube> children(const DyadicCube& cube);
DyadicCube parent(const DyadicCube& cube);

// <I,J>: smallest cube containing both; among those, the one with minimal
// coordinate sum of its centre (leftmost corner in every coordinate).
Cube enclosing(const Cube& a, const Cube& b);
// Set distance in the sup norm between the closures.
Rational distance(const Cube& a, const Cube& b);
Rational eccentricity(const Cube& a, const Cube& b);
Rational rdist(const Cube& a, const Cube& b);

// Inner boundary D_I: union of the boundaries of the children of I, stored
// as the 3 axis-aligned hyperplane sections of I per coordinate.
class InnerBoundary {
 public:
  struct Face {
    int axis;
    Rational offset;
  };

  explicit InnerBoundary(const DyadicCube& cube);

  const std::vector<Face>& faces() const { return faces_; }
  // Sup-norm distance from the closure of target to the boundary set.
  Rational distance(const Cube& target) const;

 private:
  Cube span_;
  std::vector<Face> faces_;
};

// 1 + dist(J, D_I) / l(J). Requires J inside 3I.
Rational inrdist(const DyadicCube& outer, const Cube& inner);
// The same formula without the 3I precondition.
Rational inrdist_unchecked(const DyadicCube& outer, const Cube& inner);

// Membership in D_M: 2^-M <= l(I) <= 2^M and rdist(I, B_{2^M}) <= M.
bool dm_member(const DyadicCube& cube, int M);

// Double precision relative distance of 2^k I to the unit ball; exact
// rationals overflow long before the series in the tilde functions end.
double rdist_dilate_to_unit_ball(const Cube& cube, int k);
double rdist_to_unit_ball(const Cube& cube);

// Rooted dyadic tree: all dyadic subcubes of root down to the finest level.
// Tree cubes are addressed by a flat index in level-major order (root first),
// lexicographic in the index vector within a level.
class Region {
 public:
  Region(DyadicCube root, int finest_level);

  const DyadicCube& root() const { return root_; }
  int finest_level() const { return finest_level_; }
  int dim() const { return root_.dim; }
  int depth() const { return root_.level - finest_level_; }
  std::size_t cell_count() const { return level_count(depth()); }
  double cell_volume() const;

  // Number of tree cubes at a given depth below the root.
  std::size_t level_count(int d) const { return std::size_t{1} << (d * dim()); }
  std::size_t level_offset(int d) const;
  std::size_t cube_count() const { return level_offset(depth() + 1); }

  DyadicCube cube(std::size_t flat) const;
  int depth_of(std::size_t flat) const;
  std::optional<std::size_t> find(const DyadicCube& cube) const;
  bool contains(const DyadicCube& cube) const { return find(cube).has_value(); }
  DyadicCube cell(std::size_t cell_index) const { return cube(level_offset(depth()) + cell_index); }

  std::size_t parent_flat(std::size_t flat) const;
  std::vector<std::size_t> children_flat(std::size_t flat) const;
  // Cells covered by a tree cube, in cell order.
  std::vector<std::size_t> cells_of(std::size_t flat) const;
  // Tree cube at depth d containing the given cell.
  std::size_t ancestor_of_cell(std::size_t cell_index, int d) const;
  // Cell centre coordinate i (double; exact for dyadic grids).
  double cell_center(std::size_t cell_index, int i) const;

  bool operator==(const Region& other) const {
    return root_ == other.root_ && finest_level_ == other.finest_level_;
  }

 private:
  std::array<std::int64_t, kMaxDim> local_coords(std::size_t local, int d) const;

  DyadicCube root_;
  int finest_level_;
};

// J_{e,m}(k): tree cubes I with l(I) = 2^e l(J), m <= rdist(I,J) < m+1 and,
// when k is given and m <= 3, k <= inrdist(I,J) < k+1.
std::vector<DyadicCube> shell_family(const DyadicCube& J, int e, int m, std::optional<int> k,
                                     const Region& region);

}  // namespace ctb
