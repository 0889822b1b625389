#pragma once

#include <cstddef>
#include <functional>
#include <istream>
#include <memory>
#include <ostream>
#include <span>
#include <vector>

#include "ctb/grid_function.hpp"

namespace ctb {

inline constexpr double kAverageEpsilon = 1e-12;

// Averages of a testing function over every tree cube. Immutable once built;
// q-averages are computed on demand and cached per exponent.
class WaveletSystem {
 public:
  // Throws DegenerateError naming the first cube whose average is too small.
  explicit WaveletSystem(GridFunction b);

  const GridFunction& b() const { return b_; }
  const Region& region() const { return b_.region(); }
  Scalar average(std::size_t flat) const { return averages_[flat]; }
  std::span<const Scalar> averages() const { return averages_; }
  double q_average(std::size_t flat, double q) const { return q_averages(q)[flat]; }
  const std::vector<double>& q_averages(double q) const;

 private:
  struct QCache;

  GridFunction b_;
  std::vector<Scalar> averages_;
  std::shared_ptr<QCache> cache_;
};

// Two testing functions with integrability exponents, 1/q1 + 1/q2 < 1.
struct TestingPair {
  TestingPair(GridFunction b1, GridFunction b2, double q1, double q2);

  WaveletSystem first;
  WaveletSystem second;
  double q1;
  double q2;
};

// One coefficient per non-root tree cube, keyed by flat index; slot 0 (the
// root) is always zero.
class WaveletCoeffs {
 public:
  explicit WaveletCoeffs(Region region);
  WaveletCoeffs(Region region, std::vector<Scalar> values);

  const Region& region() const { return region_; }
  std::size_t size() const { return values_.size(); }
  Scalar operator[](std::size_t flat) const { return values_[flat]; }
  Scalar& operator[](std::size_t flat) { return values_[flat]; }
  std::span<const Scalar> values() const { return values_; }
  double l2_norm() const;

  // "cube,re,im" rows with cube tokens, level-major order.
  void write_csv(std::ostream& os) const;
  static WaveletCoeffs read_csv(Region region, std::istream& is);

 private:
  Region region_;
  std::vector<Scalar> values_;
};

// Dyadic maximal function sup over tree cubes containing each cell of [v]_{I,q}.
std::vector<double> maximal(const Region& region, std::span<const Scalar> cells, double q);
// Same for v restricted to the tree cube `flat`.
std::vector<double> maximal_restricted(const Region& region, std::span<const Scalar> cells,
                                       double q, std::size_t flat);

struct CbConstants {
  double C = 0;
  double B = 0;
};

// Both constants need a parent; the root throws DomainError.
CbConstants cb_constants(const WaveletSystem& sys, std::size_t flat, double q);

GridFunction haar_bump(const WaveletSystem& sys, std::size_t flat);
GridFunction wavelet(const WaveletSystem& sys, std::size_t flat);
GridFunction dual_wavelet(const WaveletSystem& sys, std::size_t flat);

GridFunction expectation(const WaveletSystem& sys, const GridFunction& f, std::size_t flat);
GridFunction difference(const WaveletSystem& sys, const GridFunction& f, std::size_t flat);
GridFunction difference_adjoint(const WaveletSystem& sys, const GridFunction& f,
                                std::size_t flat);
// Level operators; depth d counts down from the root (d = 0).
GridFunction expectation_level(const WaveletSystem& sys, const GridFunction& f, int depth);
GridFunction difference_level(const WaveletSystem& sys, const GridFunction& f, int depth);
// Coarse terms left over by the expansions over the whole tree.
GridFunction root_expectation(const WaveletSystem& sys, const GridFunction& f);
GridFunction root_expectation_adjoint(const WaveletSystem& sys, const GridFunction& f);

// <f, dual wavelet> for every non-root cube.
WaveletCoeffs analyze(const WaveletSystem& sys, const GridFunction& f);
// <f, wavelet> for every non-root cube.
WaveletCoeffs dual_analyze(const WaveletSystem& sys, const GridFunction& f);
GridFunction synthesize(const WaveletSystem& sys, const WaveletCoeffs& c);
GridFunction dual_synthesize(const WaveletSystem& sys, const WaveletCoeffs& c);

// <wavelet_I, dual wavelet_J> in closed form.
Scalar gram(const WaveletSystem& sys, std::size_t I, std::size_t J);

// Per-cube flags for membership in the moderate family with parameter M.
std::vector<bool> moderate_mask(const Region& region, int M);

enum class LagomVariant { P, P_star, P_perp, P_star_perp };

GridFunction lagom_project(const WaveletSystem& sys, const GridFunction& f, int M,
                           LagomVariant variant);

struct CarlesonReport {
  double packing_constant = 0;
  double embedding_ratio = 0;
  double embedding_sum = 0;
  bool within_bound = true;
};

// Packing constant max_I sum_{J in I} a_J / ([b]_{I,2}^2 |I|) and the ratio
// sum_I [b]_{I,2}^-2 a_I |<f>_I|^2 / ||f||_2^2, checked against c_embed times
// the packing constant.
CarlesonReport carleson_check(const WaveletSystem& sys, std::span<const double> a,
                              const GridFunction& f, double c_embed);

// Plain weights w_I in place of [b]^-2: packing max_I w_I / |I| sum_{J in I} a_J.
CarlesonReport carleson_weighted(const Region& region, std::span<const double> a,
                                 std::span<const double> w, const GridFunction& f,
                                 double c_embed);

inline constexpr double kCarlesonEmbed = 4.0;

using CubePairWeight = std::function<double(std::size_t, std::size_t)>;
using CubePairPredicate = std::function<bool(std::size_t, std::size_t)>;

struct PlancheReport {
  // max over J of sum_I BF(I,J) |<f, dual wavelet_I>|^2 / ||f||^2
  double bounded = 0;
  std::size_t worst_J = 0;
  // sum over I outside D_M of the sup over admissible J, normalized the same way
  double tail = 0;
  double real_sum = 0;
  // dual sum against ||f b||^2
  double dual_sum = 0;
};

PlancheReport planche_check(const WaveletSystem& sys, const GridFunction& f, int M,
                            const CubePairWeight& bf, const CubePairPredicate& exceptional);

}  // namespace ctb
