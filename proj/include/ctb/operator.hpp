#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ctb/compatibility.hpp"
#include "ctb/kernel.hpp"
#include "ctb/wavelets.hpp"

namespace ctb {

enum class DiagonalRule { zero_pv, supplied };
std::string to_string(DiagonalRule rule);
DiagonalRule parse_diagonal_rule(const std::string& s);

struct QuadratureSettings {
  // Extra dyadic subdivisions used on cell pairs that touch.
  int refine_levels = 3;
  DiagonalRule diagonal = DiagonalRule::zero_pv;
};

// Where a matrix came from. The triple and delta feed the normalizations of
// the Hardy, adjacent and bump estimates.
struct OperatorInfo {
  std::string kernel = "matrix";
  AdmissibleTriple triple;
  double delta = 1.0;
  QuadratureSettings quadrature;
};

// Dense discretization on the cells of a region, stored row-major by
// (output cell, input cell). The action is (Tf)(x) = sum_t T[x][t] f(t) vol.
class OperatorMatrix {
 public:
  OperatorMatrix(Region region, std::vector<Scalar> entries, OperatorInfo info = {});
  static OperatorMatrix zero(Region region, OperatorInfo info = {});
  static OperatorMatrix identity(Region region);

  const Region& region() const { return region_; }
  const OperatorInfo& info() const { return info_; }
  std::size_t size() const { return n_; }
  Scalar operator()(std::size_t x, std::size_t t) const { return entries_[x * n_ + t]; }
  std::span<const Scalar> entries() const { return entries_; }
  double max_norm() const;

  GridFunction apply(const GridFunction& f) const;
  // Bilinear transpose: <T f, g> = <f, T^t g>.
  GridFunction apply_transpose(const GridFunction& g) const;
  OperatorMatrix transpose() const;
  OperatorMatrix operator-(const OperatorMatrix& o) const;

  // Binary file at path plus a JSON sidecar at path + ".json".
  void save(const std::string& path) const;
  static OperatorMatrix load(const std::string& path);

 private:
  Region region_;
  std::size_t n_;
  std::vector<Scalar> entries_;
  OperatorInfo info_;
};

// zero_pv needs a kernel that changes sign under t <-> x; otherwise the
// diagonal must be supplied, one value per cell.
OperatorMatrix discretize(const CompactKernel& kernel, const Region& region,
                          QuadratureSettings settings = {},
                          std::span<const Scalar> diagonal = {});

// Cell self-interactions of a kernel that is integrable on the diagonal:
// subcell midpoint quadrature at the given depth, coincident subcells dropped.
std::vector<Scalar> integrable_diagonal(const CompactKernel& kernel, const Region& region,
                                        int levels);

// <T u, v>. Mirrored entries are summed together, so an antisymmetric matrix
// gives exactly zero whenever u == v.
Scalar pair_matrix(const OperatorMatrix& T, const GridFunction& u, const GridFunction& v);
// <T (b1 f), b2 g>.
Scalar pair_tb(const OperatorMatrix& T, const TestingPair& pair, const GridFunction& f,
               const GridFunction& g);

struct WeakRow {
  std::size_t cube = 0;
  int alpha = 0;
  int beta = 0;
  double ratio = 0;
};

struct WeakBucket {
  int level = 0;
  // floor of rdist(I, B)
  std::int64_t rdist = 0;
  double max_ratio = 0;
};

struct WeakCompactReport {
  std::vector<WeakRow> rows;
  // Max over the four exponent choices, per flat cube.
  std::vector<double> cube_max;
  std::vector<WeakBucket> buckets;
  // (eps, least M whose complement cubes all stay below eps); -1 when no M
  // up to M_max works.
  std::vector<std::pair<double, int>> m_eps;
};

WeakCompactReport weak_scan(const OperatorMatrix& T, const TestingPair& pair, int M_max,
                            const std::vector<double>& eps_list);
// F_W(I; M): the observed diagonal ratio on D_M cubes, zero elsewhere.
std::vector<double> weak_profile(const WeakCompactReport& report, const Region& region, int M);

double adjacent_check(const OperatorMatrix& T, const TestingPair& pair, std::size_t I,
                      std::size_t Ip, const GridFunction& f, const GridFunction& g);
double hardy_check(const OperatorMatrix& T, const TestingPair& pair, std::size_t I,
                   const GridFunction& f, const GridFunction& g);

struct LbReport {
  std::vector<int> k;
  std::vector<Scalar> partial;
  Scalar limit = 0;
  // |limit - s_k| for the fitted k.
  std::vector<double> decay;
  std::vector<int> fit_k;
  double slope = 0;
  double delta = 0;
  bool slope_defined = false;
};

inline constexpr double kMeanZeroTolerance = 1e-10;

// s_k = <T_b chi_{2^k J}, f> for k = 2..k_max; the decay of |s_{k_max} - s_k|
// is fitted on k = 2..k_fit (capped at k_max - 1).
LbReport lb_functional(const OperatorMatrix& T, const TestingPair& pair, const GridFunction& f,
                       const Cube& J, int k_max, int k_fit = 5);

// Least-squares slope of log2 |y| against x; zeros are skipped.
std::optional<double> log2_slope(const std::vector<int>& x, const std::vector<double>& y);

// values[I * n + J] = <T_b h_I, h_J> = <T psi_I, psi_J>; root row and column zero.
struct BumpMatrix {
  Region region;
  std::vector<Scalar> values;
  Scalar operator()(std::size_t I, std::size_t J) const {
    return values[I * region.cube_count() + J];
  }
};

BumpMatrix bump_matrix(const OperatorMatrix& T, const TestingPair& pair);

// <T f, g> rebuilt from the wavelet coefficients of f and g, the bump matrix
// and the coarse root terms.
Scalar orthorep_pairing(const OperatorMatrix& T, const TestingPair& pair, const BumpMatrix& bumps,
                        const GridFunction& f, const GridFunction& g);

struct BumpBound {
  int bump_case = 0;
  double bound = 0;
  // B_i F_i for each term that enters; unused terms stay zero.
  double b1f1 = 0, b2f2 = 0, b3f3 = 0;
};

// bf supplies the testing pair, the triple, delta and F_W; eps enters the
// diagonal variant of case 3.
BumpBound bump_bound(const BFWeight& bf, std::size_t I, std::size_t J, double eps);

// Case of a pair from the parents alone: 1 when rdist > 3, otherwise 2 or 3
// by inrdist measured from the larger parent.
int bump_case(const Region& region, std::size_t I, std::size_t J);

struct BumpRow {
  std::size_t I = 0, J = 0;
  int bump_case = 0;
  double observed = 0, bound = 0, ratio = 0;
};

struct BumpReport {
  std::vector<BumpRow> rows;
  std::array<double, 3> max_ratio{};
  std::array<std::size_t, 3> count{};
  std::size_t above_ceiling = 0;
  // Cancellation measures of the input, relative to its max norm.
  double tb1_defect = 0, tstar_b2_defect = 0;
};

inline constexpr double kCancellationTolerance = 1e-8;

// Throws DomainError when the coefficients of T b1 or T^t b2 exceed
// kCancellationTolerance times the matrix max norm.
BumpReport bump_verify(const OperatorMatrix& T_reduced, const BFWeight& bf, double eps,
                       double ceiling = kInfinity);

struct PowerResult {
  double norm = 0;
  int iterations = 0;
  bool converged = false;
};

inline constexpr double kPowerTolerance = 1e-10;
inline constexpr std::uint64_t kPowerSeed = 0x70776572;

struct CompactnessPoint {
  int M = 0;
  // ||P_M^*T||, ||(P_M^*)^perp T P_M|| and ||(P_M^*)^perp T P_M^perp||.
  PowerResult first, second, third;
};

std::vector<CompactnessPoint> compactness_curve(const OperatorMatrix& T, const TestingPair& pair,
                                                const std::vector<int>& M_list, int iters);

// Projection pieces of T on the grid, with the variants acting on each side.
enum class Compression { proj_T, perp_T, perp_T_proj, perp_T_perp };
PowerResult compressed_norm(const OperatorMatrix& T, const TestingPair& pair, int M,
                            Compression which, int iters);
// The same operators as dense matrices on cell values, for small oracles.
std::vector<Scalar> compressed_dense(const OperatorMatrix& T, const TestingPair& pair, int M,
                                     Compression which);

struct Tb1Estimate {
  WaveletCoeffs coeffs;
  // Max over J of |c_J - <T_b chi_{2^k J_p}, h_J>| for k = 0, 1, ...
  std::vector<double> tail;
};

// <T b1, psi_J^{b2}> for every non-root J through the truncated pairings
// <T_b chi_{2^k J_p}, h_J>, the last dilate covering the region.
Tb1Estimate estimate_tb1(const OperatorMatrix& T, const TestingPair& pair);
// The same for T^t with the roles of b1 and b2 exchanged.
Tb1Estimate estimate_tstar_b2(const OperatorMatrix& T, const TestingPair& pair);
TestingPair swapped(const TestingPair& pair);

struct NecessityReport {
  int M = 0;
  double p = 2;
  double norm_perp = 0, norm_proj = 0;
  double worst_ratio = 0;
  std::size_t worst_cube = 0;
  std::size_t cubes = 0;
  std::size_t gated = 0;
};

// |<T_b chi_Q, chi_Q>| against the right-hand side built from the two
// projection norms, for every tree cube Q. Only p = 2 is supported.
NecessityReport necessity_weak(const OperatorMatrix& T, const TestingPair& pair, double p, int M,
                               int iters, bool accretive = false);

}  // namespace ctb
