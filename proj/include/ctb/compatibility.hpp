#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ctb/kernel.hpp"
#include "ctb/wavelets.hpp"

namespace ctb {

inline constexpr double kDefaultTheta = 1.0 / 8.0;

// The B.F weight on pairs of non-root tree cubes. The restricted maximal
// averages are tabulated for every pair up front, so the tree size is capped.
class BFWeight {
 public:
  // fw, when non-empty, holds F_W(I) per flat cube and enters on the diagonal.
  BFWeight(TestingPair pair, AdmissibleTriple triple, double delta, std::vector<double> fw = {},
           double theta = kDefaultTheta);

  const TestingPair& pair() const { return pair_; }
  const Region& region() const { return pair_.first.region(); }
  const AdmissibleTriple& triple() const { return triple_; }
  double delta() const { return delta_; }
  double theta() const { return theta_; }
  bool has_fw() const { return !fw_.empty(); }
  double fw(std::size_t I) const { return fw_.empty() ? 0.0 : fw_[I]; }

  double b_weight(std::size_t I, std::size_t J) const;
  double f_weight(std::size_t I, std::size_t J) const;
  double operator()(std::size_t I, std::size_t J) const { return b_weight(I, J) * f_weight(I, J); }

  // [b1]_{I,q1} / |<b1>_I| and the b2 analogue.
  double ratio1(std::size_t I) const { return ratio1_[I]; }
  double ratio2(std::size_t J) const { return ratio2_[J]; }
  // [b]_{I_p,q} / (|<b>_I| |<b>_{I_p}|) for the parent-normalized variant.
  double parent_ratio1(std::size_t I) const { return pratio1_[I]; }
  double parent_ratio2(std::size_t J) const { return pratio2_[J]; }

  // C_I for each testing function, the averages <M_q b>_R and the restricted
  // averages <M_q (b chi_I)>_K.
  double c_const1(std::size_t I) const { return c1_[I]; }
  double c_const2(std::size_t J) const { return c2_[J]; }
  double maximal_avg1(std::size_t R) const { return m1_[R]; }
  double maximal_avg2(std::size_t R) const { return m2_[R]; }
  double restricted_avg1(std::size_t I, std::size_t K) const {
    return restricted1_[I * region().cube_count() + K];
  }
  double restricted_avg2(std::size_t J, std::size_t K) const {
    return restricted2_[J * region().cube_count() + K];
  }

 private:
  TestingPair pair_;
  AdmissibleTriple triple_;
  double delta_;
  std::vector<double> fw_;
  double theta_;
  // L~(l) S(l) per tree depth.
  std::vector<double> ls_;
  std::vector<double> c1_, c2_, m1_, m2_;
  // restricted[I * n + K] = < M_q (b chi_I) >_K
  std::vector<double> restricted1_, restricted2_;
  std::vector<double> ratio1_, ratio2_, pratio1_, pratio2_;
};

inline constexpr std::size_t kBFMaxCubes = 2048;

// Smaller and larger of two tree cubes; equal sizes are ordered by flat index
// so both are symmetric in their arguments.
std::size_t smaller_cube(const Region& region, std::size_t I, std::size_t J);
std::size_t larger_cube(const Region& region, std::size_t I, std::size_t J);

// Pair family F_M: both cubes outside D_M (checked) and one of the three
// size or distance clauses.
bool fm_member(const DyadicCube& I, const DyadicCube& J, int M, double theta);

struct CompatReport {
  double sup = 0;
  std::vector<std::pair<int, double>> tails;
  double tb_sup = 0;
  std::vector<std::pair<int, double>> tb_tails;
  double theta = kDefaultTheta;
  bool tails_monotone = true;
  bool tb_tails_monotone = true;
  // "compatible", "incompatible" or "inconclusive".
  std::string verdict;
  std::string tb_verdict;
};

// Tail decay factor below which a finite table counts as vanishing.
inline constexpr double kTailDecayVerdict = 0.5;

CompatReport compat_scan(const BFWeight& bf, const std::vector<int>& M_list);

enum class SmallFCase { small_F, eccentric, separated };
std::string to_string(SmallFCase c);

// L~(2^M) + S(2^-M) + D~(M^(1/8)); D~ at a relative distance r is evaluated on
// a unit cube at that distance from the unit ball.
double smallf_threshold(const AdmissibleTriple& triple, double delta, int dim, int M);

struct SmallFDisjuncts {
  bool small_F = false;
  bool eccentric = false;
  bool separated = false;
  // First disjunct that holds, in declaration order.
  std::optional<SmallFCase> first() const;
};

// Thresholds used: F < eps, |log2 ec| >= log2(2M)/8, rdist >= (2M)^(1/8).
SmallFDisjuncts smallf_classify(const BFWeight& bf, std::size_t I, std::size_t J, int M,
                                double eps);
// As classify, but throws DomainError on unmet preconditions and
// InvariantError on a fall-through.
SmallFCase smallf_case(const BFWeight& bf, std::size_t I, std::size_t J, int M, double eps);

struct SmallFScan {
  std::size_t admissible_pairs = 0;
  std::size_t small_F = 0;
  std::size_t eccentric = 0;
  std::size_t separated = 0;
  std::size_t fall_throughs = 0;
};

// Every admissible pair of the tree: I outside D_2M, J outside D_M.
SmallFScan smallf_scan(const BFWeight& bf, int M, double eps);

}  // namespace ctb
