#pragma once

#include <cstddef>
#include <vector>

#include "ctb/kernel.hpp"
#include "ctb/operator.hpp"
#include "ctb/wavelets.hpp"

namespace ctb {

// Coefficient fields hold <f, dual wavelet_J^{b2}> per non-root cube. The sup
// runs over non-root cubes I, since B_{I,q} needs a parent. The literal
// weight is built from b2 with q2, the mirrored one from b1 with q1; both use
// the same field and the larger value is returned.
double bmo_b_norm(const WaveletCoeffs& field, const TestingPair& pair);
// The same sup restricted to J outside D_M.
double cmo_tail(const WaveletCoeffs& field, const TestingPair& pair, int M);

struct BmoParts {
  double literal = 0;
  double mirrored = 0;
};
BmoParts bmo_b_parts(const WaveletCoeffs& field, const TestingPair& pair, int M = 0);

struct Atom {
  // The atom lives on the parent of this cube.
  std::size_t cube = 0;
  GridFunction values;
  double p = 2;
  // values = scale * (profile made b-mean-zero on the parent).
  Scalar scale = 1;
};

// Throws DegenerateError when the profile has no b-mean-zero part on I_p.
Atom make_atom(const WaveletSystem& sys, std::size_t I, double p, const GridFunction& profile);
// ||a b||_p <= B_{I,p} |I|^{-1/p'} and the b-mean, relative to ||a b||_1.
double atom_size_ratio(const WaveletSystem& sys, const Atom& atom);

// Upper bound for the H^1_b norm from a dyadic atomic decomposition: on each
// cube Q the remainder is either taken whole as one atom or split into the
// block (Delta_Q^b)^* f plus the remainders on the children, whichever costs
// less. Throws DomainError unless f b has mean zero over the region.
double h1_norm(const GridFunction& f, const WaveletSystem& sys, double p);

struct DualityResult {
  Scalar pairing = 0;
  double bmo = 0;
  double h1 = 0;
  double ratio = 0;
};

// f = synthesize(pair.second, field); the pairing is int f g b2.
DualityResult duality_check(const WaveletCoeffs& field, const GridFunction& g,
                            const TestingPair& pair, double p = 2);

// <Pi f, g> = sum_I c_I <f>_{I_p} / <b1>_{I_p} <g, dual wavelet_I^{b2}>, with
// c_I = <T b1, wavelet_I^{b2}>. The bold variant multiplies the output by b2.
class ParaproductOperator {
 public:
  ParaproductOperator(TestingPair pair, WaveletCoeffs coeffs, bool bold = false);

  const TestingPair& pair() const { return pair_; }
  const Region& region() const { return pair_.first.region(); }
  const WaveletCoeffs& coeffs() const { return coeffs_; }
  bool bold() const { return bold_; }

  GridFunction apply(const GridFunction& f) const;
  // Sum over cubes Q of (Delta_Q^{b2})^*(g) E_Q^{b1}(f), g the dual synthesis
  // of the coefficients; Delta_Q^{b2}(b2 g) for the bold variant. Agrees with
  // apply whenever the field is the coefficient field of a function.
  GridFunction apply_telescoped(const GridFunction& f) const;
  GridFunction apply_transpose(const GridFunction& g) const;
  // Evaluated from the coefficient formula with analyze(pair.second, g).
  Scalar pair_with(const GridFunction& f, const GridFunction& g) const;

  // K(t, x) for cells t and x, summed term by term.
  Scalar kernel(std::size_t t, std::size_t x) const;
  OperatorMatrix matrix() const;

 private:
  TestingPair pair_;
  WaveletCoeffs coeffs_;
  bool bold_;
};

struct ParaKernelReport {
  BoundReport envelope;
  // Samples with I_{x,x'} strictly inside I_{t,x} = I_{t,x,x'}, and those
  // among them whose difference is not exactly zero.
  std::size_t vanishing_cases = 0;
  std::size_t vanishing_violations = 0;
};

// |K(t,x) - K(t,x')| against l(I_{x,x'}) / |t-x|^{n+1} whenever
// 2|x - x'| < |t - x|; points are mapped to their cells and samples that
// leave the region are skipped.
ParaKernelReport paraproduct_kernel_check(const ParaproductOperator& P,
                                          const KernelSampler& sampler, std::size_t count);
// Uniform points of the region.
KernelSampler region_sampler(const Region& region, std::uint64_t seed);

struct Reduction {
  OperatorMatrix reduced;
  // Max coefficient of T~ b1 and T~^t b2, relative to the max norm of T.
  double tb1_defect = 0;
  double tstar_b2_defect = 0;
  // |int T~b1 b2|, the coarse term the tree expansion leaves out.
  double root_term = 0;
};

// T~ = T - Pi_{T b1} - (Pi_{T^t b2})^t with both fields from the truncated
// pairings. Throws DomainError naming the worst cube when either defect
// exceeds kCancellationTolerance.
Reduction reduce(const OperatorMatrix& T, const TestingPair& pair);

}  // namespace ctb
