#pragma once

#include <complex>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ctb/geometry.hpp"

namespace ctb {

using Scalar = std::complex<double>;

enum class DecayFamily { power, exponential, saturating, constant, inverse_power, custom };

// One of the closed-form decay profiles on [0, inf):
//   power          (1 + a)^-p
//   exponential    exp(-p a)
//   saturating     min(1, a^p)
//   constant       p
//   inverse_power  min(1, a^-p)
class DecayFunction {
 public:
  DecayFunction() = default;
  DecayFunction(DecayFamily family, double parameter);
  // Library-only hook; never reachable from a config file.
  static DecayFunction custom(std::function<double(double)> fn, std::string name);
  // "family:parameter", e.g. "power:1" or "saturating:0.5".
  static DecayFunction parse(const std::string& spec);

  double operator()(double a) const;
  DecayFamily family() const { return family_; }
  double parameter() const { return parameter_; }
  std::string describe() const;

 private:
  DecayFamily family_ = DecayFamily::constant;
  double parameter_ = 1.0;
  std::function<double(double)> custom_;
  std::string name_;
};

// The (L, S, D) triple with the limit flags it claims; the claims and the
// monotonicity requirements are checked by sampling at construction.
class AdmissibleTriple {
 public:
  AdmissibleTriple();
  AdmissibleTriple(DecayFunction L, DecayFunction S, DecayFunction D, bool limit_L, bool limit_S,
                   bool limit_D);
  // Flags set to whatever the sampled limits show.
  static AdmissibleTriple detect(DecayFunction L, DecayFunction S, DecayFunction D);
  static AdmissibleTriple constant();

  const DecayFunction& L() const { return L_; }
  const DecayFunction& S() const { return S_; }
  const DecayFunction& D() const { return D_; }
  bool limit_L() const { return limit_L_; }
  bool limit_S() const { return limit_S_; }
  bool limit_D() const { return limit_D_; }
  bool all_limits() const { return limit_L_ && limit_S_ && limit_D_; }
  std::string describe() const;

  double F(double a, double b, double c) const { return L_(a) * S_(b) * D_(c); }

 private:
  void validate() const;

  DecayFunction L_, S_, D_;
  bool limit_L_ = false, limit_S_ = false, limit_D_ = false;
};

struct SeriesValue {
  double value = 0;
  int terms = 0;
  double tail_bound = 0;
};

inline constexpr double kSeriesTolerance = 1e-14;
inline constexpr int kSeriesCap = 128;

// sum_k 2^-kn L(2^-k side).
SeriesValue tilde_L(const AdmissibleTriple& triple, double side, int dim,
                    double tol = kSeriesTolerance);
// sum_k 2^-k delta D(rdist(2^k I, B)).
SeriesValue tilde_D(const AdmissibleTriple& triple, const Cube& cube, double delta,
                    double tol = kSeriesTolerance);
// L~(I1) S(I2) D~(I3).
double tilde_F(const AdmissibleTriple& triple, const Cube& i1, const Cube& i2, const Cube& i3,
               double delta);
// L(I1) S(I2) D(I3) with D evaluated at rdist(I3, B).
double cube_F(const AdmissibleTriple& triple, const Cube& i1, const Cube& i2, const Cube& i3);

double sup_norm(std::span<const double> v);
double sup_dist(std::span<const double> a, std::span<const double> b);

// L(|t-x|) S(|t-x|) D(1 + |t+x| / (1 + |t-x|)).
double fk_pointwise(const AdmissibleTriple& triple, std::span<const double> t,
                    std::span<const double> x);
// L(|t-x|) S(|t-t'| + |x-x'|) D(1 + |t+x| / (1 + |t-x|)).
double fk_smooth(const AdmissibleTriple& triple, std::span<const double> t,
                 std::span<const double> x, std::span<const double> tp,
                 std::span<const double> xp);
// The comparison profile around a centre c: L(|t-c|) S(|x-c|) D(1 + |t+c| / (1 + |t-c|)).
double fk_centered(const AdmissibleTriple& triple, std::span<const double> t,
                   std::span<const double> x, std::span<const double> c);

// L(l<I,J>) S(l(J)) D(rdist(<I,J>, B)).
double shell_bound(const AdmissibleTriple& triple, const Cube& I, const Cube& J);

using KernelFn = std::function<Scalar(std::span<const double>, std::span<const double>)>;

class CompactKernel {
 public:
  CompactKernel(std::string kind, KernelFn base, AdmissibleTriple triple, double delta, int dim);

  Scalar operator()(std::span<const double> t, std::span<const double> x) const;
  Scalar operator()(double t, double x) const;

  const std::string& kind() const { return kind_; }
  const AdmissibleTriple& triple() const { return triple_; }
  double delta() const { return delta_; }
  int dim() const { return dim_; }
  // Every built-in kernel except dlp_graph changes sign under t <-> x.
  bool antisymmetric() const { return antisymmetric_; }
  void set_antisymmetric(bool v) { antisymmetric_ = v; }

 private:
  std::string kind_;
  KernelFn base_;
  AdmissibleTriple triple_;
  double delta_;
  int dim_;
  bool antisymmetric_ = true;
};

struct KernelParams {
  AdmissibleTriple triple;
  double delta = 1.0;
  int dim = 1;
  // dlp_graph profile A(s) = amplitude |s|^(1 + alpha).
  double amplitude = 1.0;
  double alpha = 0.5;
  // holder_cauchy anchor point.
  double anchor = 0.0;
  KernelFn custom;
};

// Kinds: zero, hilbert, compact_cauchy, holder_cauchy, dlp_graph, custom.
CompactKernel make_kernel(const std::string& kind, const KernelParams& params);
std::vector<std::string> kernel_kinds();

struct KernelSample {
  std::vector<double> t, x, tp, xp;
};

using KernelSampler = std::function<std::optional<KernelSample>()>;

// Seeded sampler: t uniform in [-radius, radius]^n, |t-x| log-uniform in
// [r_min, r_max], perturbation size log-uniform below |t-x|/2.
KernelSampler log_radial_sampler(std::uint64_t seed, int dim, double radius, double r_min,
                                 double r_max);

struct BoundReport {
  std::size_t samples_checked = 0;
  double worst_ratio = 0;
  std::vector<double> worst_configuration;
  double empirical_constant = 0;
  bool exhausted = false;
};

BoundReport check_smoothness(const CompactKernel& kernel, const KernelSampler& sampler,
                             std::size_t count);
BoundReport check_decay(const CompactKernel& kernel, const KernelSampler& sampler,
                        std::size_t count);

}  // namespace ctb
