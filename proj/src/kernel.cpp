#include "ctb/kernel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <sstream>

#include "ctb/error.hpp"
#include "ctb/parallel.hpp"
#include "ctb/rng.hpp"

namespace ctb {
namespace {

std::vector<double> sample_grid() {
  std::vector<double> g;
  g.reserve(1001);
  g.push_back(0.0);
  for (int i = 0; i < 1000; ++i) g.push_back(std::pow(10.0, -6.0 + 12.0 * i / 999.0));
  return g;
}

const char* family_name(DecayFamily f) {
  switch (f) {
    case DecayFamily::power: return "power";
    case DecayFamily::exponential: return "exponential";
    case DecayFamily::saturating: return "saturating";
    case DecayFamily::constant: return "constant";
    case DecayFamily::inverse_power: return "inverse_power";
    case DecayFamily::custom: return "custom";
  }
  return "?";
}

void check_dim(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.empty() || a.size() > kMaxDim) {
    throw DomainError("points of mismatched or unsupported dimension");
  }
}

double sup_sum(std::span<const double> a, std::span<const double> b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] + b[i]));
  return m;
}

double d_argument(std::span<const double> t, std::span<const double> x) {
  return 1.0 + sup_sum(t, x) / (1.0 + sup_dist(t, x));
}

}  // namespace

DecayFunction::DecayFunction(DecayFamily family, double parameter)
    : family_(family), parameter_(parameter) {
  if (family == DecayFamily::custom) throw ConfigError("use DecayFunction::custom");
  if (!(parameter > 0) || !std::isfinite(parameter)) {
    throw ConfigError(std::string("decay parameter must be positive for ") + family_name(family));
  }
}

DecayFunction DecayFunction::custom(std::function<double(double)> fn, std::string name) {
  DecayFunction d;
  d.family_ = DecayFamily::custom;
  d.custom_ = std::move(fn);
  d.name_ = std::move(name);
  return d;
}

DecayFunction DecayFunction::parse(const std::string& spec) {
  const auto colon = spec.find(':');
  const std::string name = spec.substr(0, colon);
  double p = 1.0;
  if (colon != std::string::npos) {
    const std::string num = spec.substr(colon + 1);
    std::size_t used = 0;
    try {
      p = std::stod(num, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != num.size()) throw ConfigError("malformed decay parameter: " + spec);
  }
  for (DecayFamily f : {DecayFamily::power, DecayFamily::exponential, DecayFamily::saturating,
                        DecayFamily::constant, DecayFamily::inverse_power}) {
    if (name == family_name(f)) return DecayFunction(f, p);
  }
  throw ConfigError("unknown decay family: " + spec);
}

double DecayFunction::operator()(double a) const {
  switch (family_) {
    case DecayFamily::power: return std::pow(1.0 + a, -parameter_);
    case DecayFamily::exponential: return std::exp(-parameter_ * a);
    case DecayFamily::saturating: return a >= 1.0 ? 1.0 : std::pow(a, parameter_);
    case DecayFamily::constant: return parameter_;
    case DecayFamily::inverse_power: return a <= 1.0 ? 1.0 : std::pow(a, -parameter_);
    case DecayFamily::custom: return custom_(a);
  }
  return 0.0;
}

std::string DecayFunction::describe() const {
  if (family_ == DecayFamily::custom) return "custom:" + name_;
  std::ostringstream os;
  os.precision(17);
  os << family_name(family_) << ':' << parameter_;
  return os.str();
}

AdmissibleTriple::AdmissibleTriple() : AdmissibleTriple(constant()) {}

AdmissibleTriple::AdmissibleTriple(DecayFunction L, DecayFunction S, DecayFunction D, bool limit_L,
                                   bool limit_S, bool limit_D)
    : L_(std::move(L)),
      S_(std::move(S)),
      D_(std::move(D)),
      limit_L_(limit_L),
      limit_S_(limit_S),
      limit_D_(limit_D) {
  validate();
}

AdmissibleTriple AdmissibleTriple::detect(DecayFunction L, DecayFunction S, DecayFunction D) {
  const bool l = L(1e6) < 1e-2 * L(1.0);
  const bool s = S(1e-6) < 1e-2 * S(1.0);
  const bool d = D(1e6) < 1e-2 * D(1.0);
  return AdmissibleTriple(std::move(L), std::move(S), std::move(D), l, s, d);
}

AdmissibleTriple AdmissibleTriple::constant() {
  AdmissibleTriple t(DecayFunction(DecayFamily::constant, 1.0), DecayFunction(DecayFamily::constant, 1.0),
                     DecayFunction(DecayFamily::constant, 1.0), false, false, false);
  return t;
}

void AdmissibleTriple::validate() const {
  static const std::vector<double> grid = sample_grid();
  auto check = [&](const DecayFunction& f, const char* role, int direction) {
    double prev = f(grid.front());
    for (double a : grid) {
      const double v = f(a);
      if (!std::isfinite(v) || v < 0) {
        throw ConfigError(std::string(role) + " must be finite and non-negative: " + f.describe());
      }
      const double slack = 1e-12 * std::max(std::abs(prev), std::abs(v));
      if (direction < 0 && v > prev + slack) {
        throw ConfigError(std::string(role) + " must be non-increasing: " + f.describe());
      }
      if (direction > 0 && v < prev - slack) {
        throw ConfigError(std::string(role) + " must be non-decreasing: " + f.describe());
      }
      prev = v;
    }
  };
  check(L_, "L", -1);
  check(S_, "S", +1);
  check(D_, "D", -1);
  if (limit_L_ && !(L_(1e6) < 1e-2 * L_(1.0))) throw ConfigError("declared limit of L not observed");
  if (limit_S_ && !(S_(1e-6) < 1e-2 * S_(1.0))) throw ConfigError("declared limit of S not observed");
  if (limit_D_ && !(D_(1e6) < 1e-2 * D_(1.0))) throw ConfigError("declared limit of D not observed");
}

std::string AdmissibleTriple::describe() const {
  return "L=" + L_.describe() + " S=" + S_.describe() + " D=" + D_.describe();
}

SeriesValue tilde_L(const AdmissibleTriple& triple, double side, int dim, double tol) {
  if (!(tol > 0)) throw DomainError("series tolerance must be positive");
  const double sup = triple.L()(0.0);
  const double ratio = std::ldexp(1.0, -dim);
  SeriesValue out;
  for (int k = 0; k < kSeriesCap; ++k) {
    out.value += std::ldexp(triple.L()(std::ldexp(side, -k)), -k * dim);
    out.terms = k + 1;
    out.tail_bound = sup * std::ldexp(1.0, -(k + 1) * dim) / (1.0 - ratio);
    if (out.tail_bound < tol) break;
  }
  return out;
}

SeriesValue tilde_D(const AdmissibleTriple& triple, const Cube& cube, double delta, double tol) {
  if (!(tol > 0)) throw DomainError("series tolerance must be positive");
  if (!(delta > 0)) throw DomainError("delta must be positive");
  const double sup = triple.D()(1.0);
  const double ratio = std::pow(2.0, -delta);
  SeriesValue out;
  double weight = 1.0;
  for (int k = 0; k < kSeriesCap; ++k) {
    out.value += weight * triple.D()(rdist_dilate_to_unit_ball(cube, k));
    weight *= ratio;
    out.terms = k + 1;
    out.tail_bound = sup * weight / (1.0 - ratio);
    if (out.tail_bound < tol) break;
  }
  return out;
}

double tilde_F(const AdmissibleTriple& triple, const Cube& i1, const Cube& i2, const Cube& i3,
               double delta) {
  return tilde_L(triple, i1.side.to_double(), i1.dim).value * triple.S()(i2.side.to_double()) *
         tilde_D(triple, i3, delta).value;
}

double cube_F(const AdmissibleTriple& triple, const Cube& i1, const Cube& i2, const Cube& i3) {
  return triple.L()(i1.side.to_double()) * triple.S()(i2.side.to_double()) *
         triple.D()(rdist_to_unit_ball(i3));
}

double sup_norm(std::span<const double> v) {
  double m = 0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

double sup_dist(std::span<const double> a, std::span<const double> b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

double fk_pointwise(const AdmissibleTriple& triple, std::span<const double> t,
                    std::span<const double> x) {
  check_dim(t, x);
  const double r = sup_dist(t, x);
  if (r == 0) throw DomainError("F_K evaluated on the diagonal");
  return triple.F(r, r, d_argument(t, x));
}

double fk_smooth(const AdmissibleTriple& triple, std::span<const double> t,
                 std::span<const double> x, std::span<const double> tp,
                 std::span<const double> xp) {
  check_dim(t, x);
  check_dim(t, tp);
  check_dim(x, xp);
  const double r = sup_dist(t, x);
  if (r == 0) throw DomainError("F_K evaluated on the diagonal");
  return triple.F(r, sup_dist(t, tp) + sup_dist(x, xp), d_argument(t, x));
}

double fk_centered(const AdmissibleTriple& triple, std::span<const double> t,
                   std::span<const double> x, std::span<const double> c) {
  check_dim(t, x);
  check_dim(t, c);
  return triple.F(sup_dist(t, c), sup_dist(x, c), d_argument(t, c));
}

double shell_bound(const AdmissibleTriple& triple, const Cube& I, const Cube& J) {
  const Cube env = enclosing(I, J);
  return cube_F(triple, env, J, env);
}

CompactKernel::CompactKernel(std::string kind, KernelFn base, AdmissibleTriple triple, double delta,
                             int dim)
    : kind_(std::move(kind)), base_(std::move(base)), triple_(std::move(triple)), delta_(delta), dim_(dim) {
  if (!(delta > 0 && delta <= 1)) throw ConfigError("kernel delta must lie in (0, 1]");
  if (dim < 1 || dim > kMaxDim) throw ConfigError("kernel dimension must be 1 or 2");
  if (!base_) throw ConfigError("kernel without evaluator");
}

Scalar CompactKernel::operator()(std::span<const double> t, std::span<const double> x) const {
  if (t.size() != static_cast<std::size_t>(dim_) || x.size() != static_cast<std::size_t>(dim_)) {
    throw DomainError("kernel evaluated at points of the wrong dimension");
  }
  if (sup_dist(t, x) == 0) throw DomainError("kernel evaluated on the diagonal");
  return base_(t, x);
}

Scalar CompactKernel::operator()(double t, double x) const {
  return (*this)(std::span<const double>(&t, 1), std::span<const double>(&x, 1));
}

std::vector<std::string> kernel_kinds() {
  return {"zero", "hilbert", "compact_cauchy", "holder_cauchy", "dlp_graph", "custom"};
}

CompactKernel make_kernel(const std::string& kind, const KernelParams& p) {
  const AdmissibleTriple triple = p.triple;
  auto one_dim_only = [&] {
    if (p.dim != 1) throw ConfigError("kernel '" + kind + "' is only defined for n = 1");
  };
  if (kind == "zero") {
    return CompactKernel(kind, [](auto, auto) { return Scalar(0); }, triple, p.delta, p.dim);
  }
  if (kind == "hilbert") {
    one_dim_only();
    return CompactKernel(
        kind, [](std::span<const double> t, std::span<const double> x) { return Scalar(1.0 / (t[0] - x[0])); },
        AdmissibleTriple::constant(), p.delta, p.dim);
  }
  if (kind == "compact_cauchy") {
    one_dim_only();
    return CompactKernel(
        kind,
        [triple](std::span<const double> t, std::span<const double> x) {
          return Scalar(fk_pointwise(triple, t, x) / (t[0] - x[0]));
        },
        triple, p.delta, p.dim);
  }
  if (kind == "holder_cauchy") {
    one_dim_only();
    const double delta = p.delta;
    const double a = p.anchor;
    CompactKernel k(
        kind,
        [triple, delta, a](std::span<const double> t, std::span<const double> x) {
          const double r = std::abs(t[0] - x[0]);
          const double s = std::abs(x[0] - a);
          const double rough = s == 0 ? 0.0 : std::pow(std::min(s / r, r / s), delta) / r;
          return Scalar(fk_pointwise(triple, t, x) * (1.0 / (t[0] - x[0]) + rough));
        },
        triple, p.delta, p.dim);
    k.set_antisymmetric(false);
    return k;
  }
  if (kind == "dlp_graph") {
    one_dim_only();
    const double amp = p.amplitude;
    const double alpha = p.alpha;
    if (!(alpha > 0 && alpha <= 1)) throw ConfigError("dlp_graph alpha must lie in (0, 1]");
    auto A = [amp, alpha](double s) { return amp * std::pow(std::abs(s), 1.0 + alpha); };
    auto dA = [amp, alpha](double s) {
      return amp * (1.0 + alpha) * std::pow(std::abs(s), alpha) * (s < 0 ? -1.0 : 1.0);
    };
    // <nu(y), X - Y> / |X - Y|^2 dsigma(y) for Y = (t, A(t)), X = (x, A(x)).
    CompactKernel k(
        kind,
        [A, dA](std::span<const double> t, std::span<const double> x) {
          const double dx = x[0] - t[0];
          const double dy = A(x[0]) - A(t[0]);
          return Scalar((dy - dA(t[0]) * dx) / (dx * dx + dy * dy));
        },
        triple, p.delta, p.dim);
    k.set_antisymmetric(false);
    return k;
  }
  if (kind == "custom") {
    if (!p.custom) throw ConfigError("custom kernel requires an evaluator");
    CompactKernel k(kind, p.custom, triple, p.delta, p.dim);
    k.set_antisymmetric(false);
    return k;
  }
  throw ConfigError("unknown kernel kind: " + kind);
}

KernelSampler log_radial_sampler(std::uint64_t seed, int dim, double radius, double r_min,
                                 double r_max) {
  if (!(r_min > 0 && r_max > r_min && radius >= 0)) throw ConfigError("bad sampler range");
  auto rng = std::make_shared<Rng>(seed);
  return [rng, dim, radius, r_min, r_max]() -> std::optional<KernelSample> {
    KernelSample s;
    s.t.resize(dim);
    s.x.resize(dim);
    s.tp.resize(dim);
    s.xp.resize(dim);
    const double r = r_min * std::pow(r_max / r_min, rng->uniform());
    const int axis = static_cast<int>(rng->integer(0, dim - 1));
    for (int i = 0; i < dim; ++i) {
      s.t[i] = rng->uniform(-radius, radius);
      const double off = i == axis ? (rng->uniform() < 0.5 ? -r : r) : rng->uniform(-r, r);
      s.x[i] = s.t[i] + off;
    }
    const double h = 0.49 * r * std::pow(1e-3, rng->uniform());
    const double share = rng->uniform();
    for (int i = 0; i < dim; ++i) {
      s.tp[i] = s.t[i] + share * h * rng->uniform(-1.0, 1.0);
      s.xp[i] = s.x[i] + (1.0 - share) * h * rng->uniform(-1.0, 1.0);
    }
    return s;
  };
}

namespace {

template <class Ratio>
BoundReport run_check(const KernelSampler& sampler, std::size_t count, Ratio ratio) {
  std::vector<KernelSample> samples;
  samples.reserve(count);
  BoundReport rep;
  for (std::size_t i = 0; i < count; ++i) {
    auto s = sampler();
    if (!s) {
      rep.exhausted = true;
      break;
    }
    samples.push_back(std::move(*s));
  }
  std::vector<double> ratios(samples.size());
  parallel_for(samples.size(), [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) ratios[i] = ratio(samples[i]);
  });
  rep.samples_checked = samples.size();
  std::size_t worst = samples.size();
  for (std::size_t i = 0; i < ratios.size(); ++i) {
    if (i == 0 || ratios[i] > rep.worst_ratio) {
      worst = i;
      rep.worst_ratio = ratios[i];
    }
  }
  if (worst < samples.size()) {
    const auto& s = samples[worst];
    for (const auto* v : {&s.t, &s.x, &s.tp, &s.xp}) {
      rep.worst_configuration.insert(rep.worst_configuration.end(), v->begin(), v->end());
    }
  }
  rep.empirical_constant = rep.worst_ratio;
  return rep;
}

}  // namespace

BoundReport check_smoothness(const CompactKernel& kernel, const KernelSampler& sampler,
                             std::size_t count) {
  const double n = kernel.dim();
  const double delta = kernel.delta();
  return run_check(sampler, count, [&](const KernelSample& s) {
    const double r = sup_dist(s.t, s.x);
    const double h = sup_dist(s.t, s.tp) + sup_dist(s.x, s.xp);
    if (!(2 * h < r)) throw DomainError("smoothness sample violates 2(|t-t'|+|x-x'|) < |t-x|");
    const double diff = std::abs(kernel(s.t, s.x) - kernel(s.tp, s.xp));
    if (diff == 0) return 0.0;
    const double rhs = std::pow(h, delta) / std::pow(r, n + delta) * fk_pointwise(kernel.triple(), s.t, s.x);
    return rhs > 0 ? diff / rhs : std::numeric_limits<double>::infinity();
  });
}

BoundReport check_decay(const CompactKernel& kernel, const KernelSampler& sampler,
                        std::size_t count) {
  const double n = kernel.dim();
  return run_check(sampler, count, [&](const KernelSample& s) {
    const double r = sup_dist(s.t, s.x);
    const double v = std::abs(kernel(s.t, s.x));
    if (v == 0) return 0.0;
    const double rhs = fk_pointwise(kernel.triple(), s.t, s.x) / std::pow(r, n);
    return rhs > 0 ? v / rhs : std::numeric_limits<double>::infinity();
  });
}

}  // namespace ctb
