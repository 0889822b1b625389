#include "ctb/experiment.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <sstream>
#include <tuple>

#include "ctb/compatibility.hpp"
#include "ctb/error.hpp"
#include "ctb/parallel.hpp"
#include "ctb/paraproduct.hpp"
#include "ctb/rng.hpp"

namespace ctb {

namespace {

using Json = nlohmann::ordered_json;
namespace fs = std::filesystem;

// Value kinds: i integer, d real, b flag, I integer list, D real list, s text.
struct KeySpec {
  const char* section;
  const char* key;
  const char* fallback;
  char kind;
};

const std::vector<KeySpec>& schema() {
  static const std::vector<KeySpec> keys = {
      {"run", "seed", "1", 'i'},
      {"run", "out", "out", 's'},
      {"region", "dim", "1", 'i'},
      {"region", "root_level", "0", 'i'},
      {"region", "root_index", "0", 'I'},
      {"region", "finest_level", "-7", 'i'},
      {"kernel", "kind", "compact_cauchy", 's'},
      {"kernel", "L", "power:1", 's'},
      {"kernel", "S", "saturating:0.5", 's'},
      {"kernel", "D", "inverse_power:1", 's'},
      {"kernel", "delta", "1", 'd'},
      {"kernel", "anchor", "0", 'd'},
      {"kernel", "amplitude", "1", 'd'},
      {"kernel", "alpha", "0.5", 'd'},
      {"kernel", "refine_levels", "3", 'i'},
      {"kernel", "diagonal", "auto", 's'},
      {"kernel", "diagonal_levels", "3", 'i'},
      {"kernel", "samples", "20000", 'i'},
      {"kernel", "radius", "4", 'd'},
      {"kernel", "r_min", "1e-3", 'd'},
      {"kernel", "r_max", "100", 'd'},
      {"kernel", "smoothness_bound", "inf", 'd'},
      {"kernel", "decay_bound", "inf", 'd'},
      {"kernel", "shell_depth", "3", 'i'},
      {"testing", "b1", "constant:1", 's'},
      {"testing", "b2", "constant:1", 's'},
      {"testing", "q1", "4", 'd'},
      {"testing", "q2", "4", 'd'},
      {"transform", "draws", "20", 'i'},
      {"transform", "tolerance", "1e-10", 'd'},
      {"transform", "gram_max_cubes", "255", 'i'},
      {"transform", "gram_tolerance", "1e-12", 'd'},
      {"compat", "M", "2,3,4,5,6", 'I'},
      {"compat", "theta", "0.125", 'd'},
      {"compat", "smallf_M", "4,6,8", 'I'},
      {"compat", "smallf_eps", "auto", 's'},
      {"operator", "cache", "", 's'},
      {"operator", "M", "1,2,3,4", 'I'},
      {"operator", "iterations", "500", 'i'},
      {"operator", "weak_M", "4", 'i'},
      {"operator", "eps", "0.1,0.05", 'D'},
      {"operator", "local", "true", 'b'},
      {"operator", "lb", "true", 'b'},
      {"operator", "lb_k_max", "0", 'i'},
      {"operator", "lb_k_fit", "5", 'i'},
      {"operator", "bump", "true", 'b'},
      {"operator", "bump_delta", "0", 'd'},
      {"operator", "bump_eps", "0", 'd'},
      {"operator", "bump_ceiling", "inf", 'd'},
      {"operator", "bump_fw_M", "0", 'i'},
      {"operator", "necessity", "true", 'b'},
      {"operator", "necessity_accretive", "false", 'b'},
      {"operator", "compact_factor", "2", 'd'},
      {"report", "inputs", "transform.json,kernel.json,compat.json,operator.json", 's'},
  };
  return keys;
}

const KeySpec* find_key(const std::string& section, const std::string& key) {
  for (const KeySpec& k : schema()) {
    if (section == k.section && key == k.key) return &k;
  }
  return nullptr;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) out.push_back(trim(item));
  return out;
}

double parse_real(const std::string& s, const std::string& where) {
  const std::string t = trim(s);
  if (t == "inf") return kInfinity;
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(t, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (t.empty() || used != t.size() || std::isnan(v)) throw ConfigError(where + ": not a number: '" + s + "'");
  return v;
}

long long parse_int(const std::string& s, const std::string& where) {
  const std::string t = trim(s);
  std::size_t used = 0;
  long long v = 0;
  try {
    v = std::stoll(t, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (t.empty() || used != t.size()) throw ConfigError(where + ": not an integer: '" + s + "'");
  return v;
}

bool parse_flag(const std::string& s, const std::string& where) {
  const std::string t = trim(s);
  if (t == "true" || t == "1" || t == "yes") return true;
  if (t == "false" || t == "0" || t == "no") return false;
  throw ConfigError(where + ": not a flag: '" + s + "'");
}

std::string profile_name(const std::string& spec) { return spec.substr(0, spec.find(':')); }

std::vector<double> profile_args(const std::string& spec) {
  const auto colon = spec.find(':');
  if (colon == std::string::npos) return {};
  std::vector<double> out;
  for (const std::string& a : split(spec.substr(colon + 1), ',')) out.push_back(parse_real(a, spec));
  return out;
}

void check_profile_spec(const std::string& spec) {
  const std::string name = profile_name(spec);
  if (name == "file") {
    if (spec.size() <= 5) throw ConfigError("file profile needs a path");
    return;
  }
  const std::vector<double> a = profile_args(spec);
  const auto need = [&](bool ok) {
    if (!ok) throw ConfigError("malformed testing profile: " + spec);
  };
  if (name == "constant") {
    need(a.size() == 1 || a.size() == 2);
  } else if (name == "polynomial") {
    need(!a.empty());
  } else if (name == "power") {
    need(a.size() == 1);
  } else if (name == "spike") {
    need(a.size() == 3 && a[1] > 0);
  } else if (name == "random") {
    need(a.size() == 2 && 0 < a[0] && a[0] <= a[1]);
  } else {
    throw ConfigError("unknown testing profile: " + spec);
  }
}

Json num(double v) {
  if (std::isfinite(v)) return v;
  if (std::isnan(v)) return "nan";
  return v > 0 ? "inf" : "-inf";
}

Json cnum(Scalar z) { return Json::array({num(z.real()), num(z.imag())}); }

std::string fmt(double v) { return format_double(v); }

class Output {
 public:
  Output(fs::path dir, std::string command) : dir_(std::move(dir)), command_(std::move(command)) {
    std::error_code ec;
    fs::create_directories(dir_, ec);
    if (ec) throw IoError("cannot create output directory " + dir_.string() + ": " + ec.message());
  }

  std::ofstream open(const std::string& name) {
    std::ofstream os(dir_ / name, std::ios::binary);
    if (!os) throw IoError("cannot write " + (dir_ / name).string());
    files_.push_back(name);
    return os;
  }

  const fs::path& dir() const { return dir_; }
  std::vector<std::string>& files() { return files_; }

 private:
  fs::path dir_;
  std::string command_;
  std::vector<std::string> files_;
};

Json config_echo(const ExperimentConfig& c) {
  Json out = Json::object();
  for (const auto& [section, keys] : c.values()) {
    Json s = Json::object();
    for (const auto& [key, value] : keys) {
      // The output location is not a computation parameter.
      if (section == "run" && key == "out") continue;
      s[key] = value;
    }
    out[section] = s;
  }
  return out;
}

// Single orchestration thread; library calls parallelize internally.
struct Context {
  const ExperimentConfig& config;
  Output& out;
  Json metrics = Json::object();
  Json run = Json::object();
  bool pass = true;
};

template <class Fn>
void stage(Context& ctx, const std::string& name, Fn&& fn) {
  try {
    fn();
  } catch (const ConfigError&) {
    throw;
  } catch (const IoError&) {
    throw;
  } catch (const Error& e) {
    ctx.metrics[name] = Json{{"error", e.what()}};
    ctx.pass = false;
  }
}

bool decays(double first, double last, double factor) {
  return first == 0 || last <= factor * first;
}

// transform ---------------------------------------------------------------

void cmd_transform(Context& ctx) {
  const ExperimentConfig& c = ctx.config;
  const Region r = c.region();
  const int draws = c.integer("transform", "draws");
  const double tol = c.number("transform", "tolerance");
  const double gtol = c.number("transform", "gram_tolerance");
  const auto gram_cap = static_cast<std::size_t>(c.integer("transform", "gram_max_cubes"));
  Rng rng(c.seed());
  std::ofstream rt = ctx.out.open("transform_roundtrip.csv");
  rt << "system,draw,reconstruction_error,dual_reconstruction_error\n";
  std::ofstream gt = ctx.out.open("transform_gram.csv");
  gt << "system,I,J,closed_re,closed_im,quadrature_re,quadrature_im,abs_error\n";
  std::ofstream st = ctx.out.open("transform_siblings.csv");
  st << "system,parent,dual_sum,weighted_sum\n";
  Json systems = Json::array();
  for (int which = 1; which <= 2; ++which) {
    const WaveletSystem sys(c.testing_function(r, which));
    double worst = 0, worst_dual = 0;
    for (int d = 0; d < draws; ++d) {
      GridFunction f(r);
      for (Scalar& v : f.values()) v = Scalar(rng.normal(), rng.normal());
      const Scalar mean = f.integral() / cube_volume(r, 0);
      for (Scalar& v : f.values()) v -= mean;
      const double scale = f.sup_norm();
      const GridFunction back = synthesize(sys, analyze(sys, f)) + root_expectation(sys, f);
      const GridFunction dback = dual_synthesize(sys, dual_analyze(sys, f)) + root_expectation_adjoint(sys, f);
      const double e1 = (back - f).sup_norm() / scale, e2 = (dback - f).sup_norm() / scale;
      worst = std::max(worst, e1);
      worst_dual = std::max(worst_dual, e2);
      rt << which << ',' << d << ',' << fmt(e1) << ',' << fmt(e2) << '\n';
    }
    Json gram_metric = "skipped";
    Json sib_metric = "skipped";
    bool ok = worst <= tol && worst_dual <= tol;
    if (r.cube_count() <= gram_cap) {
      std::vector<GridFunction> psi(r.cube_count(), GridFunction(r)), dual(r.cube_count(), GridFunction(r));
      for (std::size_t I = 1; I < r.cube_count(); ++I) {
        psi[I] = wavelet(sys, I);
        dual[I] = dual_wavelet(sys, I);
      }
      double gworst = 0;
      for (std::size_t I = 1; I < r.cube_count(); ++I) {
        for (std::size_t J = 1; J < r.cube_count(); ++J) {
          const Scalar closed = gram(sys, I, J), quad = pairing(psi[I], dual[J]);
          const double err = std::abs(closed - quad);
          gworst = std::max(gworst, err);
          if (closed == Scalar(0) && std::abs(quad) <= gtol) continue;
          gt << which << ',' << r.cube(I).token() << ',' << r.cube(J).token() << ',' << fmt(closed.real()) << ','
             << fmt(closed.imag()) << ',' << fmt(quad.real()) << ',' << fmt(quad.imag()) << ',' << fmt(err) << '\n';
        }
      }
      double sworst = 0;
      for (std::size_t Q = 0; Q < r.level_offset(r.depth()); ++Q) {
        GridFunction sd(r), sw(r);
        for (std::size_t I : r.children_flat(Q)) {
          sd += dual[I];
          sw += (cube_volume(r, I) * sys.average(I)) * psi[I];
        }
        sworst = std::max({sworst, sd.sup_norm(), sw.sup_norm()});
        st << which << ',' << r.cube(Q).token() << ',' << fmt(sd.sup_norm()) << ',' << fmt(sw.sup_norm()) << '\n';
      }
      gram_metric = num(gworst);
      sib_metric = num(sworst);
      ok = ok && gworst <= gtol && sworst <= gtol;
    }
    systems.push_back(Json{{"system", which},
                           {"max_reconstruction_error", num(worst)},
                           {"max_dual_reconstruction_error", num(worst_dual)},
                           {"max_gram_error", gram_metric},
                           {"max_sibling_sum", sib_metric},
                           {"pass", ok}});
    ctx.pass = ctx.pass && ok;
  }
  ctx.metrics["systems"] = systems;
}

// kernel ------------------------------------------------------------------

Json bound_json(const BoundReport& b) {
  Json where = Json::array();
  for (double v : b.worst_configuration) where.push_back(num(v));
  return Json{{"samples_checked", b.samples_checked},
              {"worst_ratio", num(b.worst_ratio)},
              {"empirical_constant", num(b.empirical_constant)},
              {"exhausted", b.exhausted},
              {"worst_configuration", where}};
}

void bound_row(std::ostream& os, const std::string& kind, const BoundReport& b) {
  os << kind << ',' << b.samples_checked << ',' << fmt(b.worst_ratio) << ',';
  for (std::size_t i = 0; i < b.worst_configuration.size(); ++i) {
    os << (i ? ";" : "") << fmt(b.worst_configuration[i]);
  }
  os << '\n';
}

void cmd_kernel(Context& ctx) {
  const ExperimentConfig& c = ctx.config;
  const CompactKernel k = c.kernel();
  const int dim = k.dim();
  const auto samples = static_cast<std::size_t>(c.integer("kernel", "samples"));
  const double radius = c.number("kernel", "radius");
  const double r_min = c.number("kernel", "r_min"), r_max = c.number("kernel", "r_max");
  const BoundReport sm = check_smoothness(k, log_radial_sampler(c.seed(), dim, radius, r_min, r_max), samples);
  const BoundReport dc = check_decay(k, log_radial_sampler(c.seed() + 1, dim, radius, r_min, r_max), samples);
  std::ofstream bt = ctx.out.open("kernel_bounds.csv");
  bt << "check,samples,worst_ratio,location\n";
  bound_row(bt, "smoothness", sm);
  bound_row(bt, "decay", dc);

  const Region r = c.region();
  const int shell_depth = std::min(c.integer("kernel", "shell_depth"), r.depth());
  const std::size_t last = r.level_offset(shell_depth) + (std::size_t{1} << (dim * shell_depth));
  std::ofstream sh = ctx.out.open("kernel_shell.csv");
  sh << "I,J,shell_bound\n";
  double shell_max = 0;
  for (std::size_t I = 0; I < last; ++I) {
    for (std::size_t J = 0; J < last; ++J) {
      const double v = shell_bound(k.triple(), r.cube(I).to_cube(), r.cube(J).to_cube());
      shell_max = std::max(shell_max, v);
      sh << r.cube(I).token() << ',' << r.cube(J).token() << ',' << fmt(v) << '\n';
    }
  }
  const double sb = c.number("kernel", "smoothness_bound"), db = c.number("kernel", "decay_bound");
  const bool finite = std::isfinite(sm.worst_ratio) && std::isfinite(dc.worst_ratio);
  const bool ok = finite && sm.worst_ratio <= sb && dc.worst_ratio <= db;
  const AdmissibleTriple& t = k.triple();
  ctx.metrics["kind"] = k.kind();
  ctx.metrics["triple"] = t.describe();
  ctx.metrics["limits"] = Json{{"L", t.limit_L()}, {"S", t.limit_S()}, {"D", t.limit_D()}};
  ctx.metrics["smoothness"] = bound_json(sm);
  ctx.metrics["decay"] = bound_json(dc);
  ctx.metrics["shell_max"] = num(shell_max);
  ctx.metrics["compact_kernel"] = finite && t.all_limits();
  ctx.pass = ok;
}

// compat ------------------------------------------------------------------

void require_bf_size(const Region& r, const std::string& what) {
  if (r.cube_count() > kBFMaxCubes) {
    throw ConfigError(what + " needs at most " + std::to_string(kBFMaxCubes) + " tree cubes; the region has " +
                      std::to_string(r.cube_count()));
  }
}

void cmd_compat(Context& ctx) {
  const ExperimentConfig& c = ctx.config;
  const Region r = c.region();
  require_bf_size(r, "compat");
  const KernelParams kp = c.kernel_params();
  const BFWeight bf(c.testing_pair(r), kp.triple, kp.delta, {}, c.number("compat", "theta"));
  const CompatReport rep = compat_scan(bf, c.integers("compat", "M"));
  std::ofstream tt = ctx.out.open("compat_tails.csv");
  tt << "M,tail,tb_tail\n";
  Json tails = Json::array();
  for (std::size_t i = 0; i < rep.tails.size(); ++i) {
    const double tb = i < rep.tb_tails.size() ? rep.tb_tails[i].second : 0.0;
    tt << rep.tails[i].first << ',' << fmt(rep.tails[i].second) << ',' << fmt(tb) << '\n';
    tails.push_back(Json{{"M", rep.tails[i].first}, {"tail", num(rep.tails[i].second)}, {"tb_tail", num(tb)}});
  }
  std::ofstream sf = ctx.out.open("compat_smallf.csv");
  sf << "M,eps,admissible_pairs,small_F,eccentric,separated,fall_throughs\n";
  Json census = Json::array();
  std::size_t falls = 0;
  for (int M : c.integers("compat", "smallf_M")) {
    const std::string e = c.get("compat", "smallf_eps");
    const double eps = e == "auto" ? 1.001 * smallf_threshold(kp.triple, kp.delta, r.dim(), M)
                                   : parse_real(e, "compat.smallf_eps");
    const SmallFScan s = smallf_scan(bf, M, eps);
    falls += s.fall_throughs;
    sf << M << ',' << fmt(eps) << ',' << s.admissible_pairs << ',' << s.small_F << ',' << s.eccentric << ','
       << s.separated << ',' << s.fall_throughs << '\n';
    census.push_back(Json{{"M", M},
                          {"eps", num(eps)},
                          {"admissible_pairs", s.admissible_pairs},
                          {"small_F", s.small_F},
                          {"eccentric", s.eccentric},
                          {"separated", s.separated},
                          {"fall_throughs", s.fall_throughs}});
  }
  ctx.metrics["sup"] = num(rep.sup);
  ctx.metrics["tails"] = tails;
  ctx.metrics["tails_monotone"] = rep.tails_monotone;
  ctx.metrics["verdict"] = rep.verdict;
  ctx.metrics["tb_verdict"] = rep.tb_verdict;
  ctx.metrics["smallf"] = census;
  ctx.pass = rep.verdict == "compatible" && falls == 0;
}

// operator ----------------------------------------------------------------

OperatorMatrix build_operator(Context& ctx, const Region& r, const CompactKernel& k) {
  const ExperimentConfig& c = ctx.config;
  const QuadratureSettings q = c.quadrature();
  const std::string cache = c.get("operator", "cache");
  if (!cache.empty() && fs::exists(cache)) {
    OperatorMatrix T = OperatorMatrix::load(cache);
    const OperatorInfo& info = T.info();
    const bool same = T.region() == r && info.kernel == k.kind() && info.delta == k.delta() &&
                      info.quadrature.refine_levels == q.refine_levels &&
                      info.quadrature.diagonal == q.diagonal && info.triple.describe() == k.triple().describe();
    if (!same) throw ConfigError("cached matrix " + cache + " was built for a different setup");
    ctx.run["cache"] = "hit";
    return T;
  }
  std::vector<Scalar> diag;
  if (q.diagonal == DiagonalRule::supplied) diag = integrable_diagonal(k, r, c.integer("kernel", "diagonal_levels"));
  OperatorMatrix T = discretize(k, r, q, diag);
  if (!cache.empty()) {
    T.save(cache);
    ctx.run["cache"] = "stored";
  } else {
    ctx.run["cache"] = "off";
  }
  return T;
}

void stage_local(Context& ctx, const OperatorMatrix& T, const TestingPair& pr) {
  const Region& r = T.region();
  const GridFunction one = GridFunction::constant(r, 1.0);
  std::ofstream lt = ctx.out.open("operator_local.csv");
  lt << "cube,hardy,adjacent_to,adjacent\n";
  double hmax = 0, amax = 0;
  for (std::size_t I = 1; I < r.cube_count(); ++I) {
    const double h = hardy_check(T, pr, I, one, one);
    hmax = std::max(hmax, h);
    DyadicCube next = r.cube(I);
    ++next.index[0];
    const auto Ip = r.find(next);
    lt << r.cube(I).token() << ',' << fmt(h) << ',';
    if (Ip) {
      const double a = adjacent_check(T, pr, I, *Ip, one.restricted(I), one.restricted(*Ip));
      amax = std::max(amax, a);
      lt << next.token() << ',' << fmt(a);
    } else {
      lt << ',';
    }
    lt << '\n';
  }
  ctx.metrics["local"] = Json{{"max_hardy", num(hmax)}, {"max_adjacent", num(amax)}};
}

void stage_lb(Context& ctx, const OperatorMatrix& T, const TestingPair& pr) {
  const ExperimentConfig& c = ctx.config;
  const Region& r = T.region();
  const DyadicCube& root = r.root();
  // J: two cells per side about the centre of the region.
  const Rational h = Rational::pow2(r.finest_level());
  Cube J;
  J.dim = r.dim();
  J.side = Rational(2) * h;
  for (int i = 0; i < r.dim(); ++i) J.corner[i] = root.corner(i) + root.side() / Rational(2) - h;
  const int allowed = root.level - r.finest_level() - 1;
  const int requested = c.integer("operator", "lb_k_max");
  const int k_max = requested > 0 ? std::min(requested, allowed) : allowed;
  if (k_max < 3) {
    ctx.metrics["lb"] = "skipped: region too shallow";
    return;
  }
  GridFunction f(r);
  const double mid = J.center(0).to_double();
  std::vector<std::size_t> left, right;
  for (std::size_t cell = 0; cell < r.cell_count(); ++cell) {
    bool in = true;
    for (int i = 0; i < r.dim(); ++i) {
      const double x = r.cell_center(cell, i), lo = J.corner[i].to_double();
      in = in && x > lo && x < lo + J.side.to_double();
    }
    if (!in) continue;
    (r.cell_center(cell, 0) < mid ? left : right).push_back(cell);
  }
  Scalar sl = 0, sr = 0;
  for (std::size_t cell : left) sl += pr.second.b()[cell];
  for (std::size_t cell : right) sr += pr.second.b()[cell];
  if (std::abs(sr) == 0) throw DomainError("b2 sums to zero on half of the L_b test cube");
  for (std::size_t cell : left) f[cell] = 1.0;
  for (std::size_t cell : right) f[cell] = -sl / sr;
  const LbReport rep = lb_functional(T, pr, f, J, k_max, c.integer("operator", "lb_k_fit"));
  std::ofstream os = ctx.out.open("operator_lb.csv");
  os << "k,partial_re,partial_im,decay\n";
  for (std::size_t i = 0; i < rep.k.size(); ++i) {
    os << rep.k[i] << ',' << fmt(rep.partial[i].real()) << ',' << fmt(rep.partial[i].imag()) << ',';
    for (std::size_t j = 0; j < rep.fit_k.size(); ++j) {
      if (rep.fit_k[j] == rep.k[i]) os << fmt(rep.decay[j]);
    }
    os << '\n';
  }
  ctx.metrics["lb"] = Json{{"k_max", k_max},
                           {"limit", cnum(rep.limit)},
                           {"slope_defined", rep.slope_defined},
                           {"slope", rep.slope_defined ? num(rep.slope) : Json(nullptr)},
                           {"delta", num(rep.delta)}};
}

void stage_cmo(Context& ctx, const OperatorMatrix& T, const TestingPair& pr, const std::vector<int>& Ms) {
  const Tb1Estimate a = estimate_tb1(T, pr);
  const Tb1Estimate b = estimate_tstar_b2(T, pr);
  const TestingPair sw = swapped(pr);
  std::ofstream os = ctx.out.open("operator_cmo.csv");
  os << "M,tb1_tail,tstar_b2_tail\n";
  std::vector<double> ta, tb;
  for (int M : Ms) {
    ta.push_back(cmo_tail(a.coeffs, pr, M));
    tb.push_back(cmo_tail(b.coeffs, sw, M));
    os << M << ',' << fmt(ta.back()) << ',' << fmt(tb.back()) << '\n';
  }
  ctx.metrics["cmo"] = Json{{"tb1_bmo", num(bmo_b_norm(a.coeffs, pr))},
                            {"tstar_b2_bmo", num(bmo_b_norm(b.coeffs, sw))},
                            {"tb1_vanishing", decays(ta.front(), ta.back(), kTailDecayVerdict)},
                            {"tstar_b2_vanishing", decays(tb.front(), tb.back(), kTailDecayVerdict)}};
}

void stage_bump(Context& ctx, const OperatorMatrix& T, const TestingPair& pr, const WeakCompactReport& weak) {
  const ExperimentConfig& c = ctx.config;
  const Region& r = T.region();
  if (r.cube_count() > kBFMaxCubes) {
    ctx.metrics["bump"] = "skipped: tree too large";
    return;
  }
  const Reduction red = reduce(T, pr);
  const double bd = c.number("operator", "bump_delta");
  const int fw_M = c.integer("operator", "bump_fw_M");
  std::vector<double> fw;
  if (fw_M > 0) fw = weak_profile(weak, r, fw_M);
  const BFWeight bf(pr, T.info().triple, bd > 0 ? bd : T.info().delta, fw);
  const BumpReport rep = bump_verify(red.reduced, bf, c.number("operator", "bump_eps"),
                                     c.number("operator", "bump_ceiling"));
  std::ofstream os = ctx.out.open("operator_bump.csv");
  os << "I,J,case,observed,bound,ratio\n";
  for (const BumpRow& row : rep.rows) {
    os << r.cube(row.I).token() << ',' << r.cube(row.J).token() << ',' << row.bump_case << ',' << fmt(row.observed)
       << ',' << fmt(row.bound) << ',' << fmt(row.ratio) << '\n';
  }
  Json cases = Json::array();
  bool finite = true;
  for (int k = 0; k < 3; ++k) {
    finite = finite && std::isfinite(rep.max_ratio[k]);
    cases.push_back(Json{{"case", k + 1}, {"pairs", rep.count[k]}, {"max_ratio", num(rep.max_ratio[k])}});
  }
  ctx.metrics["bump"] = Json{{"cases", cases},
                             {"above_ceiling", rep.above_ceiling},
                             {"reduced_tb1_defect", num(red.tb1_defect)},
                             {"reduced_tstar_b2_defect", num(red.tstar_b2_defect)},
                             {"root_term", num(red.root_term)}};
  ctx.pass = ctx.pass && finite && rep.above_ceiling == 0;
}

void cmd_operator(Context& ctx) {
  const ExperimentConfig& c = ctx.config;
  const Region r = c.region();
  const CompactKernel k = c.kernel();
  const TestingPair pr = c.testing_pair(r);
  const OperatorMatrix T = build_operator(ctx, r, k);
  const std::vector<int> Ms = c.integers("operator", "M");
  const int iters = c.integer("operator", "iterations");
  ctx.metrics["kernel"] = k.kind();
  ctx.metrics["max_norm"] = num(T.max_norm());

  WeakCompactReport weak;
  stage(ctx, "weak", [&] {
    const std::vector<double> eps = c.numbers("operator", "eps");
    weak = weak_scan(T, pr, c.integer("operator", "weak_M"), eps);
    std::ofstream os = ctx.out.open("operator_weak.csv");
    os << "level,rdist,max_ratio\n";
    for (const WeakBucket& b : weak.buckets) os << b.level << ',' << b.rdist << ',' << fmt(b.max_ratio) << '\n';
    Json m = Json::array();
    bool all = true;
    for (const auto& [e, M] : weak.m_eps) {
      m.push_back(Json{{"eps", num(e)}, {"M", M}});
      all = all && M >= 0;
    }
    double top = 0;
    for (double v : weak.cube_max) top = std::max(top, v);
    ctx.metrics["weak"] = Json{{"max_ratio", num(top)}, {"m_eps", m}, {"weak_compactness", all}};
  });
  if (c.flag("operator", "local")) stage(ctx, "local", [&] { stage_local(ctx, T, pr); });
  if (c.flag("operator", "lb")) stage(ctx, "lb", [&] { stage_lb(ctx, T, pr); });
  stage(ctx, "cmo", [&] { stage_cmo(ctx, T, pr, Ms); });
  if (c.flag("operator", "bump")) stage(ctx, "bump", [&] { stage_bump(ctx, T, pr, weak); });
  stage(ctx, "compactness", [&] {
    const std::vector<CompactnessPoint> curve = compactness_curve(T, pr, Ms, iters);
    std::ofstream os = ctx.out.open("operator_compactness.csv");
    os << "M,proj,perp_proj,perp_perp,perp_perp_iterations,perp_perp_converged\n";
    Json pts = Json::array();
    for (const CompactnessPoint& p : curve) {
      os << p.M << ',' << fmt(p.first.norm) << ',' << fmt(p.second.norm) << ',' << fmt(p.third.norm) << ','
         << p.third.iterations << ',' << (p.third.converged ? 1 : 0) << '\n';
      pts.push_back(Json{{"M", p.M}, {"perp_perp", num(p.third.norm)}, {"converged", p.third.converged}});
    }
    const double first = curve.front().third.norm, last = curve.back().third.norm;
    const double factor = last > 0 ? first / last : kInfinity;
    ctx.metrics["compactness"] = Json{{"curve", pts},
                                      {"decrease_factor", num(factor)},
                                      {"compact_evidence", factor >= c.number("operator", "compact_factor")}};
  });
  if (c.flag("operator", "necessity")) {
    stage(ctx, "necessity", [&] {
      std::ofstream os = ctx.out.open("operator_necessity.csv");
      os << "M,norm_perp,norm_proj,worst_ratio,worst_cube,cubes,gated\n";
      double worst = 0;
      for (int M : Ms) {
        const NecessityReport n = necessity_weak(T, pr, 2, M, iters, c.flag("operator", "necessity_accretive"));
        worst = std::max(worst, n.worst_ratio);
        os << M << ',' << fmt(n.norm_perp) << ',' << fmt(n.norm_proj) << ',' << fmt(n.worst_ratio) << ','
           << r.cube(n.worst_cube).token() << ',' << n.cubes << ',' << n.gated << '\n';
      }
      ctx.metrics["necessity"] = Json{{"worst_ratio", num(worst)}};
      ctx.pass = ctx.pass && worst <= 1 + 1e-9;
    });
  }
}

// report ------------------------------------------------------------------

// Looks up a dotted path in a report; empty when absent.
std::optional<Json> lookup(const std::optional<Json>& doc, const std::vector<std::string>& path) {
  if (!doc) return std::nullopt;
  const Json* cur = &*doc;
  for (const std::string& p : path) {
    if (!cur->is_object() || !cur->contains(p)) return std::nullopt;
    cur = &(*cur)[p];
  }
  return *cur;
}

Json tri(const std::optional<Json>& v) {
  if (!v || !v->is_boolean()) return "missing";
  return *v;
}

void cmd_report(Context& ctx) {
  const ExperimentConfig& c = ctx.config;
  std::map<std::string, std::optional<Json>> docs;
  Json inputs = Json::object();
  std::size_t found = 0;
  for (const std::string& name : split(c.get("report", "inputs"), ',')) {
    if (name.empty()) continue;
    const fs::path p = fs::path(name).is_absolute() ? fs::path(name) : ctx.out.dir() / name;
    std::optional<Json> doc;
    std::ifstream is(p);
    if (is) {
      try {
        doc = Json::parse(is);
      } catch (const std::exception& e) {
        throw IoError("report input " + p.string() + " is not valid JSON: " + e.what());
      }
      ++found;
    }
    const std::string command = doc && doc->contains("command") ? (*doc)["command"].get<std::string>()
                                                                : fs::path(name).stem().string();
    docs[command] = doc;
    inputs[name] = doc ? Json((*doc)["verdict"]) : Json("missing");
  }
  if (found == 0) throw IoError("none of the report inputs exist under " + ctx.out.dir().string());
  const auto get = [&](const std::string& cmd, std::vector<std::string> path) {
    const auto it = docs.find(cmd);
    return it == docs.end() ? std::optional<Json>{} : lookup(it->second, path);
  };
  const std::optional<Json> verdict = get("compat", {"metrics", "verdict"});
  Json compatible = verdict ? Json(*verdict == "compatible") : Json("missing");
  Json hyp{{"compact_kernel", tri(get("kernel", {"metrics", "compact_kernel"}))}, {"compatible", compatible}};
  Json cond{{"weak_compactness", tri(get("operator", {"metrics", "weak", "weak_compactness"}))},
            {"tb1_in_cmo", tri(get("operator", {"metrics", "cmo", "tb1_vanishing"}))},
            {"tstar_b2_in_cmo", tri(get("operator", {"metrics", "cmo", "tstar_b2_vanishing"}))}};
  const Json observed = tri(get("operator", {"metrics", "compactness", "compact_evidence"}));
  const auto all_true = [](const Json& o, bool& missing) {
    bool all = true;
    for (const auto& [k, v] : o.items()) {
      if (!v.is_boolean()) {
        missing = true;
      } else {
        all = all && v.get<bool>();
      }
    }
    return all;
  };
  bool missing = !observed.is_boolean();
  const bool hyp_ok = all_true(hyp, missing);
  const bool cond_ok = all_true(cond, missing);
  std::string outcome, reading;
  if (missing) {
    outcome = "incomplete";
    reading = "some inputs are missing; the available fields are reported as is";
  } else {
    const bool seen = observed.get<bool>();
    if (!hyp_ok) {
      outcome = "hypotheses_unmet";
      reading = seen ? "hypotheses not met; the compression curve still decays"
                     : "hypotheses not met; the compression curve does not decay, bounded but not compact";
    } else if (cond_ok == seen) {
      outcome = seen ? "compact" : "not_compact";
      reading = seen ? "all three conditions hold and the compression curve decays"
                     : "a condition fails and the compression curve does not decay";
    } else {
      outcome = "inconsistent";
      reading = cond_ok ? "all three conditions hold but the compression curve does not decay"
                        : "a condition fails but the compression curve decays";
    }
  }
  bool inputs_pass = true;
  for (const auto& [k, v] : inputs.items()) inputs_pass = inputs_pass && v != "FAIL";
  ctx.metrics["inputs"] = inputs;
  ctx.metrics["hypotheses"] = hyp;
  ctx.metrics["conditions"] = cond;
  ctx.metrics["compression_decays"] = observed;
  ctx.metrics["outcome"] = outcome;
  ctx.metrics["reading"] = reading;
  ctx.pass = inputs_pass && outcome != "inconsistent";
}

}  // namespace

// config ------------------------------------------------------------------

ExperimentConfig ExperimentConfig::defaults() {
  ExperimentConfig c;
  for (const KeySpec& k : schema()) c.values_[k.section][k.key] = k.fallback;
  return c;
}

ExperimentConfig ExperimentConfig::parse(const std::string& text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream is(text);
  try {
    pt::read_ini(is, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config: ") + e.message() + " at line " + std::to_string(e.line()));
  }
  ExperimentConfig c = defaults();
  // read_ini drops empty sections, so headers are checked on the raw text.
  std::istringstream lines(text);
  for (std::string line; std::getline(lines, line);) {
    const std::string t = trim(line);
    if (t.size() >= 2 && t.front() == '[' && t.back() == ']' && !c.values_.count(trim(t.substr(1, t.size() - 2))))
      throw ConfigError("config: unknown section " + t);
  }
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw ConfigError("config: key '" + section + "' outside a section");
    if (!c.values_.count(section)) throw ConfigError("config: unknown section [" + section + "]");
    for (const auto& [key, value] : body) {
      if (!find_key(section, key)) throw ConfigError("config: unknown key " + section + "." + key);
      c.values_[section][key] = trim(value.data());
    }
  }
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse(ss.str());
}

const std::string& ExperimentConfig::get(const std::string& section, const std::string& key) const {
  const auto s = values_.find(section);
  if (s == values_.end() || !s->second.count(key)) throw ConfigError("config: unknown key " + section + "." + key);
  return s->second.at(key);
}

void ExperimentConfig::set(const std::string& section, const std::string& key, const std::string& value) {
  if (!find_key(section, key)) throw ConfigError("config: unknown key " + section + "." + key);
  values_[section][key] = value;
}

double ExperimentConfig::number(const std::string& section, const std::string& key) const {
  return parse_real(get(section, key), section + "." + key);
}

int ExperimentConfig::integer(const std::string& section, const std::string& key) const {
  const long long v = parse_int(get(section, key), section + "." + key);
  if (v < -(1LL << 30) || v > (1LL << 30)) throw ConfigError(section + "." + key + " out of range");
  return static_cast<int>(v);
}

bool ExperimentConfig::flag(const std::string& section, const std::string& key) const {
  return parse_flag(get(section, key), section + "." + key);
}

std::vector<int> ExperimentConfig::integers(const std::string& section, const std::string& key) const {
  std::vector<int> out;
  for (const std::string& s : split(get(section, key), ',')) {
    out.push_back(static_cast<int>(parse_int(s, section + "." + key)));
  }
  if (out.empty()) throw ConfigError(section + "." + key + " is empty");
  return out;
}

std::vector<double> ExperimentConfig::numbers(const std::string& section, const std::string& key) const {
  std::vector<double> out;
  for (const std::string& s : split(get(section, key), ',')) out.push_back(parse_real(s, section + "." + key));
  return out;
}

std::uint64_t ExperimentConfig::seed() const {
  const long long v = parse_int(get("run", "seed"), "run.seed");
  if (v < 0) throw ConfigError("run.seed must be non-negative");
  return static_cast<std::uint64_t>(v);
}

Region ExperimentConfig::region() const {
  const int dim = integer("region", "dim");
  if (dim < 1 || dim > kMaxDim) throw ConfigError("region.dim must be 1 or 2");
  const std::vector<int> idx = integers("region", "root_index");
  if (static_cast<int>(idx.size()) != dim) throw ConfigError("region.root_index needs one entry per dimension");
  DyadicCube root{integer("region", "root_level"), {0, 0}, dim};
  for (int i = 0; i < dim; ++i) root.index[i] = idx[i];
  try {
    return Region(root, integer("region", "finest_level"));
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(std::string("region: ") + e.what());
  }
}

KernelParams ExperimentConfig::kernel_params() const {
  KernelParams p;
  p.triple = AdmissibleTriple::detect(DecayFunction::parse(get("kernel", "L")),
                                      DecayFunction::parse(get("kernel", "S")),
                                      DecayFunction::parse(get("kernel", "D")));
  p.delta = number("kernel", "delta");
  p.dim = integer("region", "dim");
  p.amplitude = number("kernel", "amplitude");
  p.alpha = number("kernel", "alpha");
  p.anchor = number("kernel", "anchor");
  return p;
}

CompactKernel ExperimentConfig::kernel() const {
  const std::string kind = get("kernel", "kind");
  if (kind == "custom") throw ConfigError("kernel.kind custom is only available to library users");
  const auto kinds = kernel_kinds();
  if (std::find(kinds.begin(), kinds.end(), kind) == kinds.end()) throw ConfigError("unknown kernel.kind " + kind);
  try {
    return make_kernel(kind, kernel_params());
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(std::string("kernel: ") + e.what());
  }
}

QuadratureSettings ExperimentConfig::quadrature() const {
  QuadratureSettings q;
  q.refine_levels = integer("kernel", "refine_levels");
  if (q.refine_levels < 0) throw ConfigError("kernel.refine_levels must be non-negative");
  const std::string d = get("kernel", "diagonal");
  if (d == "auto") {
    q.diagonal = kernel().antisymmetric() ? DiagonalRule::zero_pv : DiagonalRule::supplied;
  } else {
    q.diagonal = parse_diagonal_rule(d);
  }
  return q;
}

GridFunction make_profile(const Region& region, const std::string& spec, std::uint64_t seed) {
  check_profile_spec(spec);
  const std::string name = profile_name(spec);
  if (name == "file") {
    const std::string path = spec.substr(5);
    std::ifstream is(path);
    if (!is) throw IoError("cannot read testing profile " + path);
    return GridFunction::read_csv(region, is);
  }
  const std::vector<double> a = profile_args(spec);
  if (name == "constant") return GridFunction::constant(region, Scalar(a[0], a.size() > 1 ? a[1] : 0.0));
  if (name == "polynomial") {
    return GridFunction::sample(region, [&](std::span<const double> x) {
      Scalar s = 0;
      for (std::size_t k = a.size(); k-- > 0;) s = s * x[0] + a[k];
      return s;
    });
  }
  if (name == "power") {
    return GridFunction::sample(region, [&](std::span<const double> x) {
      return Scalar(std::pow(sup_norm(x), a[0]));
    });
  }
  if (name == "spike") {
    return GridFunction::sample(region, [&](std::span<const double> x) {
      double d = 0;
      for (double v : x) d = std::max(d, std::abs(v - a[0]));
      return Scalar(d < a[1] ? 1.0 + a[2] : 1.0);
    });
  }
  Rng rng(seed);
  GridFunction b(region);
  for (Scalar& v : b.values()) v = std::polar(rng.uniform(a[0], a[1]), rng.uniform(-1.0, 1.0));
  return b;
}

GridFunction ExperimentConfig::testing_function(const Region& region, int which) const {
  const std::string key = which == 1 ? "b1" : "b2";
  return make_profile(region, get("testing", key), seed() * 2 + static_cast<std::uint64_t>(which));
}

TestingPair ExperimentConfig::testing_pair(const Region& region) const {
  return TestingPair(testing_function(region, 1), testing_function(region, 2), number("testing", "q1"),
                     number("testing", "q2"));
}

void ExperimentConfig::validate() const {
  for (const KeySpec& k : schema()) {
    const std::string where = std::string(k.section) + "." + k.key;
    const std::string& v = get(k.section, k.key);
    switch (k.kind) {
      case 'i':
        integer(k.section, k.key);
        break;
      case 'd':
        parse_real(v, where);
        break;
      case 'b':
        parse_flag(v, where);
        break;
      case 'I':
        integers(k.section, k.key);
        break;
      case 'D':
        numbers(k.section, k.key);
        break;
      default:
        break;
    }
  }
  seed();
  region();
  kernel();
  quadrature();
  check_profile_spec(get("testing", "b1"));
  check_profile_spec(get("testing", "b2"));
  const double q1 = number("testing", "q1"), q2 = number("testing", "q2");
  if (!(q1 > 1 && q2 > 1 && 1 / q1 + 1 / q2 < 1)) throw ConfigError("testing exponents need 1/q1 + 1/q2 < 1");
  const std::string e = get("compat", "smallf_eps");
  if (e != "auto" && !(parse_real(e, "compat.smallf_eps") > 0)) throw ConfigError("compat.smallf_eps must be positive");
  if (integer("transform", "draws") < 1) throw ConfigError("transform.draws must be positive");
  if (integer("kernel", "samples") < 1) throw ConfigError("kernel.samples must be positive");
  if (integer("operator", "iterations") < 1) throw ConfigError("operator.iterations must be positive");
  if (integer("operator", "weak_M") < 1) throw ConfigError("operator.weak_M must be positive");
  if (!(number("kernel", "r_min") > 0 && number("kernel", "r_min") < number("kernel", "r_max"))) {
    throw ConfigError("kernel sampling range needs 0 < r_min < r_max");
  }
}

std::vector<std::string> command_names() { return {"transform", "kernel", "compat", "operator", "report"}; }

CommandResult run_command(const std::string& command, ExperimentConfig config, const RunOptions& options) {
  const auto names = command_names();
  if (std::find(names.begin(), names.end(), command) == names.end()) {
    throw ConfigError("unknown command " + command);
  }
  if (options.seed) config.set("run", "seed", std::to_string(*options.seed));
  if (options.out_dir) config.set("run", "out", *options.out_dir);
  config.seed();
  const auto start = std::chrono::steady_clock::now();
  Output out(config.get("run", "out"), command);
  Context ctx{config, out};
  if (command == "transform") cmd_transform(ctx);
  if (command == "kernel") cmd_kernel(ctx);
  if (command == "compat") cmd_compat(ctx);
  if (command == "operator") cmd_operator(ctx);
  if (command == "report") cmd_report(ctx);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  const std::string run_file = command + ".run.json";
  Json summary;
  summary["command"] = command;
  summary["config_echo"] = config_echo(config);
  summary["metrics"] = ctx.metrics;
  summary["verdict"] = ctx.pass ? "PASS" : "FAIL";
  summary["wallclock"] = run_file;
  {
    std::ofstream os = out.open(command + ".json");
    os << summary.dump(2) << '\n';
  }
  ctx.run["wallclock_seconds"] = seconds;
  ctx.run["threads"] = thread_count();
  {
    std::ofstream os = out.open(run_file);
    os << ctx.run.dump(2) << '\n';
  }
  return {command, ctx.pass, out.files()};
}

}  // namespace ctb
