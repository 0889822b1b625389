#include "ctb/operator.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>

#include <Eigen/Dense>
#include <json.hpp>

#include "ctb/error.hpp"
#include "ctb/parallel.hpp"
#include "ctb/rng.hpp"

namespace ctb {

std::string to_string(DiagonalRule rule) {
  return rule == DiagonalRule::zero_pv ? "zero_pv" : "supplied";
}

DiagonalRule parse_diagonal_rule(const std::string& s) {
  if (s == "zero_pv") return DiagonalRule::zero_pv;
  if (s == "supplied") return DiagonalRule::supplied;
  throw ConfigError("unknown diagonal rule: " + s);
}

OperatorMatrix::OperatorMatrix(Region region, std::vector<Scalar> entries, OperatorInfo info)
    : region_(std::move(region)), n_(region_.cell_count()), entries_(std::move(entries)),
      info_(std::move(info)) {
  if (entries_.size() != n_ * n_) throw DomainError("operator entries do not match the grid");
  for (const Scalar& v : entries_) {
    if (!std::isfinite(v.real()) || !std::isfinite(v.imag())) {
      throw DomainError("operator entries must be finite");
    }
  }
}

OperatorMatrix OperatorMatrix::zero(Region region, OperatorInfo info) {
  const std::size_t n = region.cell_count();
  return OperatorMatrix(std::move(region), std::vector<Scalar>(n * n), std::move(info));
}

OperatorMatrix OperatorMatrix::identity(Region region) {
  const std::size_t n = region.cell_count();
  std::vector<Scalar> e(n * n);
  const double inv = 1.0 / region.cell_volume();
  for (std::size_t i = 0; i < n; ++i) e[i * n + i] = inv;
  OperatorInfo info;
  info.kernel = "identity";
  info.quadrature.diagonal = DiagonalRule::supplied;
  return OperatorMatrix(std::move(region), std::move(e), std::move(info));
}

double OperatorMatrix::max_norm() const {
  double m = 0;
  for (const Scalar& v : entries_) m = std::max(m, std::abs(v));
  return m;
}

GridFunction OperatorMatrix::apply(const GridFunction& f) const {
  if (!(f.region() == region_)) throw DomainError("function and operator live on different grids");
  const double vol = region_.cell_volume();
  std::vector<Scalar> out(n_);
  parallel_for(n_, [&](std::size_t begin, std::size_t end) {
    for (std::size_t x = begin; x < end; ++x) {
      const Scalar* row = entries_.data() + x * n_;
      Scalar s = 0;
      for (std::size_t t = 0; t < n_; ++t) s += row[t] * f[t];
      out[x] = s * vol;
    }
  });
  return GridFunction(region_, std::move(out));
}

GridFunction OperatorMatrix::apply_transpose(const GridFunction& g) const {
  if (!(g.region() == region_)) throw DomainError("function and operator live on different grids");
  const double vol = region_.cell_volume();
  std::vector<Scalar> out(n_);
  parallel_for(n_, [&](std::size_t begin, std::size_t end) {
    for (std::size_t t = begin; t < end; ++t) {
      Scalar s = 0;
      for (std::size_t x = 0; x < n_; ++x) s += entries_[x * n_ + t] * g[x];
      out[t] = s * vol;
    }
  });
  return GridFunction(region_, std::move(out));
}

OperatorMatrix OperatorMatrix::transpose() const {
  std::vector<Scalar> e(n_ * n_);
  for (std::size_t x = 0; x < n_; ++x) {
    for (std::size_t t = 0; t < n_; ++t) e[t * n_ + x] = entries_[x * n_ + t];
  }
  OperatorInfo info = info_;
  info.kernel = info_.kernel + "^t";
  return OperatorMatrix(region_, std::move(e), std::move(info));
}

OperatorMatrix OperatorMatrix::operator-(const OperatorMatrix& o) const {
  if (!(o.region_ == region_)) throw DomainError("operators live on different grids");
  std::vector<Scalar> e(entries_);
  for (std::size_t i = 0; i < e.size(); ++i) e[i] -= o.entries_[i];
  return OperatorMatrix(region_, std::move(e), info_);
}

namespace {

constexpr char kMagic[8] = {'C', 'T', 'B', 'O', 'P', 'M', 'A', 'T'};

template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw IoError("truncated operator file");
  return v;
}

nlohmann::json triple_json(const AdmissibleTriple& t) {
  return {{"L", t.L().describe()},
          {"S", t.S().describe()},
          {"D", t.D().describe()},
          {"limit_L", t.limit_L()},
          {"limit_S", t.limit_S()},
          {"limit_D", t.limit_D()}};
}

AdmissibleTriple triple_from_json(const nlohmann::json& j) {
  return AdmissibleTriple(DecayFunction::parse(j.at("L").get<std::string>()),
                          DecayFunction::parse(j.at("S").get<std::string>()),
                          DecayFunction::parse(j.at("D").get<std::string>()),
                          j.at("limit_L").get<bool>(), j.at("limit_S").get<bool>(),
                          j.at("limit_D").get<bool>());
}

}  // namespace

void OperatorMatrix::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path);
  os.write(kMagic, sizeof kMagic);
  const DyadicCube& root = region_.root();
  put<std::int32_t>(os, root.dim);
  put<std::int32_t>(os, root.level);
  put<std::int64_t>(os, root.index[0]);
  put<std::int64_t>(os, root.index[1]);
  put<std::int32_t>(os, region_.finest_level());
  put<std::uint32_t>(os, static_cast<std::uint32_t>(info_.kernel.size()));
  os.write(info_.kernel.data(), static_cast<std::streamsize>(info_.kernel.size()));
  for (const Scalar& v : entries_) {
    put<double>(os, v.real());
    put<double>(os, v.imag());
  }
  if (!os) throw IoError("failed writing " + path);

  nlohmann::json side = {{"format", 1},
                         {"kernel", info_.kernel},
                         {"triple", triple_json(info_.triple)},
                         {"delta", info_.delta},
                         {"refine_levels", info_.quadrature.refine_levels},
                         {"diagonal_rule", to_string(info_.quadrature.diagonal)},
                         {"root", root.token()},
                         {"finest_level", region_.finest_level()},
                         {"cells", n_}};
  std::ofstream js(path + ".json");
  if (!js) throw IoError("cannot write " + path + ".json");
  js << side.dump(2) << '\n';
}

OperatorMatrix OperatorMatrix::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read " + path);
  char magic[sizeof kMagic];
  is.read(magic, sizeof magic);
  if (!is || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw IoError(path + " is not an operator file");
  }
  DyadicCube root;
  root.dim = get<std::int32_t>(is);
  root.level = get<std::int32_t>(is);
  root.index[0] = get<std::int64_t>(is);
  root.index[1] = get<std::int64_t>(is);
  const int finest = get<std::int32_t>(is);
  if (root.dim < 1 || root.dim > kMaxDim || finest > root.level || root.level - finest > 24) {
    throw IoError(path + " has a malformed header");
  }
  const auto len = get<std::uint32_t>(is);
  if (len > 4096) throw IoError(path + " has a malformed kernel id");
  std::string kernel(len, '\0');
  is.read(kernel.data(), len);
  Region region(root, finest);
  const std::size_t n = region.cell_count();
  std::vector<Scalar> e(n * n);
  for (Scalar& v : e) {
    const double re = get<double>(is);
    const double im = get<double>(is);
    v = Scalar(re, im);
  }
  if (is.peek() != std::char_traits<char>::eof()) throw IoError(path + " has trailing data");

  std::ifstream js(path + ".json");
  if (!js) throw IoError("missing sidecar " + path + ".json");
  OperatorInfo info;
  try {
    const nlohmann::json side = nlohmann::json::parse(js);
    info.kernel = side.at("kernel").get<std::string>();
    info.triple = triple_from_json(side.at("triple"));
    info.delta = side.at("delta").get<double>();
    info.quadrature.refine_levels = side.at("refine_levels").get<int>();
    info.quadrature.diagonal = parse_diagonal_rule(side.at("diagonal_rule").get<std::string>());
    if (side.at("cells").get<std::size_t>() != n || side.at("root").get<std::string>() != root.token()) {
      throw IoError("sidecar does not describe " + path);
    }
  } catch (const nlohmann::json::exception& ex) {
    throw IoError("malformed sidecar " + path + ".json: " + ex.what());
  }
  if (info.kernel != kernel) throw IoError("sidecar kernel id differs from " + path);
  return OperatorMatrix(std::move(region), std::move(e), std::move(info));
}

namespace {

struct CellGeometry {
  std::vector<std::array<double, kMaxDim>> centre;
  std::vector<std::array<std::int64_t, kMaxDim>> index;
  double side = 0;
};

CellGeometry cell_geometry(const Region& r) {
  CellGeometry g;
  const std::size_t n = r.cell_count();
  g.centre.resize(n);
  g.index.resize(n);
  g.side = std::ldexp(1.0, r.finest_level());
  for (std::size_t c = 0; c < n; ++c) {
    const DyadicCube cell = r.cell(c);
    for (int i = 0; i < r.dim(); ++i) {
      g.centre[c][i] = r.cell_center(c, i);
      g.index[c][i] = cell.index[i];
    }
  }
  return g;
}

// Subcell centre offsets from the cell centre at the given refinement.
std::vector<std::array<double, kMaxDim>> sub_offsets(int dim, int levels, double side) {
  const int m = 1 << levels;
  const int count = dim == 1 ? m : m * m;
  std::vector<std::array<double, kMaxDim>> out(count);
  for (int s = 0; s < count; ++s) {
    const int a = s % m, b = s / m;
    out[s][0] = ((a + 0.5) / m - 0.5) * side;
    out[s][1] = dim == 2 ? ((b + 0.5) / m - 0.5) * side : 0.0;
  }
  return out;
}

Scalar eval(const CompactKernel& k, const std::array<double, kMaxDim>& t,
            const std::array<double, kMaxDim>& x, int dim) {
  const Scalar v = k(std::span<const double>(t.data(), dim), std::span<const double>(x.data(), dim));
  if (!std::isfinite(v.real()) || !std::isfinite(v.imag())) {
    throw DomainError("kernel '" + k.kind() + "' returned a non-finite value");
  }
  return v;
}

}  // namespace

OperatorMatrix discretize(const CompactKernel& kernel, const Region& region,
                          QuadratureSettings settings, std::span<const Scalar> diagonal) {
  if (settings.refine_levels < 0 || settings.refine_levels > 8) {
    throw ConfigError("refine_levels must lie in [0, 8]");
  }
  if (kernel.dim() != region.dim()) throw ConfigError("kernel and region dimensions differ");
  const std::size_t n = region.cell_count();
  if (settings.diagonal == DiagonalRule::zero_pv && !kernel.antisymmetric()) {
    throw ConfigError("kernel '" + kernel.kind() + "' is not antisymmetric; supply the diagonal");
  }
  if (settings.diagonal == DiagonalRule::supplied && diagonal.size() != n) {
    throw ConfigError("supplied diagonal must have one value per cell");
  }
  const int dim = region.dim();
  const CellGeometry g = cell_geometry(region);
  const auto subs = sub_offsets(dim, settings.refine_levels, g.side);
  const double weight = 1.0 / static_cast<double>(subs.size() * subs.size());
  std::vector<Scalar> e(n * n);
  parallel_for(n, [&](std::size_t begin, std::size_t end) {
    std::array<double, kMaxDim> pl{}, ph{};
    for (std::size_t x = begin; x < end; ++x) {
      for (std::size_t t = 0; t < n; ++t) {
        Scalar& out = e[x * n + t];
        if (t == x) {
          out = settings.diagonal == DiagonalRule::supplied ? diagonal[x] : Scalar(0);
          continue;
        }
        bool touching = settings.refine_levels > 0;
        for (int i = 0; i < dim && touching; ++i) {
          touching = std::abs(g.index[x][i] - g.index[t][i]) <= 1;
        }
        if (!touching) {
          out = eval(kernel, g.centre[t], g.centre[x], dim);
          continue;
        }
        // Loops run over the lower cell first so that mirrored entries are
        // sums of the same terms in the same order.
        const std::size_t lo = std::min(x, t), hi = std::max(x, t);
        Scalar s = 0;
        for (const auto& a : subs) {
          for (int i = 0; i < dim; ++i) pl[i] = g.centre[lo][i] + a[i];
          for (const auto& b : subs) {
            for (int i = 0; i < dim; ++i) ph[i] = g.centre[hi][i] + b[i];
            s += t == lo ? eval(kernel, pl, ph, dim) : eval(kernel, ph, pl, dim);
          }
        }
        out = s * weight;
      }
    }
  });
  OperatorInfo info;
  info.kernel = kernel.kind();
  info.triple = kernel.triple();
  info.delta = kernel.delta();
  info.quadrature = settings;
  return OperatorMatrix(region, std::move(e), std::move(info));
}

std::vector<Scalar> integrable_diagonal(const CompactKernel& kernel, const Region& region,
                                        int levels) {
  if (levels < 1 || levels > 8) throw ConfigError("diagonal quadrature levels must lie in [1, 8]");
  const int dim = region.dim();
  const CellGeometry g = cell_geometry(region);
  const auto subs = sub_offsets(dim, levels, g.side);
  const double weight = 1.0 / static_cast<double>(subs.size() * subs.size());
  std::vector<Scalar> d(region.cell_count());
  parallel_for(d.size(), [&](std::size_t begin, std::size_t end) {
    std::array<double, kMaxDim> pt{}, px{};
    for (std::size_t c = begin; c < end; ++c) {
      Scalar s = 0;
      for (std::size_t a = 0; a < subs.size(); ++a) {
        for (int i = 0; i < dim; ++i) px[i] = g.centre[c][i] + subs[a][i];
        for (std::size_t b = 0; b < subs.size(); ++b) {
          if (a == b) continue;
          for (int i = 0; i < dim; ++i) pt[i] = g.centre[c][i] + subs[b][i];
          s += eval(kernel, pt, px, dim);
        }
      }
      d[c] = s * weight;
    }
  });
  return d;
}

namespace {

void check_grid(const OperatorMatrix& T, const GridFunction& f) {
  if (!(f.region() == T.region())) throw DomainError("function and operator live on different grids");
}

// <T u, v> over a sorted list of cells, both functions taken as zero elsewhere.
Scalar pair_on(const OperatorMatrix& T, std::span<const std::size_t> cells, std::span<const Scalar> u,
               std::span<const Scalar> v) {
  const std::size_t m = cells.size();
  std::vector<Scalar> part(m);
  parallel_for(m, [&](std::size_t begin, std::size_t end) {
    for (std::size_t a = begin; a < end; ++a) {
      const std::size_t x = cells[a];
      Scalar s = T(x, x) * (v[x] * u[x]);
      for (std::size_t b = a + 1; b < m; ++b) {
        const std::size_t t = cells[b];
        s += T(x, t) * (v[x] * u[t]) + T(t, x) * (v[t] * u[x]);
      }
      part[a] = s;
    }
  });
  Scalar total = 0;
  for (const Scalar& s : part) total += s;
  const double vol = T.region().cell_volume();
  return total * (vol * vol);
}

std::vector<std::size_t> all_cells(std::size_t n) {
  std::vector<std::size_t> c(n);
  for (std::size_t i = 0; i < n; ++i) c[i] = i;
  return c;
}

double q_average_on(std::span<const Scalar> v, std::span<const std::size_t> cells, double q,
                    double cell_volume, double measure) {
  if (std::isinf(q)) {
    double m = 0;
    for (std::size_t c : cells) m = std::max(m, std::abs(v[c]));
    return m;
  }
  double s = 0;
  for (std::size_t c : cells) s += std::pow(std::abs(v[c]), q);
  return std::pow(s * cell_volume / measure, 1.0 / q);
}

std::vector<std::size_t> cells_inside(const Region& r, const Cube& q) {
  std::vector<std::size_t> out;
  const double lo0 = q.corner[0].to_double(), s = q.side.to_double();
  const double lo1 = r.dim() == 2 ? q.corner[1].to_double() : 0.0;
  for (std::size_t c = 0; c < r.cell_count(); ++c) {
    const double x0 = r.cell_center(c, 0);
    bool in = x0 > lo0 && x0 < lo0 + s;
    if (in && r.dim() == 2) {
      const double x1 = r.cell_center(c, 1);
      in = x1 > lo1 && x1 < lo1 + s;
    }
    if (in) out.push_back(c);
  }
  return out;
}

void require_support(const GridFunction& f, std::span<const std::size_t> cells, const char* what) {
  std::vector<bool> in(f.size(), false);
  for (std::size_t c : cells) in[c] = true;
  for (std::size_t c = 0; c < f.size(); ++c) {
    if (!in[c] && f[c] != Scalar(0)) throw DomainError(std::string(what) + " violates its support");
  }
}

std::vector<Scalar> times(const GridFunction& f, const GridFunction& b) {
  std::vector<Scalar> out(f.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f[i] * b[i];
  return out;
}

}  // namespace

Scalar pair_matrix(const OperatorMatrix& T, const GridFunction& u, const GridFunction& v) {
  check_grid(T, u);
  check_grid(T, v);
  const auto cells = all_cells(T.size());
  return pair_on(T, cells, u.values(), v.values());
}

Scalar pair_tb(const OperatorMatrix& T, const TestingPair& pair, const GridFunction& f,
               const GridFunction& g) {
  return pair_matrix(T, f * pair.first.b(), g * pair.second.b());
}

WeakCompactReport weak_scan(const OperatorMatrix& T, const TestingPair& pair, int M_max,
                            const std::vector<double>& eps_list) {
  const Region& r = T.region();
  if (!(pair.first.region() == r)) throw DomainError("testing pair and operator grids differ");
  if (M_max < 1) throw ConfigError("weak_scan needs M_max >= 1");
  const std::size_t n = r.cube_count();
  const double vol = r.cell_volume();
  const std::vector<Scalar> ones(T.size(), Scalar(1));
  const auto b1 = pair.first.b().values();
  const auto b2 = pair.second.b().values();
  WeakCompactReport rep;
  rep.cube_max.assign(n, 0.0);
  for (std::size_t I = 0; I < n; ++I) {
    const std::vector<std::size_t> cells = r.cells_of(I);
    const double measure = cube_volume(r, I);
    for (int alpha = 0; alpha <= 1; ++alpha) {
      for (int beta = 0; beta <= 1; ++beta) {
        std::span<const Scalar> u = alpha ? b1 : std::span<const Scalar>(ones);
        std::span<const Scalar> v = beta ? b2 : std::span<const Scalar>(ones);
        const double num = std::abs(pair_on(T, cells, u, v));
        const double den = measure * (alpha ? q_average_on(b1, cells, pair.q1, vol, measure) : 1.0) *
                           (beta ? q_average_on(b2, cells, pair.q2, vol, measure) : 1.0);
        const double ratio = num == 0 ? 0.0 : num / den;
        rep.rows.push_back({I, alpha, beta, ratio});
        rep.cube_max[I] = std::max(rep.cube_max[I], ratio);
      }
    }
  }
  std::vector<WeakBucket> buckets;
  for (std::size_t I = 0; I < n; ++I) {
    const DyadicCube c = r.cube(I);
    const auto rd = static_cast<std::int64_t>(std::floor(rdist(c.to_cube(), unit_ball(r.dim())).to_double()));
    auto it = std::find_if(buckets.begin(), buckets.end(),
                           [&](const WeakBucket& b) { return b.level == c.level && b.rdist == rd; });
    if (it == buckets.end()) {
      buckets.push_back({c.level, rd, rep.cube_max[I]});
    } else {
      it->max_ratio = std::max(it->max_ratio, rep.cube_max[I]);
    }
  }
  std::sort(buckets.begin(), buckets.end(), [](const WeakBucket& a, const WeakBucket& b) {
    return a.level != b.level ? a.level > b.level : a.rdist < b.rdist;
  });
  rep.buckets = std::move(buckets);
  std::vector<double> tail(M_max + 1, 0.0);
  for (int M = 1; M <= M_max; ++M) {
    const std::vector<bool> mask = moderate_mask(r, M);
    for (std::size_t I = 0; I < n; ++I) {
      if (!mask[I]) tail[M] = std::max(tail[M], rep.cube_max[I]);
    }
  }
  for (double eps : eps_list) {
    int found = -1;
    for (int M = 1; M <= M_max && found < 0; ++M) {
      if (tail[M] < eps) found = M;
    }
    rep.m_eps.emplace_back(eps, found);
  }
  return rep;
}

std::vector<double> weak_profile(const WeakCompactReport& report, const Region& region, int M) {
  if (report.cube_max.size() != region.cube_count()) throw DomainError("report and region differ");
  std::vector<double> fw(region.cube_count(), 0.0);
  if (M < 1) return fw;
  const std::vector<bool> mask = moderate_mask(region, M);
  for (std::size_t I = 0; I < fw.size(); ++I) {
    if (mask[I]) fw[I] = report.cube_max[I];
  }
  return fw;
}

namespace {

double tilde_fk(const OperatorMatrix& T, const Cube& I) {
  return tilde_F(T.info().triple, I, I, I, T.info().delta);
}

}  // namespace

double adjacent_check(const OperatorMatrix& T, const TestingPair& pair, std::size_t I,
                      std::size_t Ip, const GridFunction& f, const GridFunction& g) {
  const Region& r = T.region();
  check_grid(T, f);
  check_grid(T, g);
  const DyadicCube a = r.cube(I), b = r.cube(Ip);
  if (I == Ip || a.level != b.level || distance(a.to_cube(), b.to_cube()) != Rational(0)) {
    throw DomainError("adjacent_check needs distinct touching cubes of equal size");
  }
  const auto ca = r.cells_of(I), cb = r.cells_of(Ip);
  require_support(f, ca, "f");
  require_support(g, cb, "g");
  const double num = std::abs(pair_tb(T, pair, f, g));
  if (num == 0) return 0.0;
  const double vol = r.cell_volume(), measure = cube_volume(r, I);
  const double den = measure * q_average_on(times(f, pair.first.b()), ca, pair.q1, vol, measure) *
                     q_average_on(times(g, pair.second.b()), cb, pair.q2, vol, measure) *
                     tilde_fk(T, a.to_cube());
  return num / den;
}

double hardy_check(const OperatorMatrix& T, const TestingPair& pair, std::size_t I,
                   const GridFunction& f, const GridFunction& g) {
  const Region& r = T.region();
  check_grid(T, f);
  check_grid(T, g);
  const Cube cube = r.cube(I).to_cube();
  const Cube three = cube.dilate(Rational(3));
  const auto in3 = cells_inside(r, three);
  const auto inI = r.cells_of(I);
  std::vector<bool> isI(r.cell_count(), false);
  for (std::size_t c : inI) isI[c] = true;
  GridFunction fo(r), gi(r);
  for (std::size_t c : in3) {
    if (!isI[c]) fo[c] = f[c];
  }
  for (std::size_t c : inI) gi[c] = g[c];
  const double num = std::abs(pair_tb(T, pair, fo, gi));
  if (num == 0) return 0.0;
  const double vol = r.cell_volume(), measure = cube_volume(r, I);
  const double den = measure *
                     q_average_on(times(f, pair.first.b()), in3, pair.q1, vol, three.volume().to_double()) *
                     q_average_on(times(g, pair.second.b()), inI, pair.q2, vol, measure) *
                     tilde_fk(T, cube);
  return num / den;
}

std::optional<double> log2_slope(const std::vector<int>& x, const std::vector<double>& y) {
  std::vector<double> xs, ys;
  for (std::size_t i = 0; i < x.size() && i < y.size(); ++i) {
    if (y[i] > 0 && std::isfinite(y[i])) {
      xs.push_back(x[i]);
      ys.push_back(std::log2(y[i]));
    }
  }
  if (xs.size() < 2) return std::nullopt;
  const double m = static_cast<double>(xs.size());
  double sx = 0, sy = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sx += xs[i];
    sy += ys[i];
  }
  const double mx = sx / m, my = sy / m;
  double sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxx += (xs[i] - mx) * (xs[i] - mx);
    sxy += (xs[i] - mx) * (ys[i] - my);
  }
  if (sxx == 0) return std::nullopt;
  return sxy / sxx;
}

LbReport lb_functional(const OperatorMatrix& T, const TestingPair& pair, const GridFunction& f,
                       const Cube& J, int k_max, int k_fit) {
  const Region& r = T.region();
  check_grid(T, f);
  if (k_max < 2) throw ConfigError("lb_functional needs k_max >= 2");
  const double vol = r.cell_volume();
  const auto aligned = [&](const Cube& q) {
    const auto cells = cells_inside(r, q);
    const double expect = q.volume().to_double() / vol;
    if (std::abs(static_cast<double>(cells.size()) - expect) > 1e-9 * expect) {
      throw DomainError("cube is not a union of grid cells inside the region");
    }
    return cells;
  };
  const auto jc = aligned(J);
  require_support(f, jc, "f");
  Scalar mean = 0;
  double mass = 0;
  for (std::size_t c : jc) {
    mean += f[c] * pair.second.b()[c];
    mass += std::abs(f[c] * pair.second.b()[c]);
  }
  if (std::abs(mean) > kMeanZeroTolerance * std::max(mass, 1e-300) && std::abs(mean) > 0) {
    throw DomainError("f is not mean zero against b2: |int f b2| / int |f b2| = " +
                      format_double(std::abs(mean) / mass));
  }
  if (!r.root().to_cube().contains(J.dilate(Rational::pow2(k_max)))) {
    throw DomainError("2^k_max J leaves the region");
  }
  LbReport rep;
  rep.delta = T.info().delta;
  const auto b1 = pair.first.b().values();
  std::vector<Scalar> w(jc.size());
  for (std::size_t a = 0; a < jc.size(); ++a) w[a] = f[jc[a]] * pair.second.b()[jc[a]];
  for (int k = 2; k <= k_max; ++k) {
    const auto cells = aligned(J.dilate(Rational::pow2(k)));
    Scalar s = 0;
    for (std::size_t a = 0; a < jc.size(); ++a) {
      Scalar row = 0;
      for (std::size_t t : cells) row += T(jc[a], t) * b1[t];
      s += w[a] * row;
    }
    rep.k.push_back(k);
    rep.partial.push_back(s * (vol * vol));
  }
  rep.limit = rep.partial.back();
  const int last = std::min(k_fit, k_max - 1);
  for (int k = 2; k <= last; ++k) {
    rep.fit_k.push_back(k);
    rep.decay.push_back(std::abs(rep.limit - rep.partial[k - 2]));
  }
  if (const auto s = log2_slope(rep.fit_k, rep.decay)) {
    rep.slope = *s;
    rep.slope_defined = true;
  }
  return rep;
}

namespace {

using DenseMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

DenseMatrix wavelet_columns(const WaveletSystem& sys) {
  const Region& r = sys.region();
  const std::size_t N = r.cell_count(), n = r.cube_count();
  DenseMatrix W = DenseMatrix::Zero(static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(n));
  for (std::size_t I = 1; I < n; ++I) {
    const GridFunction psi = wavelet(sys, I);
    for (std::size_t c : r.cells_of(r.parent_flat(I))) {
      W(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(I)) = psi[c];
    }
  }
  return W;
}

DenseMatrix as_dense(const OperatorMatrix& T) {
  const auto N = static_cast<Eigen::Index>(T.size());
  DenseMatrix E(N, N);
  for (Eigen::Index x = 0; x < N; ++x) {
    for (Eigen::Index t = 0; t < N; ++t) E(x, t) = T(static_cast<std::size_t>(x), static_cast<std::size_t>(t));
  }
  return E;
}

}  // namespace

BumpMatrix bump_matrix(const OperatorMatrix& T, const TestingPair& pair) {
  const Region& r = T.region();
  if (!(pair.first.region() == r)) throw DomainError("testing pair and operator grids differ");
  const double vol = r.cell_volume();
  const DenseMatrix W1 = wavelet_columns(pair.first);
  const DenseMatrix W2 = wavelet_columns(pair.second);
  const DenseMatrix TW = as_dense(T) * W1;
  const DenseMatrix B = (W2.transpose() * TW) * Scalar(vol * vol);
  const std::size_t n = r.cube_count();
  BumpMatrix out{r, std::vector<Scalar>(n * n)};
  for (std::size_t I = 1; I < n; ++I) {
    for (std::size_t J = 1; J < n; ++J) {
      out.values[I * n + J] = B(static_cast<Eigen::Index>(J), static_cast<Eigen::Index>(I));
    }
  }
  return out;
}

Scalar orthorep_pairing(const OperatorMatrix& T, const TestingPair& pair, const BumpMatrix& bumps,
                        const GridFunction& f, const GridFunction& g) {
  const Region& r = T.region();
  const std::size_t n = r.cube_count();
  const WaveletCoeffs a = analyze(pair.first, f);
  const WaveletCoeffs d = analyze(pair.second, g);
  Scalar s = 0;
  for (std::size_t I = 1; I < n; ++I) {
    if (a[I] == Scalar(0)) continue;
    Scalar row = 0;
    for (std::size_t J = 1; J < n; ++J) row += d[J] * bumps(I, J);
    s += a[I] * row;
  }
  const GridFunction ef = root_expectation(pair.first, f);
  const GridFunction eg = root_expectation(pair.second, g);
  s += pair_matrix(T, ef, synthesize(pair.second, d));
  s += pair_matrix(T, synthesize(pair.first, a), eg);
  s += pair_matrix(T, ef, eg);
  return s;
}

int bump_case(const Region& region, std::size_t I, std::size_t J) {
  if (I == 0 || J == 0) throw DomainError("bump estimates need non-root cubes");
  const std::size_t ip = region.parent_flat(I), jp = region.parent_flat(J);
  const DyadicCube a = region.cube(ip), b = region.cube(jp);
  if (rdist(a.to_cube(), b.to_cube()) > Rational(3)) return 1;
  const bool a_outer = a.level >= b.level;
  const Rational in = a_outer ? inrdist_unchecked(a, b.to_cube()) : inrdist_unchecked(b, a.to_cube());
  return in > Rational(1) ? 2 : 3;
}

namespace {

// Per-tree tables behind the bump bounds; built once for a whole scan.
class BumpTerms {
 public:
  explicit BumpTerms(const BFWeight& bf) : bf_(bf) {
    const Region& r = bf.region();
    const std::size_t n = r.cube_count();
    const double vol = r.cell_volume();
    three1_.resize(n);
    three2_.resize(n);
    for (std::size_t R = 0; R < n; ++R) {
      const Cube three = r.cube(R).to_cube().dilate(Rational(3));
      const auto cells = cells_inside(r, three);
      const double m = three.volume().to_double();
      three1_[R] = q_average_on(bf.pair().first.b().values(), cells, bf.pair().q1, vol, m);
      three2_[R] = q_average_on(bf.pair().second.b().values(), cells, bf.pair().q2, vol, m);
    }
  }

  BumpBound bound(std::size_t I, std::size_t J, double eps) const {
    const Region& r = bf_.region();
    const TestingPair& pr = bf_.pair();
    const WaveletSystem& s1 = pr.first;
    const WaveletSystem& s2 = pr.second;
    const AdmissibleTriple& tr = bf_.triple();
    const double delta = bf_.delta();
    const double n = r.dim();
    const DyadicCube ci = r.cube(I), cj = r.cube(J);
    const Cube qi = ci.to_cube(), qj = cj.to_cube();
    const std::size_t sm = smaller_cube(r, I, J), lg = larger_cube(r, I, J);
    const Cube qs = r.cube(sm).to_cube();
    const Cube env = enclosing(qi, qj);
    const double ec = eccentricity(qi, qj).to_double();
    BumpBound out;
    out.bump_case = bump_case(r, I, J);
    if (out.bump_case == 1) {
      const double rd = rdist(qi, qj).to_double();
      out.b1f1 = cb_constants(s1, I, pr.q1).B * cb_constants(s2, J, pr.q2).B * cube_F(tr, env, qs, env);
      out.bound = std::pow(ec, n / 2 + delta) / std::pow(rd, n + delta) * out.b1f1;
      return out;
    }
    const std::size_t ip = r.parent_flat(I), jp = r.parent_flat(J);
    const bool alpha = sm != lg && r.cube(lg).contains(r.cube(sm));
    double b2 = bf_.c_const1(I) * bf_.c_const2(J) * bf_.restricted_avg1(I, sm) * bf_.restricted_avg2(J, sm);
    if (alpha) {
      const double sum1 = bf_.maximal_avg1(I) / std::abs(s1.average(I)) +
                          bf_.maximal_avg1(ip) / std::abs(s1.average(ip));
      const double sum2 = bf_.maximal_avg2(J) / std::abs(s2.average(J)) +
                          bf_.maximal_avg2(jp) / std::abs(s2.average(jp));
      b2 += sum1 * sum2;
    }
    const double f2 = tilde_F(tr, env, qs, env, delta) + cube_F(tr, qs, qs, env);
    out.b2f2 = b2 * f2;
    if (out.bump_case == 2) {
      // Measured between the parents, as in the case split: for J inside
      // I_p but outside I the distance to the inner boundary of I itself is
      // not comparable and grows without bound under refinement.
      const DyadicCube pi = r.cube(ip), pj = r.cube(jp);
      const double in = (pi.level >= pj.level ? inrdist_unchecked(pi, pj.to_cube())
                                              : inrdist_unchecked(pj, pi.to_cube()))
                            .to_double();
      out.bound = std::pow(ec, n / 2) / std::pow(in, delta) * out.b2f2;
      return out;
    }
    if (I != J) {
      const std::size_t ps = smaller_cube(r, ip, jp);
      const double b3 = bf_.c_const1(I) * three1_[ps] * bf_.c_const2(J) * three2_[ps];
      out.b3f3 = b3 * tilde_F(tr, qs, qs, qs, delta);
    } else {
      double sum1 = 0, sum2 = 0;
      for (std::size_t ch : r.children_flat(ip)) {
        sum1 += bf_.c_const1(ch) * s1.q_average(ch, pr.q1);
        sum2 += bf_.c_const2(ch) * s2.q_average(ch, pr.q2);
      }
      out.b3f3 = sum1 * sum2 * (tilde_F(tr, qi, qi, qi, delta) + bf_.fw(I) + eps);
    }
    out.bound = std::pow(ec, n / 2) * (out.b2f2 + out.b3f3);
    return out;
  }

 private:
  const BFWeight& bf_;
  std::vector<double> three1_, three2_;
};

double coefficient_defect(const WaveletCoeffs& c, std::size_t& worst) {
  double m = 0;
  for (std::size_t J = 1; J < c.size(); ++J) {
    if (std::abs(c[J]) > m) {
      m = std::abs(c[J]);
      worst = J;
    }
  }
  return m;
}

}  // namespace

BumpBound bump_bound(const BFWeight& bf, std::size_t I, std::size_t J, double eps) {
  if (I == 0 || J == 0) throw DomainError("bump estimates need non-root cubes");
  return BumpTerms(bf).bound(I, J, eps);
}

BumpReport bump_verify(const OperatorMatrix& T, const BFWeight& bf, double eps, double ceiling) {
  const Region& r = T.region();
  const TestingPair& pr = bf.pair();
  if (!(pr.first.region() == r)) throw DomainError("testing pair and operator grids differ");
  BumpReport rep;
  const double scale = T.max_norm();
  std::size_t w1 = 0, w2 = 0;
  const double d1 = coefficient_defect(dual_analyze(pr.second, T.apply(pr.first.b())), w1);
  const double d2 = coefficient_defect(dual_analyze(pr.first, T.apply_transpose(pr.second.b())), w2);
  rep.tb1_defect = scale > 0 ? d1 / scale : 0.0;
  rep.tstar_b2_defect = scale > 0 ? d2 / scale : 0.0;
  if (rep.tb1_defect > kCancellationTolerance) {
    throw DomainError("T b1 does not vanish: coefficient " + format_double(d1) + " at cube " +
                      r.cube(w1).token());
  }
  if (rep.tstar_b2_defect > kCancellationTolerance) {
    throw DomainError("T* b2 does not vanish: coefficient " + format_double(d2) + " at cube " +
                      r.cube(w2).token());
  }
  const BumpMatrix bumps = bump_matrix(T, pr);
  const BumpTerms terms(bf);
  const std::size_t n = r.cube_count();
  std::vector<std::vector<BumpRow>> rows(n);
  parallel_for(n, [&](std::size_t begin, std::size_t end) {
    for (std::size_t I = std::max<std::size_t>(begin, 1); I < end; ++I) {
      rows[I].reserve(n - 1);
      for (std::size_t J = 1; J < n; ++J) {
        const BumpBound b = terms.bound(I, J, eps);
        BumpRow row{I, J, b.bump_case, std::abs(bumps(I, J)), b.bound, 0.0};
        if (row.observed > 0) row.ratio = b.bound > 0 ? row.observed / b.bound : kInfinity;
        rows[I].push_back(row);
      }
    }
  });
  for (auto& block : rows) {
    for (const BumpRow& row : block) {
      const auto k = static_cast<std::size_t>(row.bump_case - 1);
      ++rep.count[k];
      rep.max_ratio[k] = std::max(rep.max_ratio[k], row.ratio);
      if (row.ratio > ceiling) ++rep.above_ceiling;
      rep.rows.push_back(row);
    }
  }
  return rep;
}

namespace {

GridFunction conj(GridFunction f) {
  for (Scalar& v : f.values()) v = std::conj(v);
  return f;
}

// Lagom projections with the moderate mask computed once.
struct Projector {
  const WaveletSystem& sys;
  std::vector<bool> mask;

  Projector(const WaveletSystem& s, int M) : sys(s), mask(moderate_mask(s.region(), M)) {}

  GridFunction P(const GridFunction& f) const {
    WaveletCoeffs c = analyze(sys, f);
    for (std::size_t I = 1; I < c.size(); ++I) {
      if (!mask[I]) c[I] = 0;
    }
    return synthesize(sys, c);
  }
  GridFunction P_star(const GridFunction& f) const {
    WaveletCoeffs c = dual_analyze(sys, f);
    for (std::size_t I = 1; I < c.size(); ++I) {
      if (!mask[I]) c[I] = 0;
    }
    return dual_synthesize(sys, c);
  }
};

struct Compressed {
  const OperatorMatrix& T;
  Projector p1, p2;
  Compression which;

  Compressed(const OperatorMatrix& op, const TestingPair& pair, int M, Compression w)
      : T(op), p1(pair.first, M), p2(pair.second, M), which(w) {}

  GridFunction apply(const GridFunction& f) const {
    GridFunction in = f;
    if (which == Compression::perp_T_proj) in = p1.P(f);
    if (which == Compression::perp_T_perp) in = f - p1.P(f);
    const GridFunction tf = T.apply(in);
    if (which == Compression::proj_T) return p2.P_star(tf);
    return tf - p2.P_star(tf);
  }
  // Bilinear transpose of apply.
  GridFunction transpose(const GridFunction& g) const {
    GridFunction in = which == Compression::proj_T ? p2.P(g) : g - p2.P(g);
    const GridFunction tg = T.apply_transpose(in);
    if (which == Compression::perp_T_proj) return p1.P_star(tg);
    if (which == Compression::perp_T_perp) return tg - p1.P_star(tg);
    return tg;
  }
  GridFunction adjoint(const GridFunction& g) const { return conj(transpose(conj(g))); }
};

double euclid(const GridFunction& f) {
  double s = 0;
  for (const Scalar& v : f.values()) s += std::norm(v);
  return std::sqrt(s);
}

}  // namespace

PowerResult compressed_norm(const OperatorMatrix& T, const TestingPair& pair, int M,
                            Compression which, int iters) {
  if (iters < 1) throw ConfigError("power iteration needs at least one step");
  const Compressed A(T, pair, M, which);
  const Region& r = T.region();
  // A fixed pseudo-random start: structured vectors such as constants lie in
  // the kernel of the projections when b is constant.
  GridFunction v(r);
  Rng rng(kPowerSeed);
  for (Scalar& x : v.values()) x = Scalar(rng.uniform(0.5, 1.5), 0.0);
  v *= Scalar(1.0 / euclid(v));
  PowerResult res;
  double prev = 0;
  for (int it = 1; it <= iters; ++it) {
    GridFunction w = A.adjoint(A.apply(v));
    const double lam = euclid(w);
    res.iterations = it;
    if (lam == 0) {
      res.norm = 0;
      res.converged = true;
      return res;
    }
    w *= Scalar(1.0 / lam);
    v = std::move(w);
    res.norm = std::sqrt(lam);
    if (it > 1 && std::abs(lam - prev) <= kPowerTolerance * lam) {
      res.converged = true;
      break;
    }
    prev = lam;
  }
  return res;
}

std::vector<Scalar> compressed_dense(const OperatorMatrix& T, const TestingPair& pair, int M,
                                     Compression which) {
  const Compressed A(T, pair, M, which);
  const std::size_t N = T.size();
  std::vector<Scalar> out(N * N);
  for (std::size_t t = 0; t < N; ++t) {
    GridFunction e(T.region());
    e[t] = 1;
    const GridFunction col = A.apply(e);
    for (std::size_t x = 0; x < N; ++x) out[x * N + t] = col[x];
  }
  return out;
}

std::vector<CompactnessPoint> compactness_curve(const OperatorMatrix& T, const TestingPair& pair,
                                                const std::vector<int>& M_list, int iters) {
  for (std::size_t k = 1; k < M_list.size(); ++k) {
    if (M_list[k] <= M_list[k - 1]) throw ConfigError("M list must be increasing");
  }
  std::vector<CompactnessPoint> out;
  for (int M : M_list) {
    CompactnessPoint p;
    p.M = M;
    p.first = compressed_norm(T, pair, M, Compression::proj_T, iters);
    p.second = compressed_norm(T, pair, M, Compression::perp_T_proj, iters);
    p.third = compressed_norm(T, pair, M, Compression::perp_T_perp, iters);
    out.push_back(p);
  }
  return out;
}

TestingPair swapped(const TestingPair& pair) {
  return TestingPair(pair.second.b(), pair.first.b(), pair.q2, pair.q1);
}

Tb1Estimate estimate_tb1(const OperatorMatrix& T, const TestingPair& pair) {
  const Region& r = T.region();
  if (!(pair.first.region() == r)) throw DomainError("testing pair and operator grids differ");
  const std::size_t n = r.cube_count(), N = T.size();
  const double vol = r.cell_volume(), h = std::ldexp(1.0, r.finest_level());
  const auto b1 = pair.first.b().values();
  const auto b2 = pair.second.b().values();
  const int dim = r.dim();
  // Dilation exponents never exceed the tree depth plus two.
  const int kcap = r.depth() + 3;
  std::vector<std::vector<Scalar>> partials(n);
  std::vector<Scalar> coeff(n);
  parallel_for(n, [&](std::size_t begin, std::size_t end) {
    for (std::size_t J = std::max<std::size_t>(begin, 1); J < end; ++J) {
      const std::size_t jp = r.parent_flat(J);
      const DyadicCube pc = r.cube(jp);
      const double side = pc.side_d();
      const GridFunction hj = haar_bump(pair.second, J);
      const auto cells = r.cells_of(jp);
      // shell[k] collects t whose cell first fits inside 2^k J_p.
      std::vector<Scalar> shell(kcap + 1, Scalar(0));
      std::vector<Scalar> weight(cells.size());
      for (std::size_t a = 0; a < cells.size(); ++a) weight[a] = b2[cells[a]] * hj[cells[a]];
      for (std::size_t t = 0; t < N; ++t) {
        double d = 0;
        for (int i = 0; i < dim; ++i) d = std::max(d, std::abs(r.cell_center(t, i) - pc.center_d(i)));
        int k = 0;
        while (std::ldexp(side, k - 1) < d + h / 2) ++k;
        Scalar col = 0;
        for (std::size_t a = 0; a < cells.size(); ++a) col += weight[a] * T(cells[a], t);
        shell[std::min(k, kcap)] += col * b1[t];
      }
      std::vector<Scalar>& s = partials[J];
      Scalar acc = 0;
      for (int k = 0; k <= kcap; ++k) {
        acc += shell[k];
        s.push_back(acc * (vol * vol));
      }
      coeff[J] = s.back();
    }
  });
  Tb1Estimate out{WaveletCoeffs(r, coeff), std::vector<double>(kcap + 1, 0.0)};
  for (std::size_t J = 1; J < n; ++J) {
    for (int k = 0; k <= kcap; ++k) {
      out.tail[k] = std::max(out.tail[k], std::abs(coeff[J] - partials[J][k]));
    }
  }
  while (out.tail.size() > 1 && out.tail.back() == 0 && out.tail[out.tail.size() - 2] == 0) {
    out.tail.pop_back();
  }
  return out;
}

Tb1Estimate estimate_tstar_b2(const OperatorMatrix& T, const TestingPair& pair) {
  return estimate_tb1(T.transpose(), swapped(pair));
}

NecessityReport necessity_weak(const OperatorMatrix& T, const TestingPair& pair, double p, int M,
                               int iters, bool accretive) {
  if (p != 2.0) throw ConfigError("necessity_weak supports p = 2 only");
  const double pp = p / (p - 1);
  if (!accretive && !(p <= pair.q1 && pp <= pair.q2)) {
    throw DomainError("necessity_weak needs p <= q1 and p' <= q2, or accretive testing functions");
  }
  if (M < 1) throw ConfigError("necessity_weak needs M >= 1");
  const Region& r = T.region();
  NecessityReport rep;
  rep.M = M;
  rep.p = p;
  rep.norm_perp = compressed_norm(T, pair, M, Compression::perp_T, iters).norm;
  rep.norm_proj = compressed_norm(T, pair, M, Compression::proj_T, iters).norm;
  const std::size_t n = r.cube_count();
  const double vol = r.cell_volume(), dim = r.dim();
  const auto b1 = pair.first.b().values(), b2 = pair.second.b().values();
  const Cube big = ball(r.dim(), Rational::pow2(M));
  for (std::size_t Q = 0; Q < n; ++Q) {
    const DyadicCube c = r.cube(Q);
    const auto cells = r.cells_of(Q);
    const double measure = cube_volume(r, Q);
    const double lhs = std::abs(pair_on(T, cells, b1, b2));
    const double side = c.side_d();
    const bool gate = side <= std::ldexp(1.0, M) &&
                      rdist(c.to_cube(), big).to_double() <= static_cast<double>(M);
    const double factor = std::pow(1.0 + std::ldexp(1.0, -M) / side, -dim / p);
    const double rhs = measure * q_average_on(b1, cells, pair.q1, vol, measure) *
                       q_average_on(b2, cells, pair.q2, vol, measure) *
                       (rep.norm_perp + (gate ? rep.norm_proj * factor : 0.0));
    if (!gate) ++rep.gated;
    ++rep.cubes;
    const double ratio = lhs == 0 ? 0.0 : (rhs > 0 ? lhs / rhs : kInfinity);
    if (ratio > rep.worst_ratio) {
      rep.worst_ratio = ratio;
      rep.worst_cube = Q;
    }
  }
  return rep;
}

}  // namespace ctb
