#include "ctb/ctb.h"

#include <algorithm>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "ctb/error.hpp"
#include "ctb/experiment.hpp"
#include "ctb/operator.hpp"
#include "ctb/parallel.hpp"
#include "ctb/wavelets.hpp"

struct ctb_region {
  ctb::Region value;
};

struct ctb_wavelets {
  ctb::WaveletSystem value;
};

struct ctb_operator {
  ctb::OperatorMatrix value;
};

namespace {

thread_local std::string g_last_error;

ctb_status fail(ctb_status s, const std::string& message) {
  g_last_error = message;
  return s;
}

// Maps the library exception hierarchy onto status codes.
template <class Fn>
ctb_status guard(Fn&& fn) {
  try {
    fn();
    return CTB_OK;
  } catch (const ctb::DegenerateError& e) {
    return fail(CTB_ERR_DEGENERATE, e.what());
  } catch (const ctb::DomainError& e) {
    return fail(CTB_ERR_DOMAIN, e.what());
  } catch (const ctb::ConfigError& e) {
    return fail(CTB_ERR_CONFIG, e.what());
  } catch (const ctb::IoError& e) {
    return fail(CTB_ERR_IO, e.what());
  } catch (const ctb::InvariantError& e) {
    return fail(CTB_ERR_INVARIANT, e.what());
  } catch (const std::exception& e) {
    return fail(CTB_ERR_INTERNAL, e.what());
  } catch (...) {
    return fail(CTB_ERR_INTERNAL, "unknown failure");
  }
}

void require(bool ok, const char* what) {
  if (!ok) throw ctb::DomainError(what);
}

ctb::GridFunction read_cells(const ctb::Region& r, const double* v) {
  require(v != nullptr, "null array");
  std::vector<ctb::Scalar> out(r.cell_count());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = {v[2 * i], v[2 * i + 1]};
  return ctb::GridFunction(r, std::move(out));
}

void write_values(std::span<const ctb::Scalar> v, double* out) {
  require(out != nullptr, "null output array");
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[2 * i] = v[i].real();
    out[2 * i + 1] = v[i].imag();
  }
}

ctb::WaveletCoeffs read_coeffs(const ctb::Region& r, const double* v) {
  require(v != nullptr, "null array");
  std::vector<ctb::Scalar> out(r.cube_count());
  for (std::size_t i = 1; i < out.size(); ++i) out[i] = {v[2 * i], v[2 * i + 1]};
  return ctb::WaveletCoeffs(r, std::move(out));
}

}  // namespace

extern "C" {

const char* ctb_last_error(void) { return g_last_error.c_str(); }

const char* ctb_status_name(ctb_status status) {
  switch (status) {
    case CTB_OK:
      return "ok";
    case CTB_ERR_ARGUMENT:
      return "argument";
    case CTB_ERR_DOMAIN:
      return "domain";
    case CTB_ERR_DEGENERATE:
      return "degenerate";
    case CTB_ERR_CONFIG:
      return "config";
    case CTB_ERR_IO:
      return "io";
    case CTB_ERR_INVARIANT:
      return "invariant";
    case CTB_ERR_INTERNAL:
      return "internal";
  }
  return "unknown";
}

const char* ctb_version(void) { return "1.0.0"; }

ctb_status ctb_set_threads(int threads) {
  if (threads < 0) return fail(CTB_ERR_ARGUMENT, "thread count must be non-negative");
  return guard([&] {
    const int n = threads == 0 ? static_cast<int>(std::max(1u, std::thread::hardware_concurrency())) : threads;
    ctb::set_thread_count(n);
  });
}

int ctb_threads(void) { return ctb::thread_count(); }

ctb_status ctb_region_create(int dim, int root_level, const int64_t* root_index, int finest_level,
                             ctb_region** out) {
  if (!out || !root_index) return fail(CTB_ERR_ARGUMENT, "null argument");
  if (dim < 1 || dim > ctb::kMaxDim) return fail(CTB_ERR_ARGUMENT, "dimension must be 1 or 2");
  return guard([&] {
    ctb::DyadicCube root{root_level, {0, 0}, dim};
    for (int i = 0; i < dim; ++i) root.index[i] = root_index[i];
    *out = new ctb_region{ctb::Region(root, finest_level)};
  });
}

void ctb_region_free(ctb_region* region) { delete region; }

size_t ctb_region_cell_count(const ctb_region* region) { return region ? region->value.cell_count() : 0; }

size_t ctb_region_cube_count(const ctb_region* region) { return region ? region->value.cube_count() : 0; }

ctb_status ctb_wavelets_create(const ctb_region* region, const double* b, ctb_wavelets** out) {
  if (!region || !b || !out) return fail(CTB_ERR_ARGUMENT, "null argument");
  return guard([&] { *out = new ctb_wavelets{ctb::WaveletSystem(read_cells(region->value, b))}; });
}

void ctb_wavelets_free(ctb_wavelets* wavelets) { delete wavelets; }

ctb_status ctb_analyze(const ctb_wavelets* w, const double* f, double* coeffs) {
  if (!w || !f || !coeffs) return fail(CTB_ERR_ARGUMENT, "null argument");
  return guard([&] { write_values(ctb::analyze(w->value, read_cells(w->value.region(), f)).values(), coeffs); });
}

ctb_status ctb_dual_analyze(const ctb_wavelets* w, const double* f, double* coeffs) {
  if (!w || !f || !coeffs) return fail(CTB_ERR_ARGUMENT, "null argument");
  return guard(
      [&] { write_values(ctb::dual_analyze(w->value, read_cells(w->value.region(), f)).values(), coeffs); });
}

ctb_status ctb_synthesize(const ctb_wavelets* w, const double* coeffs, double* f) {
  if (!w || !f || !coeffs) return fail(CTB_ERR_ARGUMENT, "null argument");
  return guard(
      [&] { write_values(ctb::synthesize(w->value, read_coeffs(w->value.region(), coeffs)).values(), f); });
}

ctb_status ctb_dual_synthesize(const ctb_wavelets* w, const double* coeffs, double* f) {
  if (!w || !f || !coeffs) return fail(CTB_ERR_ARGUMENT, "null argument");
  return guard(
      [&] { write_values(ctb::dual_synthesize(w->value, read_coeffs(w->value.region(), coeffs)).values(), f); });
}

ctb_status ctb_operator_discretize(const ctb_region* region, const ctb_kernel_spec* spec, ctb_operator** out) {
  if (!region || !spec || !out || !spec->kind) return fail(CTB_ERR_ARGUMENT, "null argument");
  return guard([&] {
    const ctb::Region& r = region->value;
    ctb::ExperimentConfig c = ctb::ExperimentConfig::defaults();
    c.set("region", "dim", std::to_string(r.dim()));
    c.set("kernel", "kind", spec->kind);
    if (spec->L) c.set("kernel", "L", spec->L);
    if (spec->S) c.set("kernel", "S", spec->S);
    if (spec->D) c.set("kernel", "D", spec->D);
    if (spec->diagonal) c.set("kernel", "diagonal", spec->diagonal);
    c.set("kernel", "delta", ctb::format_double(spec->delta));
    c.set("kernel", "anchor", ctb::format_double(spec->anchor));
    c.set("kernel", "refine_levels", std::to_string(spec->refine_levels));
    const ctb::CompactKernel k = c.kernel();
    const ctb::QuadratureSettings q = c.quadrature();
    std::vector<ctb::Scalar> diag;
    if (q.diagonal == ctb::DiagonalRule::supplied) diag = ctb::integrable_diagonal(k, r, c.integer("kernel", "diagonal_levels"));
    *out = new ctb_operator{ctb::discretize(k, r, q, diag)};
  });
}

ctb_status ctb_operator_load(const char* path, ctb_operator** out) {
  if (!path || !out) return fail(CTB_ERR_ARGUMENT, "null argument");
  return guard([&] { *out = new ctb_operator{ctb::OperatorMatrix::load(path)}; });
}

ctb_status ctb_operator_save(const ctb_operator* op, const char* path) {
  if (!op || !path) return fail(CTB_ERR_ARGUMENT, "null argument");
  return guard([&] { op->value.save(path); });
}

void ctb_operator_free(ctb_operator* op) { delete op; }

size_t ctb_operator_size(const ctb_operator* op) { return op ? op->value.size() : 0; }

ctb_status ctb_operator_entry(const ctb_operator* op, size_t x, size_t t, double* value) {
  if (!op || !value) return fail(CTB_ERR_ARGUMENT, "null argument");
  if (x >= op->value.size() || t >= op->value.size()) return fail(CTB_ERR_ARGUMENT, "cell index out of range");
  const ctb::Scalar v = op->value(x, t);
  value[0] = v.real();
  value[1] = v.imag();
  return CTB_OK;
}

ctb_status ctb_operator_apply(const ctb_operator* op, const double* f, double* out) {
  if (!op || !f || !out) return fail(CTB_ERR_ARGUMENT, "null argument");
  return guard([&] { write_values(op->value.apply(read_cells(op->value.region(), f)).values(), out); });
}

ctb_status ctb_operator_compressed_norm(const ctb_operator* op, const double* b1, const double* b2, double q1,
                                        double q2, int M, int iterations, double* norm) {
  if (!op || !b1 || !b2 || !norm) return fail(CTB_ERR_ARGUMENT, "null argument");
  return guard([&] {
    const ctb::Region& r = op->value.region();
    const ctb::TestingPair pair(read_cells(r, b1), read_cells(r, b2), q1, q2);
    *norm = ctb::compressed_norm(op->value, pair, M, ctb::Compression::perp_T_perp, iterations).norm;
  });
}

ctb_status ctb_run(const char* command, const char* config_path, int64_t seed, const char* out_dir, int* pass) {
  if (!command || !config_path || !pass) return fail(CTB_ERR_ARGUMENT, "null argument");
  return guard([&] {
    ctb::RunOptions options;
    if (seed >= 0) options.seed = static_cast<std::uint64_t>(seed);
    if (out_dir) options.out_dir = std::string(out_dir);
    const ctb::CommandResult res = ctb::run_command(command, ctb::ExperimentConfig::load(config_path), options);
    *pass = res.pass ? 1 : 0;
  });
}

}  // extern "C"
