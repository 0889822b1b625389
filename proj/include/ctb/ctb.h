#ifndef CTB_CTB_H
#define CTB_CTB_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

/* Every call returns a status; on failure ctb_last_error() describes it.
   The message is per thread and stays valid until the next failing call on
   that thread. Complex arrays are interleaved (re, im) doubles. */
typedef enum {
  CTB_OK = 0,
  CTB_ERR_ARGUMENT = 1,
  CTB_ERR_DOMAIN = 2,
  CTB_ERR_DEGENERATE = 3,
  CTB_ERR_CONFIG = 4,
  CTB_ERR_IO = 5,
  CTB_ERR_INVARIANT = 6,
  CTB_ERR_INTERNAL = 7
} ctb_status;

const char* ctb_last_error(void);
const char* ctb_status_name(ctb_status status);
const char* ctb_version(void);

/* 0 restores the default (hardware concurrency). */
ctb_status ctb_set_threads(int threads);
int ctb_threads(void);

typedef struct ctb_region ctb_region;
typedef struct ctb_wavelets ctb_wavelets;
typedef struct ctb_operator ctb_operator;

/* Root cube 2^root_level * prod [index_i, index_i + 1), cells at 2^finest_level. */
ctb_status ctb_region_create(int dim, int root_level, const int64_t* root_index, int finest_level,
                             ctb_region** out);
void ctb_region_free(ctb_region* region);
size_t ctb_region_cell_count(const ctb_region* region);
size_t ctb_region_cube_count(const ctb_region* region);

/* b holds one complex value per cell. */
ctb_status ctb_wavelets_create(const ctb_region* region, const double* b, ctb_wavelets** out);
void ctb_wavelets_free(ctb_wavelets* wavelets);

/* f has cell_count complex values, coeffs cube_count (slot 0 unused, zero). */
ctb_status ctb_analyze(const ctb_wavelets* w, const double* f, double* coeffs);
ctb_status ctb_dual_analyze(const ctb_wavelets* w, const double* f, double* coeffs);
ctb_status ctb_synthesize(const ctb_wavelets* w, const double* coeffs, double* f);
ctb_status ctb_dual_synthesize(const ctb_wavelets* w, const double* coeffs, double* f);

/* Decay specs are "family:parameter" strings; diagonal is "auto", "zero_pv"
   or "supplied". */
typedef struct {
  const char* kind;
  const char* L;
  const char* S;
  const char* D;
  double delta;
  double anchor;
  int refine_levels;
  const char* diagonal;
} ctb_kernel_spec;

ctb_status ctb_operator_discretize(const ctb_region* region, const ctb_kernel_spec* spec, ctb_operator** out);
ctb_status ctb_operator_load(const char* path, ctb_operator** out);
ctb_status ctb_operator_save(const ctb_operator* op, const char* path);
void ctb_operator_free(ctb_operator* op);
size_t ctb_operator_size(const ctb_operator* op);
ctb_status ctb_operator_entry(const ctb_operator* op, size_t x, size_t t, double* value);
ctb_status ctb_operator_apply(const ctb_operator* op, const double* f, double* out);
/* ||(P_M^*)^perp T P_M^perp|| for the testing pair (b1, q1), (b2, q2). */
ctb_status ctb_operator_compressed_norm(const ctb_operator* op, const double* b1, const double* b2,
                                        double q1, double q2, int M, int iterations, double* norm);

/* Runs a CLI subcommand. seed < 0 and out_dir == NULL keep the config values.
   *pass is 1 for PASS and 0 for FAIL when the status is CTB_OK. */
ctb_status ctb_run(const char* command, const char* config_path, int64_t seed, const char* out_dir, int* pass);

#ifdef __cplusplus
}
#endif

#endif
