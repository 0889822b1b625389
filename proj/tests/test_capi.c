/* Exercises the public header from plain C. */
#include <math.h>
#include <pthread.h>
#include <stdio.h>
#include <stdlib.h>
#include <string.h>

#include "ctb/ctb.h"

static int failures = 0;

#define EXPECT(cond)                                              \
  do {                                                            \
    if (!(cond)) {                                                \
      fprintf(stderr, "%s:%d: expected %s\n", __FILE__, __LINE__, #cond); \
      ++failures;                                                 \
    }                                                             \
  } while (0)

static double lcg(unsigned* s) {
  *s = *s * 1103515245u + 12345u;
  return ((*s >> 8) & 0xffff) / 65536.0 - 0.5;
}

static void* fail_elsewhere(void* arg) {
  ctb_region* r = NULL;
  const int64_t idx[2] = {0, 0};
  *(ctb_status*)arg = ctb_region_create(5, 0, idx, -3, &r);
  return NULL;
}

static void test_errors(void) {
  const int64_t idx[2] = {0, 0};
  ctb_region* r = NULL;
  EXPECT(strcmp(ctb_status_name(CTB_ERR_DEGENERATE), "degenerate") == 0);
  EXPECT(strlen(ctb_version()) > 0);
  EXPECT(ctb_region_create(1, 0, idx, 1, &r) == CTB_ERR_DOMAIN);
  EXPECT(strlen(ctb_last_error()) > 0);
  EXPECT(ctb_region_create(1, 0, NULL, -3, &r) == CTB_ERR_ARGUMENT);

  /* The message belongs to the failing thread. */
  char mine[256];
  EXPECT(ctb_region_create(1, 0, idx, 1, &r) == CTB_ERR_DOMAIN);
  snprintf(mine, sizeof mine, "%s", ctb_last_error());
  pthread_t th;
  ctb_status other = CTB_OK;
  pthread_create(&th, NULL, fail_elsewhere, &other);
  pthread_join(th, NULL);
  EXPECT(other == CTB_ERR_ARGUMENT);
  EXPECT(strcmp(mine, ctb_last_error()) == 0);

  EXPECT(ctb_set_threads(-1) == CTB_ERR_ARGUMENT);
  EXPECT(ctb_set_threads(3) == CTB_OK);
  EXPECT(ctb_threads() == 3);
  EXPECT(ctb_set_threads(1) == CTB_OK);

  int pass = 0;
  EXPECT(ctb_run("transform", "/nonexistent/ctb.ini", -1, NULL, &pass) == CTB_ERR_CONFIG);
}

static void test_wavelets(void) {
  const int64_t idx[2] = {0, 0};
  ctb_region* r = NULL;
  EXPECT(ctb_region_create(1, 0, idx, -4, &r) == CTB_OK);
  const size_t n = ctb_region_cell_count(r);
  const size_t m = ctb_region_cube_count(r);
  EXPECT(n == 16);
  EXPECT(m == 31);

  double* b = calloc(2 * n, sizeof(double));
  double* f = calloc(2 * n, sizeof(double));
  double* g = calloc(2 * n, sizeof(double));
  double* c = calloc(2 * m, sizeof(double));
  unsigned s = 7;
  for (size_t i = 0; i < n; ++i) {
    b[2 * i] = 1.0 + 0.5 * lcg(&s);
    b[2 * i + 1] = 0.3 * lcg(&s);
  }
  /* f mean zero against b, so the coarse term drops out of the round trip. */
  double fr = 0, fi = 0, br = 0, bi = 0;
  for (size_t i = 0; i < n; ++i) {
    f[2 * i] = lcg(&s);
    f[2 * i + 1] = lcg(&s);
  }
  for (size_t i = 0; i < n; ++i) {
    fr += f[2 * i] * b[2 * i] - f[2 * i + 1] * b[2 * i + 1];
    fi += f[2 * i] * b[2 * i + 1] + f[2 * i + 1] * b[2 * i];
    br += b[2 * i];
    bi += b[2 * i + 1];
  }
  const double den = br * br + bi * bi;
  const double kr = (fr * br + fi * bi) / den, ki = (fi * br - fr * bi) / den;
  for (size_t i = 0; i < n; ++i) {
    f[2 * i] -= kr;
    f[2 * i + 1] -= ki;
  }

  ctb_wavelets* w = NULL;
  EXPECT(ctb_wavelets_create(r, b, &w) == CTB_OK);
  EXPECT(ctb_dual_analyze(w, f, c) == CTB_OK);
  EXPECT(ctb_dual_synthesize(w, c, g) == CTB_OK);
  double err = 0;
  for (size_t i = 0; i < 2 * n; ++i) err = fmax(err, fabs(f[i] - g[i]));
  EXPECT(err < 1e-12);
  EXPECT(ctb_analyze(w, f, c) == CTB_OK);
  EXPECT(c[0] == 0 && c[1] == 0);
  EXPECT(ctb_synthesize(w, c, g) == CTB_OK);
  ctb_wavelets_free(w);

  /* x - 1/2 has a vanishing root average. */
  for (size_t i = 0; i < n; ++i) {
    b[2 * i] = (i + 0.5) / n - 0.5;
    b[2 * i + 1] = 0;
  }
  EXPECT(ctb_wavelets_create(r, b, &w) == CTB_ERR_DEGENERATE);
  EXPECT(strstr(ctb_last_error(), "0:0") != NULL);

  free(b);
  free(f);
  free(g);
  free(c);
  ctb_region_free(r);
}

static void test_operator(const char* dir) {
  const int64_t idx[2] = {0, 0};
  ctb_region* r = NULL;
  EXPECT(ctb_region_create(1, 0, idx, -4, &r) == CTB_OK);
  ctb_kernel_spec spec = {"hilbert", NULL, NULL, NULL, 1.0, 0.0, 2, "auto"};
  ctb_operator* T = NULL;
  EXPECT(ctb_operator_discretize(r, &spec, &T) == CTB_OK);
  const size_t n = ctb_operator_size(T);
  EXPECT(n == 16);
  double a[2], bt[2];
  for (size_t x = 0; x < n; ++x) {
    for (size_t t = 0; t < n; ++t) {
      EXPECT(ctb_operator_entry(T, x, t, a) == CTB_OK);
      EXPECT(ctb_operator_entry(T, t, x, bt) == CTB_OK);
      EXPECT(fabs(a[0] + bt[0]) < 1e-12 && a[1] == 0);
    }
  }
  EXPECT(ctb_operator_entry(T, n, 0, a) == CTB_ERR_ARGUMENT);

  double* ones = calloc(2 * n, sizeof(double));
  double* out = calloc(2 * n, sizeof(double));
  for (size_t i = 0; i < n; ++i) ones[2 * i] = 1;
  EXPECT(ctb_operator_apply(T, ones, out) == CTB_OK);
  double sum = 0;
  for (size_t i = 0; i < n; ++i) sum += out[2 * i];
  EXPECT(fabs(sum) < 1e-10);

  double norm = -1;
  EXPECT(ctb_operator_compressed_norm(T, ones, ones, 4, 4, 1, 200, &norm) == CTB_OK);
  EXPECT(norm > 0 && isfinite(norm));

  char path[1024];
  snprintf(path, sizeof path, "%s/capi_T.bin", dir);
  EXPECT(ctb_operator_save(T, path) == CTB_OK);
  ctb_operator* U = NULL;
  EXPECT(ctb_operator_load(path, &U) == CTB_OK);
  EXPECT(ctb_operator_entry(T, 3, 9, a) == CTB_OK && ctb_operator_entry(U, 3, 9, bt) == CTB_OK);
  EXPECT(a[0] == bt[0] && a[1] == bt[1]);
  EXPECT(ctb_operator_load("/nonexistent/T.bin", &U) == CTB_ERR_IO);
  ctb_operator_free(U);

  ctb_kernel_spec bad = {"sinc", NULL, NULL, NULL, 1.0, 0.0, 2, "auto"};
  ctb_operator* V = NULL;
  EXPECT(ctb_operator_discretize(r, &bad, &V) == CTB_ERR_CONFIG);

  free(ones);
  free(out);
  ctb_operator_free(T);
  ctb_region_free(r);
}

int main(int argc, char** argv) {
  test_errors();
  test_wavelets();
  test_operator(argc > 1 ? argv[1] : ".");
  if (failures) fprintf(stderr, "%d failed expectations\n", failures);
  else printf("all C API checks passed\n");
  return failures ? 1 : 0;
}
