#ifndef FIRMCX_H
#define FIRMCX_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FirmcxStatus {
  FIRMCX_STATUS_OK = 0,
  // Bad input data or config; matches CLI exit code 1.
  FIRMCX_STATUS_VALIDATION = 1,
  // A numerical stage failed; matches CLI exit code 2.
  FIRMCX_STATUS_COMPUTE = 2,
  // Null pointer, non-UTF-8 string or out-of-range argument.
  FIRMCX_STATUS_INVALID_ARGUMENT = 3,
  // Unknown model id or term.
  FIRMCX_STATUS_NOT_FOUND = 4,
  // A Rust panic was caught at the boundary.
  FIRMCX_STATUS_PANIC = 5,
} FirmcxStatus;

typedef enum FirmcxStage {
  FIRMCX_STAGE_INGEST = 0,
  FIRMCX_STAGE_BLOCKS = 1,
  FIRMCX_STAGE_INDICATORS = 2,
  FIRMCX_STAGE_REGRESS = 3,
  FIRMCX_STAGE_FIGURES = 4,
} FirmcxStage;

// Parsed run configuration.
typedef struct FirmcxConfig FirmcxConfig;

// Outcome of a pipeline run.
typedef struct FirmcxRun FirmcxRun;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *firmcx_version(void);

// Message of the last failed call on this thread, or null. The pointer is
// valid until the next firmcx call on the same thread.
const char *firmcx_last_error(void);

// Loads a TOML run config. Relative paths resolve against the file's
// directory.
//
// # Safety
// `path` is a NUL-terminated string; `out` is a valid pointer.
enum FirmcxStatus firmcx_config_load(const char *path, struct FirmcxConfig **out);

// # Safety
// `config` is null or a handle from [`firmcx_config_load`], not yet freed.
void firmcx_config_free(struct FirmcxConfig *config);

// # Safety
// `config` is a live handle; `dir` is a NUL-terminated string.
enum FirmcxStatus firmcx_config_set_output_dir(struct FirmcxConfig *config, const char *dir);

// Overrides the block-detection seed.
//
// # Safety
// `config` is a live handle.
enum FirmcxStatus firmcx_config_set_seed(struct FirmcxConfig *config, uint64_t seed);

// Worker threads for the run; 0 restores the default pool.
//
// # Safety
// `config` is a live handle.
enum FirmcxStatus firmcx_config_set_threads(struct FirmcxConfig *config, size_t threads);

// Runs the pipeline through `stage` and writes its outputs.
//
// # Safety
// `config` is a live handle; `out` is a valid pointer.
enum FirmcxStatus firmcx_run(const struct FirmcxConfig *config,
                             enum FirmcxStage stage,
                             struct FirmcxRun **out);

// # Safety
// `run` is null or a handle from [`firmcx_run`], not yet freed.
void firmcx_run_free(struct FirmcxRun *run);

// Number of fitted models; 0 for a null handle.
//
// # Safety
// `run` is null or a live handle.
size_t firmcx_run_model_count(const struct FirmcxRun *run);

// Estimate, HC1 standard error and p-value of `term` in model `model_id`.
// Any of the out pointers may be null.
//
// # Safety
// `run` is a live handle; strings are NUL-terminated; non-null out
// pointers are writable.
enum FirmcxStatus firmcx_run_coefficient(const struct FirmcxRun *run,
                                         const char *model_id,
                                         const char *term,
                                         double *estimate,
                                         double *std_error,
                                         double *p_value);

// Observation count of model `model_id`.
//
// # Safety
// `run` is a live handle; `model_id` is NUL-terminated; `out` is writable.
enum FirmcxStatus firmcx_run_observations(const struct FirmcxRun *run,
                                          const char *model_id,
                                          size_t *out);

// Writes a synthetic dataset for `preset` ("small", "default", "paper")
// into `dir`, plus a `run.toml` that reads it.
//
// # Safety
// `preset` and `dir` are NUL-terminated strings.
enum FirmcxStatus firmcx_synth_write(const char *preset, uint64_t seed, const char *dir);

// RCA of a dense row-major `rows × cols` matrix into `out` (same shape).
// All-zero rows come back as zeros.
//
// # Safety
// `values` and `out` point to `rows * cols` doubles.
enum FirmcxStatus firmcx_rca_dense(const double *values, size_t rows, size_t cols, double *out);

// Sapling similarity from co-occurrence `co`, degrees `k_p`, `k_q` and row
// count `n`. `INVALID_ARGUMENT` where the similarity is undefined.
//
// # Safety
// `out` is writable.
enum FirmcxStatus firmcx_sapling(uint32_t co, uint32_t k_p, uint32_t k_q, uint32_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FIRMCX_H */
