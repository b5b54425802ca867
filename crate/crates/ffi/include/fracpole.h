#ifndef FRACPOLE_H
#define FRACPOLE_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum fp_status {
  FP_STATUS_OK = 0,
  FP_STATUS_NULL_POINTER = 1,
  FP_STATUS_INVALID_ARGUMENT = 2,
  FP_STATUS_CONFIG = 3,
  FP_STATUS_NUMERICAL = 4,
  FP_STATUS_BUFFER_TOO_SMALL = 5,
  FP_STATUS_PANIC = 6,
} fp_status;

// A validated experiment config with its resolved per-mode data.
typedef struct FpExperiment FpExperiment;

// Recovered parameters, scored against the experiment's true values.
typedef struct FpModel FpModel;

// Samples h(iΔt), i = 0..len.
typedef struct FpTrace FpTrace;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the last error message of this thread into `buf` (NUL-terminated,
// truncated to `len` bytes) and returns its full length without the NUL.
// Pass a null `buf` to query the length.
//
// # Safety
// `buf` must be null or valid for `len` bytes.
size_t fp_last_error(char *buf, size_t len);

// E_{α,β}(z) for α ∈ (0, 2], β real.
//
// # Safety
// `out_re` and `out_im` must be valid for writes.
enum fp_status fp_mittag_leffler(double alpha,
                                 double beta,
                                 double z_re,
                                 double z_im,
                                 double *out_re,
                                 double *out_im);

// The constant C₀ of the data-dominance inequalities for the given bounds
// on b₁, a, α and β_m, smoothness order n, source length T and λ₁.
//
// # Safety
// `out` must be valid for writes.
enum fp_status fp_c0(double b_low,
                     double a_high,
                     double alpha_low,
                     double alpha_high,
                     double beta_low,
                     uint32_t n,
                     double t_src,
                     double lambda1,
                     double *out);

// Builds an experiment from a JSON config; relative file references are
// resolved against the working directory.
//
// # Safety
// `json` must be a NUL-terminated string; `out` must be valid for writes.
enum fp_status fp_experiment_from_json(const char *json, struct FpExperiment **out);

// Builds one of the built-in experiments (`two-term`, `zero-source`).
//
// # Safety
// `name` must be a NUL-terminated string; `out` must be valid for writes.
enum fp_status fp_experiment_builtin(const char *name, struct FpExperiment **out);

// # Safety
// `exp` must be null or a handle from `fp_experiment_*` not yet freed.
void fp_experiment_free(struct FpExperiment *exp);

// Solves the forward problem, adding the configured noise.
//
// # Safety
// `exp` must be a live handle; `out` must be valid for writes.
enum fp_status fp_experiment_forward(const struct FpExperiment *exp, struct FpTrace **out);

// Recovers α, the operator terms, a and g from a trace, using only the
// geometry, weights, initial data and known source parts of `exp`.
//
// # Safety
// `exp` and `trace` must be live handles; `out` must be valid for writes.
enum fp_status fp_experiment_invert(const struct FpExperiment *exp,
                                    const struct FpTrace *trace,
                                    struct FpModel **out);

// Wraps caller-owned samples taken at spacing `dt` from t = 0.
//
// # Safety
// `values` must be valid for `len` reads; `out` must be valid for writes.
enum fp_status fp_trace_from_samples(double dt,
                                     const double *values,
                                     size_t len,
                                     struct FpTrace **out);

// # Safety
// `trace` must be a live handle; `len` and `dt` must be valid for writes.
enum fp_status fp_trace_shape(const struct FpTrace *trace, size_t *len, double *dt);

// Copies the samples into `buf`, which must hold at least the trace length.
//
// # Safety
// `trace` must be a live handle; `buf` must be valid for `capacity` writes.
enum fp_status fp_trace_copy(const struct FpTrace *trace, double *buf, size_t capacity);

// # Safety
// `trace` must be null or a live handle.
void fp_trace_free(struct FpTrace *trace);

// Recovered α and a.
//
// # Safety
// `model` must be a live handle; the outputs must be valid for writes.
enum fp_status fp_model_scalars(const struct FpModel *model, double *alpha, double *a);

// Writes the term count to `count`, then the weights and exponents if
// `capacity` suffices (`FP_STATUS_BUFFER_TOO_SMALL` otherwise). Exponents
// are in decreasing order.
//
// # Safety
// `model` must be a live handle; `b` and `beta` must be valid for
// `capacity` writes; `count` must be valid for writes.
enum fp_status fp_model_terms(const struct FpModel *model,
                              double *b,
                              double *beta,
                              size_t capacity,
                              size_t *count);

// Whether every recovered quantity is within the experiment's tolerances.
//
// # Safety
// `model` must be a live handle; `pass` must be valid for writes.
enum fp_status fp_model_passed(const struct FpModel *model, bool *pass);

// The full report (parameters, ĝ, diagnostics, checks) as JSON. Release
// the string with `fp_string_free`.
//
// # Safety
// `model` must be a live handle; `out` must be valid for writes.
enum fp_status fp_model_json(const struct FpModel *model, char **out);

// # Safety
// `model` must be null or a live handle.
void fp_model_free(struct FpModel *model);

// # Safety
// `s` must be null or a string returned by this library, not yet freed.
void fp_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FRACPOLE_H */
