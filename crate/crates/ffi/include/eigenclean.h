#ifndef EIGENCLEAN_H
#define EIGENCLEAN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum EcStatus {
  EC_STATUS_OK = 0,
  EC_STATUS_NULL_POINTER = 1,
  EC_STATUS_INVALID_ARGUMENT = 2,
  EC_STATUS_DIMENSION_MISMATCH = 3,
  EC_STATUS_NUMERICAL = 4,
  EC_STATUS_IO = 5,
  EC_STATUS_PARSE = 6,
  EC_STATUS_PANIC = 7,
} EcStatus;

/*
 Opaque handle to a trained model.
 */
typedef struct EcModel EcModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Library version as a static NUL-terminated string.
 */
const char *ec_version(void);

/*
 Message of the last failed call on this thread, or null. The pointer is
 valid until the next library call on the same thread.
 */
const char *ec_last_error_message(void);

/*
 Loads a model file. On success `*out` owns a handle to release with
 [`ec_model_free`].

 # Safety
 `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum EcStatus ec_model_load(const char *path, struct EcModel **out);

/*
 Releases a model handle. Null is ignored.

 # Safety
 `model` must come from [`ec_model_load`] and not be used afterwards.
 */
void ec_model_free(struct EcModel *model);

/*
 Input and output lengths of a model.

 # Safety
 All pointers must be valid.
 */
enum EcStatus ec_model_dims(const struct EcModel *model, size_t *input_dim, size_t *output_dim);

/*
 Cleans a sample spectrum of length `n` observed at noise ratio `q`,
 writing `n` ascending values to `out`.

 # Safety
 `spectrum` and `out` must each hold `n` doubles.
 */
enum EcStatus ec_model_clean(const struct EcModel *model,
                             const double *spectrum,
                             size_t n,
                             double q,
                             bool rescale,
                             double *out);

/*
 Rotational invariant estimate for a sample spectrum of length `n` at
 noise ratio `q`, written ascending to `out`.

 # Safety
 `spectrum` and `out` must each hold `n` doubles.
 */
enum EcStatus ec_rie_clean(const double *spectrum, size_t n, double q, bool rescale, double *out);

/*
 Random correlation matrix with the given spectrum (nonnegative, summing
 to `n`), written to `out_matrix`.

 # Safety
 `spectrum` must hold `n` doubles and `out_matrix` `n * n`.
 */
enum EcStatus ec_corr_with_spectrum(const double *spectrum,
                                    size_t n,
                                    uint64_t seed,
                                    double *out_matrix);

/*
 Random `n × n` correlation matrix from the generator mix. `mix_weights`
 holds four weights (spectrum sketch, unit sphere, constant blocks,
 Toeplitz blocks) or is null for the default mix. The generator used is
 written to `out_tag` (0–3, same order) when non-null.

 # Safety
 `mix_weights` must be null or hold 4 doubles; `out_matrix` must hold
 `n * n` doubles.
 */
enum EcStatus ec_random_corr(size_t n,
                             const double *mix_weights,
                             uint64_t seed,
                             double *out_matrix,
                             int32_t *out_tag);

/*
 Sample eigenvalues from `t` observations of a population with the given
 true spectrum, drawn without building the matrix; ascending in `out`.

 # Safety
 `spectrum` and `out` must each hold `n` doubles.
 */
enum EcStatus ec_sample_spectrum_direct(const double *spectrum,
                                        size_t n,
                                        size_t t,
                                        uint64_t seed,
                                        double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EIGENCLEAN_H */
