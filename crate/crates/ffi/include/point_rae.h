#ifndef POINT_RAE_H
#define POINT_RAE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum PraeStatus {
  PRAE_STATUS_OK = 0,
  PRAE_STATUS_NULL_POINTER = 1,
  PRAE_STATUS_INVALID_ARGUMENT = 2,
  PRAE_STATUS_IO = 3,
  PRAE_STATUS_CHECKPOINT = 4,
  PRAE_STATUS_NUMERICS = 5,
  PRAE_STATUS_PANIC = 6,
} PraeStatus;

/**
 * Opaque handle to a loaded model.
 */
typedef struct PraeModel PraeModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *prae_version(void);

/**
 * Message of the last failed call on this thread, or NULL. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *prae_last_error_message(void);

/**
 * Loads a checkpoint file into a new handle stored in `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum PraeStatus prae_model_load(const char *path, struct PraeModel **out);

/**
 * Releases a handle; NULL is ignored.
 *
 * # Safety
 * `model` must come from [`prae_model_load`] and not be freed twice.
 */
void prae_model_free(struct PraeModel *model);

/**
 * Token width `d` of the model.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum PraeStatus prae_model_dim(const struct PraeModel *model, size_t *out);

/**
 * Feature width for a topology code (0 = a, 1 = b, 2 = c, 3 = d).
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum PraeStatus prae_model_feature_dim(const struct PraeModel *model,
                                       uint32_t topology_code,
                                       size_t *out);

/**
 * Pooled backbone feature of one cloud of `n_points` packed `x, y, z`
 * triples. `out_len` must equal the feature width of the topology.
 * `seed` fixes patch and query sampling.
 *
 * # Safety
 * `xyz` must hold `3 * n_points` doubles and `out` `out_len` doubles.
 */
enum PraeStatus prae_model_features(const struct PraeModel *model,
                                    const double *xyz,
                                    size_t n_points,
                                    uint32_t topology_code,
                                    uint64_t seed,
                                    double *out,
                                    size_t out_len);

/**
 * Symmetric l2 Chamfer distance between two packed point sets.
 *
 * # Safety
 * `a` and `b` must hold `3 * n_a` and `3 * n_b` doubles.
 */
enum PraeStatus prae_chamfer_l2(const double *a,
                                size_t n_a,
                                const double *b,
                                size_t n_b,
                                double *out);

/**
 * Farthest point sampling of `count` indices into `out_indices`.
 *
 * # Safety
 * `xyz` must hold `3 * n_points` doubles and `out_indices` `count` slots.
 */
enum PraeStatus prae_farthest_point_sample(const double *xyz,
                                           size_t n_points,
                                           size_t count,
                                           uint64_t seed,
                                           size_t *out_indices);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* POINT_RAE_H */
