/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#ifndef LASTRANK_H
#define LASTRANK_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum LrStatus {
  LR_STATUS_OK = 0,
  LR_STATUS_NULL_POINTER = 1,
  LR_STATUS_INVALID_ARGUMENT = 2,
  LR_STATUS_IO = 3,
  LR_STATUS_PARSE = 4,
  LR_STATUS_SCHEMA_VERSION = 5,
  LR_STATUS_BUFFER_TOO_SMALL = 6,
  LR_STATUS_INTERNAL = 7,
} LrStatus;

/**
 * Serving policies, as accepted by [`lr_engine_serve`].
 */
typedef enum LrPolicy {
  LR_POLICY_GREEDY = 0,
  LR_POLICY_SAMPLING = 1,
  LR_POLICY_LAST = 2,
  LR_POLICY_CASCADE = 3,
} LrPolicy;

/**
 * Opaque serving engine.
 */
typedef struct LrEngine LrEngine;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *lr_version(void);

/**
 * Message for the most recent failure on this thread, or null if the last
 * call succeeded. Valid until the next library call on this thread.
 */
const char *lr_last_error_message(void);

/**
 * Loads an engine from an actor and an evaluator checkpoint. On success
 * `*out` owns the engine; release it with [`lr_engine_free`].
 *
 * # Safety
 * Paths must be NUL-terminated strings; `out` must be writable.
 */
enum LrStatus lr_engine_load(const char *actor_path,
                             const char *evaluator_path,
                             struct LrEngine **out);

/**
 * Releases an engine. Null is ignored.
 *
 * # Safety
 * `engine` must come from [`lr_engine_load`] and not be used afterwards.
 */
void lr_engine_free(struct LrEngine *engine);

/**
 * Feature sizes the engine expects.
 *
 * # Safety
 * `engine` must be live; the out pointers must be writable.
 */
enum LrStatus lr_engine_dims(const struct LrEngine *engine, size_t *user_dim, size_t *item_dim);

/**
 * Sets the normalization factor α (default 0.01).
 *
 * # Safety
 * `engine` must be live and not used concurrently.
 */
enum LrStatus lr_engine_set_alpha(struct LrEngine *engine, double alpha);

/**
 * Sets the step sizes tried by parallel LAST; they must include 0. The
 * sampling policy draws as many lists as there are step sizes.
 *
 * # Safety
 * `engine` must be live and not used concurrently; `steps` must hold
 * `len` values.
 */
enum LrStatus lr_engine_set_step_sizes(struct LrEngine *engine, const double *steps, size_t len);

/**
 * Sets the seed of the sampling-based policies.
 *
 * # Safety
 * `engine` must be live and not used concurrently.
 */
enum LrStatus lr_engine_set_seed(struct LrEngine *engine, uint64_t seed);

/**
 * Serves one request. `candidates` is row-major `num_candidates × item_dim`.
 * Writes `list_len` candidate indices to `order_out`, plus the chosen step
 * size and the evaluator score of the served list.
 *
 * # Safety
 * `engine` must be live; buffers must hold the stated lengths; out
 * pointers must be writable.
 */
enum LrStatus lr_engine_serve(const struct LrEngine *engine,
                              int32_t policy,
                              const double *user,
                              size_t user_len,
                              const double *candidates,
                              size_t num_candidates,
                              size_t item_dim,
                              size_t list_len,
                              size_t *order_out,
                              size_t order_cap,
                              double *eta_star_out,
                              double *score_out);

/**
 * Hash of the actor parameters; unchanged by any number of serve calls.
 *
 * # Safety
 * `engine` must be live; `out` must be writable.
 */
enum LrStatus lr_engine_fingerprint(const struct LrEngine *engine, uint64_t *out);

/**
 * NDCG@k of binary relevance labels in presented order.
 *
 * # Safety
 * `labels` must hold `len` bytes; `out` must be writable.
 */
enum LrStatus lr_ndcg_at_k(const uint8_t *labels, size_t len, size_t k, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LASTRANK_H */
