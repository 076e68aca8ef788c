#ifndef RISKMETA_H
#define RISKMETA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every exported function.
 */
typedef enum RmStatus {
  RM_STATUS_OK = 0,
  RM_STATUS_NULL_POINTER = 1,
  RM_STATUS_INVALID_UTF8 = 2,
  RM_STATUS_INVALID_ARGUMENT = 3,
  /**
   * A risk functional spec or evaluation was rejected.
   */
  RM_STATUS_RISK = 4,
  /**
   * Loss vector length does not match the head's batch size.
   */
  RM_STATUS_LENGTH_MISMATCH = 5,
  RM_STATUS_IO = 6,
  RM_STATUS_IDX_BAD_MAGIC = 7,
  RM_STATUS_IDX_COUNT_MISMATCH = 8,
  RM_STATUS_IDX_TRUNCATED = 9,
  /**
   * Other dataset validation failures.
   */
  RM_STATUS_DATA = 10,
  /**
   * The experiment config failed to parse or validate.
   */
  RM_STATUS_CONFIG = 11,
  /**
   * The experiment ran but at least one seed failed.
   */
  RM_STATUS_SEEDS_FAILED = 12,
  /**
   * The output buffer is smaller than required.
   */
  RM_STATUS_BUFFER_TOO_SMALL = 13,
  /**
   * Training, evaluation or reporting failed outside a single seed.
   */
  RM_STATUS_RUN = 14,
  RM_STATUS_PANIC = 15,
} RmStatus;

/**
 * A labeled dataset loaded from an IDX pair.
 */
typedef struct RmDataset RmDataset;

/**
 * A learned risk head: softmax weights over descending-sorted batch losses.
 */
typedef struct RmHead RmHead;

/**
 * A parsed risk functional, e.g. `cvar:0.1`.
 */
typedef struct RmRisk RmRisk;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message, NUL-terminated and
 * truncated to fit, into `buf`. Returns the full message length in bytes
 * (excluding the terminator); pass a null `buf` to query it.
 *
 * # Safety
 * `buf` must be null or point to `cap` writable bytes.
 */
size_t rm_last_error(char *buf, size_t cap);

/**
 * Parses a risk functional spec such as `ev`, `cvar:0.1`, `icvar:0.1`,
 * `trimmed:0.1`, `meanvar:1.0` or `human:2.0`.
 *
 * # Safety
 * `spec` must be a NUL-terminated string; `out` must be writable.
 */
enum RmStatus rm_risk_new(const char *spec, struct RmRisk **out);

/**
 * Evaluates the functional on `n` losses.
 *
 * # Safety
 * `risk` must come from [`rm_risk_new`]; `losses` must hold `n` values.
 */
enum RmStatus rm_risk_evaluate(const struct RmRisk *risk,
                               const double *losses,
                               size_t n,
                               double *out);

/**
 * # Safety
 * `risk` must be null or come from [`rm_risk_new`], and not be used again.
 */
void rm_risk_free(struct RmRisk *risk);

/**
 * A head with uniform weights over `batch_size` sorted positions.
 *
 * # Safety
 * `out` must be writable.
 */
enum RmStatus rm_head_new(size_t batch_size, struct RmHead **out);

/**
 * A head from `n` pre-softmax logits; index 0 weighs the largest loss.
 *
 * # Safety
 * `logits` must hold `n` values; `out` must be writable.
 */
enum RmStatus rm_head_from_logits(const double *logits, size_t n, struct RmHead **out);

/**
 * Number of sorted positions the head weighs.
 *
 * # Safety
 * `head` must come from a head constructor; `out` must be writable.
 */
enum RmStatus rm_head_batch_size(const struct RmHead *head, size_t *out);

/**
 * Copies the softmax weights (largest-loss position first) into `buf`.
 *
 * # Safety
 * `buf` must point to `cap` writable values.
 */
enum RmStatus rm_head_weights(const struct RmHead *head, double *buf, size_t cap);

/**
 * Sorts `n` losses descending and returns their weighted sum.
 *
 * # Safety
 * `losses` must hold `n` values; `out` must be writable.
 */
enum RmStatus rm_head_apply(const struct RmHead *head, const double *losses, size_t n, double *out);

/**
 * # Safety
 * `head` must be null or come from a head constructor, and not be used again.
 */
void rm_head_free(struct RmHead *head);

/**
 * Loads an IDX image/label pair; pixels are scaled to `[0, 1]`.
 *
 * # Safety
 * Both paths must be NUL-terminated strings; `out` must be writable.
 */
enum RmStatus rm_dataset_load_idx(const char *images, const char *labels, struct RmDataset **out);

/**
 * Sample count, feature dimension and class count.
 *
 * # Safety
 * `ds` must come from [`rm_dataset_load_idx`]; each out-pointer may be null.
 */
enum RmStatus rm_dataset_shape(const struct RmDataset *ds,
                               size_t *len,
                               size_t *dim,
                               size_t *classes);

/**
 * Copies the row-major `len × dim` feature matrix into `buf`.
 *
 * # Safety
 * `buf` must point to `cap` writable values.
 */
enum RmStatus rm_dataset_features(const struct RmDataset *ds, double *buf, size_t cap);

/**
 * Copies the `len` labels into `buf`.
 *
 * # Safety
 * `buf` must point to `cap` writable values.
 */
enum RmStatus rm_dataset_labels(const struct RmDataset *ds, uint32_t *buf, size_t cap);

/**
 * # Safety
 * `ds` must be null or come from [`rm_dataset_load_idx`], and not be used again.
 */
void rm_dataset_free(struct RmDataset *ds);

/**
 * Runs every seed of an experiment config and writes its artifacts.
 *
 * `out_dir` may be null to use the config's `experiment.out`. When `grid` is
 * nonzero, comma-separated values expand into a run matrix. `failed`, if not
 * null, receives the number of failed seeds.
 *
 * # Safety
 * Strings must be NUL-terminated; `failed` must be null or writable.
 */
enum RmStatus rm_run_experiment(const char *config,
                                const char *out_dir,
                                int32_t grid,
                                size_t *failed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RISKMETA_H */
