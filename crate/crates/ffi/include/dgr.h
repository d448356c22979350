#ifndef DGR_H
#define DGR_H

#pragma once

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DgrStatus {
  DGR_STATUS_OK = 0,
  DGR_STATUS_NULL_ARGUMENT = 1,
  DGR_STATUS_INVALID_UTF8 = 2,
  DGR_STATUS_CONFIG = 3,
  DGR_STATUS_IO = 4,
  DGR_STATUS_CONTRACT = 5,
  DGR_STATUS_NUMERICAL = 6,
  DGR_STATUS_PANIC = 7,
} DgrStatus;

/**
 * Opaque handle to a loaded model.
 */
typedef struct DgrModel DgrModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. The pointer is
 * valid until the next library call on the same thread.
 */
const char *dgr_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *dgr_version(void);

/**
 * Loads a checkpoint directory written by `dgr train`.
 *
 * # Safety
 * `dir` must be a NUL-terminated string and `out` a writable pointer.
 */
enum DgrStatus dgr_model_load(const char *dir, struct DgrModel **out);

/**
 * # Safety
 * `model` must come from [`dgr_model_load`] and not be freed twice.
 */
void dgr_model_free(struct DgrModel *model);

/**
 * Scores one JSON record and writes a prediction record as JSON to `out`.
 *
 * # Safety
 * `model` must be a live handle, `record` a NUL-terminated string and `out`
 * a writable pointer. Free the result with [`dgr_string_free`].
 */
enum DgrStatus dgr_model_predict_json(const struct DgrModel *model, const char *record, char **out);

/**
 * Accuracy of `model` on a JSON-lines or CBT file.
 *
 * # Safety
 * `model` must be a live handle, `path` a NUL-terminated string and
 * `accuracy` a writable pointer.
 */
enum DgrStatus dgr_model_evaluate_jsonl(const struct DgrModel *model,
                                        const char *path,
                                        double *accuracy);

/**
 * One-sided exact McNemar p-value for `b` wins of A against `c` wins of B.
 *
 * # Safety
 * `p_value` must be a writable pointer.
 */
enum DgrStatus dgr_mcnemar_one_sided(uint64_t b, uint64_t c, double *p_value);

/**
 * Applies the capitalised-neighbour rule to one JSON record, keeping case,
 * and writes the decision as JSON to `out`.
 *
 * # Safety
 * `record` must be a NUL-terminated string and `out` a writable pointer.
 * Free the result with [`dgr_string_free`].
 */
enum DgrStatus dgr_disambiguate_json(const char *record, char **out);

/**
 * # Safety
 * `s` must come from this library and not be freed twice.
 */
void dgr_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DGR_H */
