#ifndef MIME_H
#define MIME_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum MimeStatus {
  MIME_STATUS_OK = 0,
  /**
   * A required pointer argument was NULL.
   */
  MIME_STATUS_NULL_POINTER = 1,
  MIME_STATUS_IO = 2,
  MIME_STATUS_PARSE = 3,
  /**
   * Configuration or record rejected.
   */
  MIME_STATUS_INVALID = 4,
  /**
   * Dimensions of a model and a cohort disagree.
   */
  MIME_STATUS_SHAPE = 5,
  /**
   * The library panicked; the handle arguments should not be reused.
   */
  MIME_STATUS_PANIC = 6,
  /**
   * Output buffer too short; the required length was written.
   */
  MIME_STATUS_BUFFER_TOO_SMALL = 7,
} MimeStatus;

/**
 * A loaded or generated cohort.
 */
typedef struct MimeCohort MimeCohort;

/**
 * A model restored from a checkpoint.
 */
typedef struct MimeModel MimeModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer
 * stays valid until the next call into the library on the same thread.
 */
const char *mime_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *mime_version(void);

/**
 * Reads a cohort file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum MimeStatus mime_cohort_load(const char *path, struct MimeCohort **out);

/**
 * Generates a synthetic cohort from a generator configuration in JSON.
 * NULL or an empty string selects the defaults.
 *
 * # Safety
 * `config_json` must be NULL or NUL-terminated and `out` a valid pointer.
 */
enum MimeStatus mime_cohort_generate(const char *config_json, struct MimeCohort **out);

/**
 * Releases a cohort; NULL is ignored.
 *
 * # Safety
 * `cohort` must be NULL or a handle not yet freed.
 */
void mime_cohort_free(struct MimeCohort *cohort);

/**
 * # Safety
 * `cohort` must be a live handle and `out` a valid pointer.
 */
enum MimeStatus mime_cohort_num_patients(const struct MimeCohort *cohort, size_t *out);

/**
 * Visit complexity of every patient, in file order.
 *
 * # Safety
 * `cohort` must be a live handle, `buf` valid for `len` writes and
 * `written` a valid pointer.
 */
enum MimeStatus mime_cohort_visit_complexity(const struct MimeCohort *cohort,
                                             double *buf,
                                             size_t len,
                                             size_t *written);

/**
 * Restores a model from a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum MimeStatus mime_model_load(const char *path, struct MimeModel **out);

/**
 * Releases a model; NULL is ignored.
 *
 * # Safety
 * `model` must be NULL or a handle not yet freed.
 */
void mime_model_free(struct MimeModel *model);

/**
 * Heart-failure probability for every patient of `cohort`.
 *
 * # Safety
 * Handles must be live, `buf` valid for `len` writes and `written` a valid
 * pointer.
 */
enum MimeStatus mime_model_predict_hf(const struct MimeModel *model,
                                      const struct MimeCohort *cohort,
                                      double *buf,
                                      size_t len,
                                      size_t *written);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MIME_H */
