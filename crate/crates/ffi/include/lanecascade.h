#ifndef LANECASCADE_H
#define LANECASCADE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LcStatus {
  LC_STATUS_OK = 0,
  LC_STATUS_NULL_POINTER = 1,
  LC_STATUS_INVALID_ARGUMENT = 2,
  LC_STATUS_IO = 3,
  LC_STATUS_CHECKPOINT = 4,
  LC_STATUS_INCOMPATIBLE = 5,
  LC_STATUS_OUT_OF_RANGE = 6,
  LC_STATUS_INTERNAL = 7,
  LC_STATUS_PANIC = 8,
} LcStatus;

typedef enum LcScheme {
  LC_SCHEME_TWO_CLASS = 0,
  LC_SCHEME_THREE_CLASS = 1,
  LC_SCHEME_FULL = 2,
} LcScheme;

/**
 * A loaded segmentation + classification pair.
 */
typedef struct LcCascade LcCascade;

/**
 * Boundaries found in one image.
 */
typedef struct LcResult LcResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Version of the library as a static NUL-terminated string.
 */
const char *lc_version(void);

/**
 * Message of the last failure on this thread, or NULL. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *lc_last_error_message(void);

/**
 * Loads both checkpoints and checks that they belong together.
 *
 * # Safety
 * `seg_path` and `cls_path` must be NUL-terminated strings and `out` a
 * valid pointer.
 */
enum LcStatus lc_cascade_open(const char *seg_path, const char *cls_path, struct LcCascade **out);

/**
 * Releases a cascade. NULL is ignored.
 *
 * # Safety
 * `cascade` must come from [`lc_cascade_open`] and not be used afterwards.
 */
void lc_cascade_free(struct LcCascade *cascade);

/**
 * Classes the cascade's classifier predicts.
 *
 * # Safety
 * `cascade` and `out` must be valid pointers.
 */
enum LcStatus lc_cascade_num_classes(const struct LcCascade *cascade, size_t *out);

/**
 * Network forward passes made by this cascade so far.
 *
 * # Safety
 * `cascade` and `out` must be valid pointers.
 */
enum LcStatus lc_cascade_invocations(const struct LcCascade *cascade, size_t *out);

/**
 * Runs the cascade on an 8-bit RGB image with rows `stride` bytes apart.
 *
 * # Safety
 * `rgb` must point to `stride * height` readable bytes; `cascade` and `out`
 * must be valid pointers.
 */
enum LcStatus lc_cascade_infer(const struct LcCascade *cascade,
                               const uint8_t *rgb,
                               uint32_t width,
                               uint32_t height,
                               size_t stride,
                               struct LcResult **out);

/**
 * Releases a result. NULL is ignored.
 *
 * # Safety
 * `result` must come from [`lc_cascade_infer`] and not be used afterwards.
 */
void lc_result_free(struct LcResult *result);

/**
 * Number of boundaries; 0 for NULL.
 *
 * # Safety
 * `result` must be NULL or a valid result.
 */
size_t lc_result_count(const struct LcResult *result);

/**
 * Number of points of boundary `index`.
 *
 * # Safety
 * `result` and `out` must be valid pointers.
 */
enum LcStatus lc_result_point_count(const struct LcResult *result, size_t index, size_t *out);

/**
 * Copies the points of boundary `index` as parallel row and x arrays.
 * Fails with [`LcStatus::OutOfRange`] when `capacity` is too small.
 *
 * # Safety
 * `rows` and `xs` must each have room for `capacity` elements.
 */
enum LcStatus lc_result_points(const struct LcResult *result,
                               size_t index,
                               int32_t *rows,
                               double *xs,
                               size_t capacity);

/**
 * Predicted class index and its confidence for boundary `index`.
 *
 * # Safety
 * `class_index` and `confidence` must be valid pointers.
 */
enum LcStatus lc_result_class(const struct LcResult *result,
                              size_t index,
                              uint32_t *class_index,
                              float *confidence);

/**
 * Output index of the label with code `label` (0..7) under `scheme`, or -1
 * when the scheme ignores it.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum LcStatus lc_remap_class(uint8_t label, enum LcScheme scheme, int32_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LANECASCADE_H */
