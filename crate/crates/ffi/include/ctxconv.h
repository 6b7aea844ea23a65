/* C interface for the ctxconv digit classifier. */

#ifndef CTXCONV_H
#define CTXCONV_H

/* Generated by cbindgen from the ctxconv-ffi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Images are 28x28 grayscale, row-major, one f64 per pixel in [0,1].
 */
#define CTXC_IMAGE_PIXELS (28 * 28)

/**
 * Each class-score row has this many entries.
 */
#define CTXC_CLASSES 10

/**
 * Each generated filter bank flattens to this many f64 values.
 */
#define CTXC_FILTER_VALUES 360

/**
 * Result of every fallible API call.
 */
typedef enum CtxcStatus {
  /**
   * The call succeeded.
   */
  CTXC_OK = 0,
  /**
   * A required pointer argument was null.
   */
  CTXC_NULL_POINTER = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  CTXC_INVALID_STRING = 2,
  /**
   * The checkpoint could not be read; see `ctxc_last_error`.
   */
  CTXC_LOAD_FAILED = 3,
  /**
   * An input buffer had an invalid size or non-finite values.
   */
  CTXC_INVALID_INPUT = 4,
  /**
   * An unexpected internal failure; see `ctxc_last_error`.
   */
  CTXC_INTERNAL_ERROR = 5,
} CtxcStatus;

/**
 * Opaque model handle: trained parameters plus the transformation set
 * recorded in the checkpoint.
 */
typedef struct CtxcNet CtxcNet;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Returns the library version as a static NUL-terminated string.
 */
const char *ctxc_version(void);

/**
 * Returns the message for the most recent failure on this thread. The
 * pointer stays valid until the next failing call on the same thread.
 */
const char *ctxc_last_error(void);

/**
 * Loads a training checkpoint from `path` and stores a fresh handle in
 * `*out`. The handle must be released with `ctxc_net_free`.
 *
 * # Safety
 * `path` must point to a NUL-terminated string and `out` to writable
 * pointer storage.
 */
enum CtxcStatus ctxc_net_load(const char *path, struct CtxcNet **out);

/**
 * Releases a handle returned by `ctxc_net_load`. Null is a no-op.
 *
 * # Safety
 * `net` must be null or a pointer obtained from `ctxc_net_load` that
 * has not been freed yet.
 */
void ctxc_net_free(struct CtxcNet *net);

/**
 * Number of transformation branches the model votes over, or 0 if
 * `net` is null.
 *
 * # Safety
 * `net` must be null or a live handle.
 */
size_t ctxc_net_branches(const struct CtxcNet *net);

/**
 * Classifies `count / 784` images. `pixels` holds the images back to
 * back; `out_labels` receives one class index per image.
 *
 * # Safety
 * `net` must be a live handle, `pixels` must hold `count` f64 values,
 * and `out_labels` must have room for `count / 784` entries.
 */
enum CtxcStatus ctxc_net_predict(const struct CtxcNet *net,
                                 const double *pixels,
                                 size_t count,
                                 uint32_t *out_labels);

/**
 * Computes the 10 class scores per image (higher is more likely).
 * `out_logits` receives `count / 784` rows of 10 values.
 *
 * # Safety
 * As for `ctxc_net_predict`, with `out_logits` sized accordingly.
 */
enum CtxcStatus ctxc_net_logits(const struct CtxcNet *net,
                                const double *pixels,
                                size_t count,
                                double *out_logits);

/**
 * Runs only the filter generator: each image yields its own bank of
 * 40 3x3 kernels, flattened to 360 values. `out_filters` receives
 * `count / 784` rows of 360 values.
 *
 * # Safety
 * As for `ctxc_net_predict`, with `out_filters` sized accordingly.
 */
enum CtxcStatus ctxc_net_filters(const struct CtxcNet *net,
                                 const double *pixels,
                                 size_t count,
                                 double *out_filters);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* CTXCONV_H */
