#ifndef DGGXNET_H
#define DGGXNET_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DggxBranch {
  DGGX_BRANCH_A = 0,
  DGGX_BRANCH_B = 1,
} DggxBranch;

// Result codes shared by every exported function.
typedef enum DggxStatus {
  DGGX_STATUS_OK = 0,
  DGGX_STATUS_NULL_POINTER = 1,
  DGGX_STATUS_INVALID_ARGUMENT = 2,
  DGGX_STATUS_SHAPE = 3,
  DGGX_STATUS_PARAMETER = 4,
  DGGX_STATUS_VALIDATION = 5,
  DGGX_STATUS_STATE = 6,
  DGGX_STATUS_CONFIG = 7,
  DGGX_STATUS_FORMAT = 8,
  DGGX_STATUS_PATH = 9,
  DGGX_STATUS_IO = 10,
  DGGX_STATUS_BUFFER_TOO_SMALL = 11,
  DGGX_STATUS_PANIC = 12,
} DggxStatus;

// Opaque model handle.
typedef struct DggxModel DggxModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or null. The pointer
// stays valid until the next failing call on the same thread.
const char *dggx_last_error_message(void);

// Library version as a static nul-terminated string.
const char *dggx_version(void);

// Loads a checkpoint written by `dggxnet train`.
//
// # Safety
// `path` must be a nul-terminated string; `out` must be writable.
enum DggxStatus dggx_model_load(const char *path, struct DggxModel **out);

// Releases a handle from [`dggx_model_load`]. Null is ignored.
//
// # Safety
// `model` must come from [`dggx_model_load`] and not be used afterwards.
void dggx_model_free(struct DggxModel *model);

// Number of classes, input channels and input side length.
//
// # Safety
// `model` must be a live handle; outputs may be null to skip them.
enum DggxStatus dggx_model_info(const struct DggxModel *model,
                                uintptr_t *num_classes,
                                uintptr_t *channels,
                                uintptr_t *size);

// Name of class `index` as a newly allocated string; free it with
// [`dggx_string_free`].
//
// # Safety
// `model` must be a live handle and `out` writable.
enum DggxStatus dggx_model_class_name(const struct DggxModel *model, uintptr_t index, char **out);

// Frees a string returned by this library. Null is ignored.
//
// # Safety
// `s` must come from this library and not be used afterwards.
void dggx_string_free(char *s);

// Class probabilities for one image. `probs` must hold `num_classes`
// values; `predicted` (optional) receives the arg-max class.
//
// # Safety
// Buffers must be valid for the stated lengths.
enum DggxStatus dggx_model_predict(const struct DggxModel *model,
                                   const double *pixels,
                                   uintptr_t pixels_len,
                                   double *probs,
                                   uintptr_t probs_len,
                                   uintptr_t *predicted);

// Side lengths of the Grad-CAM map for `branch`.
//
// # Safety
// `model` must be a live handle; `height` and `width` writable.
enum DggxStatus dggx_grad_cam_shape(const struct DggxModel *model,
                                    enum DggxBranch branch,
                                    uintptr_t *height,
                                    uintptr_t *width);

// Grad-CAM heatmap (non-negative, feature-map resolution, row-major) for
// `class` on the final maps of `branch`.
//
// # Safety
// Buffers must be valid for the stated lengths.
enum DggxStatus dggx_grad_cam(const struct DggxModel *model,
                              const double *pixels,
                              uintptr_t pixels_len,
                              uintptr_t class_,
                              enum DggxBranch branch,
                              double *out,
                              uintptr_t out_len);

// Integrated Gradients with an all-zero baseline, per input element
// (`channels × size × size`). `steps = 0` uses the checkpoint's setting.
//
// # Safety
// Buffers must be valid for the stated lengths.
enum DggxStatus dggx_integrated_gradients(const struct DggxModel *model,
                                          const double *pixels,
                                          uintptr_t pixels_len,
                                          uintptr_t class_,
                                          uintptr_t steps,
                                          double *out,
                                          uintptr_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DGGXNET_H */
