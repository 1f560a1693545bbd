#ifndef MIXSTE_H
#define MIXSTE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Inference mode for [`mx_count_passes`].
typedef enum MxMode {
  MX_MODE_SEQ2SEQ = 0,
  MX_MODE_SEQ2FRAME = 1,
} MxMode;

// Status codes returned by every fallible function.
typedef enum MxStatus {
  MX_STATUS_OK = 0,
  MX_STATUS_NULL_POINTER = 1,
  MX_STATUS_INVALID_ARGUMENT = 2,
  MX_STATUS_SHAPE = 3,
  MX_STATUS_NUMERIC = 4,
  MX_STATUS_CONFIG = 5,
  MX_STATUS_PARSE = 6,
  MX_STATUS_SCHEMA = 7,
  MX_STATUS_IO = 8,
  MX_STATUS_PANIC = 9,
} MxStatus;

// Opaque model handle.
typedef struct MxModel MxModel;

// Architecture summary filled by [`mx_model_info`].
typedef struct MxModelInfo {
  size_t joints;
  size_t frames;
  size_t dim;
  size_t depth;
  size_t heads;
  size_t parameters;
} MxModelInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or null after a
// successful call. Valid until the next call on the same thread.
const char *mx_last_error(void);

// Loads a checkpoint written by the `mixste` tools (with its `.json`
// sidecar) into `*out`.
//
// # Safety
// `path` must be a valid NUL-terminated string and `out` a valid pointer.
enum MxStatus mx_model_load(const char *path, struct MxModel **out);

// Creates a freshly initialized model. Unset dropout and activation take
// their defaults.
//
// # Safety
// `out` must be a valid pointer.
enum MxStatus mx_model_new(size_t joints,
                           size_t frames,
                           size_t dim,
                           size_t depth,
                           size_t heads,
                           uint64_t seed,
                           struct MxModel **out);

// Releases a model. Null is ignored.
//
// # Safety
// `model` must come from this library and not be used afterwards.
void mx_model_free(struct MxModel *model);

// Writes the checkpoint and its `.json` sidecar.
//
// # Safety
// `model` must be a live handle and `path` a NUL-terminated string.
enum MxStatus mx_model_save(const struct MxModel *model, const char *path);

// # Safety
// `model` and `out` must be valid pointers.
enum MxStatus mx_model_info(const struct MxModel *model, struct MxModelInfo *out);

// Lifts `frames * joints` normalized 2D keypoints (row-major
// `[frames][joints][2]`) to root-relative 3D millimetres written to `out`
// (`[frames][joints][3]`, `out_len >= frames * joints * 3`). Sequences of
// any length are processed in consecutive windows of the model's frame
// count.
//
// # Safety
// `keypoints` must point to `frames * joints * 2` doubles and `out` to
// `out_len` writable doubles.
enum MxStatus mx_predict(const struct MxModel *model,
                         const double *keypoints,
                         size_t frames,
                         size_t joints,
                         double *out,
                         size_t out_len);

// Forward passes needed for `frames` frames with window `window`
// (seq2seq) or one pass per frame (seq2frame). Zero when `window` is 0.
size_t mx_count_passes(size_t frames, size_t window, enum MxMode mode);

// Ratio of seq2frame to seq2seq frame evaluations, exact and in the
// large-sequence limit.
//
// # Safety
// `exact` and `approx` must be valid pointers.
enum MxStatus mx_frame_evaluations_gap(size_t frames,
                                       size_t window,
                                       size_t padding,
                                       double *exact,
                                       double *approx);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MIXSTE_H */
