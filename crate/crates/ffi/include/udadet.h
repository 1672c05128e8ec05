/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#ifndef UDADET_H
#define UDADET_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every exported function.
typedef enum UdadetStatus {
  UDADET_STATUS_OK = 0,
  UDADET_STATUS_NULL_POINTER = 1,
  UDADET_STATUS_INVALID_ARGUMENT = 2,
  UDADET_STATUS_IO = 3,
  UDADET_STATUS_FORMAT = 4,
  UDADET_STATUS_RUNTIME = 5,
  UDADET_STATUS_PANIC = 6,
} UdadetStatus;

// Opaque handle to a loaded detector.
typedef struct UdadetDetector UdadetDetector;

// One detection in input-pixel coordinates.
typedef struct UdadetDetection {
  float x1;
  float y1;
  float x2;
  float y2;
  uint32_t class_id;
  float score;
} UdadetDetection;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer stays
// valid until the next failing call on the same thread.
const char *udadet_last_error(void);

// Library version as a static NUL-terminated string.
const char *udadet_version(void);

// Loads a model or training checkpoint. Decoding settings come from the
// configuration stored in the checkpoint.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum UdadetStatus udadet_detector_load(const char *path, struct UdadetDetector **out);

// Releases a detector. Null is ignored.
//
// # Safety
// `detector` must come from [`udadet_detector_load`] and not be used afterwards.
void udadet_detector_free(struct UdadetDetector *detector);

// # Safety
// `detector` and `out` must be valid pointers.
enum UdadetStatus udadet_detector_num_classes(const struct UdadetDetector *detector, uint32_t *out);

// Input height and width must be multiples of this value.
//
// # Safety
// `detector` and `out` must be valid pointers.
enum UdadetStatus udadet_detector_output_stride(const struct UdadetDetector *detector,
                                                uint32_t *out);

// Overrides the number of peaks kept and the minimum score.
//
// # Safety
// `detector` must be a valid pointer.
enum UdadetStatus udadet_detector_set_decode(struct UdadetDetector *detector,
                                             uint32_t top_k,
                                             float score_threshold);

// Runs the detector on one interleaved RGB image (`height·width·3` bytes, row
// major). Detections are ordered by descending score.
//
// # Safety
// `pixels` must hold `width·height·3` bytes, `out` room for `capacity`
// detections, and `count` must be valid.
enum UdadetStatus udadet_detector_detect_rgb8(const struct UdadetDetector *detector,
                                              const uint8_t *pixels,
                                              uint32_t width,
                                              uint32_t height,
                                              struct UdadetDetection *out,
                                              size_t capacity,
                                              size_t *count);

// Decodes one image's head outputs: `heatmap` is `classes·h·w`, `offset` and
// `size` are `2·h·w`, all row major in grid units.
//
// # Safety
// Buffers must have the stated lengths; `out` must have room for `capacity`.
enum UdadetStatus udadet_decode(const float *heatmap,
                                const float *offset,
                                const float *size,
                                uint32_t classes,
                                uint32_t height,
                                uint32_t width,
                                uint32_t stride,
                                uint32_t top_k,
                                float score_threshold,
                                struct UdadetDetection *out,
                                size_t capacity,
                                size_t *count);

// Mean normalised entropy of an `n×c×h×w` heatmap after a softmax across the
// `c ≥ 2` class channels.
//
// # Safety
// `heatmap` must hold `n·c·h·w` values and `out` must be valid.
enum UdadetStatus udadet_entropy_loss(const double *heatmap,
                                      uint32_t n,
                                      uint32_t c,
                                      uint32_t h,
                                      uint32_t w,
                                      double *out);

// Maximum squares loss of an `n×c×h×w` heatmap after a softmax across the
// class channels, scaled by the output stride.
//
// # Safety
// `heatmap` must hold `n·c·h·w` values and `out` must be valid.
enum UdadetStatus udadet_max_squares_loss(const double *heatmap,
                                          uint32_t n,
                                          uint32_t c,
                                          uint32_t h,
                                          uint32_t w,
                                          uint32_t stride,
                                          double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* UDADET_H */
