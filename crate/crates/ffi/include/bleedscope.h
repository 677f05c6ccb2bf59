#ifndef BLEEDSCOPE_H
#define BLEEDSCOPE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Frame label: 1 for bleeding, 0 for non-bleeding.
#define BS_FRAME_BLEEDING 1

#define BS_FRAME_NON_BLEEDING 0

// Region categories.
#define BS_CATEGORY_BLEED 0

#define BS_CATEGORY_NON_BLEED 1

typedef enum BsStatus {
  BS_STATUS_OK = 0,
  BS_STATUS_NULL_POINTER = 1,
  BS_STATUS_INVALID_ARGUMENT = 2,
  BS_STATUS_IO = 3,
  BS_STATUS_DATA = 4,
  BS_STATUS_CHECKPOINT = 5,
  BS_STATUS_CONFIG = 6,
  BS_STATUS_RUNTIME = 7,
  BS_STATUS_BUFFER_TOO_SMALL = 8,
  BS_STATUS_PANIC = 9,
} BsStatus;

// Opaque detector handle.
typedef struct BsDetector BsDetector;

// A detected region in pixel coordinates of the input image.
typedef struct BsRegion {
  int32_t category;
  double probability;
  double x_min;
  double y_min;
  double x_max;
  double y_max;
} BsRegion;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread; empty after a success.
// The pointer stays valid until the next call into this library on the same thread.
const char *bs_last_error(void);

// Library version as a static NUL-terminated string.
const char *bs_version(void);

// Creates a randomly initialized detector with the default configuration.
//
// # Safety
// `out` must be a valid pointer to writable storage for a handle.
enum BsStatus bs_detector_new(uint64_t seed, struct BsDetector **out);

// Loads a checkpoint. `config_path` may be null; otherwise it names a
// training config whose preprocessing and threshold are used.
//
// # Safety
// `path` (and `config_path` if non-null) must be NUL-terminated strings;
// `out` must be valid for writes.
enum BsStatus bs_detector_load(const char *path, const char *config_path, struct BsDetector **out);

// Writes the detector (weights and optimizer state) to `path`.
//
// # Safety
// `det` must be a live handle and `path` a NUL-terminated string.
enum BsStatus bs_detector_save(const struct BsDetector *det, const char *path);

// Releases a handle; null is ignored.
//
// # Safety
// `det` must be null or a handle not yet freed.
void bs_detector_free(struct BsDetector *det);

// Side length of the square model input; 0 for a null handle.
//
// # Safety
// `det` must be null or a live handle.
size_t bs_detector_input_size(const struct BsDetector *det);

// Sets the frame decision threshold (strictly between 0 and 1).
//
// # Safety
// `det` must be a live handle.
enum BsStatus bs_detector_set_threshold(struct BsDetector *det, double threshold);

// Classifies one frame. Writes the frame label to `label_out` and up to
// `capacity` regions (bleed and non-bleed, in query order) to `regions`;
// `count_out` receives the total number of regions. If that exceeds
// `capacity` the call returns `BS_STATUS_BUFFER_TOO_SMALL` after filling the
// buffer, so callers can retry with a larger one. `regions` may be null when
// `capacity` is 0.
//
// # Safety
// `pixels` must point to `3 * width * height` doubles; `regions` to
// `capacity` writable entries; `label_out` and `count_out` must be writable.
enum BsStatus bs_detector_detect(const struct BsDetector *det,
                                 const double *pixels,
                                 size_t width,
                                 size_t height,
                                 struct BsRegion *regions,
                                 size_t capacity,
                                 size_t *count_out,
                                 int32_t *label_out);

// IoU of two `(x_min, y_min, x_max, y_max)` boxes.
//
// # Safety
// `a` and `b` must point to 4 doubles; `out` must be writable.
enum BsStatus bs_box_iou(const double *a, const double *b, double *out);

// Generalized IoU of two `(x_min, y_min, x_max, y_max)` boxes.
//
// # Safety
// `a` and `b` must point to 4 doubles; `out` must be writable.
enum BsStatus bs_box_giou(const double *a, const double *b, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BLEEDSCOPE_H */
