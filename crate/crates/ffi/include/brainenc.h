#ifndef BRAINENC_H
#define BRAINENC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum BrainencStatus {
  BRAINENC_STATUS_OK = 0,
  // Null pointer, bad UTF-8 or an out-of-range argument.
  BRAINENC_STATUS_INVALID_ARGUMENT = 1,
  BRAINENC_STATUS_CONFIG = 2,
  BRAINENC_STATUS_DATA = 3,
  BRAINENC_STATUS_NUMERICAL = 4,
  BRAINENC_STATUS_IO = 5,
  BRAINENC_STATUS_BUFFER_TOO_SMALL = 6,
  // A Rust panic was caught at the boundary.
  BRAINENC_STATUS_PANIC = 7,
} BrainencStatus;

typedef struct BrainencBold BrainencBold;

typedef struct BrainencFeatures BrainencFeatures;

typedef struct BrainencModel BrainencModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or an empty string.
// The pointer stays valid until the next call into this library.
const char *brainenc_last_error(void);

// Static, NUL-terminated crate version.
const char *brainenc_version(void);

// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum BrainencStatus brainenc_features_read(const char *path, struct BrainencFeatures **out);

// Builds a feature series from a `t_samples x dim` row-major buffer.
// `modality` is 0 visual, 1 audio, 2 text.
//
// # Safety
// `values` must hold `t_samples * dim` doubles; `source_id` is NUL-terminated.
enum BrainencStatus brainenc_features_new(uint8_t modality,
                                          double tr_seconds,
                                          const char *source_id,
                                          const double *values,
                                          size_t t_samples,
                                          size_t dim,
                                          struct BrainencFeatures **out);

// # Safety
// `h` must be a live handle; `t_samples` and `dim` writable.
enum BrainencStatus brainenc_features_shape(const struct BrainencFeatures *h,
                                            size_t *t_samples,
                                            size_t *dim);

// # Safety
// `h` must be a live handle and `out` must hold `len` doubles.
enum BrainencStatus brainenc_features_values(const struct BrainencFeatures *h,
                                             double *out,
                                             size_t len);

// # Safety
// `h` must be a live handle; `path` NUL-terminated.
enum BrainencStatus brainenc_features_write(const struct BrainencFeatures *h, const char *path);

// # Safety
// `h` must be null or a handle not yet freed.
void brainenc_features_free(struct BrainencFeatures *h);

// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum BrainencStatus brainenc_bold_read(const char *path, struct BrainencBold **out);

// Builds a BOLD series from a `t_samples x n_parcels` row-major buffer.
// `subject_id` may be null for no subject.
//
// # Safety
// `values` must hold `t_samples * n_parcels` doubles; strings NUL-terminated.
enum BrainencStatus brainenc_bold_new(double tr_seconds,
                                      const char *source_id,
                                      const char *subject_id,
                                      const double *values,
                                      size_t t_samples,
                                      size_t n_parcels,
                                      struct BrainencBold **out);

// # Safety
// `h` must be a live handle; `t_samples` and `n_parcels` writable.
enum BrainencStatus brainenc_bold_shape(const struct BrainencBold *h,
                                        size_t *t_samples,
                                        size_t *n_parcels);

// # Safety
// `h` must be a live handle and `out` must hold `len` doubles.
enum BrainencStatus brainenc_bold_values(const struct BrainencBold *h, double *out, size_t len);

// # Safety
// `h` must be a live handle; `path` NUL-terminated.
enum BrainencStatus brainenc_bold_write(const struct BrainencBold *h, const char *path);

// # Safety
// `h` must be null or a handle not yet freed.
void brainenc_bold_free(struct BrainencBold *h);

// Loads a linear or attention bundle.
//
// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum BrainencStatus brainenc_model_load(const char *path, struct BrainencModel **out);

// `"linear"` or `"attention"`, static; null if `h` is null.
//
// # Safety
// `h` must be null or a live handle.
const char *brainenc_model_family(const struct BrainencModel *h);

// # Safety
// `h` must be a live handle and `out` writable.
enum BrainencStatus brainenc_model_n_parcels(const struct BrainencModel *h, size_t *out);

// # Safety
// `h` must be null or a handle not yet freed.
void brainenc_model_free(struct BrainencModel *h);

// Predicts BOLD for one source from its feature series, one per modality
// the model was fit on. The result has no subject and carries the source
// id and TR of the first series.
//
// # Safety
// `features` must point to `n_features` live handles; `out` writable.
enum BrainencStatus brainenc_model_predict(const struct BrainencModel *h,
                                           const struct BrainencFeatures *const *features,
                                           size_t n_features,
                                           struct BrainencBold **out);

// Pearson correlation of two length-`n` vectors.
//
// # Safety
// `pred` and `actual` must hold `n` doubles; `out` writable.
enum BrainencStatus brainenc_pearson(const double *pred,
                                     const double *actual,
                                     size_t n,
                                     double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BRAINENC_H */
