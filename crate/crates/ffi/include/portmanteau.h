#ifndef PORTMANTEAU_H
#define PORTMANTEAU_H

#include <stddef.h>
#include <stdint.h>

// Attention layouts accepted by [`pm_closed_form_macs`].
#define PM_ATTENTION_VIT 0

#define PM_ATTENTION_AXIAL 1

#define PM_ATTENTION_DAVIT 2

typedef enum PmStatus {
  PM_STATUS_OK = 0,
  PM_STATUS_NULL_POINTER = 1,
  PM_STATUS_INVALID_ARGUMENT = 2,
  PM_STATUS_IO = 3,
  PM_STATUS_FORMAT = 4,
  PM_STATUS_SHAPE = 5,
  PM_STATUS_CONTRACT = 6,
  PM_STATUS_GEOMETRY = 7,
  PM_STATUS_CONFIG = 8,
  PM_STATUS_NON_FINITE = 9,
  PM_STATUS_BUFFER_TOO_SMALL = 10,
  PM_STATUS_PANIC = 11,
} PmStatus;

// A loaded recognizer.
typedef struct PmRecognizer PmRecognizer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer
// stays valid until the next call into this library on the same thread.
const char *pm_last_error(void);

// Library version as a static NUL-terminated string.
const char *pm_version(void);

// Frees a string returned by this library. Null is ignored.
//
// # Safety
// `s` must come from this library and not have been freed.
void pm_string_free(char *s);

// Loads a weights directory written by `train-toy`. `variant` may be null
// (use the recorded model) or one of `port`, `stn`, `plain`, `savit`.
//
// # Safety
// `dir` and a non-null `variant` must be NUL-terminated strings; `out`
// must be writable.
enum PmStatus pm_recognizer_load(const char *dir, const char *variant, struct PmRecognizer **out);

// Transcribes one image. `boxes_json` (nullable) holds character boxes in
// the JSON layout written by `gen-data`. On success `*out_text` receives a
// string to release with [`pm_string_free`].
//
// # Safety
// `rec` must be a live handle, `pixels` must hold `height * width` values,
// `out_text` must be writable.
enum PmStatus pm_recognizer_recognize(const struct PmRecognizer *rec,
                                      const float *pixels,
                                      size_t height,
                                      size_t width,
                                      const char *boxes_json,
                                      char **out_text);

// Variant name of a loaded recognizer as a static string, or null.
//
// # Safety
// `rec` must be a live handle or null.
const char *pm_recognizer_variant(const struct PmRecognizer *rec);

// # Safety
// `rec` must come from [`pm_recognizer_load`] and not have been freed.
void pm_recognizer_free(struct PmRecognizer *rec);

// Rectifies an image with ground-truth character boxes into
// `out_height × out_width` pixels written to `out` (capacity `out_len`).
//
// # Safety
// `pixels` must hold `height * width` values, `boxes_json` must be a
// NUL-terminated string and `out` must hold `out_len` values.
enum PmStatus pm_rectify_with_boxes(const float *pixels,
                                    size_t height,
                                    size_t width,
                                    const char *boxes_json,
                                    size_t out_height,
                                    size_t out_width,
                                    float *out,
                                    size_t out_len);

// Converts 5 monomial coefficients (constant first) to Legendre coefficients.
//
// # Safety
// `monomial` and `out` must each point to 5 values.
enum PmStatus pm_monomial_to_legendre(const double *monomial, double *out);

// Inverse of [`pm_monomial_to_legendre`].
//
// # Safety
// `legendre` and `out` must each point to 5 values.
enum PmStatus pm_legendre_to_monomial(const double *legendre, double *out);

// Closed-form per-product attention score MACs.
//
// # Safety
// `out` must be writable.
enum PmStatus pm_closed_form_macs(uint32_t mode,
                                  size_t n_x,
                                  size_t n_y,
                                  size_t d_x,
                                  size_t l_y,
                                  uint64_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PORTMANTEAU_H */
