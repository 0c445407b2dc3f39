#ifndef SANDFORMER_H
#define SANDFORMER_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Sand severity preset.
typedef enum SfSeverity {
  SF_DUST = 0,
  SF_SAND = 1,
  SF_SANDSTORM = 2,
} SfSeverity;

// Result of every call.
typedef enum SfStatus {
  SF_OK = 0,
  // A required pointer was null.
  SF_ERR_NULL = 1,
  // Bad size, parameter or enum value.
  SF_ERR_INVALID = 2,
  // File could not be read or written.
  SF_ERR_IO = 3,
  // Malformed or mismatched checkpoint.
  SF_ERR_FORMAT = 4,
  // Non-finite values or a failed numeric check.
  SF_ERR_NUMERIC = 5,
  // Internal panic; the library state is still usable.
  SF_ERR_PANIC = 6,
} SfStatus;

// Opaque model handle. Create with `sf_model_load` or `sf_model_new`,
// release with `sf_model_free`.
typedef struct SfModel SfModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the most recent failed call on this thread, or `""`.
// The pointer stays valid until the next call on the same thread.
const char *sf_last_error(void);

// Library version as a static NUL-terminated string.
const char *sf_version(void);

// Synthesizes a sand-degraded image from `clean` with the default ranges of
// `severity` (an `SfSeverity` value) and the default depth ramp. `out_transmission` may be null;
// otherwise it receives `height * width` values.
//
// # Safety
// `clean` and `out_degraded` must each hold `height * width * 3` floats.
enum SfStatus sf_degrade(const float *clean,
                         uintptr_t height,
                         uintptr_t width,
                         int32_t severity,
                         uint64_t seed,
                         float *out_degraded,
                         float *out_transmission);

// PSNR in dB with peak 1; infinite for identical images.
//
// # Safety
// `a` and `b` must each hold `height * width * 3` floats.
enum SfStatus sf_psnr(const float *a,
                      const float *b,
                      uintptr_t height,
                      uintptr_t width,
                      double *out_db);

// Luminance SSIM (11x11 Gaussian window, sigma 1.5). Both sides must be at least 11.
//
// # Safety
// `a` and `b` must each hold `height * width * 3` floats.
enum SfStatus sf_ssim(const float *a,
                      const float *b,
                      uintptr_t height,
                      uintptr_t width,
                      double *out);

// Dark-channel-prior dehazing.
//
// # Safety
// `image` and `out` must each hold `height * width * 3` floats.
enum SfStatus sf_dehaze_dcp(const float *image,
                            uintptr_t height,
                            uintptr_t width,
                            uintptr_t patch,
                            float omega,
                            float t0,
                            float airlight_percent,
                            float *out);

// Builds a fresh toy-scale model. At initialization it is the identity map.
//
// # Safety
// `out_model` must be a valid pointer to write the handle into.
enum SfStatus sf_model_new(uint64_t seed, struct SfModel **out_model);

// Loads the model stored in a checkpoint file.
//
// # Safety
// `path` must be a NUL-terminated string and `out_model` a valid pointer.
enum SfStatus sf_model_load(const char *path, struct SfModel **out_model);

// Number of scalar parameters in the model.
//
// # Safety
// `model` must be a live handle and `out` a valid pointer.
enum SfStatus sf_model_num_parameters(const struct SfModel *model, uintptr_t *out);

// Restores an image of any size with the model.
//
// # Safety
// `model` must be a live handle; `image` and `out` must each hold
// `height * width * 3` floats.
enum SfStatus sf_model_restore(const struct SfModel *model,
                               const float *image,
                               uintptr_t height,
                               uintptr_t width,
                               float *out);

// Releases a model handle. Null is ignored.
//
// # Safety
// `model` must come from this library and not be used afterwards.
void sf_model_free(struct SfModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SANDFORMER_H */
