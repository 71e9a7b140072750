#ifndef DECOY_H
#define DECOY_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum DecoyStatus {
  DECOY_STATUS_OK = 0,
  DECOY_STATUS_NULL_ARGUMENT = 1,
  // Bad JSON, unknown keys, invalid values or an untokenizable prompt.
  DECOY_STATUS_CONFIG = 2,
  // Wrong tensor shape or out-of-range pixel values.
  DECOY_STATUS_SHAPE = 3,
  // Missing, corrupt or untrained checkpoint.
  DECOY_STATUS_CHECKPOINT = 4,
  DECOY_STATUS_IO = 5,
  // Non-finite loss or divergence.
  DECOY_STATUS_NUMERIC = 6,
  // Malformed file contents.
  DECOY_STATUS_FORMAT = 7,
  DECOY_STATUS_BUFFER_TOO_SMALL = 8,
  // A Rust panic was caught at the boundary.
  DECOY_STATUS_PANIC = 9,
} DecoyStatus;

// Opaque model handle.
typedef struct DecoyModel DecoyModel;

// Opaque handle to a computed protective perturbation.
typedef struct DecoyNoise DecoyNoise;

// Class masses of the cross-attention in the inpaint region.
typedef struct DecoyMasses {
  float content;
  float bos;
  float eos;
} DecoyMasses;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *decoy_version(void);

// Message of the last failed call on this thread, or null. The pointer is
// valid until the next call into this library on the same thread.
const char *decoy_last_error(void);

// Number of floats in an image buffer.
size_t decoy_image_len(void);

// Number of floats in a mask buffer.
size_t decoy_mask_len(void);

// Fresh, untrained model. `model_json` may be null for the default
// architecture, or a JSON object overriding model config keys.
//
// # Safety
// `model_json` must be null or a NUL-terminated string; `out` must be a
// valid pointer.
enum DecoyStatus decoy_model_new(const char *model_json, struct DecoyModel **out);

// Load a checkpoint directory written by `decoy train`.
//
// # Safety
// `dir` must be a NUL-terminated string; `out` must be a valid pointer.
enum DecoyStatus decoy_model_load(const char *dir, struct DecoyModel **out);

// Write the model to a checkpoint directory.
//
// # Safety
// `model` must come from this library; `dir` must be a NUL-terminated string.
enum DecoyStatus decoy_model_save(const struct DecoyModel *model, const char *dir);

// Copy the 64-character hex weight hash and a terminating NUL into `buf`.
//
// # Safety
// `model` must come from this library; `buf` must hold `len` bytes.
enum DecoyStatus decoy_model_hash(const struct DecoyModel *model, char *buf, size_t len);

// # Safety
// `model` must be null or come from this library, and not be used afterwards.
void decoy_model_free(struct DecoyModel *model);

// Compute a protective perturbation for `image` under `mask`.
// `attack_json` may be null for defaults, or a JSON object overriding
// attack config keys (e.g. `{"epsilon": 0.047, "iterations": 100}`).
//
// # Safety
// Buffers must hold `decoy_image_len()` and `decoy_mask_len()` floats;
// `attack_json` must be null or NUL-terminated; `out` must be valid.
enum DecoyStatus decoy_protect(const struct DecoyModel *model,
                               const float *image,
                               const float *mask,
                               const char *attack_json,
                               struct DecoyNoise **out);

// Copy the perturbation into `out` (`decoy_image_len()` floats).
//
// # Safety
// `noise` must come from this library; `out` must hold `len` floats.
enum DecoyStatus decoy_noise_delta(const struct DecoyNoise *noise, float *out, size_t len);

// Write `image + delta` into `out`.
//
// # Safety
// `noise` must come from this library; `image` must hold
// `decoy_image_len()` floats and `out` must hold `len` floats.
enum DecoyStatus decoy_noise_apply(const struct DecoyNoise *noise,
                                   const float *image,
                                   float *out,
                                   size_t len);

// Number of entries in the per-iteration loss history.
//
// # Safety
// `noise` must be null or come from this library.
size_t decoy_noise_loss_len(const struct DecoyNoise *noise);

// Copy the per-iteration attention loss into `out`.
//
// # Safety
// `noise` must come from this library; `out` must hold `len` floats.
enum DecoyStatus decoy_noise_loss_history(const struct DecoyNoise *noise, float *out, size_t len);

// # Safety
// `noise` must be null or come from this library, and not be used afterwards.
void decoy_noise_free(struct DecoyNoise *noise);

// Inpaint the mask-0 region of `image` from `prompt`; writes
// `decoy_image_len()` floats to `out`. `sampler_json` may be null or a JSON
// object overriding sampler config keys.
//
// # Safety
// Buffers as for [`decoy_protect`]; `prompt` must be NUL-terminated and
// `out` must hold `len` floats.
enum DecoyStatus decoy_inpaint(const struct DecoyModel *model,
                               const float *image,
                               const float *mask,
                               const char *prompt,
                               const char *sampler_json,
                               float *out,
                               size_t len);

// Inpaint as [`decoy_inpaint`] and report where the cross-attention of the
// inpaint region went, averaged over steps and all layers.
//
// # Safety
// As for [`decoy_inpaint`]; `masses` must be a valid pointer.
enum DecoyStatus decoy_attention_masses(const struct DecoyModel *model,
                                        const float *image,
                                        const float *mask,
                                        const char *prompt,
                                        const char *sampler_json,
                                        struct DecoyMasses *masses);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* DECOY_H */
