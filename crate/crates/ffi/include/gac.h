#ifndef GAC_H
#define GAC_H

/* Generated by cbindgen from the gac-ffi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes mirror the CLI exit codes where they overlap.
 */
typedef enum GacStatus {
  GAC_STATUS_OK = 0,
  /**
   * Invalid configuration or argument.
   */
  GAC_STATUS_CONFIG = 2,
  /**
   * Malformed or corrupted data.
   */
  GAC_STATUS_FORMAT = 3,
  /**
   * Training/numerics diverged.
   */
  GAC_STATUS_DIVERGENCE = 4,
  /**
   * A required pointer argument was null.
   */
  GAC_STATUS_NULL_ARGUMENT = 5,
  /**
   * Internal panic; state of outputs is unspecified.
   */
  GAC_STATUS_PANIC = 6,
} GacStatus;

/**
 * Opaque tokenizer (stage-1) handle.
 */
typedef struct GacStage1 GacStage1;

/**
 * Opaque decoder (stage-2) handle.
 */
typedef struct GacStage2 GacStage2;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent error on this thread. Valid until the next
 * failing call on the same thread; never null.
 */
const char *gac_last_error(void);

/**
 * Load a stage-1 checkpoint (with its JSON sidecar) from `path`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum GacStatus gac_stage1_load(const char *path, struct GacStage1 **out);

/**
 * # Safety
 * `handle` must come from `gac_stage1_load` and not be freed twice.
 */
void gac_stage1_free(struct GacStage1 *handle);

/**
 * Load a stage-2 checkpoint (with its JSON sidecar) from `path`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum GacStatus gac_stage2_load(const char *path, struct GacStage2 **out);

/**
 * # Safety
 * `handle` must come from `gac_stage2_load` and not be freed twice.
 */
void gac_stage2_free(struct GacStage2 *handle);

/**
 * Encode `num_samples` 16-bit PCM samples at 8 kHz into a packed bitstream.
 * On success `*out_bytes` points to a library-owned buffer of `*out_len`
 * bytes; release it with `gac_bytes_free`.
 *
 * # Safety
 * `samples` must point to `num_samples` readable values; out pointers must
 * be valid.
 */
enum GacStatus gac_encode_clip(const struct GacStage1 *stage1,
                               const int16_t *samples,
                               uintptr_t num_samples,
                               uint8_t **out_bytes,
                               uintptr_t *out_len);

/**
 * Release a buffer returned by `gac_encode_clip`.
 *
 * # Safety
 * `(ptr, len)` must be exactly as returned; free only once.
 */
void gac_bytes_free(uint8_t *ptr, uintptr_t len);

/**
 * Decode a packed bitstream into a feature sequence (row-major f64). On
 * success `*out_features` holds `*out_rows * *out_cols` values owned by the
 * library; release with `gac_features_free`.
 *
 * # Safety
 * `bytes` must point to `len` readable bytes; out pointers must be valid.
 */
enum GacStatus gac_decode_clip(const struct GacStage1 *stage1,
                               const struct GacStage2 *stage2,
                               const uint8_t *bytes,
                               uintptr_t len,
                               uintptr_t ode_steps,
                               uint64_t seed,
                               double **out_features,
                               uintptr_t *out_rows,
                               uintptr_t *out_cols);

/**
 * Release a buffer returned by `gac_decode_clip`.
 *
 * # Safety
 * `(ptr, rows*cols)` must be exactly as returned; free only once.
 */
void gac_features_free(double *ptr, uintptr_t rows, uintptr_t cols);

/**
 * Token bitrate in bits/second for the given stream parameters, or a
 * negative value if they are invalid.
 */
double gac_bitrate(uint32_t sample_rate, uint16_t hop, uint16_t codebook_size, uint8_t downsample);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GAC_H */
