#ifndef CLIC_H
#define CLIC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Architecture selector for [`clic_model_new_random`].
 */
typedef enum ClicArch {
  CLIC_ARCH_DEFAULT = 0,
  CLIC_ARCH_TOY = 1,
} ClicArch;

/**
 * Result code of every fallible call.
 */
typedef enum ClicStatus {
  CLIC_STATUS_OK = 0,
  CLIC_STATUS_NULL_POINTER = 1,
  CLIC_STATUS_INVALID_ARGUMENT = 2,
  CLIC_STATUS_IO = 3,
  CLIC_STATUS_CORRUPT_STREAM = 4,
  CLIC_STATUS_INTERNAL = 5,
} ClicStatus;

/**
 * Owned byte buffer, used for compressed streams.
 */
typedef struct ClicBuffer ClicBuffer;

/**
 * Owned interleaved 8-bit RGB image.
 */
typedef struct ClicImage ClicImage;

/**
 * Loaded network weights.
 */
typedef struct ClicModel ClicModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *clic_version(void);

/**
 * Message for the last failed call on this thread, or an empty string.
 * Valid until the next call into the library on the same thread.
 */
const char *clic_last_error(void);

/**
 * Loads a weights file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum ClicStatus clic_model_load(const char *path, struct ClicModel **out);

/**
 * Creates a model with seeded random weights; `arch` is a [`ClicArch`] value.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum ClicStatus clic_model_new_random(uint32_t arch, uint64_t seed, struct ClicModel **out);

/**
 * # Safety
 * `model` must come from this library and not be freed twice. Null is ignored.
 */
void clic_model_free(struct ClicModel *model);

/**
 * Compresses `height` rows of `width` RGB pixels; rows are `stride` bytes
 * apart (`stride >= 3 * width`). `quality` is 1..=6, `pqf` toggles the
 * latent filter.
 *
 * # Safety
 * `pixels` must point to `stride * height` readable bytes; `model` and
 * `out` must be valid.
 */
enum ClicStatus clic_encode_rgb8(const struct ClicModel *model,
                                 const uint8_t *pixels,
                                 size_t width,
                                 size_t height,
                                 size_t stride,
                                 uint8_t quality,
                                 bool pqf,
                                 struct ClicBuffer **out);

/**
 * Decompresses a stream produced by [`clic_encode_rgb8`] with the same model.
 *
 * # Safety
 * `data` must point to `len` readable bytes; `model` and `out` must be valid.
 */
enum ClicStatus clic_decode_rgb8(const struct ClicModel *model,
                                 const uint8_t *data,
                                 size_t len,
                                 struct ClicImage **out);

/**
 * # Safety
 * `buf` must be a live buffer or null.
 */
const uint8_t *clic_buffer_data(const struct ClicBuffer *buf);

/**
 * # Safety
 * `buf` must be a live buffer or null.
 */
size_t clic_buffer_len(const struct ClicBuffer *buf);

/**
 * # Safety
 * `buf` must come from this library and not be freed twice. Null is ignored.
 */
void clic_buffer_free(struct ClicBuffer *buf);

/**
 * # Safety
 * `img` must be a live image or null.
 */
size_t clic_image_width(const struct ClicImage *img);

/**
 * # Safety
 * `img` must be a live image or null.
 */
size_t clic_image_height(const struct ClicImage *img);

/**
 * Tightly packed RGB rows, `3 * width * height` bytes.
 *
 * # Safety
 * `img` must be a live image or null.
 */
const uint8_t *clic_image_data(const struct ClicImage *img);

/**
 * # Safety
 * `img` must come from this library and not be freed twice. Null is ignored.
 */
void clic_image_free(struct ClicImage *img);

/**
 * Least-squares weights `a` (length `n`) minimising `‖C a − eps‖²`, where
 * `c` holds `n` columns of length `p` back to back. A negative `ridge`
 * selects the automatic regulariser.
 *
 * # Safety
 * `c` must hold `p * n` values, `eps` `p` values and `a_out` room for `n`.
 */
enum ClicStatus clic_solve_coefficients(const double *c,
                                        const double *eps,
                                        size_t p,
                                        size_t n,
                                        double ridge,
                                        double *a_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CLIC_H */
