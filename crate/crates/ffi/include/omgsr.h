#ifndef OMGSR_H
#define OMGSR_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. Zero is success.
 */
typedef enum OmgsrStatus {
  OMGSR_STATUS_OK = 0,
  OMGSR_STATUS_NULL_POINTER = 1,
  OMGSR_STATUS_INVALID_ARGUMENT = 2,
  OMGSR_STATUS_IO = 3,
  OMGSR_STATUS_CHECKPOINT = 4,
  OMGSR_STATUS_SHAPE = 5,
  OMGSR_STATUS_RUNTIME = 6,
  OMGSR_STATUS_PANIC = 7,
} OmgsrStatus;

/**
 * A planned chunk layout.
 */
typedef struct OmgsrChunkPlan OmgsrChunkPlan;

/**
 * A loaded checkpoint bundle.
 */
typedef struct OmgsrModel OmgsrModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *omgsr_last_error(void);

/**
 * Load a checkpoint directory. On success `*out` owns a model that must be
 * released with [`omgsr_model_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum OmgsrStatus omgsr_model_load(const char *path, struct OmgsrModel **out);

/**
 * Release a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`omgsr_model_load`] and not be used afterwards.
 */
void omgsr_model_free(struct OmgsrModel *model);

/**
 * LQ to HQ upscale factor of a model, or 0 for a null model.
 *
 * # Safety
 * `model` must be null or a live model.
 */
size_t omgsr_model_scale(const struct OmgsrModel *model);

/**
 * One-pass restoration. `out_len` must equal
 * `channels * height * scale * width * scale`.
 *
 * # Safety
 * `lq` must hold `channels * height * width` floats and `out` `out_len`.
 */
enum OmgsrStatus omgsr_restore(const struct OmgsrModel *model,
                               const float *lq,
                               size_t channels,
                               size_t height,
                               size_t width,
                               float *out,
                               size_t out_len);

/**
 * Two-stage tiled restoration with feathered blending. `out_len` must equal
 * `channels * (height * scale * stage2) * (width * scale * stage2)` where
 * `stage2` is the model's configured stage-2 factor.
 *
 * # Safety
 * As [`omgsr_restore`].
 */
enum OmgsrStatus omgsr_tiled_restore(const struct OmgsrModel *model,
                                     const float *lq,
                                     size_t channels,
                                     size_t height,
                                     size_t width,
                                     size_t tile,
                                     size_t min_overlap,
                                     float *out,
                                     size_t out_len);

/**
 * PSNR of two same-shaped images with peak-to-peak range 2.
 *
 * # Safety
 * `a` and `b` must each hold `channels * height * width` floats.
 */
enum OmgsrStatus omgsr_psnr(const float *a,
                            const float *b,
                            size_t channels,
                            size_t height,
                            size_t width,
                            double *out);

/**
 * Mean SSIM over 7x7 windows with peak-to-peak range 2.
 *
 * # Safety
 * As [`omgsr_psnr`].
 */
enum OmgsrStatus omgsr_ssim(const float *a,
                            const float *b,
                            size_t channels,
                            size_t height,
                            size_t width,
                            double *out);

/**
 * Plan overlapping square chunks over a `height` x `width` image.
 *
 * # Safety
 * `out` must be a valid pointer; the plan is released with
 * [`omgsr_chunk_plan_free`].
 */
enum OmgsrStatus omgsr_plan_chunks(size_t height,
                                   size_t width,
                                   size_t patch,
                                   size_t min_overlap,
                                   struct OmgsrChunkPlan **out);

/**
 * Number of chunks, or 0 for a null plan.
 *
 * # Safety
 * `plan` must be null or a live plan.
 */
size_t omgsr_chunk_plan_count(const struct OmgsrChunkPlan *plan);

/**
 * Top-left corner of chunk `index` in row-major order.
 *
 * # Safety
 * `plan` must be a live plan; `y` and `x` valid pointers.
 */
enum OmgsrStatus omgsr_chunk_plan_origin(const struct OmgsrChunkPlan *plan,
                                         size_t index,
                                         size_t *y,
                                         size_t *x);

/**
 * Release a plan. Null is ignored.
 *
 * # Safety
 * `plan` must come from [`omgsr_plan_chunks`] and not be used afterwards.
 */
void omgsr_chunk_plan_free(struct OmgsrChunkPlan *plan);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* OMGSR_H */
