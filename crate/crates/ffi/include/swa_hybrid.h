#ifndef SWA_HYBRID_H
#define SWA_HYBRID_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  SWA_STATUS_OK = 0,
  SWA_STATUS_NULL_POINTER = 1,
  SWA_STATUS_INVALID_ARGUMENT = 2,
  SWA_STATUS_RUNTIME = 3,
  SWA_STATUS_PANIC = 4,
} SwaStatus;

typedef struct SwaCalibration SwaCalibration;

typedef struct SwaMask SwaMask;

typedef struct SwaModel SwaModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Owned by the library.
 */
const char *swa_last_error(void);

/**
 * The standard planted toy: 4 layers, 8 heads, 4 KV groups.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
SwaStatus swa_model_standard(uint64_t seed, SwaModel **out);

/**
 * Loads `model.json` and `model.bin` from a directory written by `gen`.
 *
 * # Safety
 * `dir` must be a nul-terminated string and `out` a valid pointer.
 */
SwaStatus swa_model_load(const char *dir, SwaModel **out);

/**
 * # Safety
 * `model` must come from this library or be null.
 */
void swa_model_free(SwaModel *model);

/**
 * # Safety
 * All pointers must be valid.
 */
SwaStatus swa_model_shape(const SwaModel *model, size_t *layers, size_t *heads, size_t *groups);

/**
 * Needle-retrieval examples for the standard toy. `evaluation` selects the held-out stream.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
SwaStatus swa_calibration_standard(uint64_t seed,
                                   size_t num_examples,
                                   bool evaluation,
                                   SwaCalibration **out);

/**
 * # Safety
 * `path` must be a nul-terminated string and `out` a valid pointer.
 */
SwaStatus swa_calibration_load(const char *path, SwaCalibration **out);

/**
 * # Safety
 * `set` must come from this library or be null.
 */
void swa_calibration_free(SwaCalibration *set);

/**
 * Mask from one byte per KV group (non-zero = SWA), flat `layer * groups + group`.
 *
 * # Safety
 * `swa` must point to `len` bytes and `out` must be valid.
 */
SwaStatus swa_mask_from_groups(size_t layers,
                               size_t heads,
                               size_t groups,
                               const uint8_t *swa,
                               size_t len,
                               SwaMask **out);

/**
 * # Safety
 * `mask` must come from this library or be null.
 */
void swa_mask_free(SwaMask *mask);

/**
 * # Safety
 * `mask` and `ratio` must be valid.
 */
SwaStatus swa_mask_ratio(const SwaMask *mask, double *ratio);

/**
 * Writes one byte per KV group (1 = SWA) into `buf`, which must hold `len >= L * G` bytes.
 *
 * # Safety
 * `mask` must be valid and `buf` must point to `len` writable bytes.
 */
SwaStatus swa_mask_groups(const SwaMask *mask, uint8_t *buf, size_t len);

/**
 * Canonical text form of a mask. Release with [`swa_string_free`].
 *
 * # Safety
 * `mask` and `out` must be valid.
 */
SwaStatus swa_mask_canonical(const SwaMask *mask, char **out);

/**
 * # Safety
 * `s` must come from this library or be null.
 */
void swa_string_free(char *s);

/**
 * Exact-match retrieval accuracy of `mask` on `set`.
 *
 * # Safety
 * All pointers must be valid.
 */
SwaStatus swa_score(const SwaModel *model,
                    const SwaCalibration *set,
                    const SwaMask *mask,
                    size_t window,
                    double *out);

/**
 * Runs a selection method (`bosch`, `b-single`, `fisher`, ...) and returns its mask.
 *
 * # Safety
 * All pointers must be valid; `method` must be nul-terminated.
 */
SwaStatus swa_select(const SwaModel *model,
                     const SwaCalibration *set,
                     const char *method,
                     double rho,
                     size_t window,
                     uint64_t seed,
                     SwaMask **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SWA_HYBRID_H */
