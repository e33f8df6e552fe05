#ifndef IVX_H
#define IVX_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes. Values 2–4 match the `ivx` CLI exit codes.
 */
typedef enum IvxStatus {
  IVX_STATUS_OK = 0,
  IVX_STATUS_NULL_POINTER = 1,
  IVX_STATUS_CONFIG = 2,
  IVX_STATUS_DATA = 3,
  IVX_STATUS_NUMERIC = 4,
  /**
   * An output buffer has the wrong length.
   */
  IVX_STATUS_BUFFER_SIZE = 5,
  IVX_STATUS_INVALID_UTF8 = 6,
  IVX_STATUS_PANIC = 7,
} IvxStatus;

typedef struct IvxClassifier IvxClassifier;

/**
 * Diagonal-covariance GMM (UBM).
 */
typedef struct IvxGmm IvxGmm;

/**
 * Trained auto-encoder with its input scaler.
 */
typedef struct IvxSae IvxSae;

/**
 * Total-variability model together with its UBM.
 */
typedef struct IvxTvModel IvxTvModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *ivx_version(void);

/**
 * Message of the last failure on this thread, or null if none. Owned by the library.
 */
const char *ivx_last_error(void);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum IvxStatus ivx_gmm_load(const char *path, struct IvxGmm **out);

/**
 * # Safety
 * `gmm` must come from `ivx_gmm_load` (or be null) and not be used afterwards.
 */
void ivx_gmm_free(struct IvxGmm *gmm);

/**
 * # Safety
 * `gmm` must be a live handle; `components` and `dim` valid pointers.
 */
enum IvxStatus ivx_gmm_shape(const struct IvxGmm *gmm, uintptr_t *components, uintptr_t *dim);

/**
 * Total log-likelihood of `n_frames` row-major frames of width `dim`.
 *
 * # Safety
 * `frames` must hold `n_frames * dim` values; `out` must be valid.
 */
enum IvxStatus ivx_gmm_log_likelihood(const struct IvxGmm *gmm,
                                      const double *frames,
                                      uintptr_t n_frames,
                                      uintptr_t dim,
                                      double *out);

/**
 * Loads a T matrix and the UBM it was trained against.
 *
 * # Safety
 * Both paths must be NUL-terminated strings and `out` a valid pointer.
 */
enum IvxStatus ivx_tv_load(const char *tv_path, const char *ubm_path, struct IvxTvModel **out);

/**
 * # Safety
 * `tv` must come from `ivx_tv_load` (or be null) and not be used afterwards.
 */
void ivx_tv_free(struct IvxTvModel *tv);

/**
 * # Safety
 * `tv` must be a live handle and `rank` a valid pointer.
 */
enum IvxStatus ivx_tv_rank(const struct IvxTvModel *tv, uintptr_t *rank);

/**
 * i-vector of already-normalized feature frames (all treated as voiced).
 *
 * # Safety
 * `frames` must hold `n_frames * dim` values and `out` `out_len` values.
 */
enum IvxStatus ivx_tv_extract_frames(const struct IvxTvModel *tv,
                                     const double *frames,
                                     uintptr_t n_frames,
                                     uintptr_t dim,
                                     double *out,
                                     uintptr_t out_len);

/**
 * i-vector of a WAV file through the default front end.
 *
 * # Safety
 * `wav_path` must be a NUL-terminated string and `out` hold `out_len` values.
 */
enum IvxStatus ivx_tv_extract_wav(const struct IvxTvModel *tv,
                                  const char *wav_path,
                                  double *out,
                                  uintptr_t out_len);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum IvxStatus ivx_sae_load(const char *path, struct IvxSae **out);

/**
 * # Safety
 * `sae` must come from `ivx_sae_load` (or be null) and not be used afterwards.
 */
void ivx_sae_free(struct IvxSae *sae);

/**
 * # Safety
 * `sae` must be a live handle; `input_dim` and `code_dim` valid pointers.
 */
enum IvxStatus ivx_sae_dims(const struct IvxSae *sae, uintptr_t *input_dim, uintptr_t *code_dim);

/**
 * # Safety
 * `input` must hold `input_len` values and `out` `out_len` values.
 */
enum IvxStatus ivx_sae_encode(const struct IvxSae *sae,
                              const double *input,
                              uintptr_t input_len,
                              double *out,
                              uintptr_t out_len);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum IvxStatus ivx_classifier_load(const char *path, struct IvxClassifier **out);

/**
 * # Safety
 * `clf` must come from `ivx_classifier_load` (or be null) and not be used afterwards.
 */
void ivx_classifier_free(struct IvxClassifier *clf);

/**
 * # Safety
 * `clf` must be a live handle and `n` a valid pointer.
 */
enum IvxStatus ivx_classifier_num_classes(const struct IvxClassifier *clf, uintptr_t *n);

/**
 * Name of class `index`; null when out of range. Valid while the handle lives.
 *
 * # Safety
 * `clf` must be a live handle or null.
 */
const char *ivx_classifier_class_name(const struct IvxClassifier *clf, uintptr_t index);

/**
 * Per-class scores into `out` and the arg-max class into `predicted`.
 *
 * # Safety
 * `input` must hold `input_len` values, `out` `out_len` values; `predicted` may be null.
 */
enum IvxStatus ivx_classifier_score(const struct IvxClassifier *clf,
                                    const double *input,
                                    uintptr_t input_len,
                                    double *out,
                                    uintptr_t out_len,
                                    uintptr_t *predicted);

/**
 * Area under the ROC curve; `labels[i]` nonzero marks a positive.
 *
 * # Safety
 * `scores` and `labels` must each hold `n` values; `out` must be valid.
 */
enum IvxStatus ivx_roc_auc(const double *scores, const uint8_t *labels, uintptr_t n, double *out);

/**
 * Matthews correlation coefficient of a confusion count; 0 when undefined.
 */
double ivx_mcc(uint64_t tp, uint64_t fp, uint64_t tn, uint64_t fn_);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* IVX_H */
