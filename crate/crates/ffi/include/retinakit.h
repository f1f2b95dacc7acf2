#ifndef RETINAKIT_H
#define RETINAKIT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

// Status codes returned by every function.
typedef enum RkStatus {
  RK_STATUS_OK = 0,
  RK_STATUS_NULL_POINTER = 1,
  RK_STATUS_INVALID_ARGUMENT = 2,
  RK_STATUS_INVALID_CONFIG = 3,
  RK_STATUS_DATA_ERROR = 4,
  RK_STATUS_IO = 5,
  // A metric is undefined for the input (e.g. a single class).
  RK_STATUS_UNDEFINED = 6,
  RK_STATUS_BUFFER_TOO_SMALL = 7,
  RK_STATUS_RUNTIME = 8,
  RK_STATUS_PANIC = 9,
} RkStatus;

// Collection of fundus samples.
typedef struct RkDataset RkDataset;

// Trained grading classifier.
typedef struct RkGradeModel RkGradeModel;

// Trained segmentation network.
typedef struct RkSegModel RkSegModel;

// Trained source/target/discriminator system.
typedef struct RkTransferSystem RkTransferSystem;

// Length in bytes of the last error message on this thread, excluding
// the terminating nul; 0 when there is none.
uintptr_t rk_last_error_length(void);

// Copy the last error message into `buf` (nul terminated, truncated to
// `len - 1` bytes). Returns the number of bytes written without the nul.
//
// # Safety
// `buf` must point to `len` writable bytes.
uintptr_t rk_last_error_message(char *buf, uintptr_t len);

// Toolkit version as a static nul-terminated string.
const char *rk_version(void);

// Lesion phantom with the standard lesion mix. `balanced` cycles the
// grades 0..4 over the images.
//
// # Safety
// `out` must be a valid pointer to a handle slot.
enum RkStatus rk_phantom_new(uintptr_t num_images,
                             uintptr_t image_size,
                             uint64_t seed,
                             bool balanced,
                             struct RkDataset **out_dataset);

// Multi-disease phantom with eight disease labels per image.
//
// # Safety
// `out_dataset` must be a valid pointer to a handle slot.
enum RkStatus rk_disease_phantom_new(uintptr_t num_images,
                                     uintptr_t image_size,
                                     uint64_t seed,
                                     struct RkDataset **out_dataset);

// Load a dataset in the standard layout. `kind` is one of `seg-set`,
// `grade-set`, `multi-disease`, `phantom`.
//
// # Safety
// `root` and `kind` must be nul-terminated strings; `out_dataset` a valid
// handle slot.
enum RkStatus rk_dataset_load(const char *root, const char *kind, struct RkDataset **out_dataset);

// # Safety
// `dataset` must be a live handle; `out_len` a valid pointer.
enum RkStatus rk_dataset_len(const struct RkDataset *dataset, uintptr_t *out_len);

// Grade of sample `index`, or -1 when it has none.
//
// # Safety
// `dataset` must be a live handle; `out_grade` a valid pointer.
enum RkStatus rk_dataset_grade(const struct RkDataset *dataset,
                               uintptr_t index,
                               int32_t *out_grade);

// # Safety
// `dataset` must be null or a handle not yet freed.
void rk_dataset_free(struct RkDataset *dataset);

// # Safety
// `path` must be a nul-terminated string; `out_model` a valid handle slot.
enum RkStatus rk_seg_model_load(const char *path, struct RkSegModel **out_model);

// Channels and side length of the probability maps a model produces.
//
// # Safety
// `model` must be a live handle; out pointers valid.
enum RkStatus rk_seg_model_output_shape(const struct RkSegModel *model,
                                        uintptr_t *out_channels,
                                        uintptr_t *out_size);

// Per-pixel lesion probabilities for sample `index`, written to `probs`
// as `[channels][size][size]`. `len` is the capacity of `probs`.
//
// # Safety
// Handles must be live; `probs` must hold `len` floats.
enum RkStatus rk_seg_model_predict(const struct RkSegModel *model,
                                   const struct RkDataset *dataset,
                                   uintptr_t index,
                                   float *probs,
                                   uintptr_t len);

// # Safety
// `model` must be null or a handle not yet freed.
void rk_seg_model_free(struct RkSegModel *model);

// # Safety
// `path` must be a nul-terminated string; `out_model` a valid handle slot.
enum RkStatus rk_grade_model_load(const char *path, struct RkGradeModel **out_model);

// Predicted grade of sample `index`; `logits` (may be null) receives the
// five class logits.
//
// # Safety
// Handles must be live; `logits` null or 5 writable doubles.
enum RkStatus rk_grade_model_predict(const struct RkGradeModel *model,
                                     const struct RkDataset *dataset,
                                     uintptr_t index,
                                     uint8_t *out_grade,
                                     double *logits);

// # Safety
// `model` must be null or a handle not yet freed.
void rk_grade_model_free(struct RkGradeModel *model);

// # Safety
// `path` must be a nul-terminated string; `out_system` a valid handle slot.
enum RkStatus rk_transfer_load(const char *path, struct RkTransferSystem **out_system);

// Eight disease probabilities for sample `index`.
//
// # Safety
// Handles must be live; `probs` must hold 8 doubles.
enum RkStatus rk_transfer_predict(const struct RkTransferSystem *system,
                                  const struct RkDataset *dataset,
                                  uintptr_t index,
                                  double *probs);

// # Safety
// `system` must be null or a handle not yet freed.
void rk_transfer_free(struct RkTransferSystem *system);

// Dice of `pred >= threshold` against the binary mask `gt` (nonzero =
// lesion), both of length `n`.
//
// # Safety
// `pred` and `gt` must hold `n` elements; `out_value` must be valid.
enum RkStatus rk_dice(const double *pred,
                      const uint8_t *gt,
                      uintptr_t n,
                      double threshold,
                      double *out_value);

// Pooled AUC-ROC of `scores` against binary `labels`.
//
// # Safety
// Buffers must hold `n` elements; `out_value` must be valid.
enum RkStatus rk_auc_roc(const double *scores,
                         const uint8_t *labels,
                         uintptr_t n,
                         double *out_value);

// Quadratic weighted kappa of ratings in `0..k`.
//
// # Safety
// Buffers must hold `n` elements; `out_value` must be valid.
enum RkStatus rk_quadratic_weighted_kappa(const uint32_t *pred,
                                          const uint32_t *gt,
                                          uintptr_t n,
                                          uintptr_t k,
                                          double *out_value);

// Unweighted Cohen's kappa.
//
// # Safety
// Buffers must hold `n` elements; `out_value` must be valid.
enum RkStatus rk_cohens_kappa(const uint32_t *pred,
                              const uint32_t *gt,
                              uintptr_t n,
                              double *out_value);

#endif  /* RETINAKIT_H */
