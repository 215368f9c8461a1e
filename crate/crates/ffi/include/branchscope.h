#ifndef BRANCHSCOPE_H
#define BRANCHSCOPE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Archetype codes in the same order as the five labels.
typedef enum BsArchetype {
  BS_ARCHETYPE_EFFECTIVE_SPECIALIZATION = 0,
  BS_ARCHETYPE_EFFECTIVE_CONSENSUS = 1,
  BS_ARCHETYPE_INEFFECTIVE_CONSENSUS = 2,
  BS_ARCHETYPE_INEFFECTIVE_SPECIALIZATION = 3,
  BS_ARCHETYPE_FLAWED_SPECIALIZATION = 4,
} BsArchetype;

// Status codes. Zero is success.
typedef enum BsStatus {
  BS_STATUS_OK = 0,
  BS_STATUS_NULL_POINTER = 1,
  BS_STATUS_INVALID_ARGUMENT = 2,
  // An output buffer is too small; the required length is reported.
  BS_STATUS_BUFFER_TOO_SMALL = 3,
  BS_STATUS_IO = 4,
  BS_STATUS_FORMAT = 5,
  BS_STATUS_COMPUTE = 6,
  BS_STATUS_PANIC = 7,
} BsStatus;

// Opaque trained meta-classifier.
typedef struct BsModel BsModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version, a static NUL-terminated string.
const char *bs_version(void);

// Message of the last failed call on this thread; empty after success.
// Valid until the next call on the same thread.
const char *bs_last_error(void);

// Loads a model from a `model.json` file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum BsStatus bs_model_load(const char *path, struct BsModel **out);

// Parses a model from JSON text.
//
// # Safety
// `json` must be a NUL-terminated string and `out` a valid pointer.
enum BsStatus bs_model_from_json(const char *json, struct BsModel **out);

// Releases a model. Null is ignored.
//
// # Safety
// `model` must come from this library and not be used afterwards.
void bs_model_free(struct BsModel *model);

// Number of classes, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t bs_model_n_classes(const struct BsModel *model);

// Number of input features, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t bs_model_n_features(const struct BsModel *model);

// Class probabilities for one feature row.
//
// # Safety
// `x` must hold `n_features` values and `out` `out_cap` values.
enum BsStatus bs_model_predict_proba(const struct BsModel *model,
                                     const double *x,
                                     size_t n_features,
                                     double *out,
                                     size_t out_cap);

// TreeSHAP values of one class margin for one row.
//
// # Safety
// `x` must hold `n_features` values, `phi` `phi_cap` values and
// `base_value` must be valid.
enum BsStatus bs_model_shap(const struct BsModel *model,
                            const double *x,
                            size_t n_features,
                            size_t class_index,
                            double *phi,
                            size_t phi_cap,
                            double *base_value);

// Top-`k` covariance eigenvalues of a row-major `rows × cols` activation
// matrix (features by samples).
//
// # Safety
// `values` must hold `rows * cols` values and `out` `k` values.
enum BsStatus bs_signature(const double *values, size_t rows, size_t cols, size_t k, double *out);

// Eigenvalues of a symmetric row-major `n × n` matrix, descending.
//
// # Safety
// `matrix` must hold `n * n` values and `out` `n` values.
enum BsStatus bs_eigenvalues_sym(const double *matrix, size_t n, double *out);

// Equal error rate (fraction) and its threshold.
//
// # Safety
// `bona`/`spoof` must hold `n_bona`/`n_spoof` values; outputs must be valid.
enum BsStatus bs_eer(const double *bona,
                     size_t n_bona,
                     const double *spoof,
                     size_t n_spoof,
                     double *eer_out,
                     double *threshold_out);

// Softmax shares of `n` block confidence scores.
//
// # Safety
// `scores` and `out` must each hold `n` values.
enum BsStatus bs_shares(const double *scores, size_t n, double *out);

// Quadrant rule with the default thresholds (EER 1 % / 10 %, share 20 %).
//
// # Safety
// `out` must be valid.
enum BsStatus bs_classify_archetype(double eer_percent,
                                    double dominant_share_percent,
                                    enum BsArchetype *out);

// Canonical name of an archetype code, a static NUL-terminated string.
const char *bs_archetype_name(enum BsArchetype code);

// Runs the full pipeline described by a JSON config file and writes its
// reports. `n_records`, when non-null, receives the number of attacks.
//
// # Safety
// `config_path` must be a NUL-terminated string.
enum BsStatus bs_run_pipeline(const char *config_path, size_t *n_records);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BRANCHSCOPE_H */
