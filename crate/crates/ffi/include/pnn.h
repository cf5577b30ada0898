#ifndef PNN_H
#define PNN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PnnStatus {
  PNN_STATUS_OK = 0,
  PNN_STATUS_NULL_POINTER = 1,
  PNN_STATUS_INVALID_ARGUMENT = 2,
  PNN_STATUS_IO = 3,
  PNN_STATUS_PARSE = 4,
  PNN_STATUS_SHAPE = 5,
  PNN_STATUS_NON_FINITE = 6,
  PNN_STATUS_CONFIG = 7,
  PNN_STATUS_PANIC = 8,
} PnnStatus;

/*
 A loaded feature map.
 */
typedef struct PnnFeatureMap PnnFeatureMap;

/*
 A model with its trained parameters.
 */
typedef struct PnnModel PnnModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread; empty after a success.
 Valid until the next call into this library on the same thread.
 */
const char *pnn_last_error(void);

/*
 Load a feature-map file.

 # Safety
 `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum PnnStatus pnn_featuremap_load(const char *path, struct PnnFeatureMap **out);

/*
 Number of fields, or 0 for a null handle.

 # Safety
 `map` must be null or a live handle.
 */
size_t pnn_featuremap_num_fields(const struct PnnFeatureMap *map);

/*
 Size of field `field`, including its `other` category.

 # Safety
 `map` must be null or a live handle and `out` writable.
 */
enum PnnStatus pnn_featuremap_field_size(const struct PnnFeatureMap *map,
                                         size_t field,
                                         size_t *out);

/*
 # Safety
 `map` must be null or a handle from [`pnn_featuremap_load`], not yet freed.
 */
void pnn_featuremap_free(struct PnnFeatureMap *map);

/*
 Load a checkpoint. The architecture comes from the run config at
 `config_path` (null for defaults) and the field sizes from `map`.

 # Safety
 Strings must be NUL-terminated, `map` a live handle and `out` writable.
 */
enum PnnStatus pnn_model_load(const char *config_path,
                              const struct PnnFeatureMap *map,
                              const char *checkpoint_path,
                              struct PnnModel **out);

/*
 Number of input fields, or 0 for a null handle.

 # Safety
 `model` must be null or a live handle.
 */
size_t pnn_model_num_fields(const struct PnnModel *model);

/*
 Click probabilities for `count` instances. `indices` holds one category
 index per field, row-major `[count × num_fields]`; `out` receives
 `count` values.

 # Safety
 `indices` must hold `count * num_fields` values and `out` `count`.
 */
enum PnnStatus pnn_model_predict(const struct PnnModel *model,
                                 const size_t *indices,
                                 size_t count,
                                 size_t num_fields,
                                 double *out);

/*
 # Safety
 `model` must be null or a handle from [`pnn_model_load`], not yet freed.
 */
void pnn_model_free(struct PnnModel *model);

/*
 Rank-based AUC with ties averaged. Labels are 0 or 1.

 # Safety
 `scores` and `labels` must hold `len` values; `out` must be writable.
 */
enum PnnStatus pnn_auc(const double *scores, const uint8_t *labels, size_t len, double *out);

/*
 Mean log loss of logits.

 # Safety
 `logits` and `labels` must hold `len` values; `out` must be writable.
 */
enum PnnStatus pnn_logloss(const double *logits, const uint8_t *labels, size_t len, double *out);

/*
 Smallest gradient Adam does not shrink at step `t`.

 # Safety
 `out` must be writable.
 */
enum PnnStatus pnn_gstar(double eps, double beta2, uint64_t t, double *out);

/*
 Adam estimate `window` steps after a lone gradient `g_t` at step `t`.

 # Safety
 `out` must be writable.
 */
enum PnnStatus pnn_long_tail_gradient(double g_t,
                                      uint64_t t,
                                      uint64_t window,
                                      double beta1,
                                      double beta2,
                                      double eps,
                                      double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PNN_H */
