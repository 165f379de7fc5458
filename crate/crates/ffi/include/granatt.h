#ifndef GRANATT_H
#define GRANATT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GranattStatus {
  GRANATT_STATUS_OK = 0,
  GRANATT_STATUS_NULL_POINTER = 1,
  GRANATT_STATUS_INVALID_ARGUMENT = 2,
  GRANATT_STATUS_SHAPE = 3,
  GRANATT_STATUS_IO = 4,
  GRANATT_STATUS_CHECKPOINT = 5,
  GRANATT_STATUS_UNREACHABLE = 6,
  GRANATT_STATUS_PANIC = 7,
} GranattStatus;

/**
 * Opaque set of granularity masks for one depth map.
 */
typedef struct GranattMasks GranattMasks;

/**
 * Opaque network with its parameters.
 */
typedef struct GranattNetwork GranattNetwork;

typedef struct GranattMetrics {
  double mae;
  double max_f;
  double s_measure;
  double e_measure;
} GranattMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *granatt_version(void);

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *granatt_last_error(void);

/**
 * Multi-threshold Otsu on a 256-bin histogram. Writes up to `t` thresholds
 * to `out_thresholds` (room for 3), their number to `out_count` and the
 * between-class variance to `out_objective` (may be null).
 *
 * # Safety
 * `hist` must point to 256 counts; the out pointers must be valid or null
 * where allowed.
 */
enum GranattStatus granatt_multi_otsu(const uint64_t *hist,
                                      size_t t,
                                      uint8_t *out_thresholds,
                                      size_t *out_count,
                                      double *out_objective);

/**
 * 256-bin histogram of a depth map.
 *
 * # Safety
 * `depth` holds `height * width` values; `out_hist` has room for 256.
 */
enum GranattStatus granatt_depth_histogram(const double *depth,
                                           size_t height,
                                           size_t width,
                                           uint64_t *out_hist);

/**
 * Thresholds and masks of a depth map.
 *
 * # Safety
 * `depth` holds `height * width` values; `out_masks` must be valid.
 */
enum GranattStatus granatt_masks_new(const double *depth,
                                     size_t height,
                                     size_t width,
                                     size_t t,
                                     struct GranattMasks **out_masks);

/**
 * Number of masks (effective thresholds plus one); 0 for a null handle.
 *
 * # Safety
 * `masks` is null or a live handle.
 */
size_t granatt_masks_regions(const struct GranattMasks *masks);

/**
 * Copies thresholds (up to 3) and returns how many there are; the
 * objective goes to `out_objective` when non-null.
 *
 * # Safety
 * `masks` is a live handle; `out_thresholds` has room for 3.
 */
enum GranattStatus granatt_masks_thresholds(const struct GranattMasks *masks,
                                            uint8_t *out_thresholds,
                                            size_t *out_count,
                                            double *out_objective);

/**
 * Writes mask `index` as 0/255 bytes into `out_bytes` of length `len`,
 * which must equal height * width.
 *
 * # Safety
 * `masks` is a live handle; `out_bytes` has room for `len` bytes.
 */
enum GranattStatus granatt_masks_copy(const struct GranattMasks *masks,
                                      size_t index,
                                      uint8_t *out_bytes,
                                      size_t len);

/**
 * # Safety
 * `masks` is null or a handle not yet freed.
 */
void granatt_masks_free(struct GranattMasks *masks);

/**
 * Network with default widths and parameters drawn from `seed`.
 *
 * # Safety
 * `out_network` must be valid.
 */
enum GranattStatus granatt_network_new(size_t input_size,
                                       uint64_t seed,
                                       struct GranattNetwork **out_network);

/**
 * Loads a GRANATT1 checkpoint.
 *
 * # Safety
 * `path` is a NUL-terminated UTF-8 string; `out_network` must be valid.
 */
enum GranattStatus granatt_network_load(const char *path, struct GranattNetwork **out_network);

/**
 * # Safety
 * `network` is a live handle; `path` is a NUL-terminated UTF-8 string.
 */
enum GranattStatus granatt_network_save(const struct GranattNetwork *network, const char *path);

/**
 * Square input side length; 0 for a null handle.
 *
 * # Safety
 * `network` is null or a live handle.
 */
size_t granatt_network_input_size(const struct GranattNetwork *network);

/**
 * Number of scalar parameters; 0 for a null handle.
 *
 * # Safety
 * `network` is null or a live handle.
 */
size_t granatt_network_parameter_count(const struct GranattNetwork *network);

/**
 * Final saliency map for one input pair at the network input size `s`.
 * `rgb` is planar 3*s*s, `depth` and `out_map` are s*s.
 *
 * # Safety
 * Buffers must have the sizes above; `network` is a live handle.
 */
enum GranattStatus granatt_network_predict(const struct GranattNetwork *network,
                                           const double *rgb,
                                           const double *depth,
                                           double *out_map);

/**
 * # Safety
 * `network` is null or a handle not yet freed.
 */
void granatt_network_free(struct GranattNetwork *network);

/**
 * MAE, max F-measure, S-measure and E-measure of one prediction.
 *
 * # Safety
 * `pred` and `gt` hold `height * width` values; `out_metrics` must be valid.
 */
enum GranattStatus granatt_evaluate(const double *pred,
                                    const double *gt,
                                    size_t height,
                                    size_t width,
                                    struct GranattMetrics *out_metrics);

/**
 * RMSE and failing delta1 fraction between two depth maps.
 *
 * # Safety
 * `clean` and `noisy` hold `height * width` values; out pointers valid.
 */
enum GranattStatus granatt_noise_stats(const double *clean,
                                       const double *noisy,
                                       size_t height,
                                       size_t width,
                                       double *out_rmse,
                                       double *out_delta1);

/**
 * Adds clamped Gaussian noise calibrated to `target_rmse`. `out_depth`
 * receives `height * width` values; `out_sigma` and `out_rmse` may be null.
 *
 * # Safety
 * Buffers must hold `height * width` values.
 */
enum GranattStatus granatt_add_depth_noise(const double *depth,
                                           size_t height,
                                           size_t width,
                                           double target_rmse,
                                           uint64_t seed,
                                           double *out_depth,
                                           double *out_sigma,
                                           double *out_rmse);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GRANATT_H */
