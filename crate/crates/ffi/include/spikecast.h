#ifndef SPIKECAST_H
#define SPIKECAST_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SpikecastStatus {
  SPIKECAST_STATUS_OK = 0,
  SPIKECAST_STATUS_NULL_POINTER = 1,
  SPIKECAST_STATUS_INVALID_STRING = 2,
  SPIKECAST_STATUS_IO = 3,
  SPIKECAST_STATUS_CONFIG = 4,
  SPIKECAST_STATUS_SHAPE = 5,
  SPIKECAST_STATUS_RUNTIME = 6,
  SPIKECAST_STATUS_PANIC = 7,
} SpikecastStatus;

/**
 * Opaque model handle.
 */
typedef struct SpikecastModel SpikecastModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Owned by the
 * library and valid until the next call.
 */
const char *spikecast_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *spikecast_version(void);

/**
 * Builds an untrained model from a TOML model section (may be empty).
 *
 * # Safety
 * `config_toml` must be null or a NUL-terminated string; `out` must be a
 * valid pointer to writable storage for one handle.
 */
enum SpikecastStatus spikecast_model_new(const char *config_toml,
                                         size_t lookback,
                                         size_t horizon,
                                         size_t channels,
                                         uint64_t seed,
                                         struct SpikecastModel **out);

/**
 * Loads a checkpoint written by `spikecast train` or `spikecast_model_save`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SpikecastStatus spikecast_model_load(const char *path, struct SpikecastModel **out);

/**
 * # Safety
 * `model` must come from this library; `path` must be NUL-terminated.
 */
enum SpikecastStatus spikecast_model_save(const struct SpikecastModel *model, const char *path);

/**
 * Releases a handle. Null is accepted.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void spikecast_model_free(struct SpikecastModel *model);

/**
 * # Safety
 * `model` must be a live handle; the output pointers must be writable.
 */
enum SpikecastStatus spikecast_model_dims(const struct SpikecastModel *model,
                                          size_t *lookback,
                                          size_t *horizon,
                                          size_t *channels);

/**
 * Forecasts `n_windows` windows laid out `[n, lookback, channels]` into
 * `out` (`[n, horizon, channels]`, `out_len` floats).
 *
 * # Safety
 * `input` must hold `n_windows * lookback * channels` floats and `out`
 * must have room for `out_len` floats.
 */
enum SpikecastStatus spikecast_model_predict(const struct SpikecastModel *model,
                                             const float *input,
                                             size_t n_windows,
                                             float *out,
                                             size_t out_len);

/**
 * Multiply-accumulate count per sample and sub-step, summed over layers.
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum SpikecastStatus spikecast_model_flops(const struct SpikecastModel *model, uint64_t *out);

/**
 * Drives one LIF neuron with `n` input currents, writing spikes and the
 * post-step potential `H` of every step.
 *
 * # Safety
 * `currents`, `spikes` and `potentials` must each hold `n` floats.
 */
enum SpikecastStatus spikecast_lif_trace(const float *currents,
                                         size_t n,
                                         float threshold,
                                         float beta,
                                         float v_reset,
                                         float *spikes,
                                         float *potentials);

/**
 * RSE and R² of forecasts laid out `[m, l, c]`.
 *
 * # Safety
 * `preds` and `truths` must each hold `m * l * c` floats; `rse_out` and
 * `r2_out` must be writable.
 */
enum SpikecastStatus spikecast_metrics(const float *preds,
                                       const float *truths,
                                       size_t m,
                                       size_t l,
                                       size_t c,
                                       double *rse_out,
                                       double *r2_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPIKECAST_H */
