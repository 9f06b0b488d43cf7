#ifndef SDAPD_H
#define SDAPD_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  SDAPD_STATUS_OK = 0,
  SDAPD_STATUS_NULL_POINTER = 1,
  SDAPD_STATUS_BUFFER_TOO_SMALL = 2,
  SDAPD_STATUS_INVALID_PARAMETER = 3,
  SDAPD_STATUS_SAMPLING = 4,
  SDAPD_STATUS_TOO_SHORT = 5,
  SDAPD_STATUS_OUT_OF_RANGE = 6,
  SDAPD_STATUS_INCOMPATIBLE = 7,
  SDAPD_STATUS_UNDEFINED_ESTIMATE = 8,
  SDAPD_STATUS_AMBIGUOUS_PEAK = 9,
  SDAPD_STATUS_DIVISOR_MISMATCH = 10,
  SDAPD_STATUS_CONFIG = 11,
  SDAPD_STATUS_IO = 12,
  SDAPD_STATUS_PANIC = 13,
} SdapdStatus;

/**
 * Opaque detector model.
 */
typedef struct SdapdDetector SdapdDetector;

/**
 * Opaque simulation: a detector, gate and source plus the last run.
 */
typedef struct SdapdSimulation SdapdSimulation;

typedef struct {
  double frequency;
  /**
   * Peak-to-peak volts.
   */
  double amplitude;
  double dc_bias;
  double analog_bandwidth;
} SdapdGate;

typedef struct {
  double wavelength;
  double pulse_rate;
  double mean_photons_per_pulse;
  double pulse_width;
  double delay;
} SdapdSource;

typedef struct {
  uint32_t delay_cycles;
  double nominal_delay;
  double stretcher_trim;
  double split_ratio;
  uint32_t interp_taps;
} SdapdSdConfig;

typedef struct {
  double harmonic_db;
  double harmonic_hz;
  double broadband_db;
} SdapdSuppression;

typedef struct {
  uint64_t gates;
  uint64_t counts;
  uint64_t photon_counts;
  uint64_t dark_counts;
  uint64_t afterpulse_counts;
  uint64_t avalanches;
  double total_charge;
  double photocurrent;
  double count_rate;
  uint64_t sync_divisor;
} SdapdRunSummary;

/**
 * Undefined estimates are NaN.
 */
typedef struct {
  double raw_count_rate;
  double dark_prob;
  double afterpulse_prob;
  double net_efficiency;
  double charge_estimate;
  double gate_frequency;
  double photon_flux;
  double sigma_dark_prob;
  double sigma_afterpulse_prob;
  double sigma_net_efficiency;
} SdapdCharacterization;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call into this library on the
 * same thread.
 */
const char *sdapd_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *sdapd_version(void);

SdapdGate sdapd_gate_default(void);

SdapdSource sdapd_source_default(void);

SdapdSdConfig sdapd_sd_config_default(void);

/**
 * # Safety
 * `result` must be a valid pointer to writable storage.
 */
SdapdStatus sdapd_power_to_flux(double power, double wavelength, double *result);

/**
 * # Safety
 * `result` must be a valid pointer to writable storage.
 */
SdapdStatus sdapd_eta_net(double count_rate,
                          double dark_prob,
                          double afterpulse_prob,
                          double flux,
                          double frequency,
                          double *result);

/**
 * # Safety
 * `result` must be a valid pointer to writable storage.
 */
SdapdStatus sdapd_estimate_charge(double photocurrent, double count_rate, double *result);

/**
 * Afterpulse probability from a gate-position histogram and its laser-off
 * baseline. `total_clamp` selects clamping the summed excess instead of
 * each position.
 *
 * # Safety
 * `histogram` and `dark` must each point to `len` readable values;
 * `probability` and `peak_position` must be writable.
 */
SdapdStatus sdapd_extract_afterpulse(const uint64_t *histogram,
                                     const uint64_t *dark,
                                     size_t len,
                                     bool total_clamp,
                                     double *probability,
                                     size_t *peak_position);

/**
 * Writes a band-limited gate train into `buf`.
 *
 * # Safety
 * `gate` and `len_out` must be valid; `buf` must hold `cap` values.
 */
SdapdStatus sdapd_synth_gate_train(const SdapdGate *gate,
                                   double duration,
                                   double sample_rate,
                                   double *buf,
                                   size_t cap,
                                   size_t *len_out);

/**
 * Runs samples through the self-differencing circuit. The output begins
 * after the warm-up span; its start time is written to `start_out`.
 *
 * # Safety
 * `samples` must hold `len` values, `buf` `cap` values; `cfg`, `len_out`
 * and `start_out` must be valid.
 */
SdapdStatus sdapd_apply_sd(const double *samples,
                           size_t len,
                           double sample_rate,
                           double start_time,
                           const SdapdSdConfig *cfg,
                           double *buf,
                           size_t cap,
                           size_t *len_out,
                           double *start_out);

/**
 * # Safety
 * `cfg` and `tuned` must be valid pointers; they may alias.
 */
SdapdStatus sdapd_tune_to_frequency(double target, const SdapdSdConfig *cfg, SdapdSdConfig *tuned);

/**
 * # Safety
 * `input` must hold `input_len` values and `output` `output_len` values,
 * both sampled at `sample_rate`; `report` must be valid.
 */
SdapdStatus sdapd_measure_suppression(const double *input,
                                      size_t input_len,
                                      double input_start,
                                      const double *output,
                                      size_t output_len,
                                      double output_start,
                                      double sample_rate,
                                      double at,
                                      SdapdSuppression *report);

/**
 * New detector with defaults for `gate_frequency` (sets the jitter).
 *
 * # Safety
 * `handle` must be a valid pointer; the result is freed with
 * [`sdapd_detector_free`].
 */
SdapdStatus sdapd_detector_new(double gate_frequency, SdapdDetector **handle);

/**
 * # Safety
 * `handle` must come from [`sdapd_detector_new`] and not be used after.
 */
void sdapd_detector_free(SdapdDetector *handle);

/**
 * Sets a numeric detector parameter by field name, e.g. `"eta_max"`.
 * Boolean fields take 0 or 1.
 *
 * # Safety
 * `handle` must be live and `name` NUL-terminated.
 */
SdapdStatus sdapd_detector_set(SdapdDetector *handle, const char *name, double value);

/**
 * # Safety
 * `handle` must be live, `name` NUL-terminated and `value` writable.
 */
SdapdStatus sdapd_detector_get(const SdapdDetector *handle, const char *name, double *value);

/**
 * Adjusts the detector so that at `gate.dc_bias` with `source` its expected
 * net efficiency, afterpulse and dark count probabilities are the targets.
 *
 * # Safety
 * All pointers must be valid.
 */
SdapdStatus sdapd_detector_plant(SdapdDetector *handle,
                                 const SdapdGate *gate,
                                 const SdapdSource *source,
                                 double net_efficiency,
                                 double afterpulse_prob,
                                 double dark_prob);

/**
 * Snapshots the detector; later changes to it do not affect the simulation.
 *
 * # Safety
 * `detector`, `gate`, `source` and `handle` must be valid. Free the result
 * with [`sdapd_simulation_free`].
 */
SdapdStatus sdapd_simulation_new(const SdapdDetector *detector,
                                 const SdapdGate *gate,
                                 const SdapdSource *source,
                                 SdapdSimulation **handle);

/**
 * # Safety
 * `handle` must come from [`sdapd_simulation_new`] and not be used after.
 */
void sdapd_simulation_free(SdapdSimulation *handle);

/**
 * Simulates `n_gates` gates; the summary is kept for
 * [`sdapd_simulation_histogram`].
 *
 * # Safety
 * `handle` must be live; `summary` may be null.
 */
SdapdStatus sdapd_simulation_run(SdapdSimulation *handle,
                                 uint64_t n_gates,
                                 uint64_t seed,
                                 SdapdRunSummary *summary);

/**
 * Counts per gate position modulo the sync divisor from the last run.
 *
 * # Safety
 * `handle` and `len_out` must be valid; `buf` must hold `cap` values.
 */
SdapdStatus sdapd_simulation_histogram(const SdapdSimulation *handle,
                                       uint64_t *buf,
                                       size_t cap,
                                       size_t *len_out);

/**
 * Laser-off and illuminated runs of `n_gates` each, reduced to the
 * characterization tuple.
 *
 * # Safety
 * `handle` and `result` must be valid.
 */
SdapdStatus sdapd_simulation_characterize(const SdapdSimulation *handle,
                                          uint64_t n_gates,
                                          uint64_t seed,
                                          bool total_clamp,
                                          SdapdCharacterization *result);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SDAPD_H */
