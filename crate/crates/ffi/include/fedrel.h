#ifndef FEDREL_H
#define FEDREL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FrStatus {
  FR_STATUS_OK = 0,
  FR_STATUS_NULL_POINTER = 1,
  FR_STATUS_INVALID_UTF8 = 2,
  FR_STATUS_CONFIG = 3,
  FR_STATUS_UNKNOWN_MODE = 4,
  FR_STATUS_INVALID_ARGUMENT = 5,
  FR_STATUS_NUMERIC = 6,
  FR_STATUS_PARTICIPANT = 7,
  FR_STATUS_IO = 8,
  FR_STATUS_OUT_OF_RANGE = 9,
  FR_STATUS_PANIC = 10,
  FR_STATUS_INTERNAL = 11,
} FrStatus;

/**
 * Experiment configuration handle.
 */
typedef struct FrConfig FrConfig;

/**
 * Finished run: per-round metrics and the final global model.
 */
typedef struct FrRun FrRun;

/**
 * Metrics for one communication round.
 */
typedef struct FrRoundMetrics {
  size_t round;
  double loss;
  double accuracy;
  double macro_f1;
  size_t participants;
} FrRoundMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *fr_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *fr_version(void);

/**
 * Default configuration for `seed`.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum FrStatus fr_config_new(uint64_t seed, struct FrConfig **out);

/**
 * Parses and validates a TOML experiment config.
 *
 * # Safety
 * `toml` must be NUL-terminated; `out` must be writable.
 */
enum FrStatus fr_config_parse(const char *toml, struct FrConfig **out);

/**
 * # Safety
 * `cfg` must come from `fr_config_new`/`fr_config_parse` or be null.
 */
void fr_config_free(struct FrConfig *cfg);

/**
 * # Safety
 * `cfg` must be a live config handle; `mode` NUL-terminated.
 */
enum FrStatus fr_config_set_mode(struct FrConfig *cfg, const char *mode);

/**
 * Sets participants, rounds and the dataset size; zero keeps the current
 * value. The result is validated before it is stored.
 *
 * # Safety
 * `cfg` must be a live config handle.
 */
enum FrStatus fr_config_set_sizes(struct FrConfig *cfg,
                                  size_t participants,
                                  size_t rounds,
                                  size_t sequences);

/**
 * Runs the configured experiment to completion.
 *
 * # Safety
 * `cfg` must be a live config handle; `out` must be writable.
 */
enum FrStatus fr_run(const struct FrConfig *cfg, struct FrRun **out);

/**
 * # Safety
 * `run` must come from `fr_run` or be null.
 */
void fr_run_free(struct FrRun *run);

/**
 * Number of recorded rounds; 0 for a null handle.
 *
 * # Safety
 * `run` must be a live run handle or null.
 */
size_t fr_run_rounds(const struct FrRun *run);

/**
 * Metrics of the `index`-th round (0-based).
 *
 * # Safety
 * `run` must be a live run handle; `out` must be writable.
 */
enum FrStatus fr_run_round(const struct FrRun *run, size_t index, struct FrRoundMetrics *out);

/**
 * Copies the aggregation weights of round `index` into `weights`, which must
 * hold `len` values; `len` must be at least the participant count.
 *
 * # Safety
 * `run` must be a live run handle; `weights` must point to `len` doubles.
 */
enum FrStatus fr_run_relevance(const struct FrRun *run, size_t index, double *weights, size_t len);

/**
 * Best test macro-F1 across rounds.
 *
 * # Safety
 * `run` must be a live run handle; `out` must be writable.
 */
enum FrStatus fr_run_best_macro_f1(const struct FrRun *run, double *out);

/**
 * Runs the finite-difference gradient suite and reports the worst relative
 * error.
 *
 * # Safety
 * `max_relative_error` must be writable.
 */
enum FrStatus fr_gradcheck(uint64_t seed, double *max_relative_error);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEDREL_H */
