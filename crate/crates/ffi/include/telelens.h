#ifndef TELELENS_H
#define TELELENS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TlStatus {
  TL_STATUS_OK = 0,
  TL_STATUS_NULL_POINTER = 1,
  TL_STATUS_INVALID_ARGUMENT = 2,
  TL_STATUS_CONFIG = 3,
  TL_STATUS_PARSE = 4,
  TL_STATUS_IO = 5,
  /**
   * Solver failure, degenerate geometry or unobservable parameters.
   */
  TL_STATUS_NUMERIC = 6,
  TL_STATUS_STATE = 7,
  TL_STATUS_BUFFER_TOO_SMALL = 8,
  TL_STATUS_PANIC = 9,
} TlStatus;

typedef enum TlSource {
  TL_SOURCE_TRAJECTORY = 0,
  TL_SOURCE_LIVE = 1,
} TlSource;

/**
 * Opaque configuration.
 */
typedef struct TlConfig TlConfig;

/**
 * Opaque simulation.
 */
typedef struct TlSimulation TlSimulation;

typedef struct TlPose {
  double translation[3];
  /**
   * w, x, y, z
   */
  double rotation[4];
} TlPose;

typedef struct TlCalibration {
  struct TlPose hand_eye;
  /**
   * End-effector to board.
   */
  struct TlPose mount;
  /**
   * Checkerboard square side, meters.
   */
  double side;
  double rms_px;
  uint32_t iterations;
  uint32_t images;
} TlCalibration;

/**
 * One arm at one sample. Missing values are NaN.
 */
typedef struct TlArmSample {
  uint64_t sample;
  uint32_t arm;
  double alpha;
  /**
   * Overlay against the true tool at the predicted joints, pixels.
   */
  double pred_err_px;
  double overlay_tip[3];
  double slave_tip[3];
  /**
   * Delayed slave tool position as seen by the master.
   */
  double feedback_tip[3];
  double hand_eye_err_t;
  double hand_eye_err_r;
  /**
   * 1 if the tracker updated at this sample.
   */
  uint8_t tracker_update;
} TlArmSample;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version, a static NUL-terminated string.
 */
const char *tl_version(void);

/**
 * Copies the calling thread's last error message into `buf` (truncated,
 * always NUL-terminated when `len > 0`). Returns the full message length
 * including the NUL, or 0 if the last call succeeded.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t tl_last_error(char *buf, size_t len);

/**
 * The bundled default configuration.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum TlStatus tl_config_default(struct TlConfig **out);

/**
 * Parses a TOML config document. Unknown keys are rejected.
 *
 * # Safety
 * `text` must be a NUL-terminated string and `out` a valid pointer.
 */
enum TlStatus tl_config_from_toml(const char *text, struct TlConfig **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum TlStatus tl_config_load(const char *path, struct TlConfig **out);

/**
 * Sets the round-trip delay, seconds. The config is unchanged on error.
 *
 * # Safety
 * `cfg` must come from a `tl_config_*` constructor.
 */
enum TlStatus tl_config_set_delay(struct TlConfig *cfg, double round_trip);

/**
 * # Safety
 * `cfg` must come from a `tl_config_*` constructor.
 */
enum TlStatus tl_config_set_seed(struct TlConfig *cfg, uint64_t seed);

/**
 * # Safety
 * `cfg` must be null or come from a `tl_config_*` constructor, and is
 * invalid afterwards.
 */
void tl_config_free(struct TlConfig *cfg);

/**
 * Tool pose in the base frame for `n` joint values.
 *
 * # Safety
 * `joints` must point to `n` doubles and `out` to a writable pose.
 */
enum TlStatus tl_forward_kinematics(const struct TlConfig *cfg,
                                    const double *joints,
                                    size_t n,
                                    struct TlPose *out);

/**
 * Overlay opacity for the commanded tool position now and the delayed
 * measured one, using the config's opacity parameters.
 *
 * # Safety
 * `p_now` and `p_delayed` must point to 3 doubles, `out` to one.
 */
enum TlStatus tl_opacity(const struct TlConfig *cfg,
                         const double (*p_now)[3],
                         const double (*p_delayed)[3],
                         double *out);

/**
 * Hand-eye calibration of the left camera from a checkerboard dataset (CSV).
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable struct.
 */
enum TlStatus tl_calibrate(const struct TlConfig *cfg, const char *path, struct TlCalibration *out);

/**
 * A simulation of the configured scenario, driven by its trajectory.
 *
 * # Safety
 * `cfg` must be valid and `out` a valid pointer.
 */
enum TlStatus tl_sim_new(const struct TlConfig *cfg, struct TlSimulation **out);

/**
 * # Safety
 * `sim` must be null or come from `tl_sim_new`, and is invalid afterwards.
 */
void tl_sim_free(struct TlSimulation *sim);

/**
 * Index of the next sample to be stepped.
 *
 * # Safety
 * `sim` must be null or valid; null gives 0.
 */
uint64_t tl_sim_sample(const struct TlSimulation *sim);

/**
 * # Safety
 * `sim` must be null or valid; null gives 0.
 */
size_t tl_sim_arm_count(const struct TlSimulation *sim);

/**
 * Advances one sample and writes one record per arm into `out`.
 * `cap` smaller than the arm count gives `BufferTooSmall` before stepping.
 *
 * # Safety
 * `out` must point to `cap` writable records; `written` may be null.
 */
enum TlStatus tl_sim_step(struct TlSimulation *sim,
                          struct TlArmSample *out,
                          size_t cap,
                          size_t *written);

/**
 * Live master input: a position delta in master meters and the clutch.
 * Takes effect only with the `Live` source.
 *
 * # Safety
 * `sim` must be valid.
 */
enum TlStatus tl_sim_input(struct TlSimulation *sim,
                           uint32_t arm,
                           double dx,
                           double dy,
                           double dz,
                           bool engaged);

/**
 * Changes the round-trip delay; commands and feedback in flight are dropped.
 *
 * # Safety
 * `sim` must be valid.
 */
enum TlStatus tl_sim_set_delay(struct TlSimulation *sim, double round_trip);

/**
 * Shows or hides the predictive overlay.
 *
 * # Safety
 * `sim` must be valid.
 */
enum TlStatus tl_sim_set_overlay(struct TlSimulation *sim, bool enabled);

/**
 * # Safety
 * `sim` must be valid.
 */
enum TlStatus tl_sim_set_source(struct TlSimulation *sim, enum TlSource source);

/**
 * Applies one console message (a JSON `input` or `control` line of the
 * wire protocol) before the next step.
 *
 * # Safety
 * `sim` must be valid and `line` a NUL-terminated string.
 */
enum TlStatus tl_sim_apply_message(struct TlSimulation *sim, const char *line);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TELELENS_H */
