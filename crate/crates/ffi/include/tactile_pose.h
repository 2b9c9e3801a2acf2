#ifndef TACTILE_POSE_H
#define TACTILE_POSE_H

/* Generated with cbindgen:0.29.4 */

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TpObjectType {
  // Three components: depth, roll, pitch.
  TP_OBJECT_TYPE_SURFACE = 0,
  // Five components: x, depth, roll, pitch, yaw.
  TP_OBJECT_TYPE_EDGE = 1,
} TpObjectType;

// Result code of every fallible call.
typedef enum TpStatus {
  TP_STATUS_OK = 0,
  TP_STATUS_NULL_POINTER = 1,
  TP_STATUS_INVALID_ARGUMENT = 2,
  TP_STATUS_BUFFER_TOO_SMALL = 3,
  TP_STATUS_IO = 4,
  TP_STATUS_MODEL = 5,
  TP_STATUS_SIMULATION = 6,
  TP_STATUS_NO_CONTACT = 7,
  TP_STATUS_PANIC = 8,
} TpStatus;

typedef enum TpDemoObject {
  TP_DEMO_OBJECT_PLANE = 0,
  TP_DEMO_OBJECT_SPHERE = 1,
  TP_DEMO_OBJECT_BUMP = 2,
  TP_DEMO_OBJECT_EDGE = 3,
  TP_DEMO_OBJECT_CONTOUR = 4,
} TpDemoObject;

typedef enum TpServoOutcome {
  TP_SERVO_OUTCOME_COMPLETED = 0,
  TP_SERVO_OUTCOME_CONTACT_LOST = 1,
  TP_SERVO_OUTCOME_FAILED = 2,
} TpServoOutcome;

// PI controller with its integral state.
typedef struct TpPiController TpPiController;

// Trained pose network.
typedef struct TpPoseNet TpPoseNet;

// Tactile sensor simulator.
typedef struct TpSimulator TpSimulator;

// Summary of a servo run.
typedef struct TpServoSummary {
  enum TpServoOutcome outcome;
  // Steps recorded before the run ended.
  size_t steps;
  // Mean |depth - reference| over in-contact steps, NaN if none.
  double mean_depth_error_mm;
  // Largest angle between sensor axis and surface normal, in degrees.
  double max_alignment_deg;
} TpServoSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread, or NULL if none. The
// pointer stays valid until the next failing call on this thread.
const char *tp_last_error(void);

// Library version as a static NUL-terminated string.
const char *tp_version(void);

// Number of pose components for `object_type`.
size_t tp_pose_len(enum TpObjectType object_type);

// Create a simulator of the default sensor imaged at `image_size` pixels.
//
// # Safety
// `out` must be a valid pointer to writable storage for one handle.
enum TpStatus tp_simulator_new(size_t image_size, struct TpSimulator **out);

// Create a simulator from a JSON config file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum TpStatus tp_simulator_from_config(const char *path, struct TpSimulator **out);

// Release a simulator. NULL is ignored.
//
// # Safety
// `sim` must be NULL or a handle from `tp_simulator_new` not yet freed.
void tp_simulator_free(struct TpSimulator *sim);

// Image side length in pixels; the image has `size * size` bytes.
//
// # Safety
// `sim` must be a live handle and `out` a valid pointer.
enum TpStatus tp_simulator_image_size(const struct TpSimulator *sim, size_t *out);

// Render the tactile image of the labelled `pose` (length
// `tp_pose_len(object_type)`) against the standard collection object,
// after a shear `perturbation` of six values (dx, dy, d_depth, d_roll,
// d_pitch, d_yaw) or NULL for none. Pixels are 0 (background) or 1
// (marker), row-major.
//
// # Safety
// Pointers must reference buffers of the stated lengths.
enum TpStatus tp_simulator_capture(const struct TpSimulator *sim,
                                   enum TpObjectType object_type,
                                   const double *pose,
                                   size_t pose_len,
                                   const double *perturbation,
                                   uint8_t *pixels,
                                   size_t pixels_len);

// Load a pose network checkpoint.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum TpStatus tp_posenet_load(const char *path, struct TpPoseNet **out);

// Release a network. NULL is ignored.
//
// # Safety
// `net` must be NULL or a live handle from `tp_posenet_load`.
void tp_posenet_free(struct TpPoseNet *net);

// Object type, output count and expected image size of a network. Any
// output pointer may be NULL.
//
// # Safety
// `net` must be a live handle; non-null outputs must be valid.
enum TpStatus tp_posenet_info(const struct TpPoseNet *net,
                              enum TpObjectType *object_type,
                              size_t *n_outputs,
                              size_t *image_size);

// Predict the pose (physical units) of one image of `size * size` bytes,
// where any nonzero byte is a marker pixel.
//
// # Safety
// Pointers must reference buffers of the stated lengths.
enum TpStatus tp_posenet_predict(const struct TpPoseNet *net,
                                 const uint8_t *pixels,
                                 size_t pixels_len,
                                 double *pose_out,
                                 size_t pose_len);

// Create a PI controller over `n` components with gains `kp` and `ki`.
//
// # Safety
// `kp` and `ki` must point to `n` values and `out` must be valid.
enum TpStatus tp_pi_new(size_t n, const double *kp, const double *ki, struct TpPiController **out);

// Default gains of the servo controller for `object_type`, written to
// `kp` and `ki` (each `tp_pose_len(object_type)` long).
//
// # Safety
// `kp` and `ki` must point to `len` writable values.
enum TpStatus tp_pi_default_gains(enum TpObjectType object_type,
                                  double *kp,
                                  double *ki,
                                  size_t len);

// One control update: `delta = kp e + ki (sum of errors so far, including
// this one)`.
//
// # Safety
// `error` and `delta` must point to `n` values, `n` matching the
// controller.
enum TpStatus tp_pi_step(struct TpPiController *ctrl, const double *error, double *delta, size_t n);

// Zero the integral state.
//
// # Safety
// `ctrl` must be a live handle.
enum TpStatus tp_pi_reset(struct TpPiController *ctrl);

// Release a controller. NULL is ignored.
//
// # Safety
// `ctrl` must be NULL or a live handle from `tp_pi_new`.
void tp_pi_free(struct TpPiController *ctrl);

// Run the servo loop on a demonstration object for `steps` steps, driven
// by `net` or, when `net` is NULL, by ground truth. Images are rendered
// by `sim`. Contact loss is reported through `summary.outcome`, not as an
// error status.
//
// # Safety
// `sim` must be a live handle, `net` NULL or live, `summary` valid.
enum TpStatus tp_servo_run(const struct TpSimulator *sim,
                           struct TpPoseNet *net,
                           enum TpDemoObject object,
                           size_t steps,
                           struct TpServoSummary *summary);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TACTILE_POSE_H */
