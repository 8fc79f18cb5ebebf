#ifndef DVS_H
#define DVS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DvsStatus {
  DVS_STATUS_OK = 0,
  DVS_STATUS_NULL_POINTER = 1,
  DVS_STATUS_INVALID_ARGUMENT = 2,
  DVS_STATUS_IO = 3,
  DVS_STATUS_CONFIG = 4,
  DVS_STATUS_RUNTIME = 5,
  DVS_STATUS_PANIC = 6,
} DvsStatus;

/**
 * A trained regressor.
 */
typedef struct DvsNetwork DvsNetwork;

/**
 * A target plane with the robot and camera that view it.
 */
typedef struct DvsScene DvsScene;

/**
 * A closed-loop experiment: a scene, a network and servo settings.
 */
typedef struct DvsServo DvsServo;

/**
 * Outcome of one `dvs_servo_run`.
 */
typedef struct DvsServoResult {
  /**
   * 1 when the loop converged, else 0.
   */
  int32_t converged;
  size_t iterations;
  double final_q1_mm;
  double final_q2_mm;
  double initial_sad;
  double final_sad;
} DvsServoResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent failure on this thread. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *dvs_last_error_message(void);

/**
 * Tip pose for tendon displacements in mm. Writes a row-major 3x3 rotation
 * into `rotation` and the translation in metres into `translation`.
 *
 * # Safety
 * `rotation` points to 9 writable doubles and `translation` to 3.
 */
enum DvsStatus dvs_forward_kinematics(double q1_mm,
                                      double q2_mm,
                                      double backbone_length_m,
                                      double tendon_offset_m,
                                      double *rotation,
                                      double *translation);

/**
 * Point `x` (1-based) of a `samples`-point spiral.
 *
 * # Safety
 * `q1_mm` and `q2_mm` are writable.
 */
enum DvsStatus dvs_spiral_point(double amplitude_mm,
                                double periods,
                                size_t samples,
                                size_t x,
                                double *q1_mm,
                                double *q2_mm);

/**
 * Training label `tanh(beta * q)` per component.
 *
 * # Safety
 * `labels` points to 2 writable doubles.
 */
enum DvsStatus dvs_label(double q1_mm, double q2_mm, double beta, double *labels);

/**
 * Sum of absolute differences of two normalised RGB images of
 * `width x height` pixels, row-major, values in [0, 1].
 *
 * # Safety
 * `a` and `b` each point to `width * height * 3` readable floats.
 */
enum DvsStatus dvs_sad(const float *a, const float *b, size_t width, size_t height, double *out);

/**
 * Builds a scene from run-config text (`scene.*`, `robot.*`, `camera.*`
 * and `seed` keys).
 *
 * # Safety
 * `config_text` is null or NUL-terminated; `out` is writable.
 */
enum DvsStatus dvs_scene_new(const char *config_text, struct DvsScene **out);

/**
 * # Safety
 * `scene` is null or a handle from `dvs_scene_new` not yet freed.
 */
void dvs_scene_free(struct DvsScene *scene);

/**
 * Rendered frame size in pixels.
 *
 * # Safety
 * `scene` is a live handle; `width` and `height` are writable.
 */
enum DvsStatus dvs_scene_frame_size(const struct DvsScene *scene, size_t *width, size_t *height);

/**
 * Renders the view at `q` into `rgb`, row-major RGB in [0, 1]. `len` must
 * equal `width * height * 3` from `dvs_scene_frame_size`.
 *
 * # Safety
 * `scene` is a live handle; `rgb` points to `len` writable floats.
 */
enum DvsStatus dvs_scene_render(const struct DvsScene *scene,
                                double q1_mm,
                                double q2_mm,
                                float *rgb,
                                size_t len);

/**
 * Loads a checkpoint for the network described by `config_text`
 * (`net.*` keys).
 *
 * # Safety
 * `config_text` is null or NUL-terminated; `checkpoint_path` is
 * NUL-terminated; `out` is writable.
 */
enum DvsStatus dvs_network_load(const char *config_text,
                                const char *checkpoint_path,
                                struct DvsNetwork **out);

/**
 * # Safety
 * `network` is null or a handle from `dvs_network_load` not yet freed.
 */
void dvs_network_free(struct DvsNetwork *network);

/**
 * Network output for an RGB frame of any size; the frame is resized to
 * the network input first.
 *
 * # Safety
 * `network` is a live handle; `rgb` points to `width * height * 3`
 * readable floats; `output` to 2 writable doubles.
 */
enum DvsStatus dvs_network_predict(const struct DvsNetwork *network,
                                   const float *rgb,
                                   size_t width,
                                   size_t height,
                                   double *output);

/**
 * Combines copies of `scene` and `network` with the `servo.*` and
 * `perturb.*` keys of `config_text`.
 *
 * # Safety
 * `scene` and `network` are live handles; `config_text` is null or
 * NUL-terminated; `out` is writable.
 */
enum DvsStatus dvs_servo_new(const struct DvsScene *scene,
                             const struct DvsNetwork *network,
                             const char *config_text,
                             struct DvsServo **out);

/**
 * # Safety
 * `servo` is null or a handle from `dvs_servo_new` not yet freed.
 */
void dvs_servo_free(struct DvsServo *servo);

/**
 * Runs the loop from `q` using the `(seed, "servo", run)` random stream.
 *
 * # Safety
 * `servo` is a live handle; `result` is writable.
 */
enum DvsStatus dvs_servo_run(const struct DvsServo *servo,
                             double q1_mm,
                             double q2_mm,
                             uint64_t seed,
                             uint64_t run,
                             struct DvsServoResult *result);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DVS_H */
