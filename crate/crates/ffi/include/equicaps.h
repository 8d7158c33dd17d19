#ifndef EQUICAPS_H
#define EQUICAPS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result code of every fallible call.
 */
typedef enum EqStatus {
  EQ_STATUS_OK = 0,
  EQ_STATUS_NULL_POINTER = 1,
  EQ_STATUS_DOMAIN = 2,
  EQ_STATUS_SHAPE = 3,
  EQ_STATUS_INVALID_ARGUMENT = 4,
  EQ_STATUS_DEGENERATE = 5,
  EQ_STATUS_NON_FINITE = 6,
  EQ_STATUS_CONFIG = 7,
  EQ_STATUS_FORMAT = 8,
  EQ_STATUS_IO = 9,
  EQ_STATUS_PANIC = 10,
} EqStatus;

/*
 Frozen encoder and capsule projector.
 */
typedef struct EqModel EqModel;

/*
 Rigid transform in SE(3).
 */
typedef struct EqTransform EqTransform;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Library version as a static NUL-terminated string.
 */
const char *eq_version(void);

/*
 Message of the last failed call on this thread, or null if none. The
 pointer stays valid until the next failing call on the same thread.
 */
const char *eq_last_error_message(void);

/*
 Builds `[R | t]` from Tait–Bryan angles in radians (`R = Rz·Ry·Rx`) and a
 translation.

 # Safety
 `out` must be a valid pointer to writable storage for one handle.
 */
enum EqStatus eq_transform_new(double rx,
                               double ry,
                               double rz,
                               double tx,
                               double ty,
                               double tz,
                               struct EqTransform **out);

/*
 Releases a transform; null is ignored.

 # Safety
 `t` must be null or a handle from this library that was not yet freed.
 */
void eq_transform_free(struct EqTransform *t);

/*
 `out = a ∘ b` (apply `b` first).

 # Safety
 `a` and `b` must be live handles and `out` writable.
 */
enum EqStatus eq_transform_compose(const struct EqTransform *a,
                                   const struct EqTransform *b,
                                   struct EqTransform **out);

/*
 # Safety
 `t` must be a live handle and `out` writable.
 */
enum EqStatus eq_transform_inverse(const struct EqTransform *t, struct EqTransform **out);

/*
 `out = g2 ∘ g1⁻¹`, the transform taking view 1 to view 2.

 # Safety
 `g1` and `g2` must be live handles and `out` writable.
 */
enum EqStatus eq_transform_relative(const struct EqTransform *g1,
                                    const struct EqTransform *g2,
                                    struct EqTransform **out);

/*
 Homogeneous 4×4 matrix, row-major, into `out[16]`.

 # Safety
 `t` must be a live handle and `out` point to 16 writable doubles.
 */
enum EqStatus eq_transform_matrix(const struct EqTransform *t, double *out);

/*
 Representation matrix acting on capsule poses from the right, row-major.

 # Safety
 `t` must be a live handle and `out` point to 16 writable doubles.
 */
enum EqStatus eq_transform_representation(const struct EqTransform *t, double *out);

/*
 Unit quaternion `(w, x, y, z)` with `w ≥ 0`.

 # Safety
 `t` must be a live handle and `out` point to 4 writable doubles.
 */
enum EqStatus eq_transform_quaternion(const struct EqTransform *t, double *out);

/*
 Applies `t` to the poses of one embedding (`capsules × 16` values) and
 renormalizes every capsule, writing `capsules × 16` values to `out`.

 # Safety
 `poses` and `out` must each hold `capsules * 16` doubles; `t` must be live.
 */
enum EqStatus eq_predict_poses(const double *poses,
                               size_t capsules,
                               const struct EqTransform *t,
                               double *out);

/*
 Loads a checkpoint (`encoder.*` and `projector.*` tensors) with the model
 section of a training configuration file (JSON or TOML).

 # Safety
 Paths must be NUL-terminated UTF-8; `out` must be writable.
 */
enum EqStatus eq_model_load(const char *checkpoint, const char *config, struct EqModel **out);

/*
 Releases a model; null is ignored.

 # Safety
 `m` must be null or a live handle from [`eq_model_load`].
 */
void eq_model_free(struct EqModel *m);

/*
 Expected input resolution (images are `res × res × 3` bytes).

 # Safety
 `m` must be a live handle.
 */
size_t eq_model_resolution(const struct EqModel *m);

/*
 Width of the pooled representation.

 # Safety
 `m` must be a live handle.
 */
size_t eq_model_representation_dim(const struct EqModel *m);

/*
 Number of output capsules.

 # Safety
 `m` must be a live handle.
 */
size_t eq_model_capsules(const struct EqModel *m);

/*
 Runs `count` interleaved RGB images through the model. Any output pointer
 may be null to skip it; otherwise `representation` holds
 `count × representation_dim` floats, `activations` `count × capsules` and
 `poses` `count × capsules × 16` (raw, not normalized).

 # Safety
 `images` must hold `count × res × res × 3` bytes and every non-null output
 must have the documented length.
 */
enum EqStatus eq_model_forward(const struct EqModel *m,
                               const uint8_t *images,
                               size_t count,
                               float *representation,
                               float *activations,
                               float *poses);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EQUICAPS_H */
