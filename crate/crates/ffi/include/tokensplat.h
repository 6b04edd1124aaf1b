#ifndef TOKENSPLAT_H
#define TOKENSPLAT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TsStatus {
  TS_STATUS_OK = 0,
  TS_STATUS_NULL_POINTER = 1,
  TS_STATUS_INVALID_ARGUMENT = 2,
  TS_STATUS_IO = 3,
  TS_STATUS_FORMAT = 4,
  TS_STATUS_NUMERIC = 5,
  TS_STATUS_PANIC = 6,
} TsStatus;

/**
 * Trained model handle.
 */
typedef struct TsModel TsModel;

/**
 * Gaussian scene handle.
 */
typedef struct TsScene TsScene;

/**
 * Pinhole camera. `rotation` is world-from-camera, row-major; camera axes
 * are x right, y down, z forward.
 */
typedef struct TsCamera {
  double rotation[9];
  double center[3];
  double fx;
  double fy;
  double cx;
  double cy;
  size_t width;
  size_t height;
} TsCamera;

/**
 * One Gaussian in merge parameters (log scales, 6D rotation, opacity).
 */
typedef struct TsGaussian {
  double mean[3];
  double log_scale[3];
  double rot6d[6];
  double opacity;
  double sh[48];
} TsGaussian;

/**
 * One posed input image; `rgb` holds `width·height·3` values in [0, 1], row-major.
 */
typedef struct TsView {
  struct TsCamera camera;
  const double *rgb;
} TsView;

/**
 * Similarity mapping canonical points to world: `R·(s·p) + c`, `R` row-major.
 */
typedef struct TsSimilarity {
  double rotation[9];
  double center[3];
  double scale;
} TsSimilarity;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the message of the last failure on this thread into `buf` (NUL
 * terminated, truncated to `len`) and returns the full message length
 * without the terminator. `buf` may be null to query the length.
 */
size_t ts_last_error(char *buf, size_t len);

/**
 * Static NUL-terminated version string.
 */
const char *ts_version(void);

enum TsStatus ts_scene_new(struct TsScene **out);

void ts_scene_free(struct TsScene *scene);

/**
 * Number of Gaussians, 0 for a null handle.
 */
size_t ts_scene_len(const struct TsScene *scene);

/**
 * Appends a Gaussian. `rotation` is row-major, `sh` holds 48 channel-major coefficients.
 */
enum TsStatus ts_scene_push(struct TsScene *scene,
                            const double (*mean)[3],
                            const double (*scale)[3],
                            const double (*rotation)[9],
                            double opacity,
                            const double (*sh)[48]);

/**
 * Reads Gaussian `index`; any output pointer may be null.
 */
enum TsStatus ts_scene_get(const struct TsScene *scene,
                           size_t index,
                           double (*mean)[3],
                           double (*scale)[3],
                           double (*rotation)[9],
                           double *opacity,
                           double (*sh)[48]);

enum TsStatus ts_scene_read_ply(const char *path, struct TsScene **out);

/**
 * Writes the scene; `bytes_written` may be null.
 */
enum TsStatus ts_scene_write_ply(const struct TsScene *scene,
                                 const char *path,
                                 size_t *bytes_written);

/**
 * Renders `width·height` pixels. `rgb` needs `3·width·height` values;
 * `depth` and `alpha` (`width·height` each) and `background` (3) may be null.
 */
enum TsStatus ts_render(const struct TsScene *scene,
                        const struct TsCamera *cam,
                        const double (*background)[3],
                        double *rgb,
                        size_t rgb_len,
                        double *depth,
                        double *alpha);

/**
 * Temperature-scaled softmax of `n` gate logits into `weights`.
 */
enum TsStatus ts_gate_weights(const double *logits, size_t n, double tau, double *weights);

/**
 * Merges `n` Gaussians with weights summing to 1.
 */
enum TsStatus ts_merge_group(const struct TsGaussian *items,
                             const double *weights,
                             size_t n,
                             struct TsGaussian *out);

/**
 * Splits a parent into the two children written to `out[0]`, `out[1]`.
 */
enum TsStatus ts_split_parent(const struct TsGaussian *parent, struct TsGaussian *out);

enum TsStatus ts_model_load(const char *path, struct TsModel **out);

void ts_model_free(struct TsModel *model);

/**
 * Reconstructs a scene from `n` posed views at the model's final stage.
 * The scene lives in the canonical frame described by `frame` (may be
 * null); use [`ts_canonical_camera`] to render it from a world camera.
 */
enum TsStatus ts_model_reconstruct(const struct TsModel *model,
                                   const struct TsView *views,
                                   size_t n,
                                   struct TsScene **out,
                                   struct TsSimilarity *frame);

/**
 * Expresses a world camera in the canonical frame `frame`.
 */
enum TsStatus ts_canonical_camera(const struct TsSimilarity *frame,
                                  const struct TsCamera *world,
                                  struct TsCamera *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TOKENSPLAT_H */
