#ifndef COVREN_H
#define COVREN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CovrenStatus {
  COVREN_STATUS_OK = 0,
  COVREN_STATUS_NULL_POINTER = 1,
  COVREN_STATUS_INVALID_ARGUMENT = 2,
  COVREN_STATUS_IO = 3,
  COVREN_STATUS_FORMAT = 4,
  COVREN_STATUS_DOMAIN = 5,
  COVREN_STATUS_BUFFER_TOO_SMALL = 6,
  COVREN_STATUS_PANIC = 7,
} CovrenStatus;

/**
 * Triangle mesh handle.
 */
typedef struct CovrenMesh CovrenMesh;

/**
 * Scene handle: posed volumes plus the cameras of the scene file.
 */
typedef struct CovrenScene CovrenScene;

/**
 * Object volume handle.
 */
typedef struct CovrenVolume CovrenVolume;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next covren call on this thread.
 */
const char *covren_last_error_message(void);

/**
 * # Safety
 * `path` must be a nul-terminated string; `out` must be writable.
 */
enum CovrenStatus covren_volume_load(const char *path, struct CovrenVolume **out);

/**
 * # Safety
 * `volume` must be a live handle; `path` a nul-terminated string.
 */
enum CovrenStatus covren_volume_save(const struct CovrenVolume *volume, const char *path);

/**
 * Grid size as depth, height, width.
 *
 * # Safety
 * `volume` must be a live handle; outputs must be writable.
 */
enum CovrenStatus covren_volume_dims(const struct CovrenVolume *volume,
                                     size_t *d,
                                     size_t *h,
                                     size_t *w);

/**
 * Trilinear sample at an object-frame point; zero outside the bounds.
 *
 * # Safety
 * `volume` must be a live handle; `point` must hold 3 values and `rgb` room for 3.
 */
enum CovrenStatus covren_volume_sample(const struct CovrenVolume *volume,
                                       const double *point,
                                       double *density,
                                       double *rgb);

/**
 * # Safety
 * `volume` must be null or a handle not yet freed.
 */
void covren_volume_free(struct CovrenVolume *volume);

/**
 * Load a scene JSON file and its volumes.
 *
 * # Safety
 * `path` must be a nul-terminated string; `out` must be writable.
 */
enum CovrenStatus covren_scene_load(const char *path, struct CovrenScene **out);

/**
 * # Safety
 * `scene` must be a live handle; outputs must be writable.
 */
enum CovrenStatus covren_scene_counts(const struct CovrenScene *scene,
                                      size_t *objects,
                                      size_t *cameras);

/**
 * Image size of camera `camera`.
 *
 * # Safety
 * `scene` must be a live handle; outputs must be writable.
 */
enum CovrenStatus covren_scene_camera_size(const struct CovrenScene *scene,
                                           size_t camera,
                                           uint32_t *width,
                                           uint32_t *height);

/**
 * Render camera `camera` into caller buffers: interleaved RGB (3·w·h),
 * camera-z depth (w·h) and opacity (w·h). `opacity` may be null.
 *
 * # Safety
 * `scene` must be a live handle; buffers must hold the stated lengths.
 */
enum CovrenStatus covren_scene_render(const struct CovrenScene *scene,
                                      size_t camera,
                                      size_t samples_per_object,
                                      uint64_t seed,
                                      float *rgb,
                                      size_t rgb_len,
                                      float *depth,
                                      size_t depth_len,
                                      float *opacity,
                                      size_t opacity_len);

/**
 * # Safety
 * `scene` must be null or a handle not yet freed.
 */
void covren_scene_free(struct CovrenScene *scene);

/**
 * PSNR of two interleaved RGB images in [0, 1]; +infinity when identical.
 *
 * # Safety
 * `prediction` and `reference` must each hold 3·width·height values.
 */
enum CovrenStatus covren_psnr(const float *prediction,
                              const float *reference,
                              size_t width,
                              size_t height,
                              double *out);

/**
 * SSIM (11×11 Gaussian window, σ = 1.5) of two interleaved RGB images.
 *
 * # Safety
 * `prediction` and `reference` must each hold 3·width·height values.
 */
enum CovrenStatus covren_ssim(const float *prediction,
                              const float *reference,
                              size_t width,
                              size_t height,
                              double *out);

/**
 * Occupancy isosurface (density fallback 1.0) of a volume.
 *
 * # Safety
 * `volume` must be a live handle; `out` must be writable.
 */
enum CovrenStatus covren_mesh_extract(const struct CovrenVolume *volume,
                                      double iso,
                                      struct CovrenMesh **out);

/**
 * # Safety
 * `mesh` must be a live handle; outputs must be writable.
 */
enum CovrenStatus covren_mesh_counts(const struct CovrenMesh *mesh,
                                     size_t *vertices,
                                     size_t *triangles);

/**
 * Copy vertex positions (3 per vertex) and triangle indices (3 per triangle).
 *
 * # Safety
 * `mesh` must be a live handle; buffers must hold the stated lengths.
 */
enum CovrenStatus covren_mesh_copy(const struct CovrenMesh *mesh,
                                   double *vertices,
                                   size_t vertices_len,
                                   uint32_t *triangles,
                                   size_t triangles_len);

/**
 * # Safety
 * `mesh` must be a live handle; `path` a nul-terminated string.
 */
enum CovrenStatus covren_mesh_write_obj(const struct CovrenMesh *mesh, const char *path);

/**
 * # Safety
 * `mesh` must be null or a handle not yet freed.
 */
void covren_mesh_free(struct CovrenMesh *mesh);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* COVREN_H */
