#ifndef REID_H
#define REID_H

#include <stddef.h>
#include <stdint.h>

// Result codes shared by every function.
typedef enum ReidStatus {
  REID_STATUS_OK = 0,
  // A required pointer argument was null.
  REID_STATUS_NULL_ARGUMENT = 1,
  // Argument values are invalid (bad UTF-8, zero sizes, ...).
  REID_STATUS_INVALID_ARGUMENT = 2,
  // A buffer length does not match what the model needs.
  REID_STATUS_DIMENSION = 3,
  REID_STATUS_IO = 4,
  // The checkpoint is truncated or corrupt.
  REID_STATUS_INTEGRITY = 5,
  // The checkpoint was written by an unsupported format version.
  REID_STATUS_VERSION = 6,
  // The checkpoint does not fit the data it is applied to.
  REID_STATUS_INCOMPATIBLE = 7,
  // A query identity has no match in the gallery.
  REID_STATUS_PROTOCOL = 8,
  // Any other library error.
  REID_STATUS_FAILURE = 9,
  // A panic was caught at the boundary.
  REID_STATUS_PANIC = 10,
} ReidStatus;

// Opaque model handle.
typedef struct ReidModel ReidModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null after a
// successful call. Valid until the next call on the same thread.
const char *reid_last_error(void);

// Library version as a static NUL-terminated string.
const char *reid_version(void);

// Loads a checkpoint file. On success `*out` owns a new handle.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum ReidStatus reid_model_load(const char *path, struct ReidModel **out);

// Releases a handle. Null is ignored.
//
// # Safety
// `model` must be null or a handle not yet freed.
void reid_model_free(struct ReidModel *model);

// Length of one descriptor.
//
// # Safety
// `model` must be a live handle and `out` a valid pointer.
enum ReidStatus reid_model_descriptor_len(struct ReidModel *model, size_t *out);

// Input image height and width the model expects.
//
// # Safety
// `model` must be a live handle; `height` and `width` valid pointers.
enum ReidStatus reid_model_image_size(struct ReidModel *model, size_t *height, size_t *width);

// Number of attributes, which is also the number of attention maps.
//
// # Safety
// `model` must be a live handle and `out` a valid pointer.
enum ReidStatus reid_model_num_attributes(struct ReidModel *model, size_t *out);

// Extracts descriptors for `count` images into `out`, row-major
// `[count][descriptor_len]`. `images_len` and `out_len` are element counts.
//
// # Safety
// `images` must be valid for `images_len` reads and `out` for `out_len`
// writes.
enum ReidStatus reid_model_extract(struct ReidModel *model,
                                   const double *images,
                                   size_t images_len,
                                   size_t count,
                                   double *out,
                                   size_t out_len);

// Attention maps of one image, `[num_attributes][feature_height * feature_width]`
// in label order. `map_height` and `map_width` receive the grid size.
//
// # Safety
// `image` must be valid for `image_len` reads, `out` for `out_len`
// writes, and the size pointers valid.
enum ReidStatus reid_model_attention(struct ReidModel *model,
                                     const double *image,
                                     size_t image_len,
                                     double *out,
                                     size_t out_len,
                                     size_t *map_height,
                                     size_t *map_width);

// Squared Euclidean distance between two descriptors; smaller is a
// better match.
//
// # Safety
// `a` and `b` must be valid for `len` reads and `out` a valid pointer.
enum ReidStatus reid_matching_score(const double *a, const double *b, size_t len, double *out);

// Ranks a gallery for each query from a row-major `[num_queries][num_gallery]`
// distance matrix. Writes one CMC value per entry of `ranks` into
// `cmc_out` and the mean average precision into `map_out`.
//
// # Safety
// Every pointer must be valid for the element count implied by
// `num_queries`, `num_gallery` and `num_ranks`.
enum ReidStatus reid_evaluate(const double *scores,
                              size_t num_queries,
                              size_t num_gallery,
                              const size_t *query_ids,
                              const size_t *query_cameras,
                              const size_t *gallery_ids,
                              const size_t *gallery_cameras,
                              const size_t *ranks,
                              size_t num_ranks,
                              int exclude_same_camera,
                              double *cmc_out,
                              double *map_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* REID_H */
