#ifndef LANDMARK_H
#define LANDMARK_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes. Values from 10 upward mirror the core error categories.
typedef enum LmkStatus {
  LMK_STATUS_OK = 0,
  LMK_STATUS_NULL_POINTER = 1,
  LMK_STATUS_INVALID_ARGUMENT = 2,
  LMK_STATUS_PANIC = 3,
  LMK_STATUS_GEOMETRY = 10,
  LMK_STATUS_CONFIG = 11,
  LMK_STATUS_ENCODING = 12,
  LMK_STATUS_VALIDATION = 13,
  LMK_STATUS_PREPROCESSING = 14,
  LMK_STATUS_CONTRACT = 15,
  LMK_STATUS_EVALUATION = 16,
  LMK_STATUS_CONVERSION = 17,
  LMK_STATUS_GENERATION = 18,
  LMK_STATUS_TRAINING = 19,
  LMK_STATUS_FORMAT = 20,
  LMK_STATUS_IO = 21,
  LMK_STATUS_JSON = 22,
} LmkStatus;

// Predicted landmarks for one case, with per-landmark confidence.
typedef struct LmkLandmarks LmkLandmarks;

// A loaded model (one or more checkpoints) with its plan.
typedef struct LmkModel LmkModel;

// A 3D image.
typedef struct LmkVolume LmkVolume;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *lmk_version(void);

// Length in bytes of the last error message on this thread, excluding the NUL; 0 if none.
size_t lmk_last_error_length(void);

// Copies the last error message into `buf` (NUL-terminated, truncated to `len - 1` bytes).
// Returns the number of bytes written excluding the NUL.
size_t lmk_last_error_message(char *buf, size_t len);

// Reads a `.nii`, `.nii.gz` or `.raw` volume.
enum LmkStatus lmk_volume_read(const char *path, struct LmkVolume **out);

// Builds a volume from x-fastest voxel data, spacing in mm and origin in mm (LPS),
// with identity direction.
enum LmkStatus lmk_volume_from_data(const float *data,
                                    const size_t *shape,
                                    const double *spacing,
                                    const double *origin,
                                    struct LmkVolume **out);

// Writes `shape[3]` (voxels) and `spacing[3]` (mm); either may be NULL.
enum LmkStatus lmk_volume_info(const struct LmkVolume *v, size_t *shape, double *spacing);

void lmk_volume_free(struct LmkVolume *v);

// Loads `plan.json` and `n` checkpoints whose predictions are averaged.
enum LmkStatus lmk_model_load(const char *plan_path,
                              const char *const *checkpoints,
                              size_t n,
                              struct LmkModel **out);

size_t lmk_model_class_count(const struct LmkModel *m);

void lmk_model_free(struct LmkModel *m);

// Preprocesses `image` with the model's plan, runs sliding-window inference and decodes one
// landmark per class.
enum LmkStatus lmk_predict(const struct LmkModel *m,
                           const struct LmkVolume *image,
                           const char *case_id,
                           struct LmkLandmarks **out);

size_t lmk_landmarks_count(const struct LmkLandmarks *l);

// Landmark `i`: world position in mm (LPS) and confidence; `confidence` may be NULL.
enum LmkStatus lmk_landmarks_get(const struct LmkLandmarks *l,
                                 size_t i,
                                 double *position_mm,
                                 double *confidence);

// Name of landmark `i`, valid until the handle is freed; NULL when out of range.
const char *lmk_landmarks_name(const struct LmkLandmarks *l, size_t i);

// Writes the landmarks in the JSON landmark-file schema.
enum LmkStatus lmk_landmarks_write_json(const struct LmkLandmarks *l, const char *path);

void lmk_landmarks_free(struct LmkLandmarks *l);

// Scores a prediction directory against ground truth. Writes the MRE, its standard
// deviation and one SDR percentage per threshold into `sdr_out[n_thresholds]`.
// Errors are in mm, or in voxels when `voxel_size > 0`.
enum LmkStatus lmk_evaluate_dirs(const char *gt_dir,
                                 const char *pred_dir,
                                 const double *thresholds,
                                 size_t n_thresholds,
                                 double voxel_size,
                                 double *mre_out,
                                 double *std_out,
                                 double *sdr_out);

// Generates a synthetic phantom dataset; the last `test_cases` cases go to the test split.
enum LmkStatus lmk_synth_generate(const char *out_dir,
                                  size_t n_cases,
                                  size_t test_cases,
                                  const size_t *shape,
                                  size_t class_count,
                                  uint64_t seed,
                                  double noise);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LANDMARK_H */
