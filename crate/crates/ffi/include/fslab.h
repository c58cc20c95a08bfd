#ifndef FSLAB_H
#define FSLAB_H

#include <stddef.h>
#include <stdint.h>

typedef enum FslabStatus {
  FSLAB_STATUS_OK = 0,
  FSLAB_STATUS_NULL_POINTER = 1,
  FSLAB_STATUS_INVALID_ARGUMENT = 2,
  FSLAB_STATUS_CONFIG = 3,
  FSLAB_STATUS_FORMAT = 4,
  FSLAB_STATUS_IO = 5,
  FSLAB_STATUS_INSUFFICIENT_DATA = 6,
  FSLAB_STATUS_INFEASIBLE_MIX = 7,
  FSLAB_STATUS_RUNTIME = 8,
  FSLAB_STATUS_PANIC = 9,
} FslabStatus;

typedef struct FslabConfig FslabConfig;

typedef struct FslabDataset FslabDataset;

typedef struct FslabModel FslabModel;

typedef struct FslabReport FslabReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message for the last failed call on this thread; empty after a success.
 Valid until the next fslab call on the same thread.
 */
const char *fslab_last_error(void);

/*
 # Safety
 `s` must come from an fslab function, or be null.
 */
void fslab_string_free(char *s);

/*
 Generates a synthetic preset (`source-a`, `target-shifted`,
 `target-near`). `height`/`width` of 0 keep the preset size.

 # Safety
 `preset` must be a NUL-terminated string; `out` a valid pointer.
 */
enum FslabStatus fslab_dataset_generate(const char *preset,
                                        uint64_t seed,
                                        uintptr_t height,
                                        uintptr_t width,
                                        struct FslabDataset **out);

/*
 # Safety
 `path` must be a NUL-terminated string; `out` a valid pointer.
 */
enum FslabStatus fslab_dataset_load(const char *path, struct FslabDataset **out);

/*
 # Safety
 `ds` must be a live dataset handle; `path` a NUL-terminated string.
 */
enum FslabStatus fslab_dataset_save(const struct FslabDataset *ds, const char *path);

/*
 Number of examples; 0 for a null handle.

 # Safety
 `ds` must be a live dataset handle or null.
 */
uintptr_t fslab_dataset_len(const struct FslabDataset *ds);

/*
 # Safety
 `ds` must be a live dataset handle or null.
 */
uintptr_t fslab_dataset_n_classes(const struct FslabDataset *ds);

/*
 # Safety
 `ds` must come from fslab and not be used afterwards; null is ignored.
 */
void fslab_dataset_free(struct FslabDataset *ds);

/*
 Empty configuration holding the defaults.

 # Safety
 `out` must be a valid pointer.
 */
enum FslabStatus fslab_config_new(struct FslabConfig **out);

/*
 Configuration from `key = value` text (or a summary JSON) over the defaults.

 # Safety
 `text` must be a NUL-terminated string; `out` a valid pointer.
 */
enum FslabStatus fslab_config_parse(const char *text, struct FslabConfig **out);

/*
 # Safety
 `cfg` must be a live config handle; `key`, `value` NUL-terminated strings.
 */
enum FslabStatus fslab_config_set(struct FslabConfig *cfg, const char *key, const char *value);

/*
 # Safety
 `cfg` must come from fslab and not be used afterwards; null is ignored.
 */
void fslab_config_free(struct FslabConfig *cfg);

/*
 # Safety
 `path` must be a NUL-terminated string; `out` a valid pointer.
 */
enum FslabStatus fslab_model_load(const char *path, struct FslabModel **out);

/*
 # Safety
 `model` must be a live model handle; `path` a NUL-terminated string.
 */
enum FslabStatus fslab_model_save(const struct FslabModel *model, const char *path);

/*
 Pre-trains on `source` with the `model.*`, `pretrain.*` and `run.seed`
 keys of `cfg`.

 # Safety
 Handles must be live; `out` a valid pointer.
 */
enum FslabStatus fslab_model_pretrain(const struct FslabConfig *cfg,
                                      const struct FslabDataset *source,
                                      struct FslabModel **out);

/*
 # Safety
 `model` must come from fslab and not be used afterwards; null is ignored.
 */
void fslab_model_free(struct FslabModel *model);

/*
 Runs the configured experiment on `target` starting from `model`'s
 extractor. Output is identical for every `workers >= 1`.

 # Safety
 Handles must be live; `out` a valid pointer.
 */
enum FslabStatus fslab_run(const struct FslabConfig *cfg,
                           const struct FslabDataset *target,
                           const struct FslabModel *model,
                           uintptr_t workers,
                           struct FslabReport **out);

/*
 # Safety
 `r` must be a live report handle or null (NaN).
 */
double fslab_report_mean(const struct FslabReport *r);

/*
 # Safety
 `r` must be a live report handle or null (NaN).
 */
double fslab_report_ci95(const struct FslabReport *r);

/*
 # Safety
 `r` must be a live report handle or null (0).
 */
uintptr_t fslab_report_episodes(const struct FslabReport *r);

/*
 Per-episode CSV; free with [`fslab_string_free`].

 # Safety
 `r` must be a live report handle; `out` a valid pointer.
 */
enum FslabStatus fslab_report_csv(const struct FslabReport *r, char **out);

/*
 Summary JSON; free with [`fslab_string_free`].

 # Safety
 `r` must be a live report handle; `out` a valid pointer.
 */
enum FslabStatus fslab_report_json(const struct FslabReport *r, char **out);

/*
 # Safety
 `r` must come from fslab and not be used afterwards; null is ignored.
 */
void fslab_report_free(struct FslabReport *r);

/*
 Intensity CSV for the `intensity.*` keys of `cfg`, subset drawn from
 `source`; free with [`fslab_string_free`].

 # Safety
 Handles must be live; `out` a valid pointer.
 */
enum FslabStatus fslab_intensity(const struct FslabConfig *cfg,
                                 const struct FslabDataset *source,
                                 const struct FslabModel *model,
                                 char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FSLAB_H */
