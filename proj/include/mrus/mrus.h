/* C interface of the mrus shared library. Every call returns an mrus_status;
 * on failure mrus_last_error() and mrus_last_stage() describe the error for
 * the calling thread until its next mrus call. */
#ifndef MRUS_MRUS_H
#define MRUS_MRUS_H

#include <stddef.h>

#if defined(MRUS_BUILDING_LIBRARY)
#define MRUS_API __attribute__((visibility("default")))
#else
#define MRUS_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

/* Values 1..13 equal the C++ mrus::ErrorCode values. */
typedef enum mrus_status {
  MRUS_OK = 0,
  MRUS_ERR_INVALID_ARGUMENT = 1,
  MRUS_ERR_FRAME_MISMATCH = 2,
  MRUS_ERR_IO = 3,
  MRUS_ERR_CONFIG = 4,
  MRUS_ERR_EMPTY_INPUT = 5,
  MRUS_ERR_DEGENERATE = 6,
  MRUS_ERR_INSUFFICIENT_DATA = 7,
  MRUS_ERR_NO_CORRESPONDENCES = 8,
  MRUS_ERR_NO_OVERLAP = 9,
  MRUS_ERR_OUT_OF_BOUNDS = 10,
  MRUS_ERR_TIMEOUT = 11,
  MRUS_ERR_MALFORMED = 12,
  MRUS_ERR_ABORTED = 13,
  MRUS_ERR_INTERNAL = 100
} mrus_status;

typedef enum mrus_stage {
  MRUS_STAGE_NONE = 0,
  MRUS_STAGE_CONFIG,
  MRUS_STAGE_PHANTOM,
  MRUS_STAGE_CALIBRATE,
  MRUS_STAGE_PLAN,
  MRUS_STAGE_SWEEP,
  MRUS_STAGE_REGISTER,
  MRUS_STAGE_UPDATE,
  MRUS_STAGE_TOUCH,
  MRUS_STAGE_REPORT
} mrus_stage;

typedef struct mrus_config mrus_config;
typedef struct mrus_metrics mrus_metrics;

typedef struct mrus_touch_stats {
  double xy_mean, xy_std;
  double z_mean, z_std;
  int samples;
} mrus_touch_stats;

/* Progress messages; may be NULL. */
typedef void (*mrus_log_fn)(const char* message, void* user);

MRUS_API const char* mrus_version(void);
MRUS_API const char* mrus_status_name(mrus_status status);
MRUS_API const char* mrus_stage_name(mrus_stage stage);
MRUS_API const char* mrus_last_error(void);
MRUS_API mrus_stage mrus_last_stage(void);

/* A NULL path or text gives the built-in default configuration. */
MRUS_API mrus_status mrus_config_load(const char* path, mrus_config** out);
MRUS_API mrus_status mrus_config_parse(const char* json_text, const char* base_dir,
                                       mrus_config** out);
MRUS_API void mrus_config_free(mrus_config* config);
MRUS_API mrus_status mrus_config_set_seed(mrus_config* config, unsigned long long seed);
MRUS_API mrus_status mrus_config_set_output_dir(mrus_config* config, const char* dir);
MRUS_API mrus_status mrus_config_set_write_volumes(mrus_config* config, int enabled);

/* Full closed loop; `out` may be NULL when only the files on disk matter. */
MRUS_API mrus_status mrus_run_pipeline(const mrus_config* config, mrus_log_fn log, void* user,
                                       mrus_metrics** out);
/* One of: phantom, calibrate, plan, sweep, register, update. */
MRUS_API mrus_status mrus_run_stage(const mrus_config* config, const char* stage,
                                    mrus_log_fn log, void* user);
MRUS_API mrus_status mrus_touch_accuracy(const mrus_config* config, mrus_log_fn log, void* user,
                                         mrus_touch_stats* out);

MRUS_API mrus_status mrus_metrics_read(const char* path, mrus_metrics** out);
MRUS_API void mrus_metrics_free(mrus_metrics* metrics);
MRUS_API size_t mrus_metrics_count(const mrus_metrics* metrics);
/* Key of entry i, or NULL when out of range. Owned by `metrics`. */
MRUS_API const char* mrus_metrics_key(const mrus_metrics* metrics, size_t i);
MRUS_API mrus_status mrus_metrics_get(const mrus_metrics* metrics, const char* key, double* out);

/* Aggregates metrics files into the scan table. Both strings are
 * heap-allocated; release them with mrus_string_free. */
MRUS_API mrus_status mrus_report(const char* const* paths, size_t count, char** text,
                                 char** json);
MRUS_API void mrus_string_free(char* s);

#ifdef __cplusplus
}
#endif

#endif /* MRUS_MRUS_H */
