#ifndef BIDET_BIDET_H
#define BIDET_BIDET_H

/* C interface to the bidet library: binarized one-stage detectors trained
 * with an information-bottleneck objective.
 *
 * Conventions
 *  - Every fallible call returns a bidet_status. On failure the message of
 *    the most recent error on the calling thread is available from
 *    bidet_last_error() until the next failing call on that thread.
 *  - Objects are opaque handles created by *_create / *_load and released by
 *    the matching *_destroy (NULL is accepted and ignored).
 *  - Text results are copied into caller buffers: pass buf = NULL or a short
 *    buffer to learn the required size (including the terminating NUL) via
 *    *needed; BIDET_ERR_BUFFER_TOO_SMALL is returned when it does not fit.
 *  - Handles are not synchronized; use one handle per thread or lock. */

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#  if defined(BIDET_BUILDING_LIBRARY)
#    define BIDET_API __declspec(dllexport)
#  else
#    define BIDET_API __declspec(dllimport)
#  endif
#else
#  define BIDET_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum bidet_status {
  BIDET_OK = 0,
  BIDET_ERR_INVALID_ARGUMENT = 1,
  BIDET_ERR_SHAPE_MISMATCH = 2,
  BIDET_ERR_IO = 3,
  BIDET_ERR_FORMAT = 4,
  BIDET_ERR_VERSION_MISMATCH = 5,
  BIDET_ERR_NUMERIC = 6,
  BIDET_ERR_MODE_MISMATCH = 7,
  BIDET_ERR_INTERNAL = 8,
  BIDET_ERR_BUFFER_TOO_SMALL = 9,
  BIDET_ERR_NULL_HANDLE = 10
} bidet_status;

/* Stable lower-case identifier of a status, e.g. "version_mismatch". */
BIDET_API const char* bidet_status_name(bidet_status status);
/* Message of the last failure on this thread ("" when none). */
BIDET_API const char* bidet_last_error(void);
BIDET_API const char* bidet_version(void);
/* Checkpoint format version written and accepted by this build. */
BIDET_API uint32_t bidet_checkpoint_version(void);

/* Receives progress lines (without trailing newline). */
typedef void (*bidet_log_fn)(const char* line, void* user);

/* ---- run configuration ------------------------------------------------ */

typedef struct bidet_config bidet_config;

BIDET_API bidet_status bidet_config_create(bidet_config** out);
/* Parses a `key = value` file; '#' starts a comment. */
BIDET_API bidet_status bidet_config_load(const char* path, bidet_config** out);
BIDET_API void bidet_config_destroy(bidet_config* config);
/* Dotted key such as "loss.beta"; unknown keys are rejected. */
BIDET_API bidet_status bidet_config_set(bidet_config* config, const char* key, const char* value);
BIDET_API bidet_status bidet_config_get(const bidet_config* config, const char* key, char* buf, size_t cap,
                                        size_t* needed);
/* Canonical `key = value` listing of every setting. */
BIDET_API bidet_status bidet_config_echo(const bidet_config* config, char* buf, size_t cap, size_t* needed);
/* Hash of the echo with output/resume locations blanked. */
BIDET_API bidet_status bidet_config_hash(const bidet_config* config, uint64_t* out);

/* ---- training --------------------------------------------------------- */

typedef struct bidet_train_summary {
  size_t epochs_run;   /* epochs completed in this call */
  size_t final_epoch;  /* absolute epoch index reached */
  double test_map;
  size_t test_fp;
  size_t test_fn;
  double test_ixf;
  double test_ify;
} bidet_train_summary;

/* Trains on data.train / data.test, writing config.txt, metrics.csv and
 * checkpoints into `out`. stop_after_epoch = 0 runs the full schedule.
 * summary and log may be NULL. */
BIDET_API bidet_status bidet_train(const bidet_config* config, size_t stop_after_epoch, bidet_train_summary* summary,
                                   bidet_log_fn log, void* user);

/* ---- models and inference --------------------------------------------- */

typedef struct bidet_model bidet_model;

typedef struct bidet_model_info {
  size_t height, width;
  size_t num_classes; /* foreground classes */
  size_t grid;
  size_t anchors_per_block;
  size_t parameters;
  int binarized;
  uint64_t epoch;
} bidet_model_info;

typedef struct bidet_detection {
  double x_min, y_min, x_max, y_max;
  double score;
  int class_id; /* 1..num_classes */
  size_t anchor_index;
} bidet_detection;

BIDET_API bidet_status bidet_model_load(const char* checkpoint_path, bidet_model** out);
BIDET_API void bidet_model_destroy(bidet_model* model);
BIDET_API bidet_status bidet_model_info_get(const bidet_model* model, bidet_model_info* out);

/* Detects objects in one CHW float image (values in [0,1]) after NMS,
 * keeping scores strictly above score_thresh. Up to `cap` detections are
 * written; *count receives the total (which may exceed cap). */
BIDET_API bidet_status bidet_detect(const bidet_model* model, const float* chw, size_t height, size_t width,
                                    int bitpacked, double score_thresh, double nms_iou, bidet_detection* out,
                                    size_t cap, size_t* count);
/* Same for a binary PPM (P6) file. */
BIDET_API bidet_status bidet_detect_ppm(const bidet_model* model, const char* ppm_path, int bitpacked,
                                        double score_thresh, double nms_iou, bidet_detection* out, size_t cap,
                                        size_t* count);

/* ---- evaluation ------------------------------------------------------- */

typedef enum bidet_ap_mode { BIDET_AP_ALL_POINT = 0, BIDET_AP_ELEVEN_POINT = 1 } bidet_ap_mode;

typedef struct bidet_eval_options {
  double iou_thresh;   /* 0.5 */
  double score_thresh; /* 0.5 */
  double nms_iou;      /* 0.45 */
  bidet_ap_mode ap_mode;
  int bitpacked;
} bidet_eval_options;

BIDET_API void bidet_eval_options_default(bidet_eval_options* out);

typedef struct bidet_eval_result bidet_eval_result;

BIDET_API bidet_status bidet_eval(const char* checkpoint_path, const char* data_dir, const bidet_eval_options* options,
                                  bidet_eval_result** out);
BIDET_API void bidet_eval_result_destroy(bidet_eval_result* result);
BIDET_API double bidet_eval_map(const bidet_eval_result* result);
BIDET_API size_t bidet_eval_tp(const bidet_eval_result* result);
BIDET_API size_t bidet_eval_fp(const bidet_eval_result* result);
BIDET_API size_t bidet_eval_fn(const bidet_eval_result* result);
/* Human-readable report including per-layer complexity. */
BIDET_API bidet_status bidet_eval_text(const bidet_eval_result* result, char* buf, size_t cap, size_t* needed);
/* metric,value CSV. */
BIDET_API bidet_status bidet_eval_csv(const bidet_eval_result* result, char* buf, size_t cap, size_t* needed);

/* ---- benchmark -------------------------------------------------------- */

typedef enum bidet_bench_mode { BIDET_BENCH_FLOAT = 0, BIDET_BENCH_BITPACKED = 1 } bidet_bench_mode;

typedef struct bidet_bench_result {
  double float_images_per_sec;
  double bitpacked_images_per_sec;
  double speedup;
  double float_flops;     /* per image, every layer real-valued */
  double bitpacked_flops; /* per image, binarized layers at 1/64 */
  double flop_ratio;
  int detections_equal;
  int regression; /* bitpacked not faster than float */
} bidet_bench_result;

/* Refuses with BIDET_ERR_MODE_MISMATCH when the two inference paths
 * disagree. text may be NULL. */
BIDET_API bidet_status bidet_bench(const char* checkpoint_path, bidet_bench_mode mode, size_t iters, size_t batch,
                                   uint64_t seed, bidet_bench_result* out, char* text, size_t cap, size_t* needed);

/* ---- sweep ------------------------------------------------------------ */

/* One training per (beta, gamma, seed) on the config's datasets. Writes
 * <out>/sweep.csv. Failed runs are recorded in the CSV and do not stop the
 * sweep; *failed counts them. */
BIDET_API bidet_status bidet_sweep(const bidet_config* base, const double* betas, size_t n_betas, const double* gammas,
                                   size_t n_gammas, const uint64_t* seeds, size_t n_seeds, size_t* failed,
                                   bidet_log_fn log, void* user);

/* ---- synthetic data --------------------------------------------------- */

typedef struct bidet_scene_options {
  size_t width, height;
  size_t num_classes;
  size_t min_objects, max_objects;
  size_t min_size, max_size;
  double noise_sigma;
} bidet_scene_options;

BIDET_API void bidet_scene_options_default(bidet_scene_options* out);

/* Writes `count` scenes (manifest.txt + images/NNNNNN.ppm) to out_dir.
 * split is "train" or "test"; options may be NULL for defaults. */
BIDET_API bidet_status bidet_gen_data(const char* out_dir, size_t count, uint64_t seed, const char* split,
                                      const bidet_scene_options* options);

#ifdef __cplusplus
}
#endif

#endif /* BIDET_BIDET_H */
