#ifndef WARPVOS_H
#define WARPVOS_H

/* C interface to the warpvos library. Every call returns a status code; on
 * failure wv_last_error() describes the problem (per thread). Handles are
 * opaque and released with the matching *_free function. */

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(__GNUC__)
#define WV_API __attribute__((visibility("default")))
#else
#define WV_API
#endif

typedef enum {
  WV_OK = 0,
  WV_ERR_USAGE = 1,     /* bad arguments or call order */
  WV_ERR_CONFIG = 2,    /* invalid configuration or spec */
  WV_ERR_IO = 3,        /* missing or unreadable files */
  WV_ERR_DIMENSION = 4, /* incompatible extents */
  WV_ERR_NUMERIC = 5,   /* non-finite values, e.g. a NaN loss */
  WV_ERR_INTERNAL = 6
} wv_status;

typedef struct wv_config wv_config;
typedef struct wv_model wv_model;
typedef struct wv_report wv_report;

WV_API const char* wv_version(void);
WV_API const char* wv_last_error(void);
WV_API const char* wv_status_name(wv_status status);

/* ---- run configuration ---- */
WV_API wv_status wv_config_default(wv_config** out);
WV_API wv_status wv_config_parse(const char* json_text, wv_config** out);
WV_API wv_status wv_config_load(const char* path, wv_config** out);
/* Resolved JSON with all defaults filled in; valid until the next call on
 * the same handle. */
WV_API const char* wv_config_json(const wv_config* cfg);
/* 64 hex characters plus the terminator. */
WV_API wv_status wv_config_hash(const wv_config* cfg, char out[65]);
WV_API void wv_config_free(wv_config* cfg);

/* ---- gen ---- */
/* frames > 0 overrides the spec's sequence length. */
WV_API wv_status wv_generate(const char* spec_path, const char* out_dir, int frames);

/* ---- train ---- */
typedef struct {
  int step;
  int stage;
  double loss, ce, dice, lr, seconds;
} wv_step_info;

/* Return non-zero to stop training after this step. */
typedef int (*wv_step_callback)(const wv_step_info* info, void* user);

/* resume_dir may be NULL. */
WV_API wv_status wv_train(const wv_config* cfg, const char* data_dir, const char* out_dir,
                          const char* resume_dir, wv_step_callback callback, void* user);

/* ---- infer ---- */
WV_API wv_status wv_model_load(const char* checkpoint, wv_model** out);
WV_API void wv_model_free(wv_model* model);

typedef struct {
  const char* flow; /* NULL: the checkpoint's configured source */
  int jobs;         /* sequences processed in parallel, >= 1 */
  int overlay;      /* also write RGB overlays */
  int max_frames;   /* 0: whole sequences */
} wv_infer_options;

typedef struct {
  int sequences;
  int64_t frames;
  double flow_seconds, model_seconds;
  double fps_with_flow, fps_without_flow;
} wv_infer_stats;

WV_API wv_status wv_infer(const wv_model* model, const char* data_dir, const char* out_dir,
                          const wv_infer_options* options, wv_infer_stats* stats);

/* ---- eval ---- */
typedef struct {
  double j, f, jf;
  int objects;
  int64_t frames;
} wv_eval_summary;

/* theta <= 0 uses the diagonal-relative tolerance; csv_path may be NULL. */
WV_API wv_status wv_eval(const char* pred_dir, const char* gt_dir, const char* report_path, const char* csv_path,
                         int theta, wv_report** out);
WV_API wv_status wv_report_summary(const wv_report* report, wv_eval_summary* out);
WV_API const char* wv_report_table(const wv_report* report);
WV_API void wv_report_free(wv_report* report);

#ifdef __cplusplus
}
#endif

#endif
