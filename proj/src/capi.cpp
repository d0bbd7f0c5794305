#include "warpvos/warpvos.h"

#include <new>
#include <string>

#include "warpvos/pipeline.hpp"

using namespace warpvos;

struct wv_config {
  pipeline::RunConfig cfg;
  std::string text;
};

struct wv_model {
  pipeline::Checkpoint ckpt;
};

struct wv_report {
  metrics::ScoreReport report;
  std::string table;
};

namespace {

thread_local std::string g_error;

template <class F>
wv_status guarded(F&& f) {
  try {
    f();
    g_error.clear();
    return WV_OK;
  } catch (const ConfigError& e) {
    g_error = e.what();
    return WV_ERR_CONFIG;
  } catch (const UsageError& e) {
    g_error = e.what();
    return WV_ERR_USAGE;
  } catch (const IoError& e) {
    g_error = e.what();
    return WV_ERR_IO;
  } catch (const DimensionError& e) {
    g_error = e.what();
    return WV_ERR_DIMENSION;
  } catch (const NumericError& e) {
    g_error = e.what();
    return WV_ERR_NUMERIC;
  } catch (const std::filesystem::filesystem_error& e) {
    g_error = e.what();
    return WV_ERR_IO;
  } catch (const std::bad_alloc&) {
    g_error = "out of memory";
    return WV_ERR_INTERNAL;
  } catch (const std::exception& e) {
    g_error = e.what();
    return WV_ERR_INTERNAL;
  }
}

wv_status null_arg(const char* what) {
  g_error = std::string("null argument: ") + what;
  return WV_ERR_USAGE;
}

}  // namespace

extern "C" {

const char* wv_version(void) { return "0.1.0"; }
const char* wv_last_error(void) { return g_error.c_str(); }

const char* wv_status_name(wv_status s) {
  switch (s) {
    case WV_OK: return "ok";
    case WV_ERR_USAGE: return "usage error";
    case WV_ERR_CONFIG: return "config error";
    case WV_ERR_IO: return "io error";
    case WV_ERR_DIMENSION: return "dimension error";
    case WV_ERR_NUMERIC: return "numeric error";
    case WV_ERR_INTERNAL: return "internal error";
  }
  return "unknown status";
}

wv_status wv_config_default(wv_config** out) {
  if (!out) return null_arg("out");
  return guarded([&] { *out = new wv_config{}; });
}

wv_status wv_config_parse(const char* json_text, wv_config** out) {
  if (!json_text || !out) return null_arg("json_text/out");
  return guarded([&] {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(json_text);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("run config: ") + e.what());
    }
    *out = new wv_config{pipeline::run_config_from_json(j), {}};
  });
}

wv_status wv_config_load(const char* path, wv_config** out) {
  if (!path || !out) return null_arg("path/out");
  return guarded([&] { *out = new wv_config{pipeline::load_run_config(path), {}}; });
}

const char* wv_config_json(const wv_config* cfg) {
  if (!cfg) return "";
  auto* c = const_cast<wv_config*>(cfg);
  c->text = pipeline::to_json(c->cfg).dump(2);
  return c->text.c_str();
}

wv_status wv_config_hash(const wv_config* cfg, char out[65]) {
  if (!cfg || !out) return null_arg("cfg/out");
  return guarded([&] {
    const auto h = pipeline::config_hash(cfg->cfg);
    h.copy(out, 64);
    out[64] = '\0';
  });
}

void wv_config_free(wv_config* cfg) { delete cfg; }

wv_status wv_generate(const char* spec_path, const char* out_dir, int frames) {
  if (!spec_path || !out_dir) return null_arg("spec_path/out_dir");
  return guarded([&] { pipeline::generate(spec_path, out_dir, frames); });
}

wv_status wv_train(const wv_config* cfg, const char* data_dir, const char* out_dir, const char* resume_dir,
                   wv_step_callback callback, void* user) {
  if (!cfg || !data_dir || !out_dir) return null_arg("cfg/data_dir/out_dir");
  return guarded([&] {
    pipeline::StepCallback cb;
    if (callback)
      cb = [&](const engine::StepRecord& r) {
        const wv_step_info info{r.step, r.stage, r.loss, r.ce, r.dice, r.lr, r.seconds};
        return callback(&info, user) == 0;
      };
    pipeline::train(cfg->cfg, data_dir, out_dir, resume_dir ? resume_dir : "", cb);
  });
}

wv_status wv_model_load(const char* checkpoint, wv_model** out) {
  if (!checkpoint || !out) return null_arg("checkpoint/out");
  return guarded([&] { *out = new wv_model{pipeline::load_checkpoint(checkpoint)}; });
}

void wv_model_free(wv_model* model) { delete model; }

wv_status wv_infer(const wv_model* model, const char* data_dir, const char* out_dir, const wv_infer_options* options,
                   wv_infer_stats* stats) {
  if (!model || !data_dir || !out_dir) return null_arg("model/data_dir/out_dir");
  return guarded([&] {
    pipeline::InferOptions opt;
    if (options) {
      opt.flow = options->flow ? options->flow : "";
      opt.jobs = options->jobs;
      opt.overlay = options->overlay != 0;
      opt.max_frames = options->max_frames;
    }
    const auto s = pipeline::infer(model->ckpt, data_dir, out_dir, opt);
    if (stats)
      *stats = {s.sequences, s.frames, s.flow_seconds, s.model_seconds, s.fps_with_flow(), s.fps_without_flow()};
  });
}

wv_status wv_eval(const char* pred_dir, const char* gt_dir, const char* report_path, const char* csv_path, int theta,
                  wv_report** out) {
  if (!pred_dir || !gt_dir || !report_path) return null_arg("pred_dir/gt_dir/report_path");
  return guarded([&] {
    pipeline::EvalOptions opt;
    opt.metrics.theta = theta > 0 ? theta : 0;
    if (csv_path) opt.csv = csv_path;
    auto r = pipeline::evaluate(pred_dir, gt_dir, report_path, opt);
    if (out) *out = new wv_report{r, metrics::format_table(r)};
  });
}

wv_status wv_report_summary(const wv_report* report, wv_eval_summary* out) {
  if (!report || !out) return null_arg("report/out");
  const auto& r = report->report;
  *out = {r.j, r.f, r.jf, static_cast<int>(r.objects.size()), static_cast<std::int64_t>(r.frames.size())};
  return WV_OK;
}

const char* wv_report_table(const wv_report* report) { return report ? report->table.c_str() : ""; }

void wv_report_free(wv_report* report) { delete report; }

}  // extern "C"
