#include <cstdio>
#include <cstdlib>
#include <string>

#include "CLI11.hpp"
#include "warpvos/warpvos.h"

namespace {

int exit_code(wv_status s) {
  switch (s) {
    case WV_OK: return 0;
    case WV_ERR_USAGE:
    case WV_ERR_CONFIG:
    case WV_ERR_IO: return 2;
    default: return 1;
  }
}

int report(wv_status s) {
  if (s != WV_OK) std::fprintf(stderr, "error (%s): %s\n", wv_status_name(s), wv_last_error());
  return exit_code(s);
}

struct TrainProgress {
  int every = 50;
};

int on_step(const wv_step_info* info, void* user) {
  const auto* p = static_cast<const TrainProgress*>(user);
  if (p->every > 0 && (info->step + 1) % p->every == 0)
    std::printf("step %6d  stage %d  loss %.5f  ce %.5f  dice %.5f  lr %.3g  %.3fs\n", info->step + 1, info->stage,
                info->loss, info->ce, info->dice, info->lr, info->seconds);
  std::fflush(stdout);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"warpvos: flow-warped transformer video object segmentation"};
  app.require_subcommand(1);
  const char* env_root = std::getenv("WARPVOS_DATA");
  const std::string default_data = env_root ? env_root : "";

  std::string spec, out;
  int frames = 0;
  auto* gen = app.add_subcommand("gen", "generate a synthetic benchmark");
  gen->add_option("--spec", spec, "generator spec JSON")->required();
  gen->add_option("--out", out, "output directory")->required();
  gen->add_option("--frames", frames, "override the sequence length")->check(CLI::PositiveNumber);

  std::string config, data = default_data, ckpt_out, resume;
  TrainProgress progress;
  auto* train = app.add_subcommand("train", "train a model");
  train->add_option("--config", config, "run config JSON")->required();
  train->add_option("--data", data, "dataset root or benchmark directory (default $WARPVOS_DATA)");
  train->add_option("--out", ckpt_out, "checkpoint directory")->required();
  train->add_option("--resume", resume, "checkpoint directory to resume from");
  train->add_option("--log-every", progress.every, "print every N steps (0: quiet)");

  std::string ckpt, flow, pred_out;
  int jobs = 1, max_frames = 0;
  bool overlay = false;
  auto* infer = app.add_subcommand("infer", "segment sequences");
  infer->add_option("--ckpt", ckpt, "checkpoint directory or a file inside it")->required();
  infer->add_option("--data", data, "dataset root or benchmark directory (default $WARPVOS_DATA)");
  infer->add_option("--flow", flow, "zero | gt | block | external:<dir> (default: from the config)");
  infer->add_option("--out", pred_out, "prediction directory")->required();
  infer->add_option("--jobs", jobs, "sequences processed in parallel")->check(CLI::PositiveNumber);
  infer->add_flag("--overlay", overlay, "also write RGB overlays");
  infer->add_option("--max-frames", max_frames, "process only the first N frames")->check(CLI::NonNegativeNumber);

  std::string pred, gt, report_path, csv;
  int theta = 0;
  auto* eval = app.add_subcommand("eval", "score predictions");
  eval->add_option("--pred", pred, "prediction directory")->required();
  eval->add_option("--gt", gt, "dataset root or benchmark directory")->required();
  eval->add_option("--out", report_path, "summary report JSON")->required();
  eval->add_option("--csv", csv, "also write per object-frame CSV");
  eval->add_option("--theta", theta, "boundary tolerance in pixels (default: 0.8% of the diagonal)")
      ->check(CLI::NonNegativeNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  if ((*train || *infer) && data.empty()) {
    std::fprintf(stderr, "error: --data is required (or set WARPVOS_DATA)\n");
    return 2;
  }

  if (*gen) {
    const wv_status s = wv_generate(spec.c_str(), out.c_str(), frames);
    if (s == WV_OK) std::printf("wrote %s\n", out.c_str());
    return report(s);
  }

  if (*train) {
    wv_config* cfg = nullptr;
    wv_status s = wv_config_load(config.c_str(), &cfg);
    if (s != WV_OK) return report(s);
    char hash[65];
    wv_config_hash(cfg, hash);
    std::printf("config %s\n", hash);
    s = wv_train(cfg, data.c_str(), ckpt_out.c_str(), resume.empty() ? nullptr : resume.c_str(), on_step, &progress);
    wv_config_free(cfg);
    if (s == WV_OK) std::printf("checkpoint %s\n", ckpt_out.c_str());
    return report(s);
  }

  if (*infer) {
    wv_model* model = nullptr;
    wv_status s = wv_model_load(ckpt.c_str(), &model);
    if (s != WV_OK) return report(s);
    wv_infer_options opt{flow.empty() ? nullptr : flow.c_str(), jobs, overlay ? 1 : 0, max_frames};
    wv_infer_stats st{};
    s = wv_infer(model, data.c_str(), pred_out.c_str(), &opt, &st);
    wv_model_free(model);
    if (s == WV_OK) {
      std::printf("%d sequences, %lld frames\n", st.sequences, static_cast<long long>(st.frames));
      std::printf("FPS %.2f (%.2f excluding flow)  flow %.3fs  model %.3fs\n", st.fps_with_flow,
                  st.fps_without_flow, st.flow_seconds, st.model_seconds);
    }
    return report(s);
  }

  wv_report* rep = nullptr;
  const wv_status s =
      wv_eval(pred.c_str(), gt.c_str(), report_path.c_str(), csv.empty() ? nullptr : csv.c_str(), theta, &rep);
  if (s == WV_OK) {
    std::fputs(wv_report_table(rep), stdout);
    wv_report_free(rep);
  }
  return report(s);
}
