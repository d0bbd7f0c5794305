#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>

#include <nlohmann/json.hpp>

#include "warpvos/engine.hpp"
#include "warpvos/metrics.hpp"
#include "warpvos/network.hpp"

// Command-level operations behind the C API: generate, train, infer, eval.
namespace warpvos::pipeline {

struct RunConfig {
  std::uint64_t seed = 0;  // model initialisation
  network::ModelConfig model;
  engine::TrainConfig train;
  engine::InferenceConfig inference;
  std::string flow = "gt";  // zero | gt | block | external:<dir>
  int checkpoint_every = 0;
  metrics::MetricConfig metrics;
};

nlohmann::json to_json(const RunConfig& cfg);
// Every section is optional; unknown keys raise ConfigError.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);
// SHA-256 of the canonical dump of the fully resolved config.
std::string config_hash(const nlohmann::json& resolved);
std::string config_hash(const RunConfig& cfg);

// `dir` itself when it holds JPEGImages, else dir/<split> when that does.
std::filesystem::path resolve_root(const std::filesystem::path& dir, const std::string& split);

// frames > 0 overrides the spec's sequence length.
nlohmann::json generate(const std::filesystem::path& spec_path, const std::filesystem::path& out, int frames = 0);

using StepCallback = std::function<bool(const engine::StepRecord&)>;  // false stops
// Writes a checkpoint directory: model, optimizer state, run config,
// train_manifest.json and the loss curve as JSON lines.
nlohmann::json train(const RunConfig& cfg, const std::filesystem::path& data, const std::filesystem::path& out,
                     const std::filesystem::path& resume = {}, const StepCallback& on_step = {});

struct Checkpoint {
  network::WarpFormer model;
  RunConfig config;
  std::filesystem::path dir;
};
// Accepts the checkpoint directory or any file inside it.
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct InferOptions {
  std::string flow;  // empty: the checkpoint's configured source
  int jobs = 1;
  bool overlay = false;
  int max_frames = 0;
};

struct InferStats {
  int sequences = 0;
  std::int64_t frames = 0;
  double flow_seconds = 0, model_seconds = 0;
  double fps_with_flow() const;
  double fps_without_flow() const;
};

// Palette PNGs under out/<seq>/, optional blends under out/overlay/<seq>/,
// and out/manifest.json.
InferStats infer(const Checkpoint& ckpt, const std::filesystem::path& data, const std::filesystem::path& out,
                 const InferOptions& opt);

struct EvalOptions {
  metrics::MetricConfig metrics;
  std::filesystem::path csv;  // empty: no CSV
};

// Scores out/<seq>/<frame>.png against a dataset root; writes the summary
// JSON to `report` and per object-frame JSON lines next to it.
metrics::ScoreReport evaluate(const std::filesystem::path& pred, const std::filesystem::path& gt,
                              const std::filesystem::path& report, const EvalOptions& opt = {});

}  // namespace warpvos::pipeline
