#include "warpvos/pipeline.hpp"

#include <openssl/evp.h>

#include <atomic>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <thread>

#include "warpvos/dataset.hpp"
#include "warpvos/flow.hpp"
#include "warpvos/imageio.hpp"
#include "warpvos/synthetic.hpp"

namespace warpvos::pipeline {

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

json read_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read " + path.string());
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void write_json(const json& j, const fs::path& path) {
  std::ofstream os(path);
  os << j.dump(2) << "\n";
  if (!os) throw IoError("cannot write " + path.string());
}

std::string frame_name(int t, const char* ext) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%05d.%s", t, ext);
  return buf;
}

json metric_json(const metrics::MetricConfig& m) {
  return {{"theta", m.theta}, {"boundary_fraction", m.boundary_fraction}};
}

}  // namespace

// ---- run config ---------------------------------------------------------------

json to_json(const RunConfig& c) {
  return {{"seed", c.seed},
          {"model", network::to_json(c.model)},
          {"train", engine::to_json(c.train)},
          {"inference", {{"memory_stride", c.inference.memory_stride},
                         {"memory_capacity", c.inference.memory_capacity},
                         {"flow", c.flow}}},
          {"checkpoint_every", c.checkpoint_every},
          {"metrics", metric_json(c.metrics)}};
}

RunConfig run_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("run config must be a JSON object");
  RunConfig c;
  try {
    for (const auto& [k, v] : j.items()) {
      if (k == "seed") c.seed = v.get<std::uint64_t>();
      else if (k == "model") c.model = network::model_config_from_json(v);
      else if (k == "train") c.train = engine::train_config_from_json(v);
      else if (k == "checkpoint_every") c.checkpoint_every = v.get<int>();
      else if (k == "inference") {
        if (!v.is_object()) throw ConfigError("run config: inference must be an object");
        for (const auto& [ik, iv] : v.items()) {
          if (ik == "memory_stride") c.inference.memory_stride = iv.get<int>();
          else if (ik == "memory_capacity") c.inference.memory_capacity = iv.get<int>();
          else if (ik == "flow") c.flow = iv.get<std::string>();
          else throw ConfigError("run config: unknown key inference." + ik);
        }
      } else if (k == "metrics") {
        if (!v.is_object()) throw ConfigError("run config: metrics must be an object");
        for (const auto& [mk, mv] : v.items()) {
          if (mk == "theta") c.metrics.theta = mv.get<int>();
          else if (mk == "boundary_fraction") c.metrics.boundary_fraction = mv.get<double>();
          else throw ConfigError("run config: unknown key metrics." + mk);
        }
      } else {
        throw ConfigError("run config: unknown key '" + k + "'");
      }
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("run config: ") + e.what());
  }
  if (c.inference.memory_stride < 1 || c.inference.memory_capacity < 0)
    throw ConfigError("run config: invalid inference memory settings");
  if (c.checkpoint_every < 0) throw ConfigError("run config: checkpoint_every must be >= 0");
  if (c.metrics.theta < 0 || c.metrics.boundary_fraction <= 0) throw ConfigError("run config: invalid metrics");
  flow::make_estimator(c.flow);
  return c;
}

RunConfig load_run_config(const fs::path& path) { return run_config_from_json(read_json(path)); }

std::string config_hash(const json& resolved) {
  const std::string text = resolved.dump();
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(text.data(), text.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw Error("sha256 failed");
  std::string hex;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", digest[i]);
    hex += buf;
  }
  return hex;
}

std::string config_hash(const RunConfig& cfg) { return config_hash(to_json(cfg)); }

fs::path resolve_root(const fs::path& dir, const std::string& split) {
  if (fs::is_directory(dir / "JPEGImages")) return dir;
  if (fs::is_directory(dir / split / "JPEGImages")) return dir / split;
  throw IoError("no dataset under " + dir.string() + " (expected JPEGImages/ or " + split + "/JPEGImages/)");
}

// ---- gen ----------------------------------------------------------------------

json generate(const fs::path& spec_path, const fs::path& out, int frames) {
  auto spec = synthetic::spec_from_json(read_json(spec_path));
  if (frames > 0) spec.frames = frames;
  spec.validate();
  synthetic::generate(spec, out);
  const json resolved = synthetic::to_json(spec);
  json splits = json::object();
  for (const auto& [split, n] : spec.splits) {
    json names = json::array();
    for (int i = 0; i < n; ++i) names.push_back(synthetic::sequence_name(split, i));
    splits[split] = names;
  }
  const json manifest{{"command", "gen"},
                      {"spec", resolved},
                      {"spec_file", spec_path.string()},
                      {"config_hash", config_hash(resolved)},
                      {"splits", splits}};
  write_json(manifest, out / "manifest.json");
  return manifest;
}

// ---- train --------------------------------------------------------------------

json train(const RunConfig& cfg, const fs::path& data, const fs::path& out, const fs::path& resume,
           const StepCallback& on_step) {
  const fs::path root = resolve_root(data, "train");
  std::vector<dataset::Sequence> seqs;
  json names = json::array();
  for (const auto& n : dataset::list_sequences(root)) {
    seqs.push_back(dataset::load_sequence(root, n));
    names.push_back(n);
  }
  if (seqs.empty()) throw IoError("no sequences under " + root.string());

  auto model = network::WarpFormer::create(cfg.model, cfg.seed);
  engine::Trainer trainer(model, seqs, cfg.train);
  if (!resume.empty()) trainer.resume(resume);
  fs::create_directories(out);
  const json resolved = to_json(cfg);
  const std::string hash = config_hash(resolved);
  write_json(resolved, out / "run_config.json");

  std::ofstream curve(out / "loss.jsonl", resume.empty() ? std::ios::trunc : std::ios::app);
  if (!curve) throw IoError("cannot write " + (out / "loss.jsonl").string());
  const auto start = std::chrono::steady_clock::now();
  bool stopped = false;
  double last_loss = 0;
  while (!trainer.done()) {
    const auto rec = trainer.step();
    last_loss = rec.loss;
    curve << json{{"step", rec.step}, {"stage", rec.stage}, {"loss", rec.loss}, {"ce", rec.ce},
                  {"dice", rec.dice}, {"lr", rec.lr}, {"seconds", rec.seconds}}
                 .dump()
          << "\n";
    if (cfg.checkpoint_every > 0 && trainer.step_index() % cfg.checkpoint_every == 0) trainer.save(out);
    if (on_step && !on_step(rec)) {
      stopped = true;
      break;
    }
  }
  curve.flush();
  trainer.save(out);
  const json manifest{{"command", "train"},
                      {"config", resolved},
                      {"config_hash", hash},
                      {"data", root.string()},
                      {"sequences", names},
                      {"resumed_from", resume.empty() ? json(nullptr) : json(resume.string())},
                      {"steps_completed", trainer.step_index()},
                      {"stopped_early", stopped},
                      {"final_loss", last_loss},
                      {"wall_seconds", std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()}};
  write_json(manifest, out / "train_manifest.json");
  return manifest;
}

// ---- infer --------------------------------------------------------------------

Checkpoint load_checkpoint(const fs::path& path) {
  fs::path dir = path;
  if (!fs::exists(dir)) throw IoError("checkpoint not found: " + path.string());
  if (!fs::is_directory(dir)) dir = dir.parent_path();
  if (!fs::exists(dir / "run_config.json")) throw IoError("not a checkpoint (no run_config.json): " + dir.string());
  RunConfig cfg = load_run_config(dir / "run_config.json");
  return {network::WarpFormer::load(dir), cfg, dir};
}

double InferStats::fps_with_flow() const {
  const double s = flow_seconds + model_seconds;
  return s > 0 ? static_cast<double>(frames) / s : 0.0;
}

double InferStats::fps_without_flow() const {
  return model_seconds > 0 ? static_cast<double>(frames) / model_seconds : 0.0;
}

namespace {

imageio::Image overlay_image(const Tensor& frame, const LabelMap& labels) {
  auto img = imageio::from_tensor(frame);
  imageio::Image out{labels.height, labels.width, 3, {}};
  out.pixels.resize(static_cast<std::size_t>(labels.height * labels.width * 3));
  for (std::int64_t y = 0; y < labels.height; ++y)
    for (std::int64_t x = 0; x < labels.width; ++x) {
      const int l = labels.at(y, x);
      const auto c = imageio::palette_color(l);
      for (int ch = 0; ch < 3; ++ch) {
        const auto src = img.pixels[static_cast<std::size_t>((y * img.width + x) * 3 + ch)];
        out.pixels[static_cast<std::size_t>((y * labels.width + x) * 3 + ch)] =
            l == 0 ? src : static_cast<std::uint8_t>((src + c[static_cast<std::size_t>(ch)] + 1) / 2);
      }
    }
  return out;
}

}  // namespace

InferStats infer(const Checkpoint& ckpt, const fs::path& data, const fs::path& out, const InferOptions& opt) {
  if (opt.jobs < 1) throw ConfigError("--jobs must be >= 1");
  const fs::path root = resolve_root(data, "eval");
  const std::string flow_source = opt.flow.empty() ? ckpt.config.flow : opt.flow;
  const auto estimator = flow::make_estimator(flow_source);
  const auto names = dataset::list_sequences(root);
  if (names.empty()) throw IoError("no sequences under " + root.string());
  fs::create_directories(out);

  struct Result {
    json record;
    std::int64_t frames = 0;
    double flow_s = 0, model_s = 0;
    std::string error;
  };
  std::vector<Result> results(names.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (std::size_t i = next++; i < names.size(); i = next++) {
      auto& r = results[i];
      try {
        const auto seq = dataset::load_sequence(root, names[i]);
        const auto res = engine::infer_sequence(ckpt.model, seq, *estimator, ckpt.config.inference, opt.max_frames);
        const fs::path dir = out / names[i];
        fs::create_directories(dir);
        json timing = json::array();
        for (std::size_t t = 0; t < res.labels.size(); ++t) {
          imageio::write_label_png(res.labels[t], dir / frame_name(static_cast<int>(t), "png"));
          if (opt.overlay) {
            const fs::path odir = out / "overlay" / names[i];
            fs::create_directories(odir);
            const auto img = overlay_image(seq.frames[t], dataset::pad_labels(res.labels[t], seq.height, seq.width));
            // Crop back to the on-disk extents.
            imageio::Image cropped{seq.orig_height, seq.orig_width, 3, {}};
            for (std::int64_t y = 0; y < seq.orig_height; ++y)
              for (std::int64_t x = 0; x < seq.orig_width * 3; ++x)
                cropped.pixels.push_back(img.pixels[static_cast<std::size_t>(y * img.width * 3 + x)]);
            imageio::write_png(cropped, odir / frame_name(static_cast<int>(t), "png"));
          }
          timing.push_back({{"frame", t}, {"flow_seconds", res.timing[t].flow_seconds},
                            {"model_seconds", res.timing[t].model_seconds}});
          r.flow_s += res.timing[t].flow_seconds;
          r.model_s += res.timing[t].model_seconds;
        }
        json assignment = json::object();
        for (const auto& [obj, slot] : res.assignment.map()) assignment[std::to_string(obj)] = slot;
        r.frames = static_cast<std::int64_t>(res.labels.size());
        r.record = {{"sequence", names[i]},
                    {"frames", r.frames},
                    {"assignment", assignment},
                    {"memory_frames", res.memory_frames},
                    {"timing", timing}};
      } catch (const std::exception& e) {
        r.error = e.what();
      }
    }
  };
  std::vector<std::thread> pool;
  for (int j = 1; j < std::min<int>(opt.jobs, static_cast<int>(names.size())); ++j) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  InferStats stats;
  json seqs = json::array();
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (!results[i].error.empty()) throw Error("sequence " + names[i] + ": " + results[i].error);
    stats.frames += results[i].frames;
    stats.flow_seconds += results[i].flow_s;
    stats.model_seconds += results[i].model_s;
    seqs.push_back(results[i].record);
  }
  stats.sequences = static_cast<int>(names.size());
  const json resolved = to_json(ckpt.config);
  write_json({{"command", "infer"},
              {"checkpoint", ckpt.dir.string()},
              {"config", resolved},
              {"config_hash", config_hash(resolved)},
              {"data", root.string()},
              {"flow_source", flow_source},
              {"jobs", opt.jobs},
              {"overlay", opt.overlay},
              {"max_frames", opt.max_frames},
              {"frames", stats.frames},
              {"flow_seconds", stats.flow_seconds},
              {"model_seconds", stats.model_seconds},
              {"fps_with_flow", stats.fps_with_flow()},
              {"fps_without_flow", stats.fps_without_flow()},
              {"sequences", seqs}},
             out / "manifest.json");
  return stats;
}

// ---- eval ---------------------------------------------------------------------

metrics::ScoreReport evaluate(const fs::path& pred, const fs::path& gt, const fs::path& report,
                              const EvalOptions& opt) {
  const fs::path root = resolve_root(gt, "eval");
  const auto names = dataset::list_sequences(root);
  if (names.empty()) throw IoError("no sequences under " + root.string());
  std::vector<std::string> missing;
  for (const auto& n : names)
    if (!fs::is_directory(pred / n)) missing.push_back(n);
  if (!missing.empty()) {
    std::string list;
    for (const auto& n : missing) list += (list.empty() ? "" : ", ") + n;
    throw IoError("missing predictions in " + pred.string() + " for " + std::to_string(missing.size()) +
                  " sequence(s): " + list);
  }
  std::vector<metrics::FrameScore> scores;
  for (const auto& n : names) {
    const auto seq = dataset::load_sequence(root, n);
    std::vector<LabelMap> gts, preds;
    for (int t = 0; t < seq.length(); ++t) {
      const auto& l = seq.labels[static_cast<std::size_t>(t)];
      gts.push_back(l.empty() ? LabelMap{} : dataset::crop_labels(l, seq.orig_height, seq.orig_width));
      const fs::path p = pred / n / frame_name(t, "png");
      preds.push_back(fs::exists(p) ? imageio::read_label_png(p) : LabelMap{});
    }
    const auto s = metrics::evaluate_sequence(n, preds, gts, seq.first_frame, opt.metrics);
    scores.insert(scores.end(), s.begin(), s.end());
  }
  const auto r = metrics::aggregate(scores);
  const json settings{{"metrics", metric_json(opt.metrics)}};
  json summary = metrics::summary_json(r);
  summary["command"] = "eval";
  summary["pred"] = pred.string();
  summary["gt"] = root.string();
  summary["config"] = settings;
  summary["config_hash"] = config_hash(settings);
  if (report.has_parent_path()) fs::create_directories(report.parent_path());
  write_json(summary, report);
  fs::path lines = report;
  lines.replace_extension(".jsonl");
  metrics::write_jsonl(r, lines);
  if (!opt.csv.empty()) metrics::write_csv(r, opt.csv);
  return r;
}

}  // namespace warpvos::pipeline
