#include "warpvos/engine.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "warpvos/geometry.hpp"
#include "warpvos/ops.hpp"

namespace warpvos::engine {

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

std::uint64_t step_seed(std::uint64_t seed, int step) {
  return splitmix(splitmix(seed) ^ static_cast<std::uint64_t>(step));
}

// ---- memory -------------------------------------------------------------------

MemoryBank::MemoryBank(int stride, int capacity) : stride_(stride), capacity_(capacity) {
  if (stride < 1) throw ConfigError("memory stride must be >= 1");
  if (capacity < 0) throw ConfigError("memory capacity must be >= 0");
}

void MemoryBank::append(Tensor features, Tensor ids, int frame, bool pinned) {
  if (!entries_.empty() && frame <= entries_.back().frame)
    throw UsageError("memory frames must increase: " + std::to_string(frame) + " after " +
                     std::to_string(entries_.back().frame));
  if (entries_.empty()) pinned = true;
  if (capacity_ > 0 && static_cast<int>(entries_.size()) >= capacity_) {
    auto victim = std::find_if(entries_.begin(), entries_.end(), [](const Entry& e) { return !e.pinned; });
    if (victim == entries_.end()) {
      if (!pinned) return;
    } else {
      entries_.erase(victim);
    }
  }
  entries_.push_back({std::move(features), std::move(ids), frame, pinned});
}

std::vector<Tensor> MemoryBank::features() const {
  std::vector<Tensor> out;
  for (const auto& e : entries_) out.push_back(e.features);
  return out;
}

std::vector<Tensor> MemoryBank::ids() const {
  std::vector<Tensor> out;
  for (const auto& e : entries_) out.push_back(e.ids);
  return out;
}

// ---- inference ----------------------------------------------------------------

namespace {

// Overwrites the channels of objects annotated at this frame with their
// ground truth; every pixel of a new object moves all its mass there.
Tensor inject_annotation(const Tensor& probs, const LabelMap& labels, const std::vector<int>& ids,
                         const std::set<int>& fresh) {
  const std::int64_t k1 = probs.dim(0), hw = probs.dim(1) * probs.dim(2);
  auto v = probs.to_vector();
  for (std::int64_t i = 0; i < hw; ++i) {
    const int l = labels.data[static_cast<std::size_t>(i)];
    for (std::int64_t k = 1; k < k1; ++k) {
      if (!fresh.contains(ids[static_cast<std::size_t>(k - 1)])) continue;
      v[static_cast<std::size_t>(k * hw + i)] = 0.0;
    }
    if (fresh.contains(l)) {
      for (std::int64_t k = 0; k < k1; ++k) v[static_cast<std::size_t>(k * hw + i)] = 0.0;
      const auto k = std::find(ids.begin(), ids.end(), l) - ids.begin() + 1;
      v[static_cast<std::size_t>(k * hw + i)] = 1.0;
    } else {
      double total = 0;
      for (std::int64_t k = 0; k < k1; ++k) total += v[static_cast<std::size_t>(k * hw + i)];
      if (total <= 0) {
        v[static_cast<std::size_t>(i)] = 1.0;
        total = 1.0;
      }
      for (std::int64_t k = 0; k < k1; ++k) v[static_cast<std::size_t>(k * hw + i)] /= total;
    }
  }
  return Tensor::from_values(probs.shape(), v, probs.dtype());
}

// Adds zero channels for objects appended to the id list.
Tensor widen(const Tensor& probs, std::size_t k1) {
  if (static_cast<std::size_t>(probs.dim(0)) == k1) return probs;
  const std::int64_t extra = static_cast<std::int64_t>(k1) - probs.dim(0);
  return ops::concat({probs, Tensor::zeros({extra, probs.dim(1), probs.dim(2)}, probs.dtype())}, 0);
}

}  // namespace

SequenceOutput infer_sequence(const network::WarpFormer& model, const dataset::Sequence& seq,
                              const flow::FlowEstimator& estimator, const InferenceConfig& cfg, int max_frames) {
  NoGradGuard no_grad;
  const DType dt = model.config().dtype;
  const int frames = max_frames > 0 ? std::min(max_frames, seq.length()) : seq.length();
  if (frames == 0) throw UsageError("sequence " + seq.name + " has no frames");
  if (seq.labels[0].empty()) throw UsageError("sequence " + seq.name + " needs an annotation on frame 0");

  std::map<int, std::vector<int>> starting;  // frame -> objects first annotated there
  for (const auto& [id, t] : seq.first_frame) starting[t].push_back(id);

  SequenceOutput out;
  std::vector<int>& ids = out.object_ids;
  const int slots = model.config().bank_slots;
  MemoryBank memory(cfg.memory_stride, cfg.memory_capacity);

  auto check_annotation = [&](int t) {
    const auto& l = seq.labels[static_cast<std::size_t>(t)];
    if (l.empty()) return;
    // Pixels of objects not yet introduced count as background.
    for (int id : l.objects())
      if (!seq.first_frame.contains(id))
        throw UsageError("sequence " + seq.name + " frame " + std::to_string(t) + ": unknown object id " +
                         std::to_string(id));
  };

  check_annotation(0);
  for (int id : starting[0]) {
    ids.push_back(id);
    out.assignment.extend(id, slots);
  }
  Tensor frame0 = seq.frames[0].to(dt);
  auto t0 = std::chrono::steady_clock::now();
  Tensor soft = one_hot(seq.labels[0], ids, dt);
  auto feats = model.encode(frame0);
  memory.append(feats.tokens(), model.embed_mask(soft, out.assignment, ids), 0, true);
  out.labels.push_back(dataset::crop_labels(argmax_labels(soft, ids), seq.orig_height, seq.orig_width));
  out.timing.push_back({0.0, seconds_since(t0)});

  for (int t = 1; t < frames; ++t) {
    check_annotation(t);
    const Tensor& cur_img = seq.frames[static_cast<std::size_t>(t)];
    const Tensor& prev_img = seq.frames[static_cast<std::size_t>(t - 1)];
    auto tf = std::chrono::steady_clock::now();
    geometry::FlowField f;
    try {
      f = estimator.estimate(cur_img, prev_img, {&seq, t});
    } catch (const Error& e) {
      throw IoError("flow estimation failed at frame " + std::to_string(t) + " of " + seq.name + ": " + e.what());
    }
    if (f.uv.dtype() != dt) f.uv = f.uv.to(dt);
    const double flow_s = seconds_since(tf);

    auto tm = std::chrono::steady_clock::now();
    const Tensor cur = cur_img.to(dt);
    const Tensor warped_img = geometry::warp_image(prev_img.to(dt), f);
    const Tensor warped_mask = geometry::warp_soft_mask(soft, f);
    const auto cur_feats = model.encode(cur);
    const auto sens_feats = model.encode(warped_img);
    network::RTBInputs in;
    in.current = cur_feats.tokens();
    in.memory = memory.features();
    in.memory_ids = memory.ids();
    in.sensory = sens_feats.tokens();
    in.sensory_ids = model.embed_mask(warped_mask, out.assignment, ids);
    in.height = cur_feats.x16.dim(1);
    in.width = cur_feats.x16.dim(2);
    const Tensor logits = model.decode(model.refine(in), cur_feats, out.assignment, ids);
    Tensor probs = ops::softmax(logits, 0);

    bool new_objects = false;
    if (auto it = starting.find(t); it != starting.end()) {
      std::set<int> fresh(it->second.begin(), it->second.end());
      for (int id : it->second) {
        ids.push_back(id);
        out.assignment.extend(id, slots);
      }
      probs = inject_annotation(widen(probs, ids.size() + 1), seq.labels[static_cast<std::size_t>(t)], ids, fresh);
      new_objects = true;
    }
    soft = probs;
    if (memory.due(t) || new_objects) {
      memory.append(cur_feats.tokens(), model.embed_mask(soft, out.assignment, ids), t, new_objects);
    }
    out.labels.push_back(dataset::crop_labels(argmax_labels(soft, ids), seq.orig_height, seq.orig_width));
    out.timing.push_back({flow_s, seconds_since(tm)});
  }
  for (const auto& e : memory.entries()) out.memory_frames.push_back(e.frame);
  return out;
}

// ---- losses -------------------------------------------------------------------

Tensor bootstrapped_ce(const Tensor& logits, const LabelMap& target, const std::vector<int>& object_ids,
                       double fraction) {
  if (logits.rank() != 3 || logits.dim(0) != static_cast<std::int64_t>(object_ids.size()) + 1 ||
      logits.dim(1) != target.height || logits.dim(2) != target.width)
    throw DimensionError("loss: logits " + shape_str(logits.shape()) + " vs target " +
                         std::to_string(target.height) + "x" + std::to_string(target.width) + " with " +
                         std::to_string(object_ids.size()) + " objects");
  if (fraction <= 0 || fraction > 1) throw ConfigError("bootstrap fraction must be in (0, 1]");
  const Tensor onehot = one_hot(target, object_ids, logits.dtype());
  const Tensor nll = ops::neg(ops::sum_axis(ops::mul(ops::log_softmax(logits, 0), onehot), 0));  // [H, W]
  const std::int64_t n = nll.numel();
  const auto k = std::max<std::int64_t>(1, static_cast<std::int64_t>(std::ceil(fraction * static_cast<double>(n))));
  if (k == n) return ops::mean(nll);
  const auto v = nll.to_vector();
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::nth_element(order.begin(), order.begin() + (k - 1), order.end(), [&](std::int64_t a, std::int64_t b) {
    const double va = v[static_cast<std::size_t>(a)], vb = v[static_cast<std::size_t>(b)];
    return va != vb ? va > vb : a < b;
  });
  std::vector<double> sel(static_cast<std::size_t>(n), 0.0);
  for (std::int64_t i = 0; i < k; ++i) sel[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = 1.0;
  const Tensor mask = Tensor::from_values(nll.shape(), sel, nll.dtype());
  return ops::affine(ops::sum(ops::mul(nll, mask)), 1.0 / static_cast<double>(k));
}

Tensor dice_loss(const Tensor& logits, const LabelMap& target, const std::vector<int>& object_ids) {
  if (object_ids.empty()) throw UsageError("dice loss needs at least one object channel");
  const std::int64_t k1 = logits.dim(0), h = logits.dim(1), w = logits.dim(2);
  const Tensor probs = ops::reshape(ops::softmax(logits, 0), {k1, h * w});
  const Tensor g = ops::reshape(one_hot(target, object_ids, logits.dtype()), {k1, h * w});
  const Tensor pf = ops::slice(probs, 0, 1, k1 - 1), gf = ops::slice(g, 0, 1, k1 - 1);
  const Tensor inter = ops::sum_axis(ops::mul(pf, gf), 1);                       // [K]
  const Tensor denom = ops::add(ops::sum_axis(pf, 1), ops::sum_axis(gf, 1));      // [K]
  const Tensor ratio = ops::div(ops::affine(inter, 2.0, 1.0), ops::affine(denom, 1.0, 1.0));
  return ops::affine(ops::mean(ratio), -1.0, 1.0);
}

LossValue vos_loss(const Tensor& logits, const LabelMap& target, const std::vector<int>& object_ids,
                   double fraction) {
  LossValue out;
  const Tensor ce = bootstrapped_ce(logits, target, object_ids, fraction);
  out.ce = ce.item();
  bool any = false;
  for (int id : object_ids) any = any || target.count(id) > 0;
  if (!any || object_ids.empty()) {
    out.total = ops::affine(ce, 0.5);
    return out;
  }
  const Tensor dice = dice_loss(logits, target, object_ids);
  out.dice = dice.item();
  out.dice_used = true;
  out.total = ops::affine(ops::add(ce, dice), 0.5);
  return out;
}

// ---- training config ----------------------------------------------------------

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("train config: " + m); };
  if (steps < 1) fail("steps must be >= 1");
  if (stage1_fraction < 0 || stage1_fraction > 1) fail("stage1_fraction must be in [0, 1]");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (clip_length < 2) fail("clip_length must be >= 2");
  if (memory_stride < 1) fail("memory_stride must be >= 1");
  if (!(lr_start > 0) || !(lr_end > 0) || lr_power <= 0) fail("learning rates and power must be positive");
  if (warmup_steps < 0) fail("warmup_steps must be >= 0");
  if (encoder_lr_scale < 0 || weight_decay < 0) fail("encoder_lr_scale and weight_decay must be >= 0");
  if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1 || adam_eps <= 0) fail("invalid Adam constants");
  if (max_grad_norm < 0) fail("max_grad_norm must be >= 0");
  if (bootstrap_start < 0 || bootstrap_end > 1 || bootstrap_start > bootstrap_end) fail("invalid bootstrap range");
  if (bootstrap_final <= 0 || bootstrap_final > 1) fail("bootstrap_final must be in (0, 1]");
  if (merge_probability < 0 || merge_probability > 1) fail("merge_probability must be in [0, 1]");
  if (augment.min_scale <= 0 || augment.max_scale < augment.min_scale) fail("invalid augmentation scale range");
  if (augment.crop_height % 16 != 0 || augment.crop_width % 16 != 0) fail("crop extents must be multiples of 16");
}

json to_json(const TrainConfig& c) {
  return {{"seed", c.seed},
          {"steps", c.steps},
          {"stage1_fraction", c.stage1_fraction},
          {"batch_size", c.batch_size},
          {"clip_length", c.clip_length},
          {"memory_stride", c.memory_stride},
          {"lr_start", c.lr_start},
          {"lr_end", c.lr_end},
          {"lr_power", c.lr_power},
          {"warmup_steps", c.warmup_steps},
          {"encoder_lr_scale", c.encoder_lr_scale},
          {"weight_decay", c.weight_decay},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"adam_eps", c.adam_eps},
          {"max_grad_norm", c.max_grad_norm},
          {"bootstrap_start", c.bootstrap_start},
          {"bootstrap_end", c.bootstrap_end},
          {"bootstrap_final", c.bootstrap_final},
          {"merge_probability", c.merge_probability},
          {"augment",
           {{"enabled", c.augment.enabled},
            {"min_scale", c.augment.min_scale},
            {"max_scale", c.augment.max_scale},
            {"crop_height", c.augment.crop_height},
            {"crop_width", c.augment.crop_width},
            {"crop_tries", c.augment.crop_tries},
            {"jitter", c.augment.jitter},
            {"blur_probability", c.augment.blur_probability},
            {"grey_probability", c.augment.grey_probability}}}};
}

TrainConfig train_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  TrainConfig c;
  try {
    for (const auto& [k, v] : j.items()) {
      if (k == "seed") c.seed = v.get<std::uint64_t>();
      else if (k == "steps") c.steps = v.get<int>();
      else if (k == "stage1_fraction") c.stage1_fraction = v.get<double>();
      else if (k == "batch_size") c.batch_size = v.get<int>();
      else if (k == "clip_length") c.clip_length = v.get<int>();
      else if (k == "memory_stride") c.memory_stride = v.get<int>();
      else if (k == "lr_start") c.lr_start = v.get<double>();
      else if (k == "lr_end") c.lr_end = v.get<double>();
      else if (k == "lr_power") c.lr_power = v.get<double>();
      else if (k == "warmup_steps") c.warmup_steps = v.get<int>();
      else if (k == "encoder_lr_scale") c.encoder_lr_scale = v.get<double>();
      else if (k == "weight_decay") c.weight_decay = v.get<double>();
      else if (k == "beta1") c.beta1 = v.get<double>();
      else if (k == "beta2") c.beta2 = v.get<double>();
      else if (k == "adam_eps") c.adam_eps = v.get<double>();
      else if (k == "max_grad_norm") c.max_grad_norm = v.get<double>();
      else if (k == "bootstrap_start") c.bootstrap_start = v.get<double>();
      else if (k == "bootstrap_end") c.bootstrap_end = v.get<double>();
      else if (k == "bootstrap_final") c.bootstrap_final = v.get<double>();
      else if (k == "merge_probability") c.merge_probability = v.get<double>();
      else if (k == "inject_nan_step") c.inject_nan_step = v.get<int>();
      else if (k == "augment") {
        if (!v.is_object()) throw ConfigError("train config: augment must be an object");
        for (const auto& [ak, av] : v.items()) {
          auto& a = c.augment;
          if (ak == "enabled") a.enabled = av.get<bool>();
          else if (ak == "min_scale") a.min_scale = av.get<double>();
          else if (ak == "max_scale") a.max_scale = av.get<double>();
          else if (ak == "crop_height") a.crop_height = av.get<std::int64_t>();
          else if (ak == "crop_width") a.crop_width = av.get<std::int64_t>();
          else if (ak == "crop_tries") a.crop_tries = av.get<int>();
          else if (ak == "jitter") a.jitter = av.get<double>();
          else if (ak == "blur_probability") a.blur_probability = av.get<double>();
          else if (ak == "grey_probability") a.grey_probability = av.get<double>();
          else throw ConfigError("train config: unknown key augment." + ak);
        }
      } else {
        throw ConfigError("train config: unknown key '" + k + "'");
      }
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

double learning_rate(const TrainConfig& c, int step) {
  const double last = std::max(1, c.steps - 1);
  const double progress = std::clamp(static_cast<double>(step) / last, 0.0, 1.0);
  double lr = c.lr_end + (c.lr_start - c.lr_end) * std::pow(1.0 - progress, c.lr_power);
  if (c.warmup_steps > 0 && step < c.warmup_steps)
    lr *= static_cast<double>(step + 1) / static_cast<double>(c.warmup_steps);
  return lr;
}

double bootstrap_fraction(const TrainConfig& c, int step) {
  const double last = std::max(1, c.steps - 1);
  const double progress = static_cast<double>(step) / last;
  if (progress <= c.bootstrap_start) return 1.0;
  if (progress >= c.bootstrap_end) return c.bootstrap_final;
  const double a = (progress - c.bootstrap_start) / (c.bootstrap_end - c.bootstrap_start);
  return 1.0 + a * (c.bootstrap_final - 1.0);
}

int stage_of(const TrainConfig& c, int step) {
  return step < static_cast<int>(std::lround(c.stage1_fraction * c.steps)) ? 1 : 2;
}

// ---- clip forward -------------------------------------------------------------

ClipResult clip_forward(const network::WarpFormer& model, const dataset::Clip& clip,
                        const identity::IdentityAssignment& assignment, MaskSource source, double fraction,
                        int memory_stride) {
  const DType dt = model.config().dtype;
  const auto& ids = clip.object_ids;
  const int n = static_cast<int>(clip.frames.size());
  if (n < 2) throw UsageError("clip needs at least two frames");
  std::vector<Tensor> imgs;
  for (const auto& f : clip.frames) imgs.push_back(f.to(dt));

  MemoryBank memory(memory_stride);
  Tensor soft = one_hot(clip.labels[0], ids, dt);
  const auto ref = model.encode(imgs[0]);
  memory.append(ref.tokens(), model.embed_mask(soft, assignment, ids), 0, true);

  ClipResult out;
  Tensor total;
  for (int t = 1; t < n; ++t) {
    geometry::FlowField f = clip.flows[static_cast<std::size_t>(t)];
    if (f.uv.dtype() != dt) f.uv = f.uv.to(dt);
    const auto cur = model.encode(imgs[static_cast<std::size_t>(t)]);
    const auto sens = model.encode(geometry::warp_image(imgs[static_cast<std::size_t>(t - 1)], f));
    network::RTBInputs in;
    in.current = cur.tokens();
    in.memory = memory.features();
    in.memory_ids = memory.ids();
    in.sensory = sens.tokens();
    in.sensory_ids = model.embed_mask(geometry::warp_soft_mask(soft, f), assignment, ids);
    in.height = cur.x16.dim(1);
    in.width = cur.x16.dim(2);
    const Tensor logits = model.decode(model.refine(in), cur, assignment, ids);
    const auto loss = vos_loss(logits, clip.labels[static_cast<std::size_t>(t)], ids, fraction);
    out.frame_loss.push_back(loss.total.item());
    out.ce += loss.ce;
    out.dice += loss.dice;
    total = total.defined() ? ops::add(total, loss.total) : loss.total;
    if (t + 1 < n || memory.due(t)) {
      soft = source == MaskSource::ground_truth ? one_hot(clip.labels[static_cast<std::size_t>(t)], ids, dt)
                                                : ops::softmax(logits, 0).detach();
      if (memory.due(t) && t + 1 < n) memory.append(cur.tokens(), model.embed_mask(soft, assignment, ids), t);
    }
  }
  out.loss = ops::affine(total, 1.0 / (n - 1));
  out.ce /= n - 1;
  out.dice /= n - 1;
  return out;
}

// ---- optimizer ----------------------------------------------------------------

AdamW::AdamW(std::vector<Group> groups, double beta1, double beta2, double eps, double weight_decay)
    : groups_(std::move(groups)), beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay) {
  for (const auto& g : groups_) {
    m_.push_back(Tensor::zeros(g.param.shape(), g.param.dtype()));
    v_.push_back(Tensor::zeros(g.param.shape(), g.param.dtype()));
  }
}

void AdamW::step(double lr) {
  ++t_;
  const double bc1 = 1 - std::pow(beta1_, t_), bc2 = 1 - std::pow(beta2_, t_);
  for (std::size_t i = 0; i < groups_.size(); ++i) {
    auto& g = groups_[i];
    const Tensor grad = g.param.grad();
    if (!grad.defined()) continue;
    const double rate = lr * g.lr_scale;
    const double decay = g.decay ? wd_ : 0.0;
    dispatch(g.param.dtype(), [&]<class T>() {
      auto p = g.param.data<T>();
      auto m = m_[i].data<T>();
      auto v = v_[i].data<T>();
      auto d = grad.data<T>();
      for (std::size_t k = 0; k < p.size(); ++k) {
        const double gk = d[k];
        const double mk = beta1_ * m[k] + (1 - beta1_) * gk;
        const double vk = beta2_ * v[k] + (1 - beta2_) * gk * gk;
        m[k] = static_cast<T>(mk);
        v[k] = static_cast<T>(vk);
        const double update = (mk / bc1) / (std::sqrt(vk / bc2) + eps_) + decay * p[k];
        p[k] = static_cast<T>(p[k] - rate * update);
      }
    });
  }
}

void AdamW::save(const fs::path& dir) const {
  fs::create_directories(dir / "moments");
  json names = json::array();
  for (std::size_t i = 0; i < groups_.size(); ++i) {
    ops::save_blob(m_[i], dir / "moments" / (groups_[i].name + ".m.bin"));
    ops::save_blob(v_[i], dir / "moments" / (groups_[i].name + ".v.bin"));
    names.push_back(groups_[i].name);
  }
  std::ofstream os(dir / "optimizer.json");
  os << json{{"t", t_}, {"parameters", names}}.dump(1) << "\n";
  if (!os) throw IoError("cannot write " + (dir / "optimizer.json").string());
}

void AdamW::load(const fs::path& dir) {
  std::ifstream is(dir / "optimizer.json");
  if (!is) throw IoError("missing " + (dir / "optimizer.json").string());
  const json j = json::parse(is);
  t_ = j.at("t").get<int>();
  for (std::size_t i = 0; i < groups_.size(); ++i) {
    const auto dt = groups_[i].param.dtype();
    m_[i] = ops::load_blob(dir / "moments" / (groups_[i].name + ".m.bin"), dt);
    v_[i] = ops::load_blob(dir / "moments" / (groups_[i].name + ".v.bin"), dt);
    if (m_[i].shape() != groups_[i].param.shape())
      throw IoError("optimizer moment shape mismatch for " + groups_[i].name);
  }
}

// ---- trainer ------------------------------------------------------------------

namespace {

std::vector<AdamW::Group> make_groups(network::WarpFormer& model, const TrainConfig& cfg) {
  std::vector<AdamW::Group> groups;
  for (auto& [name, t] : model.parameters()) {
    const bool encoder = network::WarpFormer::is_encoder_parameter(name);
    // Biases, norm affine terms and the identity vectors are not decayed.
    const bool decay = t.rank() >= 2 && name.rfind("bank.", 0) != 0 && name.find("relative") == std::string::npos;
    groups.push_back({name, t, encoder ? cfg.encoder_lr_scale : 1.0, decay});
  }
  return groups;
}

}  // namespace

Trainer::Trainer(network::WarpFormer& model, const std::vector<dataset::Sequence>& data, TrainConfig cfg)
    : model_(model),
      data_(data),
      cfg_(std::move(cfg)),
      opt_(make_groups(model, cfg_), cfg_.beta1, cfg_.beta2, cfg_.adam_eps, cfg_.weight_decay) {
  cfg_.validate();
  if (data_.empty()) throw ConfigError("training needs at least one sequence");
  for (const auto& s : data_)
    if (s.length() < cfg_.clip_length)
      throw ConfigError("sequence " + s.name + " is shorter than the clip length " + std::to_string(cfg_.clip_length));
}

dataset::Clip Trainer::sample_clip(std::mt19937_64& rng) const {
  auto pick = [&]() {
    const auto& s = data_[rng() % data_.size()];
    const int start = static_cast<int>(rng() % static_cast<std::uint64_t>(s.length() - cfg_.clip_length + 1));
    return dataset::make_clip(s, start, cfg_.clip_length);
  };
  std::uniform_real_distribution<double> unit(0, 1);
  for (int attempt = 0; attempt < 20; ++attempt) {
    dataset::Clip c = pick();
    if (unit(rng) < cfg_.merge_probability) {
      const dataset::Clip other = pick();
      if (other.frames[0].shape() == c.frames[0].shape()) c = dataset::dynamic_merge(c, other);
    }
    c = dataset::augment(c, cfg_.augment, rng);
    if (!c.object_ids.empty() && static_cast<int>(c.object_ids.size()) <= model_.config().bank_slots) return c;
  }
  throw ConfigError("could not sample a training clip with a visible object in its first frame");
}

std::string Trainer::parameter_report() {
  std::ostringstream os;
  for (auto& [name, t] : model_.parameters()) {
    double sq = 0;
    bool finite = true;
    for (double v : t.to_vector()) {
      sq += v * v;
      finite = finite && std::isfinite(v);
    }
    const Tensor g = t.grad();
    double gsq = 0;
    if (g.defined())
      for (double v : g.to_vector()) gsq += v * v;
    os << "  " << name << " |w|=" << std::sqrt(sq) << " |g|=" << std::sqrt(gsq) << (finite ? "" : " NON-FINITE")
       << "\n";
  }
  return os.str();
}

StepRecord Trainer::step() {
  if (done()) throw UsageError("training already finished");
  const auto start = std::chrono::steady_clock::now();
  StepRecord rec;
  rec.step = step_;
  rec.stage = stage_of(cfg_, step_);
  rec.lr = learning_rate(cfg_, step_);
  model_.bank().frozen = rec.stage == 2;
  const double fraction = bootstrap_fraction(cfg_, step_);

  std::mt19937_64 rng(step_seed(cfg_.seed, step_));
  for (auto& [name, t] : model_.parameters()) t.zero_grad();
  for (int b = 0; b < cfg_.batch_size; ++b) {
    const auto clip = sample_clip(rng);
    const auto assignment = identity::IdentityAssignment::random(clip.object_ids, model_.config().bank_slots, rng);
    const auto res = clip_forward(model_, clip, assignment,
                                  rec.stage == 1 ? MaskSource::ground_truth : MaskSource::predicted, fraction,
                                  cfg_.memory_stride);
    Tensor loss = ops::affine(res.loss, 1.0 / cfg_.batch_size);
    if (step_ == cfg_.inject_nan_step) loss = ops::affine(loss, std::nan(""));
    const double value = loss.item();
    if (!std::isfinite(value))
      throw NumericError("non-finite loss at step " + std::to_string(step_) + "\nparameter norms:\n" +
                         parameter_report());
    loss.backward();
    rec.loss += value;
    rec.ce += res.ce / cfg_.batch_size;
    rec.dice += res.dice / cfg_.batch_size;
  }
  if (cfg_.max_grad_norm > 0) {
    double sq = 0;
    for (auto& [name, t] : model_.parameters())
      if (t.grad().defined())
        for (double v : t.grad().to_vector()) sq += v * v;
    const double norm = std::sqrt(sq);
    if (norm > cfg_.max_grad_norm) {
      const double s = cfg_.max_grad_norm / norm;
      for (auto& [name, t] : model_.parameters()) {
        Tensor g = t.grad();
        if (!g.defined()) continue;
        dispatch(g.dtype(), [&]<class T>() {
          for (auto& x : g.data<T>()) x = static_cast<T>(x * s);
        });
      }
    }
  }
  opt_.step(rec.lr);
  ++step_;
  rec.seconds = seconds_since(start);
  return rec;
}

void Trainer::save(const fs::path& dir) const {
  model_.save(dir);
  opt_.save(dir / "optimizer");
  std::ofstream os(dir / "trainer.json");
  os << json{{"step", step_}, {"config", to_json(cfg_)}}.dump(1) << "\n";
  if (!os) throw IoError("cannot write " + (dir / "trainer.json").string());
}

void Trainer::resume(const fs::path& dir) {
  std::ifstream is(dir / "trainer.json");
  if (!is) throw IoError("missing " + (dir / "trainer.json").string());
  const json j = json::parse(is);
  auto loaded = network::WarpFormer::load(dir);
  auto src = loaded.parameters();
  auto dst = model_.parameters();
  if (src.size() != dst.size()) throw IoError("checkpoint " + dir.string() + " does not match the model");
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i].first != dst[i].first || src[i].second.shape() != dst[i].second.shape())
      throw IoError("checkpoint parameter mismatch at " + src[i].first);
    dst[i].second.assign(src[i].second);
  }
  model_.bank().frozen = loaded.bank().frozen;
  opt_.load(dir / "optimizer");
  step_ = j.at("step").get<int>();
}

}  // namespace warpvos::engine
