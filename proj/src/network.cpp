#include "warpvos/network.hpp"

#include <fstream>
#include <mutex>
#include <numeric>

#include "warpvos/geometry.hpp"

namespace warpvos::network {

using nlohmann::json;

attention::AttentionConfig ModelConfig::attention() const {
  attention::AttentionConfig a;
  a.embed_dim = embed_dim;
  a.heads = heads;
  a.ffn_hidden = ffn_hidden;
  a.window = window;
  return a;
}

void ModelConfig::validate() const {
  attention().validate();
  if (encoder_channels.size() != 4) throw ConfigError("encoder needs exactly 4 stages");
  for (int c : encoder_channels)
    if (c <= 0) throw ConfigError("encoder channels must be positive");
  if (embed_dim % 4 != 0) throw ConfigError("embed_dim must be divisible by 4 for positions");
  if (bank_slots < 1) throw ConfigError("bank_slots must be positive");
  if (decoder_channels <= 0 || decoder_groups <= 0 || decoder_channels % decoder_groups != 0)
    throw ConfigError("decoder_channels must be a positive multiple of decoder_groups");
}

std::string fusion_name(Fusion f) {
  switch (f) {
    case Fusion::sum: return "sum";
    case Fusion::long_only: return "long_only";
    case Fusion::short_only: return "short_only";
  }
  return "sum";
}

Fusion parse_fusion(const std::string& s) {
  if (s == "sum") return Fusion::sum;
  if (s == "long_only") return Fusion::long_only;
  if (s == "short_only") return Fusion::short_only;
  throw ConfigError("unknown fusion mode '" + s + "'");
}

json to_json(const ModelConfig& cfg) {
  return {{"encoder_channels", cfg.encoder_channels},
          {"embed_dim", cfg.embed_dim},
          {"heads", cfg.heads},
          {"ffn_hidden", cfg.ffn_hidden},
          {"window", cfg.window},
          {"bank_slots", cfg.bank_slots},
          {"decoder_channels", cfg.decoder_channels},
          {"decoder_groups", cfg.decoder_groups},
          {"fusion", fusion_name(cfg.fusion)},
          {"dtype", dtype_name(cfg.dtype)}};
}

ModelConfig model_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  ModelConfig cfg;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "encoder_channels") cfg.encoder_channels = value.get<std::vector<int>>();
      else if (key == "embed_dim") cfg.embed_dim = value.get<int>();
      else if (key == "heads") cfg.heads = value.get<int>();
      else if (key == "ffn_hidden") cfg.ffn_hidden = value.get<int>();
      else if (key == "window") cfg.window = value.get<int>();
      else if (key == "bank_slots") cfg.bank_slots = value.get<int>();
      else if (key == "decoder_channels") cfg.decoder_channels = value.get<int>();
      else if (key == "decoder_groups") cfg.decoder_groups = value.get<int>();
      else if (key == "fusion") cfg.fusion = parse_fusion(value.get<std::string>());
      else if (key == "dtype") {
        const auto d = value.get<std::string>();
        if (d == "f32") cfg.dtype = DType::f32;
        else if (d == "f64") cfg.dtype = DType::f64;
        else throw ConfigError("unknown dtype '" + d + "'");
      } else {
        throw ConfigError("unknown model config key '" + key + "'");
      }
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

namespace {

int groups_for(int channels) { return std::gcd(channels, 8); }

}  // namespace

// ---- encoder -------------------------------------------------------------------

Encoder Encoder::create(const ModelConfig& cfg, std::mt19937_64& rng) {
  Encoder e;
  int in = 3;
  for (int c : cfg.encoder_channels) {
    Stage s;
    s.down = layers::Conv::create(in, c, 3, 2, 1, rng, cfg.dtype);
    s.norm1 = layers::GroupNorm::create(c, groups_for(c), cfg.dtype);
    s.conv = layers::Conv::create(c, c, 3, 1, 1, rng, cfg.dtype);
    s.norm2 = layers::GroupNorm::create(c, groups_for(c), cfg.dtype);
    e.stages.push_back(std::move(s));
    in = c;
  }
  e.proj = layers::Conv::create(in, cfg.embed_dim, 1, 1, 0, rng, cfg.dtype);
  return e;
}

FrameFeatures Encoder::operator()(const Tensor& image) const {
  if (image.rank() != 3 || image.dim(0) != 3)
    throw DimensionError("encoder expects [3,H,W], got " + shape_str(image.shape()));
  if (image.dim(1) % 16 != 0 || image.dim(2) % 16 != 0)
    throw DimensionError("encoder input " + shape_str(image.shape()) +
                         " is not divisible by 16; pad at ingestion");
  FrameFeatures out;
  out.height = image.dim(1);
  out.width = image.dim(2);
  Tensor x = ops::affine(image, 1.0, -0.5);
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const Stage& s = stages[i];
    x = ops::relu(s.norm1(s.down(x)));
    x = ops::relu(s.norm2(s.conv(x)));
    if (i == 1) out.skip4 = x;
    if (i == 2) out.skip8 = x;
  }
  out.x16 = proj(x);
  return out;
}

void Encoder::visit(const std::string& prefix, const layers::Visitor& fn) {
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const std::string p = prefix + ".stage" + std::to_string(i);
    stages[i].down.visit(p + ".down", fn);
    stages[i].norm1.visit(p + ".norm1", fn);
    stages[i].conv.visit(p + ".conv", fn);
    stages[i].norm2.visit(p + ".norm2", fn);
  }
  proj.visit(prefix + ".proj", fn);
}

// ---- refinement block ----------------------------------------------------------

RTB RTB::create(const ModelConfig& cfg, std::mt19937_64& rng) {
  const auto a = cfg.attention();
  RTB r;
  r.self_attn = attention::SelfAttention::create(a, rng, cfg.dtype);
  r.cross_norm = layers::LayerNorm::create(cfg.embed_dim, cfg.dtype);
  r.long_term = attention::LongTermAttention::create(a, rng, cfg.dtype);
  r.short_term = attention::ShortTermAttention::create(a, rng, cfg.dtype);
  r.fusion_attn = attention::SelfAttention::create(a, rng, cfg.dtype);
  r.ffn = attention::FeedForward::create(a, rng, cfg.dtype);
  r.fusion = cfg.fusion;
  r.embed_dim = cfg.embed_dim;
  return r;
}

Tensor RTB::operator()(const RTBInputs& in, const Tensor& pos,
                       const attention::WindowIndex& window) const {
  const std::int64_t p = in.height * in.width;
  if (!in.current.defined() || in.current.dim(0) != p)
    throw DimensionError("rtb: current tokens do not cover the " + std::to_string(in.height) +
                         "x" + std::to_string(in.width) + " grid");
  if (in.memory.empty() || in.memory.size() != in.memory_ids.size())
    throw UsageError("rtb: long-term memory is empty or unpaired");

  Tensor s = self_attn(in.current, pos);
  Tensor q = cross_norm(s);

  const bool have_sensory = in.sensory.defined();
  const bool use_long = fusion != Fusion::short_only || !have_sensory;
  const bool use_short = have_sensory && fusion != Fusion::long_only;

  Tensor fused;
  if (use_long) {
    std::vector<Tensor> xs, ys;
    for (std::size_t i = 0; i < in.memory.size(); ++i) {
      xs.push_back(cross_norm(in.memory[i]));
      ys.push_back(in.memory_ids[i]);
    }
    Tensor xm = xs.size() == 1 ? xs[0] : ops::concat(xs, 0);
    Tensor ym = ys.size() == 1 ? ys[0] : ops::concat(ys, 0);
    fused = ops::add(s, long_term(q, xm, ym));
  }
  if (use_short) {
    Tensor branch = ops::add(s, short_term(q, cross_norm(in.sensory), in.sensory_ids, window));
    fused = fused.defined() ? ops::add(fused, branch) : branch;
  }
  return ffn(fusion_attn(fused, pos));
}

void RTB::visit(const std::string& prefix, const layers::Visitor& fn) {
  self_attn.visit(prefix + ".self_attn", fn);
  cross_norm.visit(prefix + ".cross_norm", fn);
  long_term.visit(prefix + ".long_term", fn);
  short_term.visit(prefix + ".short_term", fn);
  fusion_attn.visit(prefix + ".fusion_attn", fn);
  ffn.visit(prefix + ".ffn", fn);
}

// ---- decoder -------------------------------------------------------------------

Decoder Decoder::create(const ModelConfig& cfg, std::mt19937_64& rng) {
  const int d = cfg.decoder_channels, g = cfg.decoder_groups;
  const auto rep = ops::PadMode::replicate;
  Decoder dec;
  dec.in16 = layers::Conv::create(cfg.embed_dim, d, 1, 1, 0, rng, cfg.dtype);
  dec.norm16 = layers::GroupNorm::create(d, g, cfg.dtype);
  dec.lateral8 = layers::Conv::create(cfg.encoder_channels[2], d, 1, 1, 0, rng, cfg.dtype);
  dec.smooth8 = layers::Conv::create(d, d, 3, 1, 1, rng, cfg.dtype, rep);
  dec.norm8 = layers::GroupNorm::create(d, g, cfg.dtype);
  dec.lateral4 = layers::Conv::create(cfg.encoder_channels[1], d, 1, 1, 0, rng, cfg.dtype);
  dec.smooth4 = layers::Conv::create(d, d, 3, 1, 1, rng, cfg.dtype, rep);
  dec.norm4 = layers::GroupNorm::create(d, g, cfg.dtype);
  dec.proj = layers::Conv::create(d, cfg.embed_dim, 1, 1, 0, rng, cfg.dtype);
  return dec;
}

Tensor Decoder::operator()(const Tensor& refined, const FrameFeatures& skips) const {
  const std::int64_t h = refined.dim(1), w = refined.dim(2);
  if (!skips.skip8.defined() || skips.skip8.dim(1) != 2 * h || skips.skip8.dim(2) != 2 * w ||
      skips.skip4.dim(1) != 4 * h || skips.skip4.dim(2) != 4 * w)
    throw DimensionError("decoder: skips do not match a " + std::to_string(h) + "x" +
                         std::to_string(w) + " grid");
  Tensor x = ops::relu(norm16(in16(refined)));
  x = ops::add(geometry::resize_bilinear(x, 2 * h, 2 * w), lateral8(skips.skip8));
  x = ops::relu(norm8(smooth8(x)));
  x = ops::add(geometry::resize_bilinear(x, 4 * h, 4 * w), lateral4(skips.skip4));
  x = ops::relu(norm4(smooth4(x)));
  return proj(x);
}

void Decoder::visit(const std::string& prefix, const layers::Visitor& fn) {
  in16.visit(prefix + ".in16", fn);
  norm16.visit(prefix + ".norm16", fn);
  lateral8.visit(prefix + ".lateral8", fn);
  smooth8.visit(prefix + ".smooth8", fn);
  norm8.visit(prefix + ".norm8", fn);
  lateral4.visit(prefix + ".lateral4", fn);
  smooth4.visit(prefix + ".smooth4", fn);
  norm4.visit(prefix + ".norm4", fn);
  proj.visit(prefix + ".proj", fn);
}

// ---- full model ----------------------------------------------------------------

struct WarpFormer::GridCache {
  std::mutex mutex;
  std::map<std::pair<std::int64_t, std::int64_t>, std::shared_ptr<attention::WindowIndex>> windows;
  std::map<std::pair<std::int64_t, std::int64_t>, Tensor> positions;
};

WarpFormer WarpFormer::create(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  WarpFormer m;
  m.cfg_ = cfg;
  m.encoder_ = Encoder::create(cfg, rng);
  m.rtb_ = RTB::create(cfg, rng);
  m.decoder_ = Decoder::create(cfg, rng);
  m.bank_ = identity::IdentityBank::create(cfg.bank_slots, cfg.embed_dim, rng, cfg.dtype);
  m.cache_ = std::make_shared<GridCache>();
  return m;
}

const attention::WindowIndex& WarpFormer::window_index(std::int64_t h, std::int64_t w) const {
  std::lock_guard lock(cache_->mutex);
  auto& slot = cache_->windows[{h, w}];
  if (!slot)
    slot = std::make_shared<attention::WindowIndex>(attention::WindowIndex::build(h, w, cfg_.window));
  return *slot;
}

const Tensor& WarpFormer::positional(std::int64_t h, std::int64_t w) const {
  std::lock_guard lock(cache_->mutex);
  auto it = cache_->positions.find({h, w});
  if (it == cache_->positions.end())
    it = cache_->positions
             .emplace(std::make_pair(h, w),
                      attention::to_tokens(attention::sine_positional(h, w, cfg_.embed_dim, cfg_.dtype)))
             .first;
  return it->second;
}

FrameFeatures WarpFormer::encode(const Tensor& image) const { return encoder_(image); }

Tensor WarpFormer::embed_mask(const Tensor& mask, const identity::IdentityAssignment& assignment,
                              const std::vector<int>& object_ids) const {
  const std::int64_t hp = mask.dim(1) / identity::kPatch, wp = mask.dim(2) / identity::kPatch;
  Tensor y = identity::encode_mask(mask, bank_, assignment, object_ids);
  y = ops::affine(y, 1.0 / (identity::kPatch * identity::kPatch));
  return attention::to_tokens(ops::reshape(y, {cfg_.embed_dim, hp, wp}));
}

Tensor WarpFormer::refine(const RTBInputs& in) const {
  return rtb_(in, positional(in.height, in.width), window_index(in.height, in.width));
}

Tensor WarpFormer::decode(const Tensor& refined_tokens, const FrameFeatures& current,
                          const identity::IdentityAssignment& assignment,
                          const std::vector<int>& object_ids) const {
  const std::int64_t h = current.x16.dim(1), w = current.x16.dim(2);
  Tensor proj = decoder_(attention::from_tokens(refined_tokens, h, w), current);
  // Readout and bilinear upsampling are both linear, so reading out at 1/4
  // before the final x4 upsample gives the same logits at a sixteenth of the
  // cost.
  Tensor logits = identity::readout_logits(proj, bank_, assignment, object_ids);
  return geometry::resize_bilinear(logits, current.height, current.width);
}

void WarpFormer::visit(const layers::Visitor& fn) {
  encoder_.visit("encoder", fn);
  rtb_.visit("rtb", fn);
  decoder_.visit("decoder", fn);
  bank_.visit(fn);
}

std::vector<std::pair<std::string, Tensor>> WarpFormer::parameters() {
  std::vector<std::pair<std::string, Tensor>> out;
  visit([&](const std::string& name, Tensor& t) { out.emplace_back(name, t); });
  return out;
}

bool WarpFormer::is_encoder_parameter(const std::string& name) {
  return name.rfind("encoder.", 0) == 0;
}

void WarpFormer::save(const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "params");
  json params = json::array();
  for (auto& [name, t] : parameters()) {
    const std::string file = "params/" + name + ".bin";
    ops::save_blob(t, dir / file);
    params.push_back({{"name", name}, {"shape", t.shape()}, {"file", file}});
  }
  json manifest = {{"format", "warpvos-checkpoint-1"},
                   {"config", to_json(cfg_)},
                   {"bank_frozen", bank_.frozen},
                   {"parameters", params}};
  std::ofstream os(dir / "manifest.json");
  if (!os) throw IoError("cannot write " + (dir / "manifest.json").string());
  os << manifest.dump(2) << "\n";
}

WarpFormer WarpFormer::load(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw IoError("no checkpoint manifest in " + dir.string());
  json manifest;
  try {
    manifest = json::parse(is);
  } catch (const json::exception& e) {
    throw IoError("malformed checkpoint manifest: " + std::string(e.what()));
  }
  if (manifest.value("format", "") != "warpvos-checkpoint-1")
    throw IoError("unsupported checkpoint format in " + dir.string());
  WarpFormer m = create(model_config_from_json(manifest.at("config")), 0);
  std::map<std::string, json> entries;
  for (const auto& p : manifest.at("parameters")) entries[p.at("name").get<std::string>()] = p;
  for (auto& [name, t] : m.parameters()) {
    auto it = entries.find(name);
    if (it == entries.end()) throw IoError("checkpoint is missing parameter " + name);
    Tensor loaded = ops::load_blob(dir / it->second.at("file").get<std::string>(), t.dtype());
    if (loaded.shape() != t.shape())
      throw IoError("parameter " + name + " has shape " + shape_str(loaded.shape()) +
                    ", expected " + shape_str(t.shape()));
    t.assign(loaded);
  }
  if (entries.size() != m.parameters().size())
    throw IoError("checkpoint holds parameters unknown to this model");
  m.bank_.frozen = manifest.value("bank_frozen", false);
  return m;
}

}  // namespace warpvos::network
