#include "warpvos/attention.hpp"

#include <cmath>
#include <limits>

namespace warpvos::attention {

void AttentionConfig::validate() const {
  if (embed_dim <= 0 || heads <= 0 || embed_dim % heads != 0)
    throw ConfigError("embed_dim " + std::to_string(embed_dim) + " is not divisible by " +
                      std::to_string(heads) + " heads");
  if (window < 1 || window % 2 == 0)
    throw ConfigError("window must be a positive odd size, got " + std::to_string(window));
  if (ffn_hidden <= 0) throw ConfigError("ffn_hidden must be positive");
}

namespace {

// [n, C] -> [heads, n, d]
Tensor split_heads(const Tensor& x, int heads) {
  const std::int64_t n = x.dim(0), c = x.dim(1);
  if (c % heads != 0)
    throw DimensionError("channels " + std::to_string(c) + " not divisible by " +
                         std::to_string(heads) + " heads");
  return ops::permute(ops::reshape(x, {n, heads, c / heads}), {1, 0, 2});
}

Tensor merge_heads(const Tensor& x) {
  const std::int64_t h = x.dim(0), n = x.dim(1), d = x.dim(2);
  return ops::reshape(ops::permute(x, {1, 0, 2}), {n, h * d});
}

void check_tokens(const Tensor& q, const Tensor& k, const Tensor& v) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2)
    throw DimensionError("attention expects [positions, channels] matrices");
  if (q.dim(1) != k.dim(1))
    throw DimensionError("attention: query channels " + std::to_string(q.dim(1)) +
                         " vs key channels " + std::to_string(k.dim(1)));
  if (k.dim(0) != v.dim(0))
    throw DimensionError("attention: " + std::to_string(k.dim(0)) + " keys vs " +
                         std::to_string(v.dim(0)) + " values");
}

Tensor logits(const Tensor& q, const Tensor& k, int heads, const Tensor& logit_bias) {
  check_tokens(q, k, k);
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.dim(1) / heads));
  Tensor qh = split_heads(q, heads);
  Tensor kh = split_heads(k, heads);
  Tensor l = ops::affine(ops::matmul(qh, ops::transpose(kh)), scale);
  if (logit_bias.defined()) {
    if (logit_bias.shape() != l.shape())
      throw DimensionError("attention: logit bias " + shape_str(logit_bias.shape()) +
                           " vs logits " + shape_str(l.shape()));
    l = ops::add(l, logit_bias);
  }
  return l;
}

}  // namespace

Tensor attention_weights(const Tensor& q, const Tensor& k, int heads, const Tensor& logit_bias) {
  return ops::softmax(logits(q, k, heads, logit_bias), 2);
}

Tensor att(const Tensor& q, const Tensor& k, const Tensor& v, int heads, const Tensor& logit_bias) {
  check_tokens(q, k, v);
  if (v.dim(1) % heads != 0) throw DimensionError("attention: value channels not divisible by heads");
  Tensor weights = attention_weights(q, k, heads, logit_bias);
  return merge_heads(ops::matmul(weights, split_heads(v, heads)));
}

Tensor att_id(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& id, int heads,
              const Tensor& logit_bias) {
  if (id.shape() != v.shape())
    throw DimensionError("att_id: identity embedding " + shape_str(id.shape()) + " vs values " +
                         shape_str(v.shape()));
  return att(q, k, ops::add(v, id), heads, logit_bias);
}

Tensor catt(const Tensor& x_t, const Tensor& x_m, const Tensor& y_m, const Tensor& w_k,
            const Tensor& w_v, int heads) {
  if (x_m.rank() != 2 || x_m.dim(0) == 0)
    throw UsageError("catt: long-term memory is empty");
  Tensor q = ops::linear(x_t, w_k);
  Tensor k = ops::linear(x_m, w_k);
  Tensor v = ops::linear(x_m, w_v);
  return att_id(q, k, v, y_m, heads);
}

WindowIndex WindowIndex::build(std::int64_t height, std::int64_t width, int window) {
  if (window < 1 || window % 2 == 0)
    throw ConfigError("window must be a positive odd size, got " + std::to_string(window));
  WindowIndex wi;
  wi.height = height;
  wi.width = width;
  wi.window = window;
  const std::int64_t p = height * width, radius = (window - 1) / 2, side = 2LL * window - 1;
  wi.index.assign(static_cast<std::size_t>(p * p), -1);
  for (std::int64_t i = 0; i < p; ++i) {
    const std::int64_t yi = i / width, xi = i % width;
    for (std::int64_t j = 0; j < p; ++j) {
      const std::int64_t dy = j / width - yi, dx = j % width - xi;
      if (std::abs(dy) > radius || std::abs(dx) > radius) continue;
      wi.index[static_cast<std::size_t>(i * p + j)] =
          static_cast<std::int32_t>((dy + window - 1) * side + (dx + window - 1));
    }
  }
  return wi;
}

RelativeBias RelativeBias::create(int window, int heads, int head_dim, DType dtype) {
  const auto rows = WindowIndex::table_rows(window);
  return {Tensor::zeros({rows, heads}, dtype).requires_grad_(),
          Tensor::zeros({rows, head_dim}, dtype).requires_grad_()};
}

void RelativeBias::visit(const std::string& prefix, const layers::Visitor& fn) {
  fn(prefix + ".table", table);
  fn(prefix + ".key_embedding", key_embedding);
}

Tensor wcatt(const Tensor& x_t, const Tensor& x_l, const Tensor& y_l, const Tensor& w_k,
             const Tensor& w_v, int heads, const WindowIndex& window, const RelativeBias& bias) {
  const std::int64_t p = window.positions();
  if (x_t.dim(0) != p || x_l.dim(0) != p || y_l.dim(0) != p)
    throw DimensionError("wcatt: token counts do not match the " + std::to_string(window.height) +
                         "x" + std::to_string(window.width) + " grid");
  if (bias.table.dim(1) != heads) throw DimensionError("wcatt: bias table head count mismatch");
  Tensor q = ops::linear(x_t, w_k);
  Tensor k = ops::linear(x_l, w_k);
  Tensor v = ops::linear(x_l, w_v);
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.dim(1) / heads));
  const std::int64_t rows = bias.table.dim(0);

  // Per-head offset bias with -inf outside the window.
  Tensor table = ops::reshape(ops::transpose(bias.table), {heads, 1, rows});
  Tensor logit_bias =
      ops::gather_offsets(table, window.index, p, p, -std::numeric_limits<double>::infinity());
  // Relative key embedding: q . r_offset.
  Tensor qr = ops::matmul(split_heads(q, heads), ops::transpose(bias.key_embedding));
  Tensor rel = ops::gather_offsets(qr, window.index, p, p, 0.0);
  logit_bias = ops::add(logit_bias, ops::affine(rel, scale));
  return att_id(q, k, v, y_l, heads, logit_bias);
}

Tensor sine_positional(std::int64_t height, std::int64_t width, int channels, DType dtype) {
  if (channels <= 0 || channels % 4 != 0)
    throw ConfigError("sine_positional: channels " + std::to_string(channels) +
                      " not divisible by 4");
  const int half = channels / 2;
  Tensor out = Tensor::zeros({channels, height, width}, dtype);
  dispatch(dtype, [&]<class T>() {
    auto d = out.data<T>();
    for (int c = 0; c < channels; ++c) {
      const bool along_x = c >= half;
      const int local = c % half;
      const double freq = 1.0 / std::pow(10000.0, static_cast<double>(2 * (local / 2)) / half);
      for (std::int64_t y = 0; y < height; ++y)
        for (std::int64_t x = 0; x < width; ++x) {
          const double pos = static_cast<double>(along_x ? x : y) * freq;
          d[static_cast<std::size_t>((c * height + y) * width + x)] =
              static_cast<T>(local % 2 == 0 ? std::sin(pos) : std::cos(pos));
        }
    }
  });
  return out;
}

Tensor to_tokens(const Tensor& map) {
  if (map.rank() != 3) throw DimensionError("to_tokens: expected [C,H,W]");
  const std::int64_t c = map.dim(0), hw = map.dim(1) * map.dim(2);
  return ops::transpose(ops::reshape(map, {c, hw}));
}

Tensor from_tokens(const Tensor& tokens, std::int64_t height, std::int64_t width) {
  if (tokens.rank() != 2 || tokens.dim(0) != height * width)
    throw DimensionError("from_tokens: " + shape_str(tokens.shape()) + " does not tile " +
                         std::to_string(height) + "x" + std::to_string(width));
  return ops::reshape(ops::transpose(tokens), {tokens.dim(1), height, width});
}

// ---- sublayers ---------------------------------------------------------------

SelfAttention SelfAttention::create(const AttentionConfig& cfg, std::mt19937_64& rng,
                                    DType dtype) {
  cfg.validate();
  SelfAttention s;
  s.norm = layers::LayerNorm::create(cfg.embed_dim, dtype);
  s.q = layers::Linear::create(cfg.embed_dim, cfg.embed_dim, rng, dtype);
  s.k = layers::Linear::create(cfg.embed_dim, cfg.embed_dim, rng, dtype);
  s.v = layers::Linear::create(cfg.embed_dim, cfg.embed_dim, rng, dtype);
  s.out = layers::Linear::create(cfg.embed_dim, cfg.embed_dim, rng, dtype);
  s.heads = cfg.heads;
  return s;
}

Tensor SelfAttention::operator()(const Tensor& x, const Tensor& pos) const {
  Tensor n = norm(x);
  Tensor qk_in = pos.defined() ? ops::add(n, pos) : n;
  return ops::add(x, out(att(q(qk_in), k(qk_in), v(n), heads)));
}

void SelfAttention::visit(const std::string& prefix, const layers::Visitor& fn) {
  norm.visit(prefix + ".norm", fn);
  q.visit(prefix + ".q", fn);
  k.visit(prefix + ".k", fn);
  v.visit(prefix + ".v", fn);
  out.visit(prefix + ".out", fn);
}

LongTermAttention LongTermAttention::create(const AttentionConfig& cfg, std::mt19937_64& rng,
                                            DType dtype) {
  cfg.validate();
  LongTermAttention l;
  l.w_k = layers::Linear::create(cfg.embed_dim, cfg.embed_dim, rng, dtype, false);
  l.w_v = layers::Linear::create(cfg.embed_dim, cfg.embed_dim, rng, dtype, false);
  l.out = layers::Linear::create(cfg.embed_dim, cfg.embed_dim, rng, dtype);
  l.heads = cfg.heads;
  return l;
}

Tensor LongTermAttention::operator()(const Tensor& query, const Tensor& memory,
                                     const Tensor& memory_id) const {
  return out(catt(query, memory, memory_id, w_k.weight, w_v.weight, heads));
}

void LongTermAttention::visit(const std::string& prefix, const layers::Visitor& fn) {
  w_k.visit(prefix + ".w_k", fn);
  w_v.visit(prefix + ".w_v", fn);
  out.visit(prefix + ".out", fn);
}

ShortTermAttention ShortTermAttention::create(const AttentionConfig& cfg, std::mt19937_64& rng,
                                              DType dtype) {
  cfg.validate();
  ShortTermAttention s;
  s.w_k = layers::Linear::create(cfg.embed_dim, cfg.embed_dim, rng, dtype, false);
  s.w_v = layers::Linear::create(cfg.embed_dim, cfg.embed_dim, rng, dtype, false);
  s.out = layers::Linear::create(cfg.embed_dim, cfg.embed_dim, rng, dtype);
  s.bias = RelativeBias::create(cfg.window, cfg.heads, cfg.head_dim(), dtype);
  s.heads = cfg.heads;
  s.window = cfg.window;
  return s;
}

Tensor ShortTermAttention::operator()(const Tensor& query, const Tensor& sensory,
                                      const Tensor& sensory_id, const WindowIndex& index) const {
  if (index.window != window) throw ConfigError("window index built for a different window size");
  return out(wcatt(query, sensory, sensory_id, w_k.weight, w_v.weight, heads, index, bias));
}

void ShortTermAttention::visit(const std::string& prefix, const layers::Visitor& fn) {
  w_k.visit(prefix + ".w_k", fn);
  w_v.visit(prefix + ".w_v", fn);
  out.visit(prefix + ".out", fn);
  bias.visit(prefix + ".relative", fn);
}

FeedForward FeedForward::create(const AttentionConfig& cfg, std::mt19937_64& rng, DType dtype) {
  cfg.validate();
  FeedForward f;
  f.norm = layers::LayerNorm::create(cfg.embed_dim, dtype);
  f.fc1 = layers::Linear::create(cfg.embed_dim, cfg.ffn_hidden, rng, dtype);
  f.fc2 = layers::Linear::create(cfg.ffn_hidden, cfg.embed_dim, rng, dtype);
  return f;
}

Tensor FeedForward::operator()(const Tensor& x) const {
  return ops::add(x, fc2(ops::gelu(fc1(norm(x)))));
}

void FeedForward::visit(const std::string& prefix, const layers::Visitor& fn) {
  norm.visit(prefix + ".norm", fn);
  fc1.visit(prefix + ".fc1", fn);
  fc2.visit(prefix + ".fc2", fn);
}

}  // namespace warpvos::attention
