#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <vector>

#include "warpvos/layers.hpp"

namespace warpvos::attention {

struct AttentionConfig {
  int embed_dim = 256;
  int heads = 8;
  int ffn_hidden = 1024;
  int window = 15;  // odd; side of the centred neighbourhood

  int head_dim() const { return embed_dim / heads; }
  // Throws ConfigError unless embed_dim % heads == 0 and window is odd.
  void validate() const;
};

// ---- functional forms --------------------------------------------------------
//
// Token matrices are [positions, channels]. Channels split into `heads`
// contiguous groups; logits use 1/sqrt(channels per head).

// softmax(Q K^T / sqrt(d) + logit_bias) V per head, heads concatenated.
// `logit_bias`, when given, is [heads, n, m] and may hold -inf entries.
Tensor att(const Tensor& q, const Tensor& k, const Tensor& v, int heads,
           const Tensor& logit_bias = {});

// att(Q, K, V + ID).
Tensor att_id(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& id, int heads,
              const Tensor& logit_bias = {});

// Attention weights [heads, n, m] (same logits as att()).
Tensor attention_weights(const Tensor& q, const Tensor& k, int heads,
                         const Tensor& logit_bias = {});

// Long-term cross attention with one matching projection shared by the
// query and key sides: AttID(X_t Wk, X_m Wk, X_m Wv, Y_m).
Tensor catt(const Tensor& x_t, const Tensor& x_m, const Tensor& y_m, const Tensor& w_k,
            const Tensor& w_v, int heads);

// Relative-offset lookup for a centred window on an H x W grid. For query i
// and key j, index[i * P + j] is the row of the (2w-1)^2 offset table for
// their displacement, or -1 when j lies outside the window of i.
struct WindowIndex {
  std::int64_t height = 0, width = 0;
  int window = 1;
  std::vector<std::int32_t> index;

  static WindowIndex build(std::int64_t height, std::int64_t width, int window);
  std::int64_t positions() const { return height * width; }
  static std::int64_t table_rows(int window) { return (2LL * window - 1) * (2LL * window - 1); }
};

// Learned per-offset terms: an additive logit bias per head and a relative
// key embedding shared across heads (logit += q . r_offset / sqrt(d)).
struct RelativeBias {
  Tensor table;          // [(2w-1)^2, heads]
  Tensor key_embedding;  // [(2w-1)^2, head_dim]

  static RelativeBias create(int window, int heads, int head_dim, DType dtype);
  void visit(const std::string& prefix, const layers::Visitor& fn);
};

// Windowed cross attention on a grid: every current-frame position attends
// to the warped previous-frame positions inside its neighbourhood, with the
// relative bias added. Border windows are clipped to valid positions.
Tensor wcatt(const Tensor& x_t, const Tensor& x_l, const Tensor& y_l, const Tensor& w_k,
             const Tensor& w_v, int heads, const WindowIndex& window, const RelativeBias& bias);

// Fixed 2-D sinusoidal embedding [C, H, W]: the first C/2 channels encode
// the row, the rest the column, as interleaved (sin, cos) pairs over
// geometric frequencies 1 / 10000^(2i / (C/2)).
Tensor sine_positional(std::int64_t height, std::int64_t width, int channels,
                       DType dtype = DType::f32);

// [C, H, W] <-> [H*W, C]
Tensor to_tokens(const Tensor& map);
Tensor from_tokens(const Tensor& tokens, std::int64_t height, std::int64_t width);

// ---- sublayers (pre-norm, residual) --------------------------------------------

struct SelfAttention {
  layers::LayerNorm norm;
  layers::Linear q, k, v, out;
  int heads = 1;

  static SelfAttention create(const AttentionConfig& cfg, std::mt19937_64& rng, DType dtype);
  // x + out(att(norm(x) + pos, norm(x) + pos, norm(x)))
  Tensor operator()(const Tensor& x, const Tensor& pos) const;
  void visit(const std::string& prefix, const layers::Visitor& fn);
};

struct LongTermAttention {
  layers::Linear w_k, w_v, out;  // w_k/w_v without bias
  int heads = 1;

  static LongTermAttention create(const AttentionConfig& cfg, std::mt19937_64& rng, DType dtype);
  // out(catt(query, memory, memory_id)); inputs are already normalized.
  Tensor operator()(const Tensor& query, const Tensor& memory, const Tensor& memory_id) const;
  void visit(const std::string& prefix, const layers::Visitor& fn);
};

struct ShortTermAttention {
  layers::Linear w_k, w_v, out;
  RelativeBias bias;
  int heads = 1;
  int window = 1;

  static ShortTermAttention create(const AttentionConfig& cfg, std::mt19937_64& rng,
                                   DType dtype);
  Tensor operator()(const Tensor& query, const Tensor& sensory, const Tensor& sensory_id,
                    const WindowIndex& index) const;
  void visit(const std::string& prefix, const layers::Visitor& fn);
};

struct FeedForward {
  layers::LayerNorm norm;
  layers::Linear fc1, fc2;

  static FeedForward create(const AttentionConfig& cfg, std::mt19937_64& rng, DType dtype);
  // x + fc2(gelu(fc1(norm(x))))
  Tensor operator()(const Tensor& x) const;
  void visit(const std::string& prefix, const layers::Visitor& fn);
};

}  // namespace warpvos::attention
