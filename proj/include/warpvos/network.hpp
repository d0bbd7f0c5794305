#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "warpvos/attention.hpp"
#include "warpvos/identity.hpp"
#include "warpvos/layers.hpp"

namespace warpvos::network {

// How the long-term and short-term branch outputs are combined before the
// fusion self-attention. `sum` adds both residual branches.
enum class Fusion { sum, long_only, short_only };

struct ModelConfig {
  std::vector<int> encoder_channels{32, 64, 128, 256};
  int embed_dim = 256;  // also the identity dimension
  int heads = 8;
  int ffn_hidden = 1024;
  int window = 15;
  int bank_slots = 10;
  int decoder_channels = 128;
  int decoder_groups = 8;
  Fusion fusion = Fusion::sum;
  DType dtype = DType::f32;

  attention::AttentionConfig attention() const;
  void validate() const;
};

nlohmann::json to_json(const ModelConfig& cfg);
// Rejects unknown keys and invalid values with ConfigError.
ModelConfig model_config_from_json(const nlohmann::json& j);
std::string fusion_name(Fusion f);
Fusion parse_fusion(const std::string& s);

struct FrameFeatures {
  Tensor x16;    // [C, H/16, W/16]
  Tensor skip4;  // [c1, H/4, W/4]
  Tensor skip8;  // [c2, H/8, W/8]
  std::int64_t height = 0, width = 0;  // input extents

  Tensor tokens() const { return attention::to_tokens(x16); }
};

struct Encoder {
  struct Stage {
    layers::Conv down, conv;
    layers::GroupNorm norm1, norm2;
  };
  std::vector<Stage> stages;
  layers::Conv proj;

  static Encoder create(const ModelConfig& cfg, std::mt19937_64& rng);
  // image [3, H, W] with values in [0, 1]; H and W divisible by 16.
  FrameFeatures operator()(const Tensor& image) const;
  void visit(const std::string& prefix, const layers::Visitor& fn);
};

// Inputs to the refinement block, all as [positions, C] tokens on the 1/16
// grid. Identity embeddings are already scaled (see embed_mask).
struct RTBInputs {
  Tensor current;                  // X_t
  std::vector<Tensor> memory;      // X_m per entry
  std::vector<Tensor> memory_ids;  // Y_m per entry
  Tensor sensory;                  // X_l; undefined on the first frame
  Tensor sensory_ids;              // Y_l
  std::int64_t height = 0, width = 0;
};

struct RTB {
  attention::SelfAttention self_attn;
  layers::LayerNorm cross_norm;
  attention::LongTermAttention long_term;
  attention::ShortTermAttention short_term;
  attention::SelfAttention fusion_attn;
  attention::FeedForward ffn;
  Fusion fusion = Fusion::sum;
  int embed_dim = 0;

  static RTB create(const ModelConfig& cfg, std::mt19937_64& rng);
  Tensor operator()(const RTBInputs& in, const Tensor& pos,
                    const attention::WindowIndex& window) const;
  void visit(const std::string& prefix, const layers::Visitor& fn);
};

struct Decoder {
  layers::Conv in16, lateral8, lateral4, smooth8, smooth4, proj;
  layers::GroupNorm norm16, norm8, norm4;

  static Decoder create(const ModelConfig& cfg, std::mt19937_64& rng);
  // refined [C, h, w] + skips -> projected features [C_id, H/4, W/4].
  Tensor operator()(const Tensor& refined, const FrameFeatures& skips) const;
  void visit(const std::string& prefix, const layers::Visitor& fn);
};

class WarpFormer {
 public:
  static WarpFormer create(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  identity::IdentityBank& bank() { return bank_; }
  const identity::IdentityBank& bank() const { return bank_; }

  FrameFeatures encode(const Tensor& image) const;
  // Identity embedding of a soft mask as tokens [P, C], divided by the
  // 256 pixels of a patch so a fully covered cell carries one copy of the
  // slot vector.
  Tensor embed_mask(const Tensor& mask, const identity::IdentityAssignment& assignment,
                    const std::vector<int>& object_ids) const;
  Tensor refine(const RTBInputs& in) const;
  // Logits [K+1, H, W] for the refined tokens of the current frame.
  Tensor decode(const Tensor& refined_tokens, const FrameFeatures& current,
                const identity::IdentityAssignment& assignment,
                const std::vector<int>& object_ids) const;

  void visit(const layers::Visitor& fn);
  std::vector<std::pair<std::string, Tensor>> parameters();
  // Parameters that receive the reduced encoder learning rate.
  static bool is_encoder_parameter(const std::string& name);

  void save(const std::filesystem::path& dir);
  static WarpFormer load(const std::filesystem::path& dir);

 private:
  const attention::WindowIndex& window_index(std::int64_t h, std::int64_t w) const;
  const Tensor& positional(std::int64_t h, std::int64_t w) const;

  ModelConfig cfg_;
  Encoder encoder_;
  RTB rtb_;
  Decoder decoder_;
  identity::IdentityBank bank_;
  // Per-grid window indices and positional embeddings, shared by copies.
  struct GridCache;
  std::shared_ptr<GridCache> cache_;
};

}  // namespace warpvos::network
