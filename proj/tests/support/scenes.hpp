#pragma once

#include "warpvos/dataset.hpp"
#include "warpvos/network.hpp"
#include "warpvos/synthetic.hpp"

namespace warpvos::testing {

// Renders a scene straight into an in-memory sequence with exact flow.
inline dataset::Sequence scene_sequence(const synthetic::Scene& scene) {
  dataset::Sequence s;
  s.name = scene.name;
  s.height = s.orig_height = scene.height;
  s.width = s.orig_width = scene.width;
  for (int t = 0; t < scene.frames; ++t) {
    Tensor img = Tensor::zeros({3, scene.height, scene.width});
    LabelMap lab = LabelMap::zeros(scene.height, scene.width);
    scene.render(t, img, lab);
    s.frames.push_back(img);
    s.labels.push_back(lab);
    s.flows.push_back(t == 0 ? geometry::FlowField{Tensor::zeros({2, scene.height, scene.width})} : scene.flow(t));
  }
  s.first_frame = scene.first_frames(1);
  return s;
}

inline synthetic::GeneratorSpec small_spec(std::uint64_t seed = 3) {
  synthetic::GeneratorSpec spec;
  spec.seed = seed;
  spec.height = 64;
  spec.width = 64;
  spec.frames = 8;
  spec.min_radius = 8;
  spec.max_radius = 16;
  spec.max_translation = 2;
  spec.background_motion = 1;
  spec.late_entry_probability = 0;
  spec.exit_probability = 0;
  return spec;
}

inline network::ModelConfig tiny_model(DType dtype = DType::f32) {
  network::ModelConfig cfg;
  cfg.encoder_channels = {4, 8, 8, 8};
  cfg.embed_dim = 8;
  cfg.heads = 2;
  cfg.ffn_hidden = 16;
  cfg.window = 3;
  cfg.bank_slots = 4;
  cfg.decoder_channels = 8;
  cfg.decoder_groups = 4;
  cfg.dtype = dtype;
  return cfg;
}

}  // namespace warpvos::testing
