#pragma once

#include <cstdint>
#include <vector>

#include "warpvos/tensor.hpp"

namespace warpvos::geometry {

// Per-pixel displacement [2, H, W] defined on the target grid. Channel 0 is
// the horizontal component u, channel 1 the vertical component v. The value
// at target pixel p points to the source location p + f(p) that is sampled
// (backward-warp convention), so the zero field is the identity warp.
struct FlowField {
  Tensor uv;

  static FlowField zeros(std::int64_t height, std::int64_t width, DType dtype = DType::f32);
  // Field with the same displacement everywhere.
  static FlowField constant(std::int64_t height, std::int64_t width, double u, double v,
                            DType dtype = DType::f32);

  std::int64_t height() const { return uv.dim(1); }
  std::int64_t width() const { return uv.dim(2); }
  // Throws DimensionError unless uv is [2, H, W].
  void validate() const;
};

// Absolute sampling coordinates (x, y) of every pixel in an H x W grid.
Tensor identity_grid(std::int64_t height, std::int64_t width, DType dtype = DType::f32);

// Bilinear interpolation of `source` [C, H, W] at absolute coordinates
// `coords` [2, Ho, Wo] (x first). Samples outside the image clamp to the
// border. Differentiable with respect to `source` only.
Tensor grid_sample_bilinear(const Tensor& source, const Tensor& coords);

// Samples the image at p + f(p): brings I_k into the frame-t domain.
Tensor warp_image(const Tensor& image, const FlowField& flow);

// Warps a per-pixel probability stack [K+1, H, W] (channel 0 background)
// and renormalizes every pixel onto the simplex.
Tensor warp_soft_mask(const Tensor& mask, const FlowField& flow, double eps = 1e-8);

// x / max(sum over channel axis 0, eps), differentiable.
Tensor normalize_simplex(const Tensor& x, double eps = 1e-8);

// Half-pixel-centred bilinear resize of [C, H, W].
Tensor resize_bilinear(const Tensor& x, std::int64_t out_height, std::int64_t out_width);

// Standard color-wheel visualization, RGB interleaved (H * W * 3). When
// `max_magnitude` <= 0 the field maximum is used for normalization.
std::vector<std::uint8_t> flow_to_rgb(const FlowField& flow, double max_magnitude = 0.0);

}  // namespace warpvos::geometry
