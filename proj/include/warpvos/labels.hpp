#pragma once

#include <cstdint>
#include <vector>

#include "warpvos/tensor.hpp"

namespace warpvos {

// Per-pixel object labels, 0 = background.
struct LabelMap {
  std::int64_t height = 0, width = 0;
  std::vector<std::uint8_t> data;

  static LabelMap zeros(std::int64_t height, std::int64_t width);
  std::uint8_t& at(std::int64_t y, std::int64_t x) { return data[static_cast<std::size_t>(y * width + x)]; }
  std::uint8_t at(std::int64_t y, std::int64_t x) const {
    return data[static_cast<std::size_t>(y * width + x)];
  }
  bool empty() const { return data.empty(); }
  std::int64_t count(int label) const;
  // Sorted non-zero labels present.
  std::vector<int> objects() const;
  bool operator==(const LabelMap&) const = default;
};

// [K+1, H, W] one-hot stack; channel k >= 1 is object_ids[k-1]. Labels not
// listed fall into the background channel.
Tensor one_hot(const LabelMap& labels, const std::vector<int>& object_ids,
               DType dtype = DType::f32);

// Argmax over channels of a [K+1, H, W] stack, mapped back to object ids.
LabelMap argmax_labels(const Tensor& probs, const std::vector<int>& object_ids);

}  // namespace warpvos
