#include "warpvos/labels.hpp"

#include <algorithm>
#include <set>

namespace warpvos {

LabelMap LabelMap::zeros(std::int64_t height, std::int64_t width) {
  LabelMap m;
  m.height = height;
  m.width = width;
  m.data.assign(static_cast<std::size_t>(height * width), 0);
  return m;
}

std::int64_t LabelMap::count(int label) const {
  return std::count(data.begin(), data.end(), static_cast<std::uint8_t>(label));
}

std::vector<int> LabelMap::objects() const {
  std::set<int> ids;
  for (auto v : data)
    if (v != 0) ids.insert(v);
  return {ids.begin(), ids.end()};
}

Tensor one_hot(const LabelMap& labels, const std::vector<int>& object_ids, DType dtype) {
  const std::int64_t k1 = static_cast<std::int64_t>(object_ids.size()) + 1;
  const std::int64_t hw = labels.height * labels.width;
  std::vector<int> channel(256, 0);
  for (std::size_t k = 0; k < object_ids.size(); ++k) {
    if (object_ids[k] < 1 || object_ids[k] > 255)
      throw ConfigError("object id " + std::to_string(object_ids[k]) + " outside 1..255");
    channel[static_cast<std::size_t>(object_ids[k])] = static_cast<int>(k) + 1;
  }
  Tensor out = Tensor::zeros({k1, labels.height, labels.width}, dtype);
  dispatch(dtype, [&]<class T>() {
    auto d = out.data<T>();
    for (std::int64_t i = 0; i < hw; ++i)
      d[static_cast<std::size_t>(channel[labels.data[static_cast<std::size_t>(i)]] * hw + i)] = T(1);
  });
  return out;
}

LabelMap argmax_labels(const Tensor& probs, const std::vector<int>& object_ids) {
  if (probs.rank() != 3 || probs.dim(0) != static_cast<std::int64_t>(object_ids.size()) + 1)
    throw DimensionError("argmax_labels: " + shape_str(probs.shape()) + " does not hold " +
                         std::to_string(object_ids.size()) + " objects plus background");
  const std::int64_t k1 = probs.dim(0), h = probs.dim(1), w = probs.dim(2), hw = h * w;
  LabelMap out = LabelMap::zeros(h, w);
  dispatch(probs.dtype(), [&]<class T>() {
    auto d = probs.data<T>();
    for (std::int64_t i = 0; i < hw; ++i) {
      std::int64_t best = 0;
      for (std::int64_t k = 1; k < k1; ++k)
        if (d[static_cast<std::size_t>(k * hw + i)] > d[static_cast<std::size_t>(best * hw + i)])
          best = k;
      out.data[static_cast<std::size_t>(i)] =
          best == 0 ? 0 : static_cast<std::uint8_t>(object_ids[static_cast<std::size_t>(best - 1)]);
    }
  });
  return out;
}

}  // namespace warpvos
