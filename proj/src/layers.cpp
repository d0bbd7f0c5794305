#include "warpvos/layers.hpp"

#include <cmath>

namespace warpvos::layers {

Tensor init_uniform(const Shape& shape, double bound, std::mt19937_64& rng, DType dtype) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = dist(rng);
  return Tensor::from_values(shape, v, dtype).requires_grad_();
}

Linear Linear::create(int in, int out, std::mt19937_64& rng, DType dtype, bool with_bias) {
  Linear l;
  const double bound = std::sqrt(6.0 / (in + out));
  l.weight = init_uniform({out, in}, bound, rng, dtype);
  if (with_bias) l.bias = Tensor::zeros({out}, dtype).requires_grad_();
  return l;
}

void Linear::visit(const std::string& prefix, const Visitor& fn) {
  fn(prefix + ".weight", weight);
  if (bias.defined()) fn(prefix + ".bias", bias);
}

LayerNorm LayerNorm::create(int dim, DType dtype) {
  return {Tensor::ones({dim}, dtype).requires_grad_(), Tensor::zeros({dim}, dtype).requires_grad_()};
}

void LayerNorm::visit(const std::string& prefix, const Visitor& fn) {
  fn(prefix + ".gain", gain);
  fn(prefix + ".bias", bias);
}

Conv Conv::create(int in, int out, int kernel, int stride, int padding, std::mt19937_64& rng,
                  DType dtype, ops::PadMode mode) {
  Conv c;
  const double bound = std::sqrt(6.0 / (in * kernel * kernel));
  c.weight = init_uniform({out, in, kernel, kernel}, bound, rng, dtype);
  c.bias = Tensor::zeros({out}, dtype).requires_grad_();
  c.stride = stride;
  c.padding = padding;
  c.pad_mode = mode;
  return c;
}

void Conv::visit(const std::string& prefix, const Visitor& fn) {
  fn(prefix + ".weight", weight);
  fn(prefix + ".bias", bias);
}

GroupNorm GroupNorm::create(int channels, int groups, DType dtype) {
  GroupNorm g;
  g.gain = Tensor::ones({channels}, dtype).requires_grad_();
  g.bias = Tensor::zeros({channels}, dtype).requires_grad_();
  g.groups = groups;
  return g;
}

void GroupNorm::visit(const std::string& prefix, const Visitor& fn) {
  fn(prefix + ".gain", gain);
  fn(prefix + ".bias", bias);
}

}  // namespace warpvos::layers
