#pragma once

#include <functional>
#include <random>
#include <string>

#include "warpvos/ops.hpp"

// Parameter-holding building blocks shared by the attention and network
// modules. Each exposes visit() so that checkpoints and optimizers can walk
// parameters by stable dotted names.
namespace warpvos::layers {

using Visitor = std::function<void(const std::string&, Tensor&)>;

Tensor init_uniform(const Shape& shape, double bound, std::mt19937_64& rng, DType dtype);

struct Linear {
  Tensor weight;  // [out, in]
  Tensor bias;    // [out]

  static Linear create(int in, int out, std::mt19937_64& rng, DType dtype, bool with_bias = true);
  Tensor operator()(const Tensor& x) const { return ops::linear(x, weight, bias); }
  void visit(const std::string& prefix, const Visitor& fn);
};

struct LayerNorm {
  Tensor gain;
  Tensor bias;

  static LayerNorm create(int dim, DType dtype);
  Tensor operator()(const Tensor& x) const { return ops::layer_norm(x, gain, bias); }
  void visit(const std::string& prefix, const Visitor& fn);
};

struct Conv {
  Tensor weight;  // [out, in, k, k]
  Tensor bias;
  int stride = 1;
  int padding = 0;
  ops::PadMode pad_mode = ops::PadMode::zeros;

  static Conv create(int in, int out, int kernel, int stride, int padding, std::mt19937_64& rng,
                     DType dtype, ops::PadMode mode = ops::PadMode::zeros);
  Tensor operator()(const Tensor& x) const {
    return ops::conv2d(x, weight, bias, stride, padding, pad_mode);
  }
  void visit(const std::string& prefix, const Visitor& fn);
};

struct GroupNorm {
  Tensor gain;
  Tensor bias;
  int groups = 1;

  static GroupNorm create(int channels, int groups, DType dtype);
  Tensor operator()(const Tensor& x) const { return ops::group_norm(x, groups, gain, bias); }
  void visit(const std::string& prefix, const Visitor& fn);
};

}  // namespace warpvos::layers
