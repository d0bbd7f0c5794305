#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "warpvos/tensor.hpp"

// The closed op set used by the model. Every op here records a backward
// function when gradient tracking is active.
namespace warpvos::ops {

// Element-wise, identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
// a * scale + shift
Tensor affine(const Tensor& x, double scale, double shift = 0.0);
Tensor neg(const Tensor& x);
Tensor relu(const Tensor& x);
// Exact (erf) GELU.
Tensor gelu(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);

// x + bias broadcast along `axis` (bias.numel() == x.dim(axis)).
Tensor add_bias(const Tensor& x, const Tensor& bias, int axis);
// x * scale broadcast along `axis`.
Tensor mul_channel(const Tensor& x, const Tensor& scale, int axis);

// [.., n, k] x [.., k, m]. Batch extents must match unless one side is 2-D.
Tensor matmul(const Tensor& a, const Tensor& b);
// x [.., in] -> [.., out] with weight [out, in] and optional bias [out].
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias = {});

Tensor reshape(const Tensor& x, const Shape& shape);
Tensor permute(const Tensor& x, const std::vector<int>& order);
Tensor transpose(const Tensor& x);  // swap the last two axes
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& x, int axis, std::int64_t start, std::int64_t length);

Tensor softmax(const Tensor& x, int axis);
Tensor log_softmax(const Tensor& x, int axis);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// Reduction over one axis; the axis is removed.
Tensor sum_axis(const Tensor& x, int axis);

// Normalizes over the last axis; gain/bias of that extent.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
// x [C, H, W]; normalizes each group over (channels in group, H, W).
Tensor group_norm(const Tensor& x, int groups, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);

enum class PadMode { zeros, replicate };

// Cross-correlation. x [Cin, H, W], weight [Cout, Cin, kh, kw], bias [Cout].
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias = {}, int stride = 1,
              int padding = 0, PadMode pad_mode = PadMode::zeros);

// Sum pooling over non-overlapping k x k blocks. x [C, H, W] with H, W divisible by k.
Tensor sum_pool(const Tensor& x, int k);

// out[b, i, j] = index[i*n + j] >= 0 ? src[b, rows == 1 ? 0 : i, index[i*n + j]] : fill
// src [B, rows, L] with rows either n_query or 1; index has n_query * n_key entries.
Tensor gather_offsets(const Tensor& src, std::span<const std::int32_t> index,
                      std::int64_t n_query, std::int64_t n_key, double fill);

// ---- checkpoint blobs -------------------------------------------------------
//
// Little-endian: u64 rank, u64 extents[rank], then numel values. The payload
// is 32-bit float for f32 tensors and 64-bit float for f64 tensors.
void save_blob(const Tensor& t, const std::filesystem::path& path);
Tensor load_blob(const std::filesystem::path& path, DType dtype = DType::f32);

// Largest |x| over all elements; convenient in tests.
double max_abs(const Tensor& x);
double max_abs_diff(const Tensor& a, const Tensor& b);
bool all_finite(const Tensor& x);

}  // namespace warpvos::ops
