#include "warpvos/ops.hpp"

#include <cblas.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numbers>

namespace warpvos::ops {

namespace {

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  if (a.dtype() != b.dtype())
    throw UsageError(std::string(op) + ": dtype mismatch " + dtype_name(a.dtype()) + " vs " +
                     dtype_name(b.dtype()));
}

int normalize_axis(int axis, int rank, const char* op) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank)
    throw DimensionError(std::string(op) + ": axis out of range for rank " + std::to_string(rank));
  return axis;
}

struct AxisSplit {
  std::int64_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, int axis) {
  AxisSplit r;
  for (int i = 0; i < axis; ++i) r.outer *= s[static_cast<std::size_t>(i)];
  r.n = s[static_cast<std::size_t>(axis)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

template <class F>
Tensor map_unary(const Tensor& x, F f) {
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    auto src = x.data<T>();
    auto dst = out.data<T>();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<T>(f(src[i]));
  });
  return out;
}

template <class F>
Tensor map_binary(const Tensor& a, const Tensor& b, F f) {
  Tensor out = Tensor::zeros(a.shape(), a.dtype());
  dispatch(a.dtype(), [&]<class T>() {
    auto x = a.data<T>();
    auto y = b.data<T>();
    auto dst = out.data<T>();
    for (std::size_t i = 0; i < x.size(); ++i) dst[i] = static_cast<T>(f(x[i], y[i]));
  });
  return out;
}

template <class T>
void gemm(bool trans_a, bool trans_b, int m, int n, int k, const T* a, const T* b, T* c,
          T beta) {
  const int lda = trans_a ? m : k;
  const int ldb = trans_b ? k : n;
  const auto ta = trans_a ? CblasTrans : CblasNoTrans;
  const auto tb = trans_b ? CblasTrans : CblasNoTrans;
  if constexpr (std::is_same_v<T, double>)
    cblas_dgemm(CblasRowMajor, ta, tb, m, n, k, 1.0, a, lda, b, ldb, beta, c, n);
  else
    cblas_sgemm(CblasRowMajor, ta, tb, m, n, k, 1.0f, a, lda, b, ldb, beta, c, n);
}

double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

double gelu_slope(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

}  // namespace

// ---- element-wise ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same(a, b, "add");
  Tensor out = map_binary(a, b, [](auto x, auto y) { return x + y; });
  attach_grad(out, {a, b}, [](const Tensor& g) { return std::vector<Tensor>{g, g}; }, "add");
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same(a, b, "sub");
  Tensor out = map_binary(a, b, [](auto x, auto y) { return x - y; });
  attach_grad(out, {a, b}, [](const Tensor& g) { return std::vector<Tensor>{g, neg(g)}; }, "sub");
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same(a, b, "mul");
  Tensor out = map_binary(a, b, [](auto x, auto y) { return x * y; });
  attach_grad(
      out, {a, b},
      [a = a.detach(), b = b.detach()](const Tensor& g) {
        return std::vector<Tensor>{mul(g, b), mul(g, a)};
      },
      "mul");
  return out;
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_same(a, b, "div");
  Tensor out = map_binary(a, b, [](auto x, auto y) { return x / y; });
  attach_grad(
      out, {a, b},
      [a = a.detach(), b = b.detach()](const Tensor& g) {
        Tensor ga = div(g, b);
        Tensor gb = map_binary(ga, div(a, b), [](auto u, auto v) { return -u * v; });
        return std::vector<Tensor>{ga, gb};
      },
      "div");
  return out;
}

Tensor affine(const Tensor& x, double scale, double shift) {
  Tensor out = dispatch(x.dtype(), [&]<class T>() {
    const T s = static_cast<T>(scale), t = static_cast<T>(shift);
    return map_unary(x, [s, t](T v) { return v * s + t; });
  });
  attach_grad(
      out, {x}, [scale](const Tensor& g) { return std::vector<Tensor>{affine(g, scale, 0.0)}; },
      "affine");
  return out;
}

Tensor neg(const Tensor& x) { return affine(x, -1.0, 0.0); }

Tensor relu(const Tensor& x) {
  Tensor out = map_unary(x, [](auto v) { return v > 0 ? v : decltype(v)(0); });
  attach_grad(
      out, {x},
      [x = x.detach()](const Tensor& g) {
        return std::vector<Tensor>{
            map_binary(g, x, [](auto gv, auto xv) { return xv > 0 ? gv : decltype(gv)(0); })};
      },
      "relu");
  return out;
}

Tensor gelu(const Tensor& x) {
  Tensor out = map_unary(x, [](auto v) { return gelu_value(static_cast<double>(v)); });
  attach_grad(
      out, {x},
      [x = x.detach()](const Tensor& g) {
        return std::vector<Tensor>{map_binary(
            g, x, [](auto gv, auto xv) { return gv * gelu_slope(static_cast<double>(xv)); })};
      },
      "gelu");
  return out;
}

Tensor exp(const Tensor& x) {
  Tensor out = map_unary(x, [](auto v) { return std::exp(v); });
  attach_grad(
      out, {x}, [y = out.detach()](const Tensor& g) { return std::vector<Tensor>{mul(g, y)}; },
      "exp");
  return out;
}

Tensor log(const Tensor& x) {
  Tensor out = map_unary(x, [](auto v) { return std::log(v); });
  attach_grad(
      out, {x}, [x = x.detach()](const Tensor& g) { return std::vector<Tensor>{div(g, x)}; },
      "log");
  return out;
}

Tensor add_bias(const Tensor& x, const Tensor& bias, int axis) {
  axis = normalize_axis(axis, x.rank(), "add_bias");
  const AxisSplit sp = split_at(x.shape(), axis);
  if (bias.numel() != sp.n)
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " does not match axis " +
                         std::to_string(axis) + " of " + shape_str(x.shape()));
  if (bias.dtype() != x.dtype()) throw UsageError("add_bias: dtype mismatch");
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    auto src = x.data<T>();
    auto b = bias.data<T>();
    auto dst = out.data<T>();
    std::size_t i = 0;
    for (std::int64_t o = 0; o < sp.outer; ++o)
      for (std::int64_t c = 0; c < sp.n; ++c)
        for (std::int64_t in = 0; in < sp.inner; ++in, ++i) dst[i] = src[i] + b[c];
  });
  attach_grad(
      out, {x, bias},
      [sp, bshape = bias.shape()](const Tensor& g) {
        Tensor gb = Tensor::zeros(bshape, g.dtype());
        dispatch(g.dtype(), [&]<class T>() {
          auto gs = g.data<T>();
          auto d = gb.data<T>();
          std::size_t i = 0;
          for (std::int64_t o = 0; o < sp.outer; ++o)
            for (std::int64_t c = 0; c < sp.n; ++c)
              for (std::int64_t in = 0; in < sp.inner; ++in, ++i) d[c] += gs[i];
        });
        return std::vector<Tensor>{g, gb};
      },
      "add_bias");
  return out;
}

Tensor mul_channel(const Tensor& x, const Tensor& scale, int axis) {
  axis = normalize_axis(axis, x.rank(), "mul_channel");
  const AxisSplit sp = split_at(x.shape(), axis);
  if (scale.numel() != sp.n)
    throw DimensionError("mul_channel: scale " + shape_str(scale.shape()) +
                         " does not match shape " + shape_str(x.shape()));
  if (scale.dtype() != x.dtype()) throw UsageError("mul_channel: dtype mismatch");
  auto run = [sp](const Tensor& src_t, const Tensor& s_t) {
    Tensor out = Tensor::zeros(src_t.shape(), src_t.dtype());
    dispatch(src_t.dtype(), [&]<class T>() {
      auto src = src_t.data<T>();
      auto s = s_t.data<T>();
      auto dst = out.data<T>();
      std::size_t i = 0;
      for (std::int64_t o = 0; o < sp.outer; ++o)
        for (std::int64_t c = 0; c < sp.n; ++c)
          for (std::int64_t in = 0; in < sp.inner; ++in, ++i) dst[i] = src[i] * s[c];
    });
    return out;
  };
  Tensor out = run(x, scale);
  attach_grad(
      out, {x, scale},
      [sp, run, x = x.detach(), scale = scale.detach()](const Tensor& g) {
        Tensor gs = Tensor::zeros(scale.shape(), g.dtype());
        dispatch(g.dtype(), [&]<class T>() {
          auto gv = g.data<T>();
          auto xv = x.data<T>();
          auto d = gs.data<T>();
          std::size_t i = 0;
          for (std::int64_t o = 0; o < sp.outer; ++o)
            for (std::int64_t c = 0; c < sp.n; ++c)
              for (std::int64_t in = 0; in < sp.inner; ++in, ++i) d[c] += gv[i] * xv[i];
        });
        return std::vector<Tensor>{run(g, scale), gs};
      },
      "mul_channel");
  return out;
}

// ---- matmul ----------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2)
    throw DimensionError("matmul: operands must be at least 2-D, got " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
  if (a.dtype() != b.dtype()) throw UsageError("matmul: dtype mismatch");
  const std::int64_t n = a.dim(-2), k = a.dim(-1), k2 = b.dim(-2), m = b.dim(-1);
  const Shape abatch(a.shape().begin(), a.shape().end() - 2);
  const Shape bbatch(b.shape().begin(), b.shape().end() - 2);
  if (k != k2 || (!abatch.empty() && !bbatch.empty() && abatch != bbatch))
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  const Shape batch = abatch.empty() ? bbatch : abatch;
  const std::int64_t nb = shape_numel(batch);
  Shape oshape = batch;
  oshape.push_back(n);
  oshape.push_back(m);
  Tensor out = Tensor::zeros(oshape, a.dtype());
  const std::int64_t astride = abatch.empty() ? 0 : n * k;
  const std::int64_t bstride = bbatch.empty() ? 0 : k * m;
  if (n * m > 0) {
    dispatch(a.dtype(), [&]<class T>() {
      const T* pa = a.data<T>().data();
      const T* pb = b.data<T>().data();
      T* pc = out.data<T>().data();
      for (std::int64_t i = 0; i < nb; ++i) {
        if (k == 0) continue;
        gemm<T>(false, false, static_cast<int>(n), static_cast<int>(m), static_cast<int>(k),
                pa + i * astride, pb + i * bstride, pc + i * n * m, T(0));
      }
    });
  }
  attach_grad(
      out, {a, b},
      [a = a.detach(), b = b.detach(), n, k, m, nb, astride, bstride](const Tensor& g) {
        Tensor ga = Tensor::zeros(a.shape(), a.dtype());
        Tensor gb = Tensor::zeros(b.shape(), b.dtype());
        if (n * m * k == 0) return std::vector<Tensor>{ga, gb};
        dispatch(a.dtype(), [&]<class T>() {
          const T* pa = a.data<T>().data();
          const T* pb = b.data<T>().data();
          const T* pg = g.data<T>().data();
          T* pga = ga.data<T>().data();
          T* pgb = gb.data<T>().data();
          for (std::int64_t i = 0; i < nb; ++i) {
            // dA = G B^T, dB = A^T G; beta 1 folds broadcast batches.
            gemm<T>(false, true, static_cast<int>(n), static_cast<int>(k), static_cast<int>(m),
                    pg + i * n * m, pb + i * bstride, pga + i * astride, T(1));
            gemm<T>(true, false, static_cast<int>(k), static_cast<int>(m), static_cast<int>(n),
                    pa + i * astride, pg + i * n * m, pgb + i * bstride, T(1));
          }
        });
        return std::vector<Tensor>{ga, gb};
      },
      "matmul");
  return out;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (weight.rank() != 2) throw DimensionError("linear: weight must be 2-D");
  if (x.dim(-1) != weight.dim(1))
    throw DimensionError("linear: input " + shape_str(x.shape()) + " vs weight " +
                         shape_str(weight.shape()));
  Shape flat{x.numel() / x.dim(-1), x.dim(-1)};
  Tensor y = matmul(reshape(x, flat), transpose(weight));
  if (bias.defined()) y = add_bias(y, bias, 1);
  Shape oshape = x.shape();
  oshape.back() = weight.dim(0);
  return reshape(y, oshape);
}

// ---- shape ops -------------------------------------------------------------

Tensor reshape(const Tensor& x, const Shape& shape) {
  if (shape_numel(shape) != x.numel())
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(shape));
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = shape;
  impl->dtype = x.dtype();
  impl->data = x.impl()->data;
  Tensor out(std::move(impl));
  attach_grad(
      out, {x},
      [old = x.shape()](const Tensor& g) { return std::vector<Tensor>{reshape(g, old)}; },
      "reshape");
  return out;
}

Tensor permute(const Tensor& x, const std::vector<int>& order) {
  const int r = x.rank();
  if (static_cast<int>(order.size()) != r) throw DimensionError("permute: order length mismatch");
  std::vector<int> seen(static_cast<std::size_t>(r), 0);
  for (int o : order) {
    if (o < 0 || o >= r || seen[static_cast<std::size_t>(o)]++)
      throw DimensionError("permute: invalid axis order");
  }
  const Shape& in = x.shape();
  Shape oshape(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) oshape[static_cast<std::size_t>(i)] = in[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
  std::vector<std::int64_t> istride(static_cast<std::size_t>(r), 1);
  for (int i = r - 2; i >= 0; --i)
    istride[static_cast<std::size_t>(i)] = istride[static_cast<std::size_t>(i) + 1] * in[static_cast<std::size_t>(i) + 1];
  std::vector<std::int64_t> step(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) step[static_cast<std::size_t>(i)] = istride[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
  Tensor out = Tensor::zeros(oshape, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    auto src = x.data<T>();
    auto dst = out.data<T>();
    std::vector<std::int64_t> idx(static_cast<std::size_t>(r), 0);
    std::int64_t offset = 0;
    for (std::size_t i = 0; i < dst.size(); ++i) {
      dst[i] = src[static_cast<std::size_t>(offset)];
      for (int d = r - 1; d >= 0; --d) {
        auto du = static_cast<std::size_t>(d);
        offset += step[du];
        if (++idx[du] < oshape[du]) break;
        offset -= step[du] * oshape[du];
        idx[du] = 0;
      }
    }
  });
  std::vector<int> inverse(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) inverse[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = i;
  attach_grad(
      out, {x}, [inverse](const Tensor& g) { return std::vector<Tensor>{permute(g, inverse)}; },
      "permute");
  return out;
}

Tensor transpose(const Tensor& x) {
  const int r = x.rank();
  if (r < 2) throw DimensionError("transpose: rank < 2");
  std::vector<int> order(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) order[static_cast<std::size_t>(i)] = i;
  std::swap(order[static_cast<std::size_t>(r) - 1], order[static_cast<std::size_t>(r) - 2]);
  return permute(x, order);
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const int r = parts[0].rank();
  axis = normalize_axis(axis, r, "concat");
  Shape oshape = parts[0].shape();
  oshape[static_cast<std::size_t>(axis)] = 0;
  for (const auto& p : parts) {
    if (p.rank() != r || p.dtype() != parts[0].dtype())
      throw DimensionError("concat: rank/dtype mismatch");
    for (int i = 0; i < r; ++i)
      if (i != axis && p.dim(i) != parts[0].dim(i))
        throw DimensionError("concat: shape mismatch " + shape_str(p.shape()) + " vs " +
                             shape_str(parts[0].shape()));
    oshape[static_cast<std::size_t>(axis)] += p.dim(axis);
  }
  const AxisSplit sp = split_at(oshape, axis);
  Tensor out = Tensor::zeros(oshape, parts[0].dtype());
  dispatch(out.dtype(), [&]<class T>() {
    auto dst = out.data<T>();
    std::int64_t base = 0;
    for (const auto& p : parts) {
      auto src = p.data<T>();
      const std::int64_t len = p.dim(axis) * sp.inner;
      for (std::int64_t o = 0; o < sp.outer; ++o)
        std::copy_n(src.begin() + o * len, len, dst.begin() + o * sp.n * sp.inner + base);
      base += len;
    }
  });
  std::vector<std::int64_t> extents;
  for (const auto& p : parts) extents.push_back(p.dim(axis));
  attach_grad(
      out, parts,
      [axis, extents](const Tensor& g) {
        std::vector<Tensor> gs;
        std::int64_t start = 0;
        for (auto e : extents) {
          gs.push_back(slice(g, axis, start, e));
          start += e;
        }
        return gs;
      },
      "concat");
  return out;
}

Tensor slice(const Tensor& x, int axis, std::int64_t start, std::int64_t length) {
  axis = normalize_axis(axis, x.rank(), "slice");
  if (start < 0 || length < 0 || start + length > x.dim(axis))
    throw DimensionError("slice: range [" + std::to_string(start) + ", " +
                         std::to_string(start + length) + ") outside axis of extent " +
                         std::to_string(x.dim(axis)));
  const AxisSplit sp = split_at(x.shape(), axis);
  Shape oshape = x.shape();
  oshape[static_cast<std::size_t>(axis)] = length;
  Tensor out = Tensor::zeros(oshape, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    auto src = x.data<T>();
    auto dst = out.data<T>();
    for (std::int64_t o = 0; o < sp.outer; ++o)
      std::copy_n(src.begin() + (o * sp.n + start) * sp.inner, length * sp.inner,
                  dst.begin() + o * length * sp.inner);
  });
  attach_grad(
      out, {x},
      [sp, start, length, xshape = x.shape()](const Tensor& g) {
        Tensor gx = Tensor::zeros(xshape, g.dtype());
        dispatch(g.dtype(), [&]<class T>() {
          auto src = g.data<T>();
          auto dst = gx.data<T>();
          for (std::int64_t o = 0; o < sp.outer; ++o)
            std::copy_n(src.begin() + o * length * sp.inner, length * sp.inner,
                        dst.begin() + (o * sp.n + start) * sp.inner);
        });
        return std::vector<Tensor>{gx};
      },
      "slice");
  return out;
}

// ---- softmax ---------------------------------------------------------------

namespace {

template <class T>
void softmax_kernel(std::span<const T> src, std::span<T> dst, const AxisSplit& sp, bool log_space) {
  for (std::int64_t o = 0; o < sp.outer; ++o) {
    for (std::int64_t in = 0; in < sp.inner; ++in) {
      const std::int64_t base = o * sp.n * sp.inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::int64_t c = 0; c < sp.n; ++c) {
        const T v = src[static_cast<std::size_t>(base + c * sp.inner)];
        if (std::isnan(v)) throw NumericError("softmax: NaN input");
        mx = std::max(mx, v);
      }
      if (!std::isfinite(mx)) throw NumericError("softmax: no finite entry along axis");
      T total = 0;
      for (std::int64_t c = 0; c < sp.n; ++c) {
        const auto i = static_cast<std::size_t>(base + c * sp.inner);
        const T e = std::exp(src[i] - mx);
        dst[i] = e;
        total += e;
      }
      const T log_total = std::log(total);
      for (std::int64_t c = 0; c < sp.n; ++c) {
        const auto i = static_cast<std::size_t>(base + c * sp.inner);
        dst[i] = log_space ? src[i] - mx - log_total : dst[i] / total;
      }
    }
  }
}

}  // namespace

Tensor softmax(const Tensor& x, int axis) {
  axis = normalize_axis(axis, x.rank(), "softmax");
  const AxisSplit sp = split_at(x.shape(), axis);
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  dispatch(x.dtype(), [&]<class T>() { softmax_kernel<T>(x.data<T>(), out.data<T>(), sp, false); });
  attach_grad(
      out, {x},
      [sp, y = out.detach()](const Tensor& g) {
        Tensor gx = Tensor::zeros(y.shape(), y.dtype());
        dispatch(y.dtype(), [&]<class T>() {
          auto yv = y.data<T>();
          auto gv = g.data<T>();
          auto d = gx.data<T>();
          for (std::int64_t o = 0; o < sp.outer; ++o)
            for (std::int64_t in = 0; in < sp.inner; ++in) {
              const std::int64_t base = o * sp.n * sp.inner + in;
              T dot = 0;
              for (std::int64_t c = 0; c < sp.n; ++c) {
                const auto i = static_cast<std::size_t>(base + c * sp.inner);
                dot += gv[i] * yv[i];
              }
              for (std::int64_t c = 0; c < sp.n; ++c) {
                const auto i = static_cast<std::size_t>(base + c * sp.inner);
                d[i] = yv[i] * (gv[i] - dot);
              }
            }
        });
        return std::vector<Tensor>{gx};
      },
      "softmax");
  return out;
}

Tensor log_softmax(const Tensor& x, int axis) {
  axis = normalize_axis(axis, x.rank(), "log_softmax");
  const AxisSplit sp = split_at(x.shape(), axis);
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  dispatch(x.dtype(), [&]<class T>() { softmax_kernel<T>(x.data<T>(), out.data<T>(), sp, true); });
  attach_grad(
      out, {x},
      [sp, y = out.detach()](const Tensor& g) {
        Tensor gx = Tensor::zeros(y.shape(), y.dtype());
        dispatch(y.dtype(), [&]<class T>() {
          auto yv = y.data<T>();
          auto gv = g.data<T>();
          auto d = gx.data<T>();
          for (std::int64_t o = 0; o < sp.outer; ++o)
            for (std::int64_t in = 0; in < sp.inner; ++in) {
              const std::int64_t base = o * sp.n * sp.inner + in;
              T total = 0;
              for (std::int64_t c = 0; c < sp.n; ++c)
                total += gv[static_cast<std::size_t>(base + c * sp.inner)];
              for (std::int64_t c = 0; c < sp.n; ++c) {
                const auto i = static_cast<std::size_t>(base + c * sp.inner);
                d[i] = gv[i] - std::exp(yv[i]) * total;
              }
            }
        });
        return std::vector<Tensor>{gx};
      },
      "log_softmax");
  return out;
}

// ---- reductions ------------------------------------------------------------

Tensor sum(const Tensor& x) {
  Tensor out = Tensor::zeros({}, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    T total = 0;
    for (T v : x.data<T>()) total += v;
    out.data<T>()[0] = total;
  });
  attach_grad(
      out, {x},
      [xshape = x.shape()](const Tensor& g) {
        return std::vector<Tensor>{Tensor::full(xshape, g.item(), g.dtype())};
      },
      "sum");
  return out;
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw DimensionError("mean of an empty tensor");
  return affine(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor sum_axis(const Tensor& x, int axis) {
  axis = normalize_axis(axis, x.rank(), "sum_axis");
  const AxisSplit sp = split_at(x.shape(), axis);
  Shape oshape = x.shape();
  oshape.erase(oshape.begin() + axis);
  Tensor out = Tensor::zeros(oshape, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    auto src = x.data<T>();
    auto dst = out.data<T>();
    for (std::int64_t o = 0; o < sp.outer; ++o)
      for (std::int64_t c = 0; c < sp.n; ++c)
        for (std::int64_t in = 0; in < sp.inner; ++in)
          dst[static_cast<std::size_t>(o * sp.inner + in)] +=
              src[static_cast<std::size_t>((o * sp.n + c) * sp.inner + in)];
  });
  attach_grad(
      out, {x},
      [sp, xshape = x.shape()](const Tensor& g) {
        Tensor gx = Tensor::zeros(xshape, g.dtype());
        dispatch(g.dtype(), [&]<class T>() {
          auto src = g.data<T>();
          auto dst = gx.data<T>();
          for (std::int64_t o = 0; o < sp.outer; ++o)
            for (std::int64_t c = 0; c < sp.n; ++c)
              for (std::int64_t in = 0; in < sp.inner; ++in)
                dst[static_cast<std::size_t>((o * sp.n + c) * sp.inner + in)] =
                    src[static_cast<std::size_t>(o * sp.inner + in)];
        });
        return std::vector<Tensor>{gx};
      },
      "sum_axis");
  return out;
}

// ---- normalization ---------------------------------------------------------

namespace {

// Normalizes `rows` independent groups of `len` contiguous-by-index elements.
// `index(r, j)` maps group r, member j to a flat offset; `channel(r, j)`
// returns the affine parameter slot.
struct NormPlan {
  std::int64_t rows = 0, len = 0;
  std::function<std::int64_t(std::int64_t, std::int64_t)> index;
  std::function<std::int64_t(std::int64_t, std::int64_t)> channel;
};

template <class T>
void norm_forward(const NormPlan& plan, std::span<const T> x, std::span<const T> gain,
                  std::span<const T> bias, double eps, std::span<T> out, std::span<T> xhat,
                  std::vector<T>& inv_std) {
  inv_std.assign(static_cast<std::size_t>(plan.rows), T(0));
  for (std::int64_t r = 0; r < plan.rows; ++r) {
    T mu = 0;
    for (std::int64_t j = 0; j < plan.len; ++j) mu += x[static_cast<std::size_t>(plan.index(r, j))];
    mu /= static_cast<T>(plan.len);
    T var = 0;
    for (std::int64_t j = 0; j < plan.len; ++j) {
      const T d = x[static_cast<std::size_t>(plan.index(r, j))] - mu;
      var += d * d;
    }
    var /= static_cast<T>(plan.len);
    const T is = T(1) / std::sqrt(var + static_cast<T>(eps));
    inv_std[static_cast<std::size_t>(r)] = is;
    for (std::int64_t j = 0; j < plan.len; ++j) {
      const auto i = static_cast<std::size_t>(plan.index(r, j));
      const auto c = static_cast<std::size_t>(plan.channel(r, j));
      xhat[i] = (x[i] - mu) * is;
      out[i] = xhat[i] * gain[c] + bias[c];
    }
  }
}

template <class T>
void norm_backward(const NormPlan& plan, std::span<const T> g, std::span<const T> xhat,
                   std::span<const T> gain, const std::vector<T>& inv_std, std::span<T> gx,
                   std::span<T> ggain, std::span<T> gbias) {
  const T n = static_cast<T>(plan.len);
  for (std::int64_t r = 0; r < plan.rows; ++r) {
    T s1 = 0, s2 = 0;
    for (std::int64_t j = 0; j < plan.len; ++j) {
      const auto i = static_cast<std::size_t>(plan.index(r, j));
      const auto c = static_cast<std::size_t>(plan.channel(r, j));
      const T gh = g[i] * gain[c];
      s1 += gh;
      s2 += gh * xhat[i];
      ggain[c] += g[i] * xhat[i];
      gbias[c] += g[i];
    }
    const T is = inv_std[static_cast<std::size_t>(r)];
    for (std::int64_t j = 0; j < plan.len; ++j) {
      const auto i = static_cast<std::size_t>(plan.index(r, j));
      const auto c = static_cast<std::size_t>(plan.channel(r, j));
      const T gh = g[i] * gain[c];
      gx[i] = is / n * (n * gh - s1 - xhat[i] * s2);
    }
  }
}

Tensor normalize(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps,
                 const NormPlan& plan, const char* name) {
  if (gain.dtype() != x.dtype() || bias.dtype() != x.dtype())
    throw UsageError(std::string(name) + ": dtype mismatch");
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  Tensor xhat = Tensor::zeros(x.shape(), x.dtype());
  auto inv = std::make_shared<std::vector<double>>();
  dispatch(x.dtype(), [&]<class T>() {
    std::vector<T> inv_std;
    norm_forward<T>(plan, x.data<T>(), gain.data<T>(), bias.data<T>(), eps, out.data<T>(),
                    xhat.data<T>(), inv_std);
    inv->assign(inv_std.begin(), inv_std.end());
  });
  attach_grad(
      out, {x, gain, bias},
      [plan, xhat, inv, gain = gain.detach()](const Tensor& g) {
        Tensor gx = Tensor::zeros(g.shape(), g.dtype());
        Tensor gg = Tensor::zeros(gain.shape(), g.dtype());
        Tensor gb = Tensor::zeros(gain.shape(), g.dtype());
        dispatch(g.dtype(), [&]<class T>() {
          std::vector<T> inv_std(inv->begin(), inv->end());
          norm_backward<T>(plan, g.data<T>(), xhat.data<T>(), gain.data<T>(), inv_std,
                           gx.data<T>(), gg.data<T>(), gb.data<T>());
        });
        return std::vector<Tensor>{gx, gg, gb};
      },
      name);
  return out;
}

}  // namespace

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const std::int64_t c = x.dim(-1);
  if (gain.numel() != c || bias.numel() != c)
    throw DimensionError("layer_norm: affine extent does not match " + shape_str(x.shape()));
  NormPlan plan;
  plan.rows = x.numel() / std::max<std::int64_t>(c, 1);
  plan.len = c;
  plan.index = [c](std::int64_t r, std::int64_t j) { return r * c + j; };
  plan.channel = [](std::int64_t, std::int64_t j) { return j; };
  return normalize(x, gain, bias, eps, plan, "layer_norm");
}

Tensor group_norm(const Tensor& x, int groups, const Tensor& gain, const Tensor& bias,
                  double eps) {
  if (x.rank() != 3) throw DimensionError("group_norm: expected [C,H,W], got " + shape_str(x.shape()));
  const std::int64_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
  if (groups <= 0 || c % groups != 0)
    throw ConfigError("group_norm: " + std::to_string(c) + " channels not divisible into " +
                      std::to_string(groups) + " groups");
  if (gain.numel() != c || bias.numel() != c)
    throw DimensionError("group_norm: affine extent does not match channel count");
  const std::int64_t per = c / groups;
  NormPlan plan;
  plan.rows = groups;
  plan.len = per * hw;
  // Groups are contiguous in memory: channel-major then spatial.
  plan.index = [per, hw](std::int64_t r, std::int64_t j) { return r * per * hw + j; };
  plan.channel = [per, hw](std::int64_t r, std::int64_t j) { return r * per + j / hw; };
  return normalize(x, gain, bias, eps, plan, "group_norm");
}

// ---- convolution -----------------------------------------------------------

namespace {

struct ConvGeom {
  std::int64_t cin, h, w, cout, kh, kw, stride, pad, ho, wo;
  PadMode mode;
};

// Maps a padded coordinate to a source index, or -1 for zero padding.
inline std::int64_t source_index(std::int64_t p, std::int64_t extent, PadMode mode) {
  if (p >= 0 && p < extent) return p;
  if (mode == PadMode::zeros) return -1;
  return std::clamp<std::int64_t>(p, 0, extent - 1);
}

template <class T>
void im2col(const ConvGeom& g, const T* x, T* col) {
  const std::int64_t hw = g.ho * g.wo;
  for (std::int64_t ci = 0; ci < g.cin; ++ci)
    for (std::int64_t ky = 0; ky < g.kh; ++ky)
      for (std::int64_t kx = 0; kx < g.kw; ++kx) {
        T* row = col + ((ci * g.kh + ky) * g.kw + kx) * hw;
        for (std::int64_t oy = 0; oy < g.ho; ++oy) {
          const std::int64_t sy = source_index(oy * g.stride - g.pad + ky, g.h, g.mode);
          for (std::int64_t ox = 0; ox < g.wo; ++ox) {
            const std::int64_t sx = source_index(ox * g.stride - g.pad + kx, g.w, g.mode);
            row[oy * g.wo + ox] = (sy < 0 || sx < 0) ? T(0) : x[(ci * g.h + sy) * g.w + sx];
          }
        }
      }
}

template <class T>
void col2im(const ConvGeom& g, const T* col, T* x) {
  const std::int64_t hw = g.ho * g.wo;
  for (std::int64_t ci = 0; ci < g.cin; ++ci)
    for (std::int64_t ky = 0; ky < g.kh; ++ky)
      for (std::int64_t kx = 0; kx < g.kw; ++kx) {
        const T* row = col + ((ci * g.kh + ky) * g.kw + kx) * hw;
        for (std::int64_t oy = 0; oy < g.ho; ++oy) {
          const std::int64_t sy = source_index(oy * g.stride - g.pad + ky, g.h, g.mode);
          if (sy < 0) continue;
          for (std::int64_t ox = 0; ox < g.wo; ++ox) {
            const std::int64_t sx = source_index(ox * g.stride - g.pad + kx, g.w, g.mode);
            if (sx < 0) continue;
            x[(ci * g.h + sy) * g.w + sx] += row[oy * g.wo + ox];
          }
        }
      }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int padding,
              PadMode pad_mode) {
  if (x.rank() != 3 || weight.rank() != 4)
    throw DimensionError("conv2d: expected x [Cin,H,W] and weight [Cout,Cin,kh,kw], got " +
                         shape_str(x.shape()) + " and " + shape_str(weight.shape()));
  if (weight.dim(1) != x.dim(0))
    throw DimensionError("conv2d: input channels " + std::to_string(x.dim(0)) +
                         " vs weight " + shape_str(weight.shape()));
  if (stride < 1 || padding < 0) throw DimensionError("conv2d: invalid stride/padding");
  if (x.dtype() != weight.dtype()) throw UsageError("conv2d: dtype mismatch");
  ConvGeom g{x.dim(0), x.dim(1), x.dim(2), weight.dim(0), weight.dim(2), weight.dim(3),
             stride,   padding,  0,        0,             pad_mode};
  const std::int64_t span_h = g.h + 2 * g.pad - g.kh, span_w = g.w + 2 * g.pad - g.kw;
  if (span_h < 0 || span_w < 0)
    throw DimensionError("conv2d: kernel " + shape_str(weight.shape()) +
                         " admits no output position on input " + shape_str(x.shape()));
  g.ho = span_h / g.stride + 1;
  g.wo = span_w / g.stride + 1;
  const std::int64_t kdim = g.cin * g.kh * g.kw, hw = g.ho * g.wo;
  Tensor col = Tensor::zeros({kdim, hw}, x.dtype());
  Tensor out = Tensor::zeros({g.cout, g.ho, g.wo}, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    im2col<T>(g, x.data<T>().data(), col.data<T>().data());
    gemm<T>(false, false, static_cast<int>(g.cout), static_cast<int>(hw), static_cast<int>(kdim),
            weight.data<T>().data(), col.data<T>().data(), out.data<T>().data(), T(0));
  });
  if (bias.defined()) {
    if (bias.numel() != g.cout) throw DimensionError("conv2d: bias extent mismatch");
    NoGradGuard ng;
    out = add_bias(out, bias, 0);
  }
  attach_grad(
      out, {x, weight, bias},
      [g, col, w = weight.detach(), has_bias = bias.defined()](const Tensor& gout) {
        const std::int64_t kdim = g.cin * g.kh * g.kw, hw = g.ho * g.wo;
        Tensor gx = Tensor::zeros({g.cin, g.h, g.w}, gout.dtype());
        Tensor gw = Tensor::zeros(w.shape(), gout.dtype());
        Tensor gb;
        Tensor gcol = Tensor::zeros({kdim, hw}, gout.dtype());
        dispatch(gout.dtype(), [&]<class T>() {
          const T* pg = gout.data<T>().data();
          gemm<T>(false, true, static_cast<int>(g.cout), static_cast<int>(kdim),
                  static_cast<int>(hw), pg, col.data<T>().data(), gw.data<T>().data(), T(0));
          gemm<T>(true, false, static_cast<int>(kdim), static_cast<int>(hw),
                  static_cast<int>(g.cout), w.data<T>().data(), pg, gcol.data<T>().data(), T(0));
          col2im<T>(g, gcol.data<T>().data(), gx.data<T>().data());
          if (has_bias) {
            gb = Tensor::zeros({g.cout}, gout.dtype());
            auto d = gb.data<T>();
            for (std::int64_t c = 0; c < g.cout; ++c)
              for (std::int64_t i = 0; i < hw; ++i) d[static_cast<std::size_t>(c)] += pg[c * hw + i];
          }
        });
        return std::vector<Tensor>{gx, gw, gb};
      },
      "conv2d");
  return out;
}

Tensor sum_pool(const Tensor& x, int k) {
  if (x.rank() != 3) throw DimensionError("sum_pool: expected [C,H,W]");
  const std::int64_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (k <= 0 || h % k != 0 || w % k != 0)
    throw DimensionError("sum_pool: extents " + shape_str(x.shape()) + " not divisible by " +
                         std::to_string(k));
  const std::int64_t ho = h / k, wo = w / k;
  Tensor out = Tensor::zeros({c, ho, wo}, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    auto src = x.data<T>();
    auto dst = out.data<T>();
    for (std::int64_t ci = 0; ci < c; ++ci)
      for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t xx = 0; xx < w; ++xx)
          dst[static_cast<std::size_t>((ci * ho + y / k) * wo + xx / k)] +=
              src[static_cast<std::size_t>((ci * h + y) * w + xx)];
  });
  attach_grad(
      out, {x},
      [c, h, w, ho, wo, k](const Tensor& g) {
        Tensor gx = Tensor::zeros({c, h, w}, g.dtype());
        dispatch(g.dtype(), [&]<class T>() {
          auto src = g.data<T>();
          auto dst = gx.data<T>();
          for (std::int64_t ci = 0; ci < c; ++ci)
            for (std::int64_t y = 0; y < h; ++y)
              for (std::int64_t xx = 0; xx < w; ++xx)
                dst[static_cast<std::size_t>((ci * h + y) * w + xx)] =
                    src[static_cast<std::size_t>((ci * ho + y / k) * wo + xx / k)];
        });
        return std::vector<Tensor>{gx};
      },
      "sum_pool");
  return out;
}

Tensor gather_offsets(const Tensor& src, std::span<const std::int32_t> index,
                      std::int64_t n_query, std::int64_t n_key, double fill) {
  if (src.rank() != 3) throw DimensionError("gather_offsets: expected src [B,rows,L]");
  const std::int64_t b = src.dim(0), rows = src.dim(1), len = src.dim(2);
  if (rows != 1 && rows != n_query)
    throw DimensionError("gather_offsets: src rows must be 1 or n_query");
  if (static_cast<std::int64_t>(index.size()) != n_query * n_key)
    throw DimensionError("gather_offsets: index size mismatch");
  for (auto v : index)
    if (v >= len) throw DimensionError("gather_offsets: index beyond source length");
  std::vector<std::int32_t> idx(index.begin(), index.end());
  Tensor out = Tensor::zeros({b, n_query, n_key}, src.dtype());
  dispatch(src.dtype(), [&]<class T>() {
    auto s = src.data<T>();
    auto d = out.data<T>();
    for (std::int64_t bi = 0; bi < b; ++bi)
      for (std::int64_t i = 0; i < n_query; ++i) {
        const T* row = s.data() + (bi * rows + (rows == 1 ? 0 : i)) * len;
        T* drow = d.data() + (bi * n_query + i) * n_key;
        const std::int32_t* irow = idx.data() + i * n_key;
        for (std::int64_t j = 0; j < n_key; ++j)
          drow[j] = irow[j] >= 0 ? row[irow[j]] : static_cast<T>(fill);
      }
  });
  attach_grad(
      out, {src},
      [idx = std::move(idx), b, rows, len, n_query, n_key](const Tensor& g) {
        Tensor gs = Tensor::zeros({b, rows, len}, g.dtype());
        dispatch(g.dtype(), [&]<class T>() {
          auto gv = g.data<T>();
          auto d = gs.data<T>();
          for (std::int64_t bi = 0; bi < b; ++bi)
            for (std::int64_t i = 0; i < n_query; ++i) {
              T* row = d.data() + (bi * rows + (rows == 1 ? 0 : i)) * len;
              const T* grow = gv.data() + (bi * n_query + i) * n_key;
              const std::int32_t* irow = idx.data() + i * n_key;
              for (std::int64_t j = 0; j < n_key; ++j)
                if (irow[j] >= 0) row[irow[j]] += grow[j];
            }
        });
        return std::vector<Tensor>{gs};
      },
      "gather_offsets");
  return out;
}

// ---- blobs -----------------------------------------------------------------

namespace {

static_assert(std::endian::native == std::endian::little,
              "blob I/O assumes a little-endian host");

void write_u64(std::ofstream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

}  // namespace

void save_blob(const Tensor& t, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  write_u64(os, static_cast<std::uint64_t>(t.rank()));
  for (auto e : t.shape()) write_u64(os, static_cast<std::uint64_t>(e));
  dispatch(t.dtype(), [&]<class T>() {
    auto d = t.data<T>();
    os.write(reinterpret_cast<const char*>(d.data()),
             static_cast<std::streamsize>(d.size() * sizeof(T)));
  });
  if (!os) throw IoError("write failed for " + path.string());
}

Tensor load_blob(const std::filesystem::path& path, DType dtype) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  const auto file_size = std::filesystem::file_size(path);
  std::uint64_t rank = 0;
  is.read(reinterpret_cast<char*>(&rank), sizeof rank);
  if (!is || rank > 16) throw IoError("malformed blob header in " + path.string());
  Shape shape(rank);
  for (auto& e : shape) {
    std::uint64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof v);
    e = static_cast<std::int64_t>(v);
  }
  if (!is) throw IoError("truncated blob header in " + path.string());
  const std::uint64_t n = static_cast<std::uint64_t>(shape_numel(shape));
  const std::uint64_t payload = file_size - 8 * (rank + 1);
  Tensor out = Tensor::zeros(shape, dtype);
  auto fill = [&]<class S>() {
    std::vector<S> raw(n);
    is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(n * sizeof(S)));
    if (!is) throw IoError("truncated blob payload in " + path.string());
    dispatch(dtype, [&]<class D>() {
      auto d = out.data<D>();
      for (std::size_t i = 0; i < n; ++i) d[i] = static_cast<D>(raw[i]);
    });
  };
  if (payload == n * sizeof(float))
    fill.template operator()<float>();
  else if (payload == n * sizeof(double))
    fill.template operator()<double>();
  else
    throw IoError("blob payload size does not match header in " + path.string());
  return out;
}

double max_abs(const Tensor& x) {
  double m = 0;
  for (double v : x.to_vector()) m = std::max(m, std::abs(v));
  return m;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw DimensionError("max_abs_diff: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const auto va = a.to_vector(), vb = b.to_vector();
  double m = 0;
  for (std::size_t i = 0; i < va.size(); ++i) m = std::max(m, std::abs(va[i] - vb[i]));
  return m;
}

bool all_finite(const Tensor& x) {
  return dispatch(x.dtype(), [&]<class T>() {
    for (T v : x.data<T>())
      if (!std::isfinite(v)) return false;
    return true;
  });
}

}  // namespace warpvos::ops
