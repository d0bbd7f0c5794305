#include "warpvos/geometry.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>

#include "warpvos/ops.hpp"

namespace warpvos::geometry {

FlowField FlowField::zeros(std::int64_t height, std::int64_t width, DType dtype) {
  return FlowField{Tensor::zeros({2, height, width}, dtype)};
}

FlowField FlowField::constant(std::int64_t height, std::int64_t width, double u, double v,
                              DType dtype) {
  Tensor t = Tensor::zeros({2, height, width}, dtype);
  dispatch(dtype, [&]<class T>() {
    auto d = t.data<T>();
    const auto plane = static_cast<std::size_t>(height * width);
    std::fill(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(plane), static_cast<T>(u));
    std::fill(d.begin() + static_cast<std::ptrdiff_t>(plane), d.end(), static_cast<T>(v));
  });
  return FlowField{t};
}

void FlowField::validate() const {
  if (!uv.defined() || uv.rank() != 3 || uv.dim(0) != 2)
    throw DimensionError("flow field must be [2,H,W], got " +
                         (uv.defined() ? shape_str(uv.shape()) : std::string("undefined")));
}

Tensor identity_grid(std::int64_t height, std::int64_t width, DType dtype) {
  Tensor g = Tensor::zeros({2, height, width}, dtype);
  dispatch(dtype, [&]<class T>() {
    auto d = g.data<T>();
    for (std::int64_t y = 0; y < height; ++y)
      for (std::int64_t x = 0; x < width; ++x) {
        d[static_cast<std::size_t>(y * width + x)] = static_cast<T>(x);
        d[static_cast<std::size_t>((height + y) * width + x)] = static_cast<T>(y);
      }
  });
  return g;
}

namespace {

struct Tap {
  std::int64_t i00, i01, i10, i11;
  double w00, w01, w10, w11;
};

Tap make_tap(double x, double y, std::int64_t h, std::int64_t w) {
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  const auto x0 = static_cast<std::int64_t>(std::floor(x));
  const auto y0 = static_cast<std::int64_t>(std::floor(y));
  const std::int64_t x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
  const double fx = x - static_cast<double>(x0), fy = y - static_cast<double>(y0);
  return {y0 * w + x0,           y0 * w + x1,         y1 * w + x0,   y1 * w + x1,
          (1 - fy) * (1 - fx),   (1 - fy) * fx,       fy * (1 - fx), fy * fx};
}

}  // namespace

Tensor grid_sample_bilinear(const Tensor& source, const Tensor& coords) {
  if (source.rank() != 3) throw DimensionError("grid_sample: source must be [C,H,W]");
  if (coords.rank() != 3 || coords.dim(0) != 2)
    throw DimensionError("grid_sample: coords must be [2,H,W], got " + shape_str(coords.shape()));
  const std::int64_t c = source.dim(0), h = source.dim(1), w = source.dim(2);
  const std::int64_t ho = coords.dim(1), wo = coords.dim(2), plane = ho * wo;
  if (h == 0 || w == 0) throw DimensionError("grid_sample: empty source");
  std::vector<Tap> taps(static_cast<std::size_t>(plane));
  const auto cv = coords.to_vector();
  for (std::int64_t i = 0; i < plane; ++i) {
    const double x = cv[static_cast<std::size_t>(i)], y = cv[static_cast<std::size_t>(plane + i)];
    if (std::isnan(x) || std::isnan(y)) throw NumericError("grid_sample: NaN coordinate");
    taps[static_cast<std::size_t>(i)] = make_tap(x, y, h, w);
  }
  Tensor out = Tensor::zeros({c, ho, wo}, source.dtype());
  dispatch(source.dtype(), [&]<class T>() {
    auto s = source.data<T>();
    auto d = out.data<T>();
    for (std::int64_t ci = 0; ci < c; ++ci) {
      const T* sp = s.data() + ci * h * w;
      T* dp = d.data() + ci * plane;
      for (std::int64_t i = 0; i < plane; ++i) {
        const Tap& t = taps[static_cast<std::size_t>(i)];
        dp[i] = static_cast<T>(t.w00) * sp[t.i00] + static_cast<T>(t.w01) * sp[t.i01] +
                static_cast<T>(t.w10) * sp[t.i10] + static_cast<T>(t.w11) * sp[t.i11];
      }
    }
  });
  attach_grad(
      out, {source},
      [taps = std::move(taps), c, h, w, plane](const Tensor& g) {
        Tensor gs = Tensor::zeros({c, h, w}, g.dtype());
        dispatch(g.dtype(), [&]<class T>() {
          auto gv = g.data<T>();
          auto d = gs.data<T>();
          for (std::int64_t ci = 0; ci < c; ++ci) {
            T* dp = d.data() + ci * h * w;
            const T* gp = gv.data() + ci * plane;
            for (std::int64_t i = 0; i < plane; ++i) {
              const Tap& t = taps[static_cast<std::size_t>(i)];
              dp[t.i00] += static_cast<T>(t.w00) * gp[i];
              dp[t.i01] += static_cast<T>(t.w01) * gp[i];
              dp[t.i10] += static_cast<T>(t.w10) * gp[i];
              dp[t.i11] += static_cast<T>(t.w11) * gp[i];
            }
          }
        });
        return std::vector<Tensor>{gs};
      },
      "grid_sample_bilinear");
  return out;
}

namespace {

Tensor sampling_coords(const FlowField& flow, DType dtype) {
  flow.validate();
  Tensor grid = identity_grid(flow.height(), flow.width(), dtype);
  const Tensor uv = flow.uv.dtype() == dtype ? flow.uv.detach() : flow.uv.to(dtype);
  NoGradGuard ng;
  return ops::add(grid, uv);
}

void require_same_grid(const Tensor& x, const FlowField& flow, const char* what) {
  flow.validate();
  if (x.rank() != 3 || x.dim(1) != flow.height() || x.dim(2) != flow.width())
    throw DimensionError(std::string(what) + ": extents " + shape_str(x.shape()) +
                         " do not match flow " + shape_str(flow.uv.shape()));
}

}  // namespace

Tensor warp_image(const Tensor& image, const FlowField& flow) {
  require_same_grid(image, flow, "warp_image");
  return grid_sample_bilinear(image, sampling_coords(flow, image.dtype()));
}

Tensor normalize_simplex(const Tensor& x, double eps) {
  if (x.rank() != 3) throw DimensionError("normalize_simplex: expected [C,H,W]");
  const std::int64_t c = x.dim(0), plane = x.dim(1) * x.dim(2);
  std::vector<double> denom(static_cast<std::size_t>(plane), 0.0);
  std::vector<char> clipped(static_cast<std::size_t>(plane), 0);
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    auto s = x.data<T>();
    auto d = out.data<T>();
    for (std::int64_t i = 0; i < plane; ++i) {
      T total = 0;
      for (std::int64_t ci = 0; ci < c; ++ci) total += s[static_cast<std::size_t>(ci * plane + i)];
      const bool clip = total < static_cast<T>(eps);
      const T den = clip ? static_cast<T>(eps) : total;
      denom[static_cast<std::size_t>(i)] = static_cast<double>(den);
      clipped[static_cast<std::size_t>(i)] = clip;
      for (std::int64_t ci = 0; ci < c; ++ci) {
        const auto k = static_cast<std::size_t>(ci * plane + i);
        d[k] = s[k] / den;
      }
    }
  });
  attach_grad(
      out, {x},
      [c, plane, denom = std::move(denom), clipped = std::move(clipped), y = out.detach()](
          const Tensor& g) {
        Tensor gx = Tensor::zeros(g.shape(), g.dtype());
        dispatch(g.dtype(), [&]<class T>() {
          auto gv = g.data<T>();
          auto yv = y.data<T>();
          auto d = gx.data<T>();
          for (std::int64_t i = 0; i < plane; ++i) {
            const T den = static_cast<T>(denom[static_cast<std::size_t>(i)]);
            T dot = 0;
            if (!clipped[static_cast<std::size_t>(i)])
              for (std::int64_t ci = 0; ci < c; ++ci) {
                const auto k = static_cast<std::size_t>(ci * plane + i);
                dot += gv[k] * yv[k];
              }
            for (std::int64_t ci = 0; ci < c; ++ci) {
              const auto k = static_cast<std::size_t>(ci * plane + i);
              d[k] = (gv[k] - dot) / den;
            }
          }
        });
        return std::vector<Tensor>{gx};
      },
      "normalize_simplex");
  return out;
}

Tensor warp_soft_mask(const Tensor& mask, const FlowField& flow, double eps) {
  require_same_grid(mask, flow, "warp_soft_mask");
  const std::int64_t c = mask.dim(0), plane = mask.dim(1) * mask.dim(2);
  const auto v = mask.to_vector();
  for (std::int64_t i = 0; i < plane; ++i) {
    double total = 0;
    for (std::int64_t ci = 0; ci < c; ++ci) total += v[static_cast<std::size_t>(ci * plane + i)];
    if (std::abs(total - 1.0) > 1e-4)
      throw NumericError("warp_soft_mask: probabilities at pixel " + std::to_string(i) +
                         " sum to " + std::to_string(total));
  }
  return normalize_simplex(grid_sample_bilinear(mask, sampling_coords(flow, mask.dtype())), eps);
}

Tensor resize_bilinear(const Tensor& x, std::int64_t out_height, std::int64_t out_width) {
  if (x.rank() != 3) throw DimensionError("resize_bilinear: expected [C,H,W]");
  const double sy = static_cast<double>(x.dim(1)) / static_cast<double>(out_height);
  const double sx = static_cast<double>(x.dim(2)) / static_cast<double>(out_width);
  Tensor coords = Tensor::zeros({2, out_height, out_width}, DType::f64);
  auto d = coords.data<double>();
  const auto plane = out_height * out_width;
  for (std::int64_t y = 0; y < out_height; ++y)
    for (std::int64_t xx = 0; xx < out_width; ++xx) {
      d[static_cast<std::size_t>(y * out_width + xx)] = (static_cast<double>(xx) + 0.5) * sx - 0.5;
      d[static_cast<std::size_t>(plane + y * out_width + xx)] = (static_cast<double>(y) + 0.5) * sy - 0.5;
    }
  return grid_sample_bilinear(x, coords);
}

namespace {

// Munsell-style wheel with RY, YG, GC, CB, BM, MR segments.
std::vector<std::array<double, 3>> make_color_wheel() {
  constexpr int RY = 15, YG = 6, GC = 4, CB = 11, BM = 13, MR = 6;
  std::vector<std::array<double, 3>> wheel;
  for (int i = 0; i < RY; ++i) wheel.push_back({255, 255.0 * i / RY, 0});
  for (int i = 0; i < YG; ++i) wheel.push_back({255 - 255.0 * i / YG, 255, 0});
  for (int i = 0; i < GC; ++i) wheel.push_back({0, 255, 255.0 * i / GC});
  for (int i = 0; i < CB; ++i) wheel.push_back({0, 255 - 255.0 * i / CB, 255});
  for (int i = 0; i < BM; ++i) wheel.push_back({255.0 * i / BM, 0, 255});
  for (int i = 0; i < MR; ++i) wheel.push_back({255, 0, 255 - 255.0 * i / MR});
  return wheel;
}

}  // namespace

std::vector<std::uint8_t> flow_to_rgb(const FlowField& flow, double max_magnitude) {
  flow.validate();
  const std::int64_t h = flow.height(), w = flow.width(), plane = h * w;
  const auto v = flow.uv.to_vector();
  double maxmag = max_magnitude;
  if (maxmag <= 0) {
    for (std::int64_t i = 0; i < plane; ++i)
      maxmag = std::max(maxmag, std::hypot(v[static_cast<std::size_t>(i)],
                                           v[static_cast<std::size_t>(plane + i)]));
  }
  if (maxmag <= 0) maxmag = 1.0;
  static const auto wheel = make_color_wheel();
  const auto ncols = static_cast<double>(wheel.size());
  std::vector<std::uint8_t> rgb(static_cast<std::size_t>(plane * 3));
  for (std::int64_t i = 0; i < plane; ++i) {
    const double u = v[static_cast<std::size_t>(i)] / maxmag;
    const double vv = v[static_cast<std::size_t>(plane + i)] / maxmag;
    const double rad = std::min(std::hypot(u, vv), 1.0);
    const double angle = std::atan2(-vv, -u) / std::numbers::pi;
    const double fk = (angle + 1.0) / 2.0 * (ncols - 1.0);
    const auto k0 = static_cast<std::size_t>(std::floor(fk));
    const std::size_t k1 = (k0 + 1) % wheel.size();
    const double f = fk - static_cast<double>(k0);
    for (int ch = 0; ch < 3; ++ch) {
      const double col = ((1 - f) * wheel[k0][static_cast<std::size_t>(ch)] +
                          f * wheel[k1][static_cast<std::size_t>(ch)]) / 255.0;
      const double shaded = 1.0 - rad * (1.0 - col);
      rgb[static_cast<std::size_t>(i * 3 + ch)] =
          static_cast<std::uint8_t>(std::lround(std::clamp(shaded, 0.0, 1.0) * 255.0));
    }
  }
  return rgb;
}

}  // namespace warpvos::geometry
