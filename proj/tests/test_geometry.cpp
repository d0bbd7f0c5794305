#include <cmath>
#include <random>

#include "doctest.h"
#include "support/gradcheck.hpp"
#include "warpvos/geometry.hpp"
#include "warpvos/ops.hpp"

using namespace warpvos;
using warpvos::testing::gradcheck;
using warpvos::testing::random_tensor;

namespace {

Tensor ramp(std::int64_t c, std::int64_t h, std::int64_t w) {
  std::vector<double> v;
  for (std::int64_t ci = 0; ci < c; ++ci)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) v.push_back(static_cast<double>(ci * 100 + y * 10 + x));
  return Tensor::from_values({c, h, w}, v);
}

Tensor random_simplex(std::int64_t c, std::int64_t h, std::int64_t w, std::mt19937_64& rng) {
  auto raw = random_tensor({c, h, w}, rng, -2, 2, DType::f64);
  return ops::softmax(raw, 0);
}

}  // namespace

TEST_CASE("identity grid reproduces the source bit-exactly") {
  std::mt19937_64 rng(1);
  auto src = random_tensor({3, 6, 7}, rng, -1, 1, DType::f32);
  auto out = geometry::grid_sample_bilinear(src, geometry::identity_grid(6, 7));
  CHECK(out.to_vector() == src.to_vector());
  auto warped = geometry::warp_image(src, geometry::FlowField::zeros(6, 7));
  CHECK(warped.to_vector() == src.to_vector());
}

TEST_CASE("integer shift matches the index oracle with clamped border") {
  const std::int64_t h = 4, w = 6;
  auto src = ramp(2, h, w);
  auto out = geometry::warp_image(src, geometry::FlowField::constant(h, w, 1.0, 0.0)).to_vector();
  const auto s = src.to_vector();
  for (std::int64_t c = 0; c < 2; ++c)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) {
        const std::int64_t sx = std::min(x + 1, w - 1);
        CHECK(out[static_cast<std::size_t>((c * h + y) * w + x)] ==
              s[static_cast<std::size_t>((c * h + y) * w + sx)]);
      }
}

TEST_CASE("half-pixel sample is the midpoint") {
  auto row = Tensor::from_values({1, 1, 2}, {3.0, 8.0}, DType::f64);
  auto coords = Tensor::from_values({2, 1, 1}, {0.5, 0.0}, DType::f64);
  CHECK(geometry::grid_sample_bilinear(row, coords).item() == doctest::Approx(5.5));
}

TEST_CASE("NaN coordinates are rejected") {
  auto src = Tensor::zeros({1, 2, 2});
  auto coords = Tensor::from_values({2, 1, 1}, {std::nan(""), 0.0});
  CHECK_THROWS_AS(geometry::grid_sample_bilinear(src, coords), NumericError);
}

TEST_CASE("warp_image rejects mismatched extents") {
  CHECK_THROWS_AS(geometry::warp_image(Tensor::zeros({3, 4, 4}), geometry::FlowField::zeros(4, 5)),
                  DimensionError);
}

TEST_CASE("soft-mask warp keeps the simplex") {
  std::mt19937_64 rng(5);
  auto mask = random_simplex(4, 8, 9, rng);
  // Renormalization only perturbs the last bits.
  CHECK(ops::max_abs_diff(geometry::warp_soft_mask(mask, geometry::FlowField::zeros(8, 9, DType::f64)),
                          mask) < 1e-12);

  auto flow = geometry::FlowField{random_tensor({2, 8, 9}, rng, -3, 3, DType::f64)};
  auto out = geometry::warp_soft_mask(mask, flow);
  auto sums = ops::sum_axis(out, 0).to_vector();
  for (double s : sums) CHECK(std::abs(s - 1.0) < 1e-6);
  for (double p : out.to_vector()) CHECK(p >= 0.0);
}

TEST_CASE("one-hot mask translates under integer flow") {
  const std::int64_t h = 6, w = 6;
  std::vector<int> labels(static_cast<std::size_t>(h * w), 0);
  for (int y = 2; y < 4; ++y)
    for (int x = 1; x < 3; ++x) labels[static_cast<std::size_t>(y * w + x)] = 1;
  std::vector<double> onehot(static_cast<std::size_t>(2 * h * w), 0.0);
  for (std::int64_t i = 0; i < h * w; ++i) onehot[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)] * h * w + i)] = 1.0;
  auto mask = Tensor::from_values({2, h, w}, onehot);
  // Sampling at p + (-2, -1) moves content by (+2, +1).
  auto out = geometry::warp_soft_mask(mask, geometry::FlowField::constant(h, w, -2.0, -1.0)).to_vector();
  for (std::int64_t y = 1; y < h; ++y)
    for (std::int64_t x = 2; x < w; ++x) {
      const int expect = labels[static_cast<std::size_t>((y - 1) * w + (x - 2))];
      CHECK(out[static_cast<std::size_t>(h * w + y * w + x)] == doctest::Approx(expect));
    }
}

TEST_CASE("non-normalized soft mask is rejected") {
  auto mask = Tensor::full({2, 3, 3}, 0.7);
  CHECK_THROWS_AS(geometry::warp_soft_mask(mask, geometry::FlowField::zeros(3, 3)), NumericError);
}

TEST_CASE("warping by f then -f returns a smooth image") {
  const std::int64_t h = 32, w = 32;
  std::vector<double> img;
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x)
      img.push_back(0.5 + 0.4 * std::sin(0.21 * x) * std::cos(0.17 * y));
  auto src = Tensor::from_values({1, h, w}, img, DType::f64);
  auto f = geometry::FlowField::constant(h, w, 1.3, -0.6, DType::f64);
  auto back = geometry::FlowField::constant(h, w, -1.3, 0.6, DType::f64);
  auto round = geometry::warp_image(geometry::warp_image(src, f), back).to_vector();
  double l1 = 0;
  int count = 0;
  for (std::int64_t y = 2; y < h - 2; ++y)
    for (std::int64_t x = 2; x < w - 2; ++x, ++count)
      l1 += std::abs(round[static_cast<std::size_t>(y * w + x)] - img[static_cast<std::size_t>(y * w + x)]);
  CHECK(l1 / count < 0.05);
}

TEST_CASE("resize keeps constants and doubles extents") {
  auto x = Tensor::full({2, 3, 5}, 0.25);
  auto y = geometry::resize_bilinear(x, 6, 10);
  CHECK(y.shape() == Shape{2, 6, 10});
  for (double v : y.to_vector()) CHECK(v == 0.25);
}

TEST_CASE("grid sample and simplex normalization pass gradient checks") {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 5; ++trial) {
    const std::int64_t h = 3 + trial, w = 4 + trial % 3;
    auto coords = random_tensor({2, h, w}, rng, -1.5, static_cast<double>(std::max(h, w)) + 0.5);
    CHECK(gradcheck([coords](auto& v) { return geometry::grid_sample_bilinear(v[0], coords); },
                    {random_tensor({2, h, w}, rng)})
              .max_rel_error < 1e-4);
    CHECK(gradcheck([](auto& v) { return geometry::normalize_simplex(v[0]); },
                    {random_tensor({3, h, w}, rng, 0.1, 1.0)})
              .max_rel_error < 1e-4);
    CHECK(gradcheck([h, w](auto& v) { return geometry::resize_bilinear(v[0], 2 * h, 2 * w); },
                    {random_tensor({2, h, w}, rng)})
              .max_rel_error < 1e-4);
  }
}

TEST_CASE("flow color wheel covers the field") {
  auto flow = geometry::FlowField::constant(2, 3, 1.0, 0.0);
  auto rgb = geometry::flow_to_rgb(flow);
  CHECK(rgb.size() == 18);
  auto still = geometry::flow_to_rgb(geometry::FlowField::zeros(2, 2));
  for (auto b : still) CHECK(b == 255);
}
