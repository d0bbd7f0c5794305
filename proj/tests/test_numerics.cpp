#include <cmath>
#include <filesystem>
#include <random>

#include "doctest.h"
#include "support/gradcheck.hpp"
#include "warpvos/ops.hpp"

using namespace warpvos;
using warpvos::testing::gradcheck;
using warpvos::testing::random_tensor;

namespace {

// Reference contraction, independent of the BLAS path.
std::vector<double> naive_matmul(const std::vector<double>& a, const std::vector<double>& b, int n,
                                 int k, int m) {
  std::vector<double> c(static_cast<std::size_t>(n * m), 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j)
      for (int p = 0; p < k; ++p) c[i * m + j] += a[i * k + p] * b[p * m + j];
  return c;
}

// Six nested loops over output channel, output pixel and kernel footprint.
std::vector<double> naive_conv(const Tensor& x, const Tensor& w, int stride, int pad) {
  const auto cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const auto cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const auto ho = (h + 2 * pad - kh) / stride + 1, wo = (wd + 2 * pad - kw) / stride + 1;
  std::vector<double> out(static_cast<std::size_t>(cout * ho * wo), 0.0);
  for (std::int64_t co = 0; co < cout; ++co)
    for (std::int64_t oy = 0; oy < ho; ++oy)
      for (std::int64_t ox = 0; ox < wo; ++ox)
        for (std::int64_t ci = 0; ci < cin; ++ci)
          for (std::int64_t ky = 0; ky < kh; ++ky)
            for (std::int64_t kx = 0; kx < kw; ++kx) {
              const auto sy = oy * stride - pad + ky, sx = ox * stride - pad + kx;
              if (sy < 0 || sy >= h || sx < 0 || sx >= wd) continue;
              out[static_cast<std::size_t>((co * ho + oy) * wo + ox)] +=
                  x.at((ci * h + sy) * wd + sx) * w.at(((co * cin + ci) * kh + ky) * kw + kx);
            }
  return out;
}

}  // namespace

TEST_CASE("matmul closed forms") {
  auto eye = Tensor::from_values({2, 2}, {1, 0, 0, 1});
  auto m = Tensor::from_values({2, 2}, {1, 2, 3, 4});
  CHECK(ops::matmul(eye, m).to_vector() == std::vector<double>{1, 2, 3, 4});
  auto r = Tensor::from_values({1, 2}, {1, 2});
  auto c = Tensor::from_values({2, 1}, {3, 4});
  CHECK(ops::matmul(r, c).item() == doctest::Approx(11.0));
}

TEST_CASE("matmul agrees with the triple loop") {
  std::mt19937_64 rng(1);
  auto a = random_tensor({3, 4}, rng, -1, 1, DType::f32);
  auto b = random_tensor({4, 5}, rng, -1, 1, DType::f32);
  const auto ref = naive_matmul(a.to_vector(), b.to_vector(), 3, 4, 5);
  const auto got = ops::matmul(a, b).to_vector();
  for (std::size_t i = 0; i < ref.size(); ++i) CHECK(got[i] == doctest::Approx(ref[i]).epsilon(1e-5));
}

TEST_CASE("matmul shape errors name both shapes") {
  auto a = Tensor::zeros({2, 3});
  auto b = Tensor::zeros({4, 2});
  try {
    ops::matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[4,2]") != std::string::npos);
  }
}

TEST_CASE("softmax closed forms and shift invariance") {
  auto s = ops::softmax(Tensor::from_values({2}, {0, 0}, DType::f64), 0).to_vector();
  CHECK(s[0] == doctest::Approx(0.5));
  auto t = ops::softmax(Tensor::from_values({2}, {0, std::log(3.0)}, DType::f64), 0).to_vector();
  CHECK(t[0] == doctest::Approx(0.25));
  CHECK(t[1] == doctest::Approx(0.75));

  std::mt19937_64 rng(3);
  auto x = random_tensor({4, 7}, rng, -5, 5, DType::f64);
  auto y0 = ops::softmax(x, 1);
  auto y1 = ops::softmax(ops::affine(x, 1.0, 12.5), 1);
  CHECK(ops::max_abs_diff(y0, y1) < 1e-12);
  auto rows = ops::sum_axis(y0, 1).to_vector();
  for (double r : rows) CHECK(std::abs(r - 1.0) < 1e-6);
}

TEST_CASE("softmax rejects NaN") {
  auto x = Tensor::from_values({2}, {0.0, std::nan("")});
  CHECK_THROWS_AS(ops::softmax(x, 0), NumericError);
}

TEST_CASE("layer_norm closed forms and statistics") {
  auto one = Tensor::ones({3}, DType::f64);
  auto zero = Tensor::zeros({3}, DType::f64);
  CHECK(ops::max_abs(ops::layer_norm(Tensor::full({3}, 4.0, DType::f64), one, zero)) == 0.0);

  auto g2 = Tensor::ones({2}, DType::f64), b2 = Tensor::zeros({2}, DType::f64);
  auto y = ops::layer_norm(Tensor::from_values({2}, {1, 3}, DType::f64), g2, b2, 1e-12).to_vector();
  CHECK(y[0] == doctest::Approx(-1.0));
  CHECK(y[1] == doctest::Approx(1.0));

  std::mt19937_64 rng(5);
  auto x = random_tensor({6, 16}, rng, -3, 3);
  auto gn = Tensor::ones({16}, DType::f64), bn = Tensor::zeros({16}, DType::f64);
  auto z = ops::layer_norm(x, gn, bn, 0.0).to_vector();
  for (int r = 0; r < 6; ++r) {
    double mu = 0, var = 0;
    for (int j = 0; j < 16; ++j) mu += z[r * 16 + j];
    mu /= 16;
    for (int j = 0; j < 16; ++j) var += (z[r * 16 + j] - mu) * (z[r * 16 + j] - mu);
    var /= 16;
    CHECK(std::abs(mu) < 1e-5);
    CHECK(std::abs(var - 1.0) < 1e-5);
  }
}

TEST_CASE("group_norm matches direct per-channel and whole-map oracles") {
  std::mt19937_64 rng(9);
  auto x = random_tensor({4, 3, 5}, rng, -2, 2);
  auto g = Tensor::ones({4}, DType::f64), b = Tensor::zeros({4}, DType::f64);
  const auto v = x.to_vector();

  auto oracle = [&](int groups) {
    std::vector<double> out(v.size());
    const int per = 4 / groups, len = per * 15;
    for (int gi = 0; gi < groups; ++gi) {
      double mu = 0, var = 0;
      for (int j = 0; j < len; ++j) mu += v[gi * len + j];
      mu /= len;
      for (int j = 0; j < len; ++j) var += (v[gi * len + j] - mu) * (v[gi * len + j] - mu);
      var /= len;
      for (int j = 0; j < len; ++j) out[gi * len + j] = (v[gi * len + j] - mu) / std::sqrt(var + 1e-5);
    }
    return out;
  };
  for (int groups : {4, 1}) {
    const auto got = ops::group_norm(x, groups, g, b).to_vector();
    const auto ref = oracle(groups);
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(got[i] == doctest::Approx(ref[i]).epsilon(1e-10));
  }
  CHECK(ops::max_abs(ops::group_norm(Tensor::full({4, 2, 2}, 3.0, DType::f64), 2, g, b)) == 0.0);
  CHECK_THROWS_AS(ops::group_norm(x, 3, g, b), ConfigError);
}

TEST_CASE("conv2d closed forms and loop oracle") {
  std::mt19937_64 rng0(2);
  auto x = random_tensor({1, 4, 4}, rng0, -1, 1, DType::f32);
  auto w1 = Tensor::ones({1, 1, 1, 1});
  CHECK(ops::max_abs_diff(ops::conv2d(x, w1), x) == 0.0);

  auto ones = Tensor::ones({1, 3, 3});
  auto k = Tensor::ones({1, 1, 2, 2});
  auto y = ops::conv2d(ones, k);
  CHECK(y.shape() == Shape{1, 2, 2});
  for (double v : y.to_vector()) CHECK(v == 4.0);

  std::mt19937_64 rng(11);
  for (auto [stride, pad] : {std::pair{1, 0}, std::pair{2, 1}, std::pair{1, 2}}) {
    auto xi = random_tensor({3, 7, 6}, rng, -1, 1);
    auto wi = random_tensor({4, 3, 3, 2}, rng, -1, 1);
    const auto ref = naive_conv(xi, wi, stride, pad);
    const auto got = ops::conv2d(xi, wi, {}, stride, pad).to_vector();
    REQUIRE(ref.size() == got.size());
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(got[i] == doctest::Approx(ref[i]).epsilon(1e-12));
  }
  CHECK_THROWS_AS(ops::conv2d(Tensor::ones({1, 2, 2}), Tensor::ones({1, 1, 3, 3})), DimensionError);
}

TEST_CASE("replicate padding keeps constant maps constant") {
  auto x = Tensor::full({2, 5, 5}, 1.5);
  std::mt19937_64 rng(4);
  auto w = random_tensor({3, 2, 3, 3}, rng, -1, 1, DType::f32);
  auto y = ops::conv2d(x, w, {}, 1, 1, ops::PadMode::replicate).to_vector();
  for (int c = 0; c < 3; ++c)
    for (int i = 1; i < 25; ++i) CHECK(y[c * 25 + i] == doctest::Approx(y[c * 25]).epsilon(1e-6));
}

TEST_CASE("backward closed forms and accumulation") {
  auto x = Tensor::from_values({3}, {1, -2, 3}, DType::f64).requires_grad_();
  ops::sum(x).backward();
  CHECK(x.grad().to_vector() == std::vector<double>{1, 1, 1});
  x.zero_grad();
  ops::sum(ops::mul(x, x)).backward();
  CHECK(x.grad().to_vector() == std::vector<double>{2, -4, 6});
  // Repeated backward accumulates.
  auto loss = ops::sum(x);
  x.zero_grad();
  loss.backward();
  loss.backward();
  CHECK(x.grad().to_vector() == std::vector<double>{2, 2, 2});

  CHECK_THROWS_AS(ops::mul(x, x).backward(), UsageError);
}

TEST_CASE("gradient check over every differentiable op") {
  std::mt19937_64 rng(2024);
  auto R = [&](const Shape& s, double lo = -1, double hi = 1) { return random_tensor(s, rng, lo, hi); };
  constexpr double kTol = 1e-4;

  for (int trial = 0; trial < 5; ++trial) {
    const std::int64_t n = 2 + trial, k = 3 + trial % 2, m = 2 + (trial * 2) % 3;
    CAPTURE(trial);
    CHECK(gradcheck([](auto& v) { return ops::matmul(v[0], v[1]); }, {R({n, k}), R({k, m})}).max_rel_error < kTol);
    CHECK(gradcheck([](auto& v) { return ops::matmul(v[0], v[1]); }, {R({2, n, k}), R({k, m})}).max_rel_error < kTol);
    CHECK(gradcheck([](auto& v) { return ops::matmul(v[0], v[1]); }, {R({2, n, k}), R({2, k, m})}).max_rel_error < kTol);
    CHECK(gradcheck([](auto& v) { return ops::softmax(v[0], 1); }, {R({n, m + 2}, -3, 3)}).max_rel_error < kTol);
    CHECK(gradcheck([](auto& v) { return ops::softmax(v[0], 0); }, {R({n, m + 2}, -3, 3)}).max_rel_error < kTol);
    CHECK(gradcheck([](auto& v) { return ops::log_softmax(v[0], 0); }, {R({n + 1, 3}, -3, 3)}).max_rel_error < kTol);
    CHECK(gradcheck([](auto& v) { return ops::layer_norm(v[0], v[1], v[2]); },
                    {R({n, 6}), R({6}), R({6})}).max_rel_error < kTol);
    CHECK(gradcheck([](auto& v) { return ops::group_norm(v[0], 2, v[1], v[2]); },
                    {R({4, n, 3}), R({4}), R({4})}).max_rel_error < kTol);
    const int stride = 1 + trial % 2, pad = trial % 3;
    CHECK(gradcheck([stride, pad](auto& v) { return ops::conv2d(v[0], v[1], v[2], stride, pad); },
                    {R({2, 5 + trial, 4 + trial}), R({3, 2, 3, 2}), R({3})}).max_rel_error < kTol);
    CHECK(gradcheck([](auto& v) { return ops::conv2d(v[0], v[1], v[2], 1, 1, ops::PadMode::replicate); },
                    {R({2, 4, 3 + trial}), R({2, 2, 3, 3}), R({2})}).max_rel_error < kTol);
    CHECK(gradcheck([](auto& v) { return ops::gelu(v[0]); }, {R({n, k}, -3, 3)}).max_rel_error < kTol);
    CHECK(gradcheck([](auto& v) { return ops::relu(v[0]); }, {R({n, k})}).max_rel_error < kTol);
    CHECK(gradcheck([](auto& v) { return ops::div(v[0], v[1]); }, {R({n, k}), R({n, k}, 0.5, 2)}).max_rel_error < kTol);
    CHECK(gradcheck([](auto& v) { return ops::mul(ops::exp(v[0]), ops::log(v[1])); },
                    {R({n, k}), R({n, k}, 0.5, 2)}).max_rel_error < kTol);
    CHECK(gradcheck([](auto& v) { return ops::add_bias(v[0], v[1], 1); }, {R({n, k, 2}), R({k})}).max_rel_error < kTol);
    CHECK(gradcheck([](auto& v) { return ops::mul_channel(v[0], v[1], 0); }, {R({k, n}), R({k})}).max_rel_error < kTol);
    CHECK(gradcheck([](auto& v) { return ops::linear(v[0], v[1], v[2]); }, {R({n, k}), R({m, k}), R({m})}).max_rel_error < kTol);
    CHECK(gradcheck([](auto& v) { return ops::permute(v[0], {2, 0, 1}); }, {R({n, k, 2})}).max_rel_error < kTol);
    CHECK(gradcheck([](auto& v) { return ops::concat({v[0], ops::slice(v[1], 1, 1, 2)}, 1); },
                    {R({n, 2}), R({n, 4})}).max_rel_error < kTol);
    CHECK(gradcheck([](auto& v) { return ops::sum_axis(v[0], 1); }, {R({n, k, 2})}).max_rel_error < kTol);
    CHECK(gradcheck([](auto& v) { return ops::sum_pool(v[0], 2); }, {R({2, 4, 6})}).max_rel_error < kTol);
    const std::vector<std::int32_t> idx{0, 2, -1, 1, 1, 0};
    CHECK(gradcheck([&idx](auto& v) { return ops::gather_offsets(v[0], idx, 2, 3, -5.0); },
                    {R({2, 2, 3})}).max_rel_error < kTol);
  }
}

TEST_CASE("forward ops are deterministic") {
  std::mt19937_64 rng(17);
  auto x = random_tensor({3, 9, 9}, rng, -1, 1, DType::f32);
  auto w = random_tensor({5, 3, 3, 3}, rng, -1, 1, DType::f32);
  auto a = ops::conv2d(x, w, {}, 2, 1).to_vector();
  auto b = ops::conv2d(x, w, {}, 2, 1).to_vector();
  CHECK(a == b);
}

TEST_CASE("blob round trip keeps header and payload") {
  std::mt19937_64 rng(21);
  auto t = random_tensor({2, 3, 4}, rng, -1, 1, DType::f32);
  const auto path = std::filesystem::temp_directory_path() / "warpvos_blob_test.bin";
  ops::save_blob(t, path);
  CHECK(std::filesystem::file_size(path) == 8 * 4 + 24 * 4);
  auto u = ops::load_blob(path);
  CHECK(u.shape() == t.shape());
  CHECK(u.to_vector() == t.to_vector());

  auto d = random_tensor({5}, rng, -1, 1, DType::f64);
  ops::save_blob(d, path);
  CHECK(ops::load_blob(path, DType::f64).to_vector() == d.to_vector());
  std::filesystem::remove(path);
}
