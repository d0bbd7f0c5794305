#include <random>

#include "doctest.h"
#include "support/gradcheck.hpp"
#include "warpvos/identity.hpp"
#include "warpvos/ops.hpp"

using namespace warpvos;
using namespace warpvos::identity;
using warpvos::testing::random_tensor;

namespace {

// One-hot mask [K+1, H, W] from a label map.
Tensor one_hot(const std::vector<int>& labels, std::int64_t k1, std::int64_t h, std::int64_t w,
               DType dtype = DType::f64) {
  std::vector<double> v(static_cast<std::size_t>(k1 * h * w), 0.0);
  for (std::int64_t i = 0; i < h * w; ++i) v[static_cast<std::size_t>(labels[i] * h * w + i)] = 1.0;
  return Tensor::from_values({k1, h, w}, v, dtype);
}

std::vector<double> row(const Tensor& m, std::int64_t r) {
  const std::int64_t c = m.dim(1);
  auto all = m.to_vector();
  return {all.begin() + r * c, all.begin() + (r + 1) * c};
}

// Independent per-cell accumulation over pixels.
std::vector<double> encode_oracle(const Tensor& mask, const Tensor& table) {
  const std::int64_t k1 = mask.dim(0), h = mask.dim(1), w = mask.dim(2), c = table.dim(1);
  const std::int64_t hp = h / 16, wp = w / 16;
  std::vector<double> out(static_cast<std::size_t>(c * hp * wp), 0.0);
  auto m = mask.to_vector();
  auto t = table.to_vector();
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x)
      for (std::int64_t k = 0; k < k1; ++k) {
        const double p = m[static_cast<std::size_t>((k * h + y) * w + x)];
        for (std::int64_t ch = 0; ch < c; ++ch)
          out[static_cast<std::size_t>((ch * hp + y / 16) * wp + x / 16)] +=
              p * t[static_cast<std::size_t>(k * c + ch)];
      }
  return out;
}

}  // namespace

TEST_CASE("a fully covered patch sums 256 copies of the slot vector") {
  std::mt19937_64 rng(3);
  auto bank = IdentityBank::create(10, 8, rng, DType::f64);
  auto a = IdentityAssignment::sequential({4}, 10);
  std::vector<int> labels(16 * 16, 1);
  auto enc = encode_mask(one_hot(labels, 2, 16, 16), bank, a, {4});
  auto id = row(bank.vectors, 0);
  for (int ch = 0; ch < 8; ++ch) CHECK(enc.at(ch) == doctest::Approx(256.0 * id[ch]).epsilon(1e-12));
}

TEST_CASE("a patch split 128/128 between two objects sums both halves") {
  std::mt19937_64 rng(4);
  auto bank = IdentityBank::create(10, 6, rng, DType::f64);
  auto a = IdentityAssignment::sequential({1, 2}, 10);
  std::vector<int> labels(256);
  for (int i = 0; i < 256; ++i) labels[i] = (i % 16) < 8 ? 1 : 2;
  auto enc = encode_mask(one_hot(labels, 3, 16, 16), bank, a, {1, 2});
  auto id1 = row(bank.vectors, 0), id2 = row(bank.vectors, 1);
  for (int ch = 0; ch < 6; ++ch)
    CHECK(enc.at(ch) == doctest::Approx(128.0 * (id1[ch] + id2[ch])).epsilon(1e-12));
}

TEST_CASE("patch-sum and convolution paths agree with the pixel oracle") {
  std::mt19937_64 rng(5);
  auto bank = IdentityBank::create(10, 12, rng, DType::f64);
  auto a = IdentityAssignment::random({2, 5, 7}, 10, rng);
  auto mask = ops::softmax(random_tensor({4, 32, 48}, rng, -3, 3), 0);
  auto p = encode_mask(mask, bank, a, {2, 5, 7}, EncodePath::patch_sum);
  auto c = encode_mask(mask, bank, a, {2, 5, 7}, EncodePath::convolution);
  CHECK(p.shape() == Shape{12, 2, 3});
  CHECK(ops::max_abs_diff(p, c) < 1e-5);
  auto oracle = encode_oracle(mask, bank.embedding_table(a, {2, 5, 7}));
  auto pv = p.to_vector();
  for (std::size_t i = 0; i < oracle.size(); ++i) CHECK(pv[i] == doctest::Approx(oracle[i]));
}

TEST_CASE("f32 convolution path stays within 1e-5 of the patch sum") {
  std::mt19937_64 rng(6);
  auto bank = IdentityBank::create(10, 16, rng, DType::f32);
  auto a = IdentityAssignment::sequential({1, 2}, 10);
  auto mask = ops::softmax(random_tensor({3, 32, 32}, rng, -3, 3, DType::f32), 0);
  auto p = encode_mask(mask, bank, a, {1, 2}, EncodePath::patch_sum);
  auto c = encode_mask(mask, bank, a, {1, 2}, EncodePath::convolution);
  CHECK(ops::max_abs_diff(p, c) < 1e-5 * std::max(1.0, ops::max_abs(p)));
}

TEST_CASE("encoding is linear in the mask") {
  std::mt19937_64 rng(7);
  auto bank = IdentityBank::create(5, 4, rng, DType::f64);
  auto a = IdentityAssignment::sequential({1, 2}, 5);
  auto m1 = random_tensor({3, 16, 32}, rng, 0, 1);
  auto m2 = random_tensor({3, 16, 32}, rng, 0, 1);
  auto lhs = encode_mask(ops::add(ops::affine(m1, 2.0), ops::affine(m2, -0.5)), bank, a, {1, 2});
  auto rhs = ops::add(ops::affine(encode_mask(m1, bank, a, {1, 2}), 2.0),
                      ops::affine(encode_mask(m2, bank, a, {1, 2}), -0.5));
  CHECK(ops::max_abs_diff(lhs, rhs) < 1e-10);
}

TEST_CASE("an all-background mask encodes to a constant map") {
  std::mt19937_64 rng(8);
  auto bank = IdentityBank::create(5, 4, rng, DType::f64);
  auto a = IdentityAssignment::sequential({3}, 5);
  std::vector<int> labels(32 * 48, 0);
  auto enc = encode_mask(one_hot(labels, 2, 32, 48), bank, a, {3});
  auto bg = bank.background.to_vector();
  for (int ch = 0; ch < 4; ++ch)
    for (int cell = 0; cell < 6; ++cell)
      CHECK(enc.at(ch * 6 + cell) == doctest::Approx(256.0 * bg[ch]).epsilon(1e-12));
}

TEST_CASE("readout picks the identity a feature is aligned with") {
  std::mt19937_64 rng(9);
  auto bank = IdentityBank::create(10, 32, rng, DType::f64);
  auto a = IdentityAssignment::sequential({1, 2, 3}, 10);
  auto table = bank.embedding_table(a, {1, 2, 3});
  // Pixel r carries embedding row r scaled up.
  std::vector<double> feat(32 * 4);
  auto t = table.to_vector();
  for (int r = 0; r < 4; ++r)
    for (int ch = 0; ch < 32; ++ch) feat[ch * 4 + r] = 50.0 * t[r * 32 + ch];
  auto logits = readout_logits(Tensor::from_values({32, 1, 4}, feat, DType::f64), bank, a, {1, 2, 3});
  for (int px = 0; px < 4; ++px) {
    int best = 0;
    for (int r = 1; r < 4; ++r)
      if (logits.at(r * 4 + px) > logits.at(best * 4 + px)) best = r;
    CHECK(best == px);
  }
  // Closed form for one entry.
  double dot = 0;
  for (int ch = 0; ch < 32; ++ch) dot += t[2 * 32 + ch] * feat[ch * 4 + 1];
  CHECK(logits.at(2 * 4 + 1) == doctest::Approx(dot / std::sqrt(32.0)));
}

TEST_CASE("a zero feature gives equal logits") {
  std::mt19937_64 rng(10);
  auto bank = IdentityBank::create(4, 8, rng, DType::f64);
  auto a = IdentityAssignment::sequential({1, 2}, 4);
  auto logits = readout_logits(Tensor::zeros({8, 2, 2}, DType::f64), bank, a, {1, 2});
  for (auto v : logits.to_vector()) CHECK(v == 0.0);
}

TEST_CASE("assignments are injective and within the bank") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    auto a = IdentityAssignment::random({1, 2, 3}, 10, rng);
    CHECK_NOTHROW(a.validate(10));
  }
  CHECK_THROWS_AS(IdentityAssignment::random({1, 2, 3}, 2, rng), ConfigError);
  IdentityAssignment dup;
  dup.assign(1, 3);
  dup.assign(2, 3);
  CHECK_THROWS_AS(dup.validate(10), ConfigError);
  IdentityAssignment out_of_range;
  out_of_range.assign(1, 11);
  CHECK_THROWS_AS(out_of_range.validate(10), ConfigError);
  auto seq = IdentityAssignment::sequential({1}, 2);
  CHECK(seq.extend(5, 2) == 2);
  CHECK(seq.extend(5, 2) == 2);
  CHECK_THROWS_AS(seq.extend(6, 2), ConfigError);
  CHECK_THROWS_AS(seq.slot(9), ConfigError);
}

TEST_CASE("random assignment covers every slot over many draws") {
  std::mt19937_64 rng(12);
  std::vector<int> hits(11, 0);
  for (int trial = 0; trial < 2000; ++trial)
    ++hits[IdentityAssignment::random({1}, 10, rng).slot(1)];
  for (int s = 1; s <= 10; ++s) CHECK(hits[s] > 120);
}

TEST_CASE("encode rejects extents that are not multiples of 16 and wrong channel counts") {
  std::mt19937_64 rng(13);
  auto bank = IdentityBank::create(4, 4, rng, DType::f64);
  auto a = IdentityAssignment::sequential({1}, 4);
  CHECK_THROWS_AS(encode_mask(Tensor::zeros({2, 17, 16}, DType::f64), bank, a, {1}),
                  DimensionError);
  CHECK_THROWS_AS(encode_mask(Tensor::zeros({3, 16, 16}, DType::f64), bank, a, {1}),
                  DimensionError);
  CHECK_THROWS_AS(readout_logits(Tensor::zeros({5, 4, 4}, DType::f64), bank, a, {1}),
                  DimensionError);
}

TEST_CASE("frozen banks receive no gradient") {
  std::mt19937_64 rng(14);
  auto bank = IdentityBank::create(4, 4, rng, DType::f64);
  auto a = IdentityAssignment::sequential({1}, 4);
  auto mask = ops::softmax(random_tensor({2, 16, 16}, rng), 0).detach().requires_grad_();
  ops::sum(encode_mask(mask, bank, a, {1})).backward();
  CHECK(bank.vectors.grad().defined());
  bank.vectors.zero_grad();
  bank.frozen = true;
  ops::sum(encode_mask(mask, bank, a, {1})).backward();
  CHECK((!bank.vectors.grad().defined() || ops::max_abs(bank.vectors.grad()) == 0.0));
}
