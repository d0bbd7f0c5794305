#include <filesystem>
#include <random>

#include "doctest.h"
#include "support/gradcheck.hpp"
#include "warpvos/network.hpp"

using namespace warpvos;
using namespace warpvos::network;
using warpvos::testing::gradcheck;
using warpvos::testing::random_tensor;

namespace {

ModelConfig tiny_config(DType dtype = DType::f32) {
  ModelConfig cfg;
  cfg.encoder_channels = {4, 8, 8, 8};
  cfg.embed_dim = 8;
  cfg.heads = 2;
  cfg.ffn_hidden = 12;
  cfg.window = 3;
  cfg.bank_slots = 4;
  cfg.decoder_channels = 8;
  cfg.decoder_groups = 4;
  cfg.dtype = dtype;
  return cfg;
}

struct Forward {
  Tensor logits;
  Tensor refined;
};

// One propagation step: reference frame in memory, previous frame as sensory.
Forward run(const WarpFormer& m, const Tensor& ref_img, const Tensor& ref_mask,
            const Tensor& prev_img, const Tensor& prev_mask, const Tensor& cur_img,
            const identity::IdentityAssignment& a, const std::vector<int>& ids) {
  auto ref = m.encode(ref_img);
  auto prev = m.encode(prev_img);
  auto cur = m.encode(cur_img);
  RTBInputs in;
  in.current = cur.tokens();
  in.memory = {ref.tokens()};
  in.memory_ids = {m.embed_mask(ref_mask, a, ids)};
  in.sensory = prev.tokens();
  in.sensory_ids = m.embed_mask(prev_mask, a, ids);
  in.height = cur.x16.dim(1);
  in.width = cur.x16.dim(2);
  Forward f;
  f.refined = m.refine(in);
  f.logits = m.decode(f.refined, cur, a, ids);
  return f;
}

Tensor random_mask(std::int64_t k1, std::int64_t h, std::int64_t w, std::mt19937_64& rng,
                   DType dtype) {
  return ops::softmax(random_tensor({k1, h, w}, rng, -3, 3, dtype), 0);
}

}  // namespace

TEST_CASE("encoder reaches the 1/16 grid and is deterministic") {
  auto m = WarpFormer::create(tiny_config(), 1);
  auto f = m.encode(Tensor::zeros({3, 256, 448}));
  CHECK(f.x16.shape() == Shape{8, 16, 28});
  CHECK(f.skip8.shape() == Shape{8, 32, 56});
  CHECK(f.skip4.shape() == Shape{8, 64, 112});
  CHECK(ops::all_finite(f.x16));
  std::mt19937_64 rng(2);
  auto img = random_tensor({3, 32, 48}, rng, 0, 1, DType::f32);
  CHECK(m.encode(img).x16.to_vector() == m.encode(img.clone()).x16.to_vector());
  CHECK_THROWS_AS(m.encode(Tensor::zeros({3, 40, 48})), DimensionError);
}

TEST_CASE("decoder output grid, channel count and simplex") {
  auto m = WarpFormer::create(tiny_config(), 3);
  std::mt19937_64 rng(4);
  auto a = identity::IdentityAssignment::sequential({1, 2, 3}, 4);
  const std::vector<int> ids{1, 2, 3};
  auto img = [&] { return random_tensor({3, 32, 48}, rng, 0, 1, DType::f32); };
  auto f = run(m, img(), random_mask(4, 32, 48, rng, DType::f32), img(),
               random_mask(4, 32, 48, rng, DType::f32), img(), a, ids);
  CHECK(f.logits.shape() == Shape{4, 32, 48});
  auto probs = ops::softmax(f.logits, 0);
  auto sums = ops::sum_axis(probs, 0).to_vector();
  for (auto s : sums) CHECK(std::abs(s - 1.0) < 1e-6);
}

TEST_CASE("zero refined embedding and zero skips give spatially constant logits") {
  auto m = WarpFormer::create(tiny_config(), 5);
  FrameFeatures z;
  z.x16 = Tensor::zeros({8, 2, 3});
  z.skip8 = Tensor::zeros({8, 4, 6});
  z.skip4 = Tensor::zeros({8, 8, 12});
  z.height = 32;
  z.width = 48;
  auto a = identity::IdentityAssignment::sequential({1}, 4);
  auto logits = m.decode(Tensor::zeros({6, 8}), z, a, {1});
  auto v = logits.to_vector();
  const std::size_t plane = 32 * 48;
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t i = 0; i < plane; ++i) CHECK(v[c * plane + i] == v[c * plane]);
  z.skip4 = Tensor::zeros({8, 4, 6});
  CHECK_THROWS_AS(m.decode(Tensor::zeros({6, 8}), z, a, {1}), DimensionError);
}

TEST_CASE("doubling the input resolution doubles the output grid") {
  auto m = WarpFormer::create(tiny_config(), 6);
  std::mt19937_64 rng(7);
  auto a = identity::IdentityAssignment::sequential({1}, 4);
  for (std::int64_t s : {1, 2}) {
    auto img = random_tensor({3, 32 * s, 48 * s}, rng, 0, 1, DType::f32);
    auto mask = random_mask(2, 32 * s, 48 * s, rng, DType::f32);
    auto f = run(m, img, mask, img, mask, img, a, {1});
    CHECK(f.logits.shape() == Shape{2, 32 * s, 48 * s});
    CHECK(f.refined.shape() == Shape{6 * s * s, 8});
  }
}

TEST_CASE("with zero identity embeddings the bank has no influence on the refined tokens") {
  auto m = WarpFormer::create(tiny_config(), 8);
  std::mt19937_64 rng(9);
  auto cur = m.encode(random_tensor({3, 32, 32}, rng, 0, 1, DType::f32));
  auto ref = m.encode(random_tensor({3, 32, 32}, rng, 0, 1, DType::f32));
  RTBInputs in;
  in.current = cur.tokens();
  in.memory = {ref.tokens()};
  in.memory_ids = {Tensor::zeros({4, 8})};
  in.sensory = ref.tokens();
  in.sensory_ids = Tensor::zeros({4, 8});
  in.height = in.width = 2;
  auto before = m.refine(in).to_vector();
  m.bank().vectors.assign(random_tensor({4, 8}, rng, -1, 1, DType::f32));
  CHECK(m.refine(in).to_vector() == before);
}

TEST_CASE("fusion modes and the first-frame degenerate mode") {
  std::mt19937_64 rng(10);
  auto cfg = tiny_config();
  auto m = WarpFormer::create(cfg, 11);
  auto cur = m.encode(random_tensor({3, 32, 32}, rng, 0, 1, DType::f32));
  RTBInputs in;
  in.current = cur.tokens();
  in.memory = {cur.tokens()};
  in.memory_ids = {random_tensor({4, 8}, rng, -1, 1, DType::f32)};
  in.height = in.width = 2;
  CHECK(m.refine(in).shape() == Shape{4, 8});  // no sensory entry
  in.memory.clear();
  in.memory_ids.clear();
  CHECK_THROWS_AS(m.refine(in), UsageError);
  CHECK(parse_fusion("long_only") == Fusion::long_only);
  CHECK_THROWS_AS(parse_fusion("mean"), ConfigError);
}

TEST_CASE("one backward pass reaches every parameter") {
  auto m = WarpFormer::create(tiny_config(), 12);
  std::mt19937_64 rng(13);
  auto a = identity::IdentityAssignment::sequential({1, 2}, 4);
  auto img = [&] { return random_tensor({3, 32, 32}, rng, 0, 1, DType::f32); };
  auto f = run(m, img(), random_mask(3, 32, 32, rng, DType::f32), img(),
               random_mask(3, 32, 32, rng, DType::f32), img(), a, {1, 2});
  auto target = random_mask(3, 32, 32, rng, DType::f32);
  auto probs = ops::softmax(f.logits, 0);
  auto inter = ops::sum(ops::mul(probs, target));
  auto total = ops::add(ops::sum(probs), ops::sum(target));
  auto dice = ops::affine(ops::div(ops::affine(inter, 2.0, 1.0), ops::affine(total, 1.0, 1.0)), -1.0, 1.0);
  dice.backward();
  for (auto& [name, t] : m.parameters()) {
    INFO(name);
    REQUIRE(t.grad().defined());
    CHECK(ops::max_abs(t.grad()) > 0.0);
  }
}

TEST_CASE("refinement block gradients match finite differences") {
  auto cfg = tiny_config(DType::f64);
  auto m = WarpFormer::create(cfg, 14);
  std::mt19937_64 rng(15);
  for (auto& [name, t] : m.parameters())
    if (name.find("relative") != std::string::npos)
      t.assign(random_tensor(t.shape(), rng, -0.5, 0.5, DType::f64));
  for (int trial = 0; trial < 5; ++trial) {
    const std::int64_t h = 2 + trial % 2, w = 2 + trial / 2 % 2, p = h * w;
    auto r = gradcheck(
        [&](const std::vector<Tensor>& x) {
          RTBInputs in;
          in.current = x[0];
          in.memory = {x[1]};
          in.memory_ids = {x[2]};
          in.sensory = x[3];
          in.sensory_ids = x[4];
          in.height = h;
          in.width = w;
          return m.refine(in);
        },
        {random_tensor({p, 8}, rng), random_tensor({p, 8}, rng), random_tensor({p, 8}, rng),
         random_tensor({p, 8}, rng), random_tensor({p, 8}, rng)},
        40 + trial);
    CHECK(r.max_rel_error < 1e-4);
  }
}

TEST_CASE("checkpoints round trip bit-exactly") {
  for (DType dt : {DType::f32, DType::f64}) {
    auto m = WarpFormer::create(tiny_config(dt), 16);
    m.bank().frozen = true;
    const auto dir = std::filesystem::temp_directory_path() / (std::string("warpvos_ckpt_") + dtype_name(dt));
    std::filesystem::remove_all(dir);
    m.save(dir);
    auto back = WarpFormer::load(dir);
    CHECK(back.bank().frozen);
    auto pa = m.parameters(), pb = back.parameters();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
      CHECK(pa[i].first == pb[i].first);
      CHECK(pa[i].second.to_vector() == pb[i].second.to_vector());
      CHECK(pb[i].second.dtype() == dt);
    }
    std::filesystem::remove_all(dir);
  }
  CHECK_THROWS_AS(WarpFormer::load("/nonexistent/ckpt"), IoError);
}

TEST_CASE("model config JSON rejects unknown keys and bad values") {
  auto j = to_json(tiny_config());
  CHECK(to_json(model_config_from_json(j)) == j);
  auto bad = j;
  bad["depth"] = 2;
  CHECK_THROWS_AS(model_config_from_json(bad), ConfigError);
  bad = j;
  bad["heads"] = 3;
  CHECK_THROWS_AS(model_config_from_json(bad), ConfigError);
  bad = j;
  bad["heads"] = "eight";
  CHECK_THROWS_AS(model_config_from_json(bad), ConfigError);
}
