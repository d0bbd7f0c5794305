#include <cmath>
#include <filesystem>
#include <random>

#include "doctest.h"
#include "support/scenes.hpp"
#include "warpvos/engine.hpp"
#include "warpvos/ops.hpp"

using namespace warpvos;
using namespace warpvos::engine;
using warpvos::testing::scene_sequence;
using warpvos::testing::small_spec;
using warpvos::testing::tiny_model;

namespace fs = std::filesystem;

namespace {

LabelMap stripes(std::int64_t h, std::int64_t w) {
  LabelMap m = LabelMap::zeros(h, w);
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) m.at(y, x) = static_cast<std::uint8_t>((x / 3 + y) % 3);
  return m;
}

Tensor random_logits(std::int64_t k1, std::int64_t h, std::int64_t w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0, 2);
  std::vector<double> v(static_cast<std::size_t>(k1 * h * w));
  for (auto& x : v) x = n(rng);
  return Tensor::from_values({k1, h, w}, v, DType::f64);
}

// Direct per-pixel cross entropy, sorted descending, mean of the top k.
double ce_oracle(const Tensor& logits, const LabelMap& target, const std::vector<int>& ids, double fraction) {
  const auto v = logits.to_vector();
  const std::int64_t k1 = logits.dim(0), hw = logits.dim(1) * logits.dim(2);
  std::vector<double> nll;
  for (std::int64_t i = 0; i < hw; ++i) {
    double mx = -1e300;
    for (std::int64_t k = 0; k < k1; ++k) mx = std::max(mx, v[static_cast<std::size_t>(k * hw + i)]);
    double z = 0;
    for (std::int64_t k = 0; k < k1; ++k) z += std::exp(v[static_cast<std::size_t>(k * hw + i)] - mx);
    const int l = target.data[static_cast<std::size_t>(i)];
    std::int64_t c = 0;
    for (std::size_t j = 0; j < ids.size(); ++j)
      if (ids[j] == l) c = static_cast<std::int64_t>(j) + 1;
    nll.push_back(-(v[static_cast<std::size_t>(c * hw + i)] - mx - std::log(z)));
  }
  std::sort(nll.begin(), nll.end(), std::greater<>());
  const auto k = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(hw)));
  double s = 0;
  for (std::size_t i = 0; i < k; ++i) s += nll[i];
  return s / static_cast<double>(k);
}

std::vector<dataset::Sequence> small_dataset(int n, std::uint64_t seed = 11) {
  std::vector<dataset::Sequence> out;
  const auto spec = small_spec(seed);
  for (int i = 0; i < n; ++i)
    out.push_back(scene_sequence(synthetic::make_scene(spec, "s" + std::to_string(i), seed * 100 + i)));
  return out;
}

TrainConfig quick_train(int steps) {
  TrainConfig c;
  c.steps = steps;
  c.clip_length = 3;
  c.augment.crop_height = 48;
  c.augment.crop_width = 48;
  return c;
}

bool same_values(const Tensor& a, const Tensor& b) { return a.shape() == b.shape() && a.to_vector() == b.to_vector(); }

}  // namespace

TEST_CASE("learning rate runs from 3e-4 to 2e-5 with power 0.9") {
  TrainConfig c;
  c.steps = 1000;
  CHECK(learning_rate(c, 0) == 3e-4);
  CHECK(learning_rate(c, 999) == doctest::Approx(2e-5).epsilon(1e-12));
  const double mid = 2e-5 + (3e-4 - 2e-5) * std::pow(1 - 500.0 / 999.0, 0.9);
  CHECK(learning_rate(c, 500) == doctest::Approx(mid).epsilon(1e-12));
  for (int s = 1; s < 1000; ++s) REQUIRE(learning_rate(c, s) < learning_rate(c, s - 1));
}

TEST_CASE("bootstrap fraction and stages") {
  TrainConfig c;
  c.steps = 101;
  CHECK(bootstrap_fraction(c, 0) == 1.0);
  CHECK(bootstrap_fraction(c, 20) == 1.0);
  CHECK(bootstrap_fraction(c, 100) == doctest::Approx(0.15));
  CHECK(bootstrap_fraction(c, 60) == doctest::Approx(0.575));
  c.steps = 100;
  CHECK(stage_of(c, 39) == 1);
  CHECK(stage_of(c, 40) == 2);
}

TEST_CASE("cross entropy of uniform logits is ln(K+1)") {
  const auto target = stripes(6, 7);
  const Tensor logits = Tensor::zeros({3, 6, 7}, DType::f64);
  CHECK(bootstrapped_ce(logits, target, {1, 2}, 1.0).item() == doctest::Approx(std::log(3.0)).epsilon(1e-14));
  CHECK(bootstrapped_ce(Tensor::zeros({2, 6, 7}, DType::f64), LabelMap::zeros(6, 7), {1}, 0.3).item() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-14));
}

TEST_CASE("bootstrapped cross entropy matches a sorted-loss oracle") {
  const auto target = stripes(9, 11);
  for (double frac : {1.0, 0.5, 0.15, 0.01}) {
    const Tensor logits = random_logits(3, 9, 11, 5);
    CHECK(bootstrapped_ce(logits, target, {1, 2}, frac).item() ==
          doctest::Approx(ce_oracle(logits, target, {1, 2}, frac)).epsilon(1e-12));
  }
  CHECK_THROWS_AS(bootstrapped_ce(random_logits(2, 9, 11, 1), target, {1, 2}, 1.0), DimensionError);
}

TEST_CASE("dice oracle, perfect prediction and the empty-target rule") {
  const auto target = stripes(5, 6);
  const Tensor logits = random_logits(3, 5, 6, 9);
  const auto p = ops::softmax(logits, 0).to_vector();
  double dsum = 0;
  for (int k = 1; k <= 2; ++k) {
    double inter = 0, ps = 0, gs = 0;
    for (std::size_t i = 0; i < 30; ++i) {
      const double g = target.data[i] == k;
      inter += p[k * 30 + i] * g;
      ps += p[k * 30 + i];
      gs += g;
    }
    dsum += 1 - (2 * inter + 1) / (ps + gs + 1);
  }
  CHECK(dice_loss(logits, target, {1, 2}).item() == doctest::Approx(dsum / 2).epsilon(1e-12));

  Tensor perfect = ops::affine(one_hot(target, {1, 2}, DType::f64), 60.0);
  const auto lv = vos_loss(perfect, target, {1, 2}, 1.0);
  CHECK(lv.dice_used);
  CHECK(lv.total.item() < 1e-2);
  CHECK(lv.ce < 1e-20);

  const auto empty = vos_loss(logits, LabelMap::zeros(5, 6), {1, 2}, 1.0);
  CHECK_FALSE(empty.dice_used);
  CHECK(empty.total.item() == doctest::Approx(0.5 * empty.ce).epsilon(1e-14));
}

TEST_CASE("loss gradient reaches the logits") {
  const auto target = stripes(4, 4);
  Tensor logits = random_logits(3, 4, 4, 2);
  logits.requires_grad_();
  vos_loss(logits, target, {1, 2}, 0.5).total.backward();
  double n = 0;
  for (double g : logits.grad().to_vector()) n += std::abs(g);
  CHECK(n > 0);
}

TEST_CASE("memory bank keeps the reference and increasing frames") {
  MemoryBank m(5, 3);
  const Tensor z = Tensor::zeros({1, 1});
  CHECK(m.due(0));
  CHECK_FALSE(m.due(3));
  CHECK(m.due(10));
  m.append(z, z, 0);
  m.append(z, z, 5);
  m.append(z, z, 10);
  m.append(z, z, 15);
  REQUIRE(m.size() == 3);
  CHECK(m.entries()[0].frame == 0);
  CHECK(m.entries()[1].frame == 10);
  CHECK(m.entries()[2].frame == 15);
  CHECK_THROWS_AS(m.append(z, z, 15), UsageError);
  CHECK_THROWS_AS(MemoryBank(0), ConfigError);
}

TEST_CASE("inference: one-frame sequence returns the reference mask") {
  const auto model = network::WarpFormer::create(tiny_model(), 1);
  auto seq = scene_sequence(synthetic::make_scene(small_spec(), "one", 4));
  seq.frames.resize(1);
  seq.labels.resize(1);
  seq.flows.resize(1);
  for (auto it = seq.first_frame.begin(); it != seq.first_frame.end();)
    it = it->second > 0 ? seq.first_frame.erase(it) : std::next(it);
  const auto out = infer_sequence(model, seq, flow::ZeroFlow{});
  REQUIRE(out.labels.size() == 1);
  CHECK(out.labels[0].data == seq.labels[0].data);
  CHECK(out.memory_frames == std::vector<int>{0});
}

TEST_CASE("inference: determinism, memory schedule and prefix causality") {
  const auto model = network::WarpFormer::create(tiny_model(DType::f64), 2);
  const auto seq = scene_sequence(synthetic::make_scene(small_spec(), "seq", 5));
  const flow::GroundTruthFlow gt;
  const auto a = infer_sequence(model, seq, gt);
  const auto b = infer_sequence(model, seq, gt);
  REQUIRE(a.labels.size() == 8);
  for (std::size_t t = 0; t < a.labels.size(); ++t) CHECK(a.labels[t].data == b.labels[t].data);
  CHECK(a.memory_frames == std::vector<int>{0, 5});
  CHECK(a.timing.size() == 8);
  for (int k = 1; k <= 8; ++k) {
    const auto p = infer_sequence(model, seq, gt, {}, k);
    REQUIRE(p.labels.size() == static_cast<std::size_t>(k));
    for (int t = 0; t < k; ++t) REQUIRE(p.labels[static_cast<std::size_t>(t)].data == a.labels[static_cast<std::size_t>(t)].data);
  }
  // Reference frame is always reproduced.
  CHECK(a.labels[0].data == seq.labels[0].data);
}

TEST_CASE("inference: late objects take their annotation, unknown ids are rejected") {
  const auto model = network::WarpFormer::create(tiny_model(), 3);
  auto seq = scene_sequence(synthetic::make_scene(small_spec(), "late", 6));
  // Paint a new object into frames 3.. and announce it at frame 3.
  for (int t = 3; t < seq.length(); ++t)
    for (int y = 2; y < 8; ++y)
      for (int x = 2; x < 8; ++x) seq.labels[static_cast<std::size_t>(t)].at(y, x) = 9;
  seq.first_frame[9] = 3;
  const auto out = infer_sequence(model, seq, flow::GroundTruthFlow{});
  CHECK(out.labels[2].count(9) == 0);
  CHECK(out.labels[3].count(9) == 36);
  CHECK(out.assignment.contains(9));
  CHECK(std::find(out.memory_frames.begin(), out.memory_frames.end(), 3) != out.memory_frames.end());
  seq.first_frame.erase(9);
  CHECK_THROWS_AS(infer_sequence(model, seq, flow::GroundTruthFlow{}), UsageError);
}

TEST_CASE("stage 1 and stage 2 agree on the first predicted frame") {
  const auto model = network::WarpFormer::create(tiny_model(DType::f64), 4);
  const auto data = small_dataset(1);
  const auto clip = dataset::make_clip(data[0], 0, 3);
  const auto assignment = identity::IdentityAssignment::sequential(clip.object_ids, 4);
  const auto a = clip_forward(model, clip, assignment, MaskSource::ground_truth, 1.0, 2);
  const auto b = clip_forward(model, clip, assignment, MaskSource::predicted, 1.0, 2);
  REQUIRE(a.frame_loss.size() == 2);
  CHECK(a.frame_loss[0] == b.frame_loss[0]);
  CHECK(a.frame_loss[1] != b.frame_loss[1]);
}

TEST_CASE("train config JSON round trip and unknown keys") {
  TrainConfig c = quick_train(7);
  c.seed = 99;
  const auto back = train_config_from_json(to_json(c));
  CHECK(to_json(back) == to_json(c));
  auto j = to_json(c);
  j["learning_rate"] = 1;
  CHECK_THROWS_AS(train_config_from_json(j), ConfigError);
  j = to_json(c);
  j["augment"]["hue"] = 0.1;
  CHECK_THROWS_AS(train_config_from_json(j), ConfigError);
  j = to_json(c);
  j["steps"] = 0;
  CHECK_THROWS_AS(train_config_from_json(j), ConfigError);
}

TEST_CASE("training aborts on a non-finite loss with the step index") {
  auto model = network::WarpFormer::create(tiny_model(), 5);
  const auto data = small_dataset(2);
  auto cfg = quick_train(4);
  cfg.inject_nan_step = 1;
  Trainer tr(model, data, cfg);
  tr.step();
  try {
    tr.step();
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("step 1") != std::string::npos);
    CHECK(msg.find("bank.vectors") != std::string::npos);
  }
}

TEST_CASE("training is deterministic and resume is bit-exact in f64") {
  const auto data = small_dataset(2);
  const auto cfg = quick_train(4);
  const auto dir = fs::temp_directory_path() / "warpvos_resume";
  fs::remove_all(dir);

  auto m1 = network::WarpFormer::create(tiny_model(DType::f64), 6);
  Trainer t1(m1, data, cfg);
  while (!t1.done()) t1.step();

  auto m2 = network::WarpFormer::create(tiny_model(DType::f64), 6);
  {
    Trainer t2(m2, data, cfg);
    t2.step();
    t2.step();
    t2.save(dir);
  }
  auto m3 = network::WarpFormer::create(tiny_model(DType::f64), 77);
  Trainer t3(m3, data, cfg);
  t3.resume(dir);
  CHECK(t3.step_index() == 2);
  while (!t3.done()) t3.step();

  auto p1 = m1.parameters(), p3 = m3.parameters();
  REQUIRE(p1.size() == p3.size());
  for (std::size_t i = 0; i < p1.size(); ++i) REQUIRE_MESSAGE(same_values(p1[i].second, p3[i].second), p1[i].first);
  CHECK(m1.bank().frozen);
  CHECK(m3.bank().frozen);
}

TEST_CASE("stage 2 freezes the identity bank") {
  const auto data = small_dataset(2);
  auto cfg = quick_train(3);
  cfg.stage1_fraction = 0.34;
  auto model = network::WarpFormer::create(tiny_model(DType::f64), 8);
  Trainer tr(model, data, cfg);
  tr.step();
  const auto before = model.bank().vectors.to_vector();
  CHECK_FALSE(model.bank().frozen);
  tr.step();
  CHECK(model.bank().frozen);
  CHECK(model.bank().vectors.to_vector() == before);
}

TEST_CASE("loss decreases on a fixed clip") {
  const auto data = small_dataset(1);
  auto cfg = quick_train(60);
  cfg.augment.enabled = false;
  cfg.augment.crop_height = 0;
  cfg.augment.crop_width = 0;
  cfg.merge_probability = 0;
  cfg.stage1_fraction = 1.0;
  cfg.lr_start = 3e-3;
  cfg.lr_end = 3e-3;
  auto model = network::WarpFormer::create(tiny_model(), 9);
  Trainer tr(model, data, cfg);
  double first = 0, last = 0;
  for (int s = 0; s < 60; ++s) {
    const auto r = tr.step();
    if (s < 10) first += r.loss;
    if (s >= 50) last += r.loss;
  }
  CHECK(last < 0.8 * first);
}
