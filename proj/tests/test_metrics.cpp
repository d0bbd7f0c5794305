#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "support/metric_oracle.hpp"
#include "warpvos/metrics.hpp"

using namespace warpvos;
using namespace warpvos::metrics;
using warpvos::testing::f_oracle;
using warpvos::testing::j_oracle;
using warpvos::testing::random_mask;

namespace {

LabelMap square(std::int64_t h, std::int64_t w, int y0, int x0, int size, int id = 1) {
  LabelMap m = LabelMap::zeros(h, w);
  for (int y = y0; y < y0 + size; ++y)
    for (int x = x0; x < x0 + size; ++x) m.at(y, x) = static_cast<std::uint8_t>(id);
  return m;
}

}  // namespace

TEST_CASE("J fixtures") {
  const auto a = square(8, 8, 2, 2, 3);
  CHECK(j_score(a, a, 1) == 1.0);
  CHECK(j_score(square(8, 8, 0, 0, 2), square(8, 8, 5, 5, 2), 1) == 0.0);
  // 2x2 square against the same square shifted one pixel: overlap 2, union 6.
  CHECK(j_score(square(6, 6, 1, 1, 2), square(6, 6, 1, 2, 2), 1) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK(j_score(LabelMap::zeros(4, 4), LabelMap::zeros(4, 4), 1) == 1.0);
  CHECK_THROWS_AS(j_score(LabelMap::zeros(4, 4), LabelMap::zeros(4, 5), 1), DimensionError);
}

TEST_CASE("F fixtures") {
  const auto a = square(16, 16, 4, 4, 6);
  CHECK(f_score(a, a, 1) == 1.0);
  // Boundaries farther apart than the tolerance.
  CHECK(f_score(square(32, 32, 0, 0, 4), square(32, 32, 20, 20, 4), 1, 2) == 0.0);
  // One-pixel offset square with theta 2: every boundary pixel is matched.
  const auto b = square(16, 16, 4, 5, 6);
  CHECK(f_score(a, b, 1, 2) == f_oracle(a, b, 1, 2));
  CHECK(f_score(a, b, 1, 2) == 1.0);
  // Theta 0 leaves only the shared boundary pixels.
  CHECK(f_score(a, b, 1, 0) == f_oracle(a, b, 1, 0));
  CHECK(f_score(a, b, 1, 0) < 1.0);
  CHECK(f_score(LabelMap::zeros(4, 4), LabelMap::zeros(4, 4), 1) == 1.0);
  CHECK(f_score(LabelMap::zeros(16, 16), a, 1) == 0.0);
  CHECK(f_score(a, LabelMap::zeros(16, 16), 1) == 0.0);
}

TEST_CASE("tolerance is 0.8 percent of the diagonal, rounded up") {
  CHECK(boundary_tolerance(480, 854) == 8);  // diag 979.7 -> 7.84
  CHECK(boundary_tolerance(32, 32) == 1);
  CHECK(boundary_tolerance(128, 128) == 2);
  MetricConfig cfg;
  cfg.theta = 5;
  CHECK(boundary_tolerance(32, 32, cfg) == 5);
}

TEST_CASE("boundary pixels: 4-neighbour rule with image edges") {
  const std::vector<std::uint8_t> full(9, 1);
  const auto b = boundary(full, 3, 3);
  CHECK(b == std::vector<std::uint8_t>{1, 1, 1, 1, 0, 1, 1, 1, 1});
  const auto m = object_mask(square(5, 5, 1, 1, 3), 1);
  const auto b2 = boundary(m, 5, 5);
  CHECK(b2[2 * 5 + 2] == 0);
  CHECK(b2[1 * 5 + 1] == 1);
  CHECK(b2[0] == 0);
}

TEST_CASE("J and F match the oracles on random masks") {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 100; ++trial) {
    const std::int64_t h = 4 + static_cast<std::int64_t>(rng() % 29), w = 4 + static_cast<std::int64_t>(rng() % 29);
    const auto p = random_mask(rng, h, w, 2), g = random_mask(rng, h, w, 2);
    const int theta = static_cast<int>(rng() % 4);
    for (int obj : {1, 2}) {
      REQUIRE(j_score(p, g, obj) == j_oracle(p, g, obj));
      REQUIRE(f_score(p, g, obj, theta) == f_oracle(p, g, obj, theta));
      REQUIRE(f_score(p, g, obj) == f_oracle(p, g, obj, boundary_tolerance(h, w)));
    }
  }
}

TEST_CASE("symmetry, range and translation invariance") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 30; ++trial) {
    const auto p = random_mask(rng, 20, 20, 1), g = random_mask(rng, 20, 20, 1);
    const double j = j_score(p, g, 1), f = f_score(p, g, 1, 2);
    CHECK(j == j_score(g, p, 1));
    CHECK(f == doctest::Approx(f_score(g, p, 1, 2)).epsilon(1e-15));
    CHECK(j >= 0.0);
    CHECK(j <= 1.0);
    CHECK(f >= 0.0);
    CHECK(f <= 1.0);
    // Embed in a larger canvas at two offsets away from the border.
    auto embed = [](const LabelMap& m, int oy, int ox) {
      LabelMap out = LabelMap::zeros(48, 48);
      for (int y = 0; y < 20; ++y)
        for (int x = 0; x < 20; ++x) out.at(y + oy, x + ox) = m.at(y, x);
      return out;
    };
    const double j1 = j_score(embed(p, 5, 5), embed(g, 5, 5), 1);
    const double j2 = j_score(embed(p, 20, 13), embed(g, 20, 13), 1);
    CHECK(j1 == j2);
    CHECK(f_score(embed(p, 5, 5), embed(g, 5, 5), 1, 2) == f_score(embed(p, 20, 13), embed(g, 20, 13), 1, 2));
  }
}

TEST_CASE("aggregation fixtures") {
  auto r = aggregate({{"a", 1, 1, 1.0, 1.0}, {"a", 1, 2, 0.5, 0.8}});
  REQUIRE(r.objects.size() == 1);
  CHECK(r.objects[0].j == 0.75);
  CHECK(r.objects[0].frames == 2);
  r = aggregate({{"a", 1, 1, 0.8, 0.9}, {"b", 1, 1, 0.6, 0.9}});
  CHECK(r.j == doctest::Approx(0.7).epsilon(1e-15));
  r = aggregate({{"a", 1, 1, 0.8, 0.9}});
  CHECK(r.jf == doctest::Approx(0.85).epsilon(1e-15));
  CHECK(r.jf == (r.j + r.f) / 2);
  r = aggregate({{"a", 1, 1, 0.8, 0.9}, {"a", 2, 1, 0.4, 0.5}}, {{"a/1", true}, {"a/2", false}});
  CHECK(*r.j_seen == 0.8);
  CHECK(*r.j_unseen == 0.4);
}

TEST_CASE("sequence evaluation skips frames up to each object's first annotation") {
  std::vector<LabelMap> gt, pred;
  for (int t = 0; t < 4; ++t) {
    gt.push_back(square(8, 8, 1, 1, 3));
    pred.push_back(t == 1 ? LabelMap::zeros(8, 8) : square(8, 8, 1, 1, 3));
  }
  gt[2] = LabelMap{};  // unannotated frame
  auto scores = evaluate_sequence("s", pred, gt, {{1, 0}});
  REQUIRE(scores.size() == 2);
  CHECK(scores[0].frame == 1);
  CHECK(scores[0].j == 0.0);
  CHECK(scores[1].frame == 3);
  scores = evaluate_sequence("s", pred, gt, {{1, 1}});
  REQUIRE(scores.size() == 1);
  CHECK(scores[0].frame == 3);
  pred.pop_back();
  CHECK_THROWS_AS(evaluate_sequence("s", pred, gt, {{1, 0}}), DimensionError);
}

TEST_CASE("report writers") {
  const auto dir = std::filesystem::temp_directory_path() / "warpvos_metrics";
  std::filesystem::create_directories(dir);
  const auto r = aggregate({{"a", 1, 1, 1.0, 0.5}, {"a", 1, 2, 0.5, 0.25}});
  write_jsonl(r, dir / "frames.jsonl");
  write_csv(r, dir / "frames.csv");
  std::ifstream js(dir / "frames.jsonl");
  std::string line;
  int n = 0;
  while (std::getline(js, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.at("sequence") == "a");
    ++n;
  }
  CHECK(n == 2);
  std::ifstream cs(dir / "frames.csv");
  std::getline(cs, line);
  CHECK(line == "sequence,object,frame,J,F");
  std::getline(cs, line);
  CHECK(line == "a,1,1,1.000000,0.500000");
  const auto s = summary_json(r);
  CHECK(s.at("J&F") == doctest::Approx((0.75 + 0.375) / 2));
  CHECK(format_table(r).find("J&F") != std::string::npos);
}
