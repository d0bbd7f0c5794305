#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "warpvos/labels.hpp"

// Direct pixel-counting and all-pairs distance references for J and F.
namespace warpvos::testing {

inline double j_oracle(const LabelMap& p, const LabelMap& g, int obj) {
  int inter = 0, uni = 0;
  for (std::int64_t y = 0; y < g.height; ++y)
    for (std::int64_t x = 0; x < g.width; ++x) {
      const bool a = p.at(y, x) == obj, b = g.at(y, x) == obj;
      if (a && b) ++inter;
      if (a || b) ++uni;
    }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / uni;
}

inline std::vector<std::pair<int, int>> boundary_points(const LabelMap& m, int obj) {
  std::vector<std::pair<int, int>> pts;
  const int h = static_cast<int>(m.height), w = static_cast<int>(m.width);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (m.at(y, x) != obj) continue;
      const int ny[4] = {y - 1, y + 1, y, y}, nx[4] = {x, x, x - 1, x + 1};
      bool edge = false;
      for (int k = 0; k < 4; ++k)
        if (ny[k] < 0 || nx[k] < 0 || ny[k] >= h || nx[k] >= w || m.at(ny[k], nx[k]) != obj) edge = true;
      if (edge) pts.emplace_back(y, x);
    }
  return pts;
}

inline double f_oracle(const LabelMap& p, const LabelMap& g, int obj, int theta) {
  const auto bp = boundary_points(p, obj), bg = boundary_points(g, obj);
  if (bp.empty() && bg.empty()) return 1.0;
  if (bp.empty() || bg.empty()) return 0.0;
  auto matched = [&](const auto& from, const auto& to) {
    int n = 0;
    for (const auto& [y, x] : from)
      for (const auto& [yy, xx] : to)
        if ((y - yy) * (y - yy) + (x - xx) * (x - xx) <= theta * theta) {
          ++n;
          break;
        }
    return n;
  };
  const double prec = static_cast<double>(matched(bp, bg)) / bp.size();
  const double rec = static_cast<double>(matched(bg, bp)) / bg.size();
  return prec + rec == 0 ? 0.0 : 2 * prec * rec / (prec + rec);
}

// Blobby random label map: a few random discs and rectangles, with noise.
inline LabelMap random_mask(std::mt19937_64& rng, std::int64_t h, std::int64_t w, int objects) {
  LabelMap m = LabelMap::zeros(h, w);
  std::uniform_int_distribution<int> ny(0, static_cast<int>(h) - 1), nx(0, static_cast<int>(w) - 1);
  std::uniform_int_distribution<int> size(1, static_cast<int>(std::max(h, w)) / 2);
  for (int k = 0; k < 3 * objects; ++k) {
    const int id = 1 + k % objects, cy = ny(rng), cx = nx(rng), r = size(rng);
    const bool disc = rng() % 2;
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) {
        const auto dy = y - cy, dx = x - cx;
        if (disc ? dy * dy + dx * dx <= r * r : (std::abs(dy) <= r / 2 && std::abs(dx) <= r))
          m.at(y, x) = static_cast<std::uint8_t>(id);
      }
  }
  for (int k = 0; k < 5; ++k) m.at(ny(rng), nx(rng)) = static_cast<std::uint8_t>(rng() % (objects + 1));
  return m;
}

}  // namespace warpvos::testing
