#include "warpvos/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

#include "warpvos/imageio.hpp"
#include "warpvos/ops.hpp"

namespace warpvos::synthetic {

using nlohmann::json;

namespace {

constexpr double kPi = std::numbers::pi;

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

int uniform_int(std::mt19937_64& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  const double c = v * s, hp = h * 6.0, x = c * (1 - std::abs(std::fmod(hp, 2.0) - 1));
  std::array<double, 3> rgb{};
  switch (static_cast<int>(hp) % 6) {
    case 0: rgb = {c, x, 0}; break;
    case 1: rgb = {x, c, 0}; break;
    case 2: rgb = {0, c, x}; break;
    case 3: rgb = {0, x, c}; break;
    case 4: rgb = {x, 0, c}; break;
    default: rgb = {c, 0, x}; break;
  }
  for (auto& ch : rgb) ch += v - c;
  return rgb;
}

double cross(const std::array<double, 2>& o, const std::array<double, 2>& a,
             const std::array<double, 2>& b) {
  return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
}

// Monotone-chain convex hull, counter-clockwise.
std::vector<std::array<double, 2>> convex_hull(std::vector<std::array<double, 2>> pts) {
  std::sort(pts.begin(), pts.end());
  std::vector<std::array<double, 2>> hull(2 * pts.size());
  std::size_t k = 0;
  for (const auto& p : pts) {
    while (k >= 2 && cross(hull[k - 2], hull[k - 1], p) <= 0) --k;
    hull[k++] = p;
  }
  for (std::size_t i = pts.size() - 1, t = k + 1; i-- > 0;) {
    while (k >= t && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
    hull[k++] = pts[i];
  }
  hull.resize(k - 1);
  return hull;
}

// Motion state for one object with reflecting walls per axis.
struct Walk {
  double vx = 0, vy = 0, omega = 0, scale_rate = 0;
  double lo_x = 0, hi_x = 0, lo_y = 0, hi_y = 0;
  double min_scale = 0.85, max_scale = 1.15;
};

void reflect(double& c, double& v, double lo, double hi) {
  if (hi <= lo) return;
  if (c < lo) {
    c = 2 * lo - c;
    v = -v;
  } else if (c > hi) {
    c = 2 * hi - c;
    v = -v;
  }
}

std::vector<Pose> simulate(Pose p, Walk w, int frames) {
  std::vector<Pose> out{p};
  for (int t = 1; t < frames; ++t) {
    p.cx += w.vx;
    p.cy += w.vy;
    reflect(p.cx, w.vx, w.lo_x, w.hi_x);
    reflect(p.cy, w.vy, w.lo_y, w.hi_y);
    p.angle += w.omega;
    double next = p.scale * (1 + w.scale_rate);
    if (next < w.min_scale || next > w.max_scale) {
      w.scale_rate = -w.scale_rate;
      next = p.scale * (1 + w.scale_rate);
    }
    p.scale = next;
    out.push_back(p);
  }
  return out;
}

}  // namespace

// ---- spec ----------------------------------------------------------------------

void GeneratorSpec::validate() const {
  if (frames < 1) throw ConfigError("frames must be at least 1");
  if (height < 16 || width < 16) throw ConfigError("frame extents must be at least 16");
  if (splits.empty()) throw ConfigError("spec defines no splits");
  for (const auto& [name, n] : splits)
    if (n < 0 || name.empty()) throw ConfigError("invalid split '" + name + "'");
  if (min_objects < 1 || max_objects < min_objects || max_objects > 255)
    throw ConfigError("object count range must satisfy 1 <= min <= max <= 255");
  if (min_radius < 4 || max_radius < min_radius) throw ConfigError("invalid object radius range");
  if (2 * max_radius > static_cast<double>(std::min(height, width)))
    throw ConfigError("objects of radius " + std::to_string(max_radius) + " do not fit a " +
                      std::to_string(height) + "x" + std::to_string(width) + " frame");
  if (max_translation < 0 || max_translation > 6.0)
    throw ConfigError("max_translation must lie in [0, 6] px per frame");
  if (max_rotation_deg < 0 || max_rotation_deg > 4.0)
    throw ConfigError("max_rotation_deg must lie in [0, 4]");
  if (max_scale_step < 0 || max_scale_step > 0.02)
    throw ConfigError("max_scale_step must lie in [0, 0.02]");
  if (background_motion < 0) throw ConfigError("background_motion must be non-negative");
  for (double p : {occlusion_probability, exit_probability, late_entry_probability})
    if (p < 0 || p > 1) throw ConfigError("event probabilities must lie in [0, 1]");
  if (jpeg_quality < 1 || jpeg_quality > 100) throw ConfigError("jpeg_quality must lie in [1, 100]");
}

json to_json(const GeneratorSpec& s) {
  return {{"seed", s.seed},
          {"splits", s.splits},
          {"frames", s.frames},
          {"height", s.height},
          {"width", s.width},
          {"min_objects", s.min_objects},
          {"max_objects", s.max_objects},
          {"min_radius", s.min_radius},
          {"max_radius", s.max_radius},
          {"max_translation", s.max_translation},
          {"max_rotation_deg", s.max_rotation_deg},
          {"max_scale_step", s.max_scale_step},
          {"background_motion", s.background_motion},
          {"occlusion_probability", s.occlusion_probability},
          {"exit_probability", s.exit_probability},
          {"late_entry_probability", s.late_entry_probability},
          {"static", s.is_static},
          {"jpeg_quality", s.jpeg_quality}};
}

GeneratorSpec spec_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("generator spec must be a JSON object");
  GeneratorSpec s;
  try {
    for (const auto& [k, v] : j.items()) {
      if (k == "seed") s.seed = v.get<std::uint64_t>();
      else if (k == "splits") s.splits = v.get<std::map<std::string, int>>();
      else if (k == "frames") s.frames = v.get<int>();
      else if (k == "height") s.height = v.get<std::int64_t>();
      else if (k == "width") s.width = v.get<std::int64_t>();
      else if (k == "min_objects") s.min_objects = v.get<int>();
      else if (k == "max_objects") s.max_objects = v.get<int>();
      else if (k == "min_radius") s.min_radius = v.get<double>();
      else if (k == "max_radius") s.max_radius = v.get<double>();
      else if (k == "max_translation") s.max_translation = v.get<double>();
      else if (k == "max_rotation_deg") s.max_rotation_deg = v.get<double>();
      else if (k == "max_scale_step") s.max_scale_step = v.get<double>();
      else if (k == "background_motion") s.background_motion = v.get<double>();
      else if (k == "occlusion_probability") s.occlusion_probability = v.get<double>();
      else if (k == "exit_probability") s.exit_probability = v.get<double>();
      else if (k == "late_entry_probability") s.late_entry_probability = v.get<double>();
      else if (k == "static") s.is_static = v.get<bool>();
      else if (k == "jpeg_quality") s.jpeg_quality = v.get<int>();
      else throw ConfigError("unknown generator spec key '" + k + "'");
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("generator spec: ") + e.what());
  }
  s.validate();
  return s;
}

// ---- texture and shapes --------------------------------------------------------

Texture Texture::random(int size, double cell, const std::array<double, 3>& base, double amplitude,
                        std::mt19937_64& rng) {
  Texture t;
  t.size = size;
  t.cell = cell;
  t.base = base;
  std::normal_distribution<double> noise(0.0, 1.0);
  std::vector<double> v(static_cast<std::size_t>(size * size));
  for (auto& x : v) x = noise(rng);
  // Three wrapped box-blur passes per axis approximate a Gaussian filter.
  std::vector<double> tmp(v.size());
  for (int pass = 0; pass < 3; ++pass)
    for (int axis = 0; axis < 2; ++axis) {
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
          double s = 0;
          for (int d = -1; d <= 1; ++d) {
            const int xx = axis == 0 ? (x + d + size) % size : x;
            const int yy = axis == 1 ? (y + d + size) % size : y;
            s += v[static_cast<std::size_t>(yy * size + xx)];
          }
          tmp[static_cast<std::size_t>(y * size + x)] = s / 3.0;
        }
      v.swap(tmp);
    }
  double mean = 0, sq = 0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  for (double x : v) sq += (x - mean) * (x - mean);
  const double sd = std::sqrt(sq / static_cast<double>(v.size()));
  t.tile.resize(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) t.tile[i] = static_cast<float>((v[i] - mean) / sd);
  for (int c = 0; c < 3; ++c) t.amplitude[c] = amplitude * uniform(rng, 0.6, 1.0);
  return t;
}

std::array<double, 3> Texture::sample(double u, double v) const {
  const double x = u / cell, y = v / cell;
  const double fx = std::floor(x), fy = std::floor(y);
  const double ax = x - fx, ay = y - fy;
  auto wrap = [&](double c) {
    long long i = static_cast<long long>(c) % size;
    return static_cast<int>(i < 0 ? i + size : i);
  };
  const int x0 = wrap(fx), y0 = wrap(fy), x1 = (x0 + 1) % size, y1 = (y0 + 1) % size;
  auto at = [&](int yy, int xx) { return static_cast<double>(tile[static_cast<std::size_t>(yy * size + xx)]); };
  const double n = (1 - ay) * ((1 - ax) * at(y0, x0) + ax * at(y0, x1)) +
                   ay * ((1 - ax) * at(y1, x0) + ax * at(y1, x1));
  std::array<double, 3> rgb{};
  for (int c = 0; c < 3; ++c) rgb[c] = std::clamp(base[c] + amplitude[c] * n, 0.0, 1.0);
  return rgb;
}

bool SceneObject::contains_local(double u, double v) const {
  if (kind == ShapeKind::ellipse) return (u * u) / (semi_a * semi_a) + (v * v) / (semi_b * semi_b) <= 1.0;
  const std::size_t n = vertices.size();
  for (std::size_t i = 0; i < n; ++i)
    if (cross(vertices[i], vertices[(i + 1) % n], {u, v}) < 0) return false;
  return true;
}

double SceneObject::max_extent() const {
  if (kind == ShapeKind::ellipse) return std::max(semi_a, semi_b);
  double m = 0;
  for (const auto& p : vertices) m = std::max(m, std::hypot(p[0], p[1]));
  return m;
}

double SceneObject::inradius() const {
  if (kind == ShapeKind::ellipse) return std::min(semi_a, semi_b);
  double m = 1e300;
  const std::size_t n = vertices.size();
  for (std::size_t i = 0; i < n; ++i) {
    const auto& a = vertices[i];
    const auto& b = vertices[(i + 1) % n];
    m = std::min(m, std::abs(cross(a, b, {0, 0})) / std::hypot(b[0] - a[0], b[1] - a[1]));
  }
  return m;
}

std::array<double, 2> SceneObject::to_local(int t, double x, double y) const {
  const Pose& p = poses[static_cast<std::size_t>(t)];
  const double dx = x - p.cx, dy = y - p.cy, c = std::cos(p.angle), s = std::sin(p.angle);
  return {(c * dx + s * dy) / p.scale, (-s * dx + c * dy) / p.scale};
}

std::array<double, 2> SceneObject::to_image(int t, double u, double v) const {
  const Pose& p = poses[static_cast<std::size_t>(t)];
  const double c = std::cos(p.angle), s = std::sin(p.angle);
  return {p.cx + p.scale * (c * u - s * v), p.cy + p.scale * (s * u + c * v)};
}

// ---- scene ---------------------------------------------------------------------

int Scene::label_at(int t, double x, double y) const {
  int best = 0, best_depth = -1;
  for (const auto& o : objects) {
    if (o.depth <= best_depth) continue;
    const auto l = o.to_local(t, x, y);
    if (o.contains_local(l[0], l[1])) {
      best = o.id;
      best_depth = o.depth;
    }
  }
  return best;
}

void Scene::render(int t, Tensor& image, LabelMap& labels) const {
  const std::int64_t hw = height * width;
  std::vector<float> rgb(static_cast<std::size_t>(3 * hw));
  labels = LabelMap::zeros(height, width);
  std::vector<const SceneObject*> by_id(256, nullptr);
  for (const auto& o : objects) by_id[static_cast<std::size_t>(o.id)] = &o;
  const auto& off = background_offset[static_cast<std::size_t>(t)];
  for (std::int64_t y = 0; y < height; ++y)
    for (std::int64_t x = 0; x < width; ++x) {
      const int id = label_at(t, static_cast<double>(x), static_cast<double>(y));
      std::array<double, 3> c;
      if (id == 0) {
        c = background.sample(x - off[0], y - off[1]);
      } else {
        const auto* o = by_id[static_cast<std::size_t>(id)];
        const auto l = o->to_local(t, static_cast<double>(x), static_cast<double>(y));
        c = o->texture.sample(l[0], l[1]);
      }
      const std::int64_t i = y * width + x;
      for (int ch = 0; ch < 3; ++ch) rgb[static_cast<std::size_t>(ch * hw + i)] = static_cast<float>(c[ch]);
      labels.data[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(id);
    }
  image = Tensor::from_floats({3, height, width}, std::move(rgb));
}

geometry::FlowField Scene::flow(int t) const {
  if (t < 1 || t >= frames) throw UsageError("scene flow needs 1 <= t < frames, got " + std::to_string(t));
  std::vector<float> uv(static_cast<std::size_t>(2 * height * width));
  const std::int64_t hw = height * width;
  std::vector<const SceneObject*> by_id(256, nullptr);
  for (const auto& o : objects) by_id[static_cast<std::size_t>(o.id)] = &o;
  const double bx = background_offset[t][0] - background_offset[t - 1][0];
  const double by = background_offset[t][1] - background_offset[t - 1][1];
  auto motion = [&](const SceneObject* o, double x, double y) -> std::array<double, 2> {
    const Pose &a = o->poses[static_cast<std::size_t>(t)], &b = o->poses[static_cast<std::size_t>(t - 1)];
    if (a.cx == b.cx && a.cy == b.cy && a.angle == b.angle && a.scale == b.scale) return {0.0, 0.0};
    const auto l = o->to_local(t, x, y);
    const auto src = o->to_image(t - 1, l[0], l[1]);
    return {src[0] - x, src[1] - y};
  };
  for (std::int64_t y = 0; y < height; ++y)
    for (std::int64_t x = 0; x < width; ++x) {
      const double px = static_cast<double>(x), py = static_cast<double>(y);
      const int id = label_at(t, px, py);
      std::array<double, 2> d{-bx, -by};
      if (id != 0) d = motion(by_id[static_cast<std::size_t>(id)], px, py);
      // The true source is hidden at t-1: follow the object that covered it,
      // so the uncovered pixel maps onto what lay beyond that object.
      const int cover = label_at(t - 1, px + d[0], py + d[1]);
      if (cover != 0 && cover != id) d = motion(by_id[static_cast<std::size_t>(cover)], px, py);
      const double fx = d[0], fy = d[1];
      const std::int64_t i = y * width + x;
      uv[static_cast<std::size_t>(i)] = static_cast<float>(fx);
      uv[static_cast<std::size_t>(hw + i)] = static_cast<float>(fy);
    }
  geometry::FlowField f;
  f.uv = Tensor::from_floats({2, height, width}, std::move(uv));
  return f;
}

std::map<int, int> Scene::first_frames(int min_pixels) const {
  std::map<int, int> first;
  for (int t = 0; t < frames; ++t) {
    std::map<int, int> count;
    for (std::int64_t y = 0; y < height; ++y)
      for (std::int64_t x = 0; x < width; ++x) ++count[label_at(t, static_cast<double>(x), static_cast<double>(y))];
    for (const auto& o : objects)
      if (!first.contains(o.id) && count[o.id] >= min_pixels) first[o.id] = t;
  }
  return first;
}

json Scene::to_json() const {
  json objs = json::array();
  for (const auto& o : objects) {
    json poses = json::array();
    for (const auto& p : o.poses) poses.push_back({p.cx, p.cy, p.angle, p.scale});
    json shape = o.kind == ShapeKind::ellipse
                     ? json{{"kind", "ellipse"}, {"semi_axes", {o.semi_a, o.semi_b}}}
                     : json{{"kind", "polygon"}, {"vertices", o.vertices}};
    objs.push_back({{"id", o.id}, {"shape", shape}, {"depth", o.depth}, {"poses", poses}});
  }
  json occl = json::object();
  for (const auto& [id, t] : occlusion_frame) occl[std::to_string(id)] = t;
  return {{"height", height},
          {"width", width},
          {"frames", frames},
          {"background_offsets", background_offset},
          {"objects", objs},
          {"occlusion_frames", occl}};
}

std::uint64_t sequence_seed(std::uint64_t seed, const std::string& split, int index) {
  std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
  for (unsigned char c : split) h = (h ^ c) * 1099511628211ULL;
  return splitmix(splitmix(seed ^ h) + static_cast<std::uint64_t>(index));
}

std::string sequence_name(const std::string& split, int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04d", index);
  return split + "_" + buf;
}

Scene make_scene(const GeneratorSpec& spec, const std::string& name, std::uint64_t seed) {
  spec.validate();
  std::mt19937_64 rng(seed);
  Scene sc;
  sc.name = name;
  sc.height = spec.height;
  sc.width = spec.width;
  sc.frames = spec.frames;
  const double W = static_cast<double>(spec.width), H = static_cast<double>(spec.height);
  const bool moving = !spec.is_static;

  std::array<double, 3> bg_base{uniform(rng, 0.3, 0.6), uniform(rng, 0.3, 0.6), uniform(rng, 0.3, 0.6)};
  sc.background = Texture::random(64, 4.0, bg_base, 0.12, rng);
  const double bg_dir = uniform(rng, 0, 2 * kPi);
  const double bg_speed = moving ? spec.background_motion * uniform(rng, 0.5, 1.0) : 0.0;
  for (int t = 0; t < spec.frames; ++t)
    sc.background_offset.push_back({bg_speed * std::cos(bg_dir) * t, bg_speed * std::sin(bg_dir) * t});

  const int n = uniform_int(rng, spec.min_objects, spec.max_objects);
  for (int i = 0; i < n; ++i) {
    SceneObject o;
    o.id = i + 1;
    const double r = uniform(rng, spec.min_radius, spec.max_radius);
    if (rng() % 2 == 0) {
      o.kind = ShapeKind::ellipse;
      o.semi_a = r;
      o.semi_b = r * uniform(rng, 0.6, 1.0);
    } else {
      o.kind = ShapeKind::polygon;
      const int k = uniform_int(rng, 5, 7);
      std::vector<std::array<double, 2>> pts;
      for (int v = 0; v < k; ++v) {
        const double a = 2 * kPi * (v + uniform(rng, -0.3, 0.3)) / k;
        const double rr = r * uniform(rng, 0.8, 1.0);
        pts.push_back({rr * std::cos(a), rr * std::sin(a)});
      }
      o.vertices = convex_hull(pts);
    }
    const auto color = hsv_to_rgb(uniform(rng, 0, 1), uniform(rng, 0.55, 0.9), uniform(rng, 0.55, 0.95));
    o.texture = Texture::random(32, 3.0, color, 0.15, rng);
    sc.objects.push_back(std::move(o));
  }
  std::vector<int> depth(static_cast<std::size_t>(n));
  std::iota(depth.begin(), depth.end(), 0);
  for (std::size_t i = depth.size(); i > 1; --i) std::swap(depth[i - 1], depth[rng() % i]);
  for (int i = 0; i < n; ++i) sc.objects[i].depth = depth[i];

  // Event roles.
  int front = -1, back = -1;
  if (moving && n >= 2 && uniform(rng, 0, 1) < spec.occlusion_probability) {
    front = 0;
    for (int i = 1; i < n; ++i)
      if (sc.objects[i].inradius() > sc.objects[front].inradius()) front = i;
    back = front == 0 ? 1 : 0;
    // The hidden object must fit inside the front one at its smallest scale.
    auto& b = sc.objects[back];
    const double target = 0.55 * 0.85 * sc.objects[front].inradius();
    if (target < 6.0) {
      front = back = -1;
    } else {
      const double f = target / b.max_extent();
      b.semi_a *= f;
      b.semi_b *= f;
      for (auto& v : b.vertices) v = {v[0] * f, v[1] * f};
      if (sc.objects[front].depth < b.depth) std::swap(sc.objects[front].depth, b.depth);
    }
  }

  for (int i = 0; i < n; ++i) {
    if (i == back) continue;
    auto& o = sc.objects[i];
    const double r = o.max_extent();
    Walk w;
    const double dir = uniform(rng, 0, 2 * kPi);
    const double speed = moving ? spec.max_translation * uniform(rng, 0.3, 1.0) : 0.0;
    w.vx = speed * std::cos(dir);
    w.vy = speed * std::sin(dir);
    w.omega = moving ? spec.max_rotation_deg * kPi / 180.0 * uniform(rng, -1, 1) : 0.0;
    w.scale_rate = moving ? spec.max_scale_step * uniform(rng, -1, 1) : 0.0;
    w.lo_x = r;
    w.hi_x = W - r;
    w.lo_y = r;
    w.hi_y = H - r;
    Pose p{uniform(rng, r, std::max(r, W - r)), uniform(rng, r, std::max(r, H - r)),
           uniform(rng, 0, 2 * kPi), 1.0};
    if (i == front) {
      w.vx *= 0.25;
      w.vy *= 0.25;
    } else if (moving && uniform(rng, 0, 1) < spec.exit_probability) {
      // Leave through the right or bottom border and bounce back in from a
      // wall outside the frame.
      const double s = spec.max_translation * uniform(rng, 0.7, 1.0);
      if (rng() % 2 == 0) {
        w.vx = s;
        w.vy = 0;
        w.hi_x = W + 1.8 * r;
        p.cx = W - r - uniform(rng, 0, 10);
      } else {
        w.vx = 0;
        w.vy = s;
        w.hi_y = H + 1.8 * r;
        p.cy = H - r - uniform(rng, 0, 10);
      }
    } else if (moving && uniform(rng, 0, 1) < spec.late_entry_probability) {
      // Start outside the left or top border, moving inwards.
      const double s = spec.max_translation * uniform(rng, 0.6, 1.0);
      if (rng() % 2 == 0) {
        w.vx = s;
        w.vy = 0;
        w.lo_x = -1.5 * r;
        p.cx = -1.1 * r;
      } else {
        w.vx = 0;
        w.vy = s;
        w.lo_y = -1.5 * r;
        p.cy = -1.1 * r;
      }
    }
    o.poses = simulate(p, w, spec.frames);
  }

  if (back >= 0) {
    // Straight path from a visible start through the front object's centre
    // at the scripted frame.
    const int k = std::max(1, uniform_int(rng, spec.frames / 3, std::max(spec.frames / 3, 2 * spec.frames / 3)));
    const Pose& target = sc.objects[front].poses[static_cast<std::size_t>(std::min(k, spec.frames - 1))];
    auto& b = sc.objects[back];
    const double r = b.max_extent();
    bool placed = false;
    for (int attempt = 0; attempt < 50 && !placed && k < spec.frames; ++attempt) {
      const double sx = uniform(rng, r, W - r), sy = uniform(rng, r, H - r);
      const double vx = (target.cx - sx) / k, vy = (target.cy - sy) / k;
      if (std::hypot(vx, vy) > spec.max_translation || std::hypot(vx, vy) < 1.0) continue;
      const double omega = spec.max_rotation_deg * kPi / 180.0 * uniform(rng, -1, 1);
      const double a0 = uniform(rng, 0, 2 * kPi);
      b.poses.clear();
      for (int t = 0; t < spec.frames; ++t)
        b.poses.push_back({sx + vx * t, sy + vy * t, a0 + omega * t, 1.0});
      sc.occlusion_frame[b.id] = k;
      placed = true;
    }
    if (!placed) {
      Pose p{uniform(rng, r, W - r), uniform(rng, r, H - r), 0, 1};
      Walk w;
      w.lo_x = r;
      w.hi_x = W - r;
      w.lo_y = r;
      w.hi_y = H - r;
      b.poses = simulate(p, w, spec.frames);
    }
  }

  // Drop objects that never become visible, then relabel 1..K.
  const auto first = sc.first_frames();
  std::vector<SceneObject> kept;
  std::map<int, int> occl;
  for (auto& o : sc.objects)
    if (first.contains(o.id)) {
      const int new_id = static_cast<int>(kept.size()) + 1;
      if (sc.occlusion_frame.contains(o.id)) occl[new_id] = sc.occlusion_frame[o.id];
      o.id = new_id;
      kept.push_back(std::move(o));
    }
  sc.objects = std::move(kept);
  sc.occlusion_frame = std::move(occl);
  return sc;
}

void write_scene(const Scene& scene, const std::filesystem::path& root, int jpeg_quality) {
  namespace fs = std::filesystem;
  const fs::path img_dir = root / "JPEGImages" / scene.name;
  const fs::path ann_dir = root / "Annotations" / scene.name;
  const fs::path flow_dir = root / "Flow" / scene.name;
  fs::create_directories(img_dir);
  fs::create_directories(ann_dir);
  fs::create_directories(flow_dir);
  fs::create_directories(root / "Meta");
  char buf[32];
  for (int t = 0; t < scene.frames; ++t) {
    Tensor image;
    LabelMap labels;
    scene.render(t, image, labels);
    std::snprintf(buf, sizeof buf, "%05d", t);
    imageio::write_jpeg(imageio::from_tensor(image), img_dir / (std::string(buf) + ".jpg"), jpeg_quality);
    imageio::write_label_png(labels, ann_dir / (std::string(buf) + ".png"));
    if (t >= 1) {
      std::snprintf(buf, sizeof buf, "flow_%05d.bin", t);
      ops::save_blob(scene.flow(t).uv, flow_dir / buf);
    }
  }
  json first = json::object();
  for (const auto& [id, t] : scene.first_frames()) first[std::to_string(id)] = t;
  json meta = {{"first_frame", first}, {"frames", scene.frames}};
  std::ofstream os(root / "Meta" / (scene.name + ".json"));
  if (!os) throw IoError("cannot write meta for " + scene.name);
  os << meta.dump(2) << "\n";
}

void generate(const GeneratorSpec& spec, const std::filesystem::path& out) {
  spec.validate();
  std::filesystem::create_directories(out);
  for (const auto& [split, count] : spec.splits) {
    const auto root = out / split;
    json sequences = json::object();
    for (int i = 0; i < count; ++i) {
      const auto name = sequence_name(split, i);
      const Scene sc = make_scene(spec, name, sequence_seed(spec.seed, split, i));
      write_scene(sc, root, spec.jpeg_quality);
      sequences[name] = sc.to_json();
    }
    std::filesystem::create_directories(root);
    std::ofstream os(root / "manifest.json");
    if (!os) throw IoError("cannot write manifest under " + root.string());
    os << json{{"generator", to_json(spec)}, {"split", split}, {"sequences", sequences}}.dump(1) << "\n";
  }
  std::ofstream os(out / "spec.json");
  os << to_json(spec).dump(2) << "\n";
}

}  // namespace warpvos::synthetic
