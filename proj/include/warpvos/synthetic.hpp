#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "warpvos/geometry.hpp"
#include "warpvos/labels.hpp"

// Procedural moving-shape scenes with exact labels and analytic flow.
namespace warpvos::synthetic {

struct GeneratorSpec {
  std::uint64_t seed = 0;
  std::map<std::string, int> splits{{"train", 20}, {"eval", 5}};
  int frames = 24;
  std::int64_t height = 256, width = 448;
  int min_objects = 1, max_objects = 3;
  double min_radius = 20, max_radius = 48;
  double max_translation = 6.0;     // px per frame
  double max_rotation_deg = 4.0;    // per frame
  double max_scale_step = 0.02;     // per-frame scale factor within 1 +- this
  double background_motion = 2.0;   // px per frame
  double occlusion_probability = 0.5;
  double exit_probability = 0.3;
  double late_entry_probability = 0.3;
  bool is_static = false;
  int jpeg_quality = 95;

  void validate() const;
};

nlohmann::json to_json(const GeneratorSpec& spec);
// Unknown keys and invalid values raise ConfigError.
GeneratorSpec spec_from_json(const nlohmann::json& j);

struct Pose {
  double cx = 0, cy = 0, angle = 0, scale = 1;
};

// Smooth periodic texture: blurred noise tile sampled bilinearly with wrap.
struct Texture {
  int size = 0;
  double cell = 1;                   // pixels per tile texel
  std::array<double, 3> base{};      // mean colour
  std::array<double, 3> amplitude{};
  std::vector<float> tile;           // [size * size] zero mean, unit std

  std::array<double, 3> sample(double u, double v) const;
  static Texture random(int size, double cell, const std::array<double, 3>& base,
                        double amplitude, std::mt19937_64& rng);
};

enum class ShapeKind { ellipse, polygon };

struct SceneObject {
  int id = 1;
  ShapeKind kind = ShapeKind::ellipse;
  double semi_a = 1, semi_b = 1;                     // ellipse
  std::vector<std::array<double, 2>> vertices;       // convex polygon, CCW
  int depth = 0;                                     // larger is in front
  Texture texture;
  std::vector<Pose> poses;                           // per frame

  bool contains_local(double u, double v) const;
  double max_extent() const;  // largest distance of the outline from the origin
  double inradius() const;    // smallest distance of the outline from the origin
  // Maps a pixel to object-local coordinates at frame t and back.
  std::array<double, 2> to_local(int t, double x, double y) const;
  std::array<double, 2> to_image(int t, double u, double v) const;
};

struct Scene {
  std::string name;
  std::int64_t height = 0, width = 0;
  int frames = 0;
  Texture background;
  std::vector<std::array<double, 2>> background_offset;  // per frame
  std::vector<SceneObject> objects;
  // Frames scripted for events, for self-checks.
  std::map<int, int> occlusion_frame;  // occluded object id -> frame

  // Label of the front-most object covering the pixel at frame t.
  int label_at(int t, double x, double y) const;
  void render(int t, Tensor& image, LabelMap& labels) const;
  // Backward flow for target frame t (t >= 1) to source t-1: object pixels
  // follow their object's transform, background pixels the background shift.
  // Where that source is covered at t-1 by another object, the pixel takes
  // the covering object's transform instead.
  geometry::FlowField flow(int t) const;
  // Per object, the first frame it covers at least `min_pixels` pixels.
  std::map<int, int> first_frames(int min_pixels = 64) const;

  nlohmann::json to_json() const;
};

Scene make_scene(const GeneratorSpec& spec, const std::string& name, std::uint64_t seed);

// Seed of sequence `index` of `split`, derived from the spec seed.
std::uint64_t sequence_seed(std::uint64_t seed, const std::string& split, int index);
std::string sequence_name(const std::string& split, int index);

// Writes every split as a dataset root under out/<split>, plus out/spec.json.
void generate(const GeneratorSpec& spec, const std::filesystem::path& out);
// Writes a single scene into a dataset root (frames, annotations, flow, meta).
void write_scene(const Scene& scene, const std::filesystem::path& root, int jpeg_quality);

}  // namespace warpvos::synthetic
