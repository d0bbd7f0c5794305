#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "warpvos/geometry.hpp"
#include "warpvos/labels.hpp"

// Sequences on disk (root/{JPEGImages,Annotations}/{seq}/{frame:05}.{jpg,png})
// and in memory, plus the training-time merge and augmentation.
namespace warpvos::dataset {

struct Sequence {
  std::string name;
  std::vector<Tensor> frames;                   // [3, H, W], padded to /16
  std::vector<LabelMap> labels;                 // empty map where not annotated
  std::vector<geometry::FlowField> flows;       // ground truth; index t is t -> t-1
  std::map<int, int> first_frame;               // object id -> first annotated frame
  std::int64_t height = 0, width = 0;           // padded extents
  std::int64_t orig_height = 0, orig_width = 0; // extents on disk

  int length() const { return static_cast<int>(frames.size()); }
  std::vector<int> objects() const;
  bool has_flow() const { return !flows.empty(); }
};

std::vector<std::string> list_sequences(const std::filesystem::path& root);

// Loads frames, annotations, optional Flow/{seq}/flow_{t:05}.bin and the
// optional Meta/{seq}.json. Frames are replicate-padded on the bottom/right
// to multiples of 16; labels and flow are zero-padded.
Sequence load_sequence(const std::filesystem::path& root, const std::string& name);

std::int64_t padded_extent(std::int64_t n);
Tensor pad_image(const Tensor& image, std::int64_t height, std::int64_t width);
LabelMap pad_labels(const LabelMap& labels, std::int64_t height, std::int64_t width);
LabelMap crop_labels(const LabelMap& labels, std::int64_t height, std::int64_t width);
geometry::FlowField pad_flow(const geometry::FlowField& flow, std::int64_t height, std::int64_t width);

// A short training clip with full annotations.
struct Clip {
  std::vector<Tensor> frames;
  std::vector<LabelMap> labels;
  std::vector<geometry::FlowField> flows;  // flows[0] unused
  std::vector<int> object_ids;             // objects present in labels[0]
};

// Frames [start, start + length) with flow and labels.
Clip make_clip(const Sequence& seq, int start, int length);

// Pixels where B has an object take B's frame, label (shifted past A's ids)
// and flow; elsewhere A is kept.
Clip dynamic_merge(const Clip& a, const Clip& b);

struct AugmentConfig {
  bool enabled = true;
  double min_scale = 0.7, max_scale = 1.3;
  std::int64_t crop_height = 0, crop_width = 0;  // 0: keep the input extents
  int crop_tries = 20;
  double jitter = 0.1;          // brightness/contrast/saturation amplitude
  double blur_probability = 0.2;
  double grey_probability = 0.1;
};

struct CropInfo {
  double scale = 1.0;
  std::int64_t offset_y = 0, offset_x = 0;
  bool found_foreground = false;
};

// Random scale then an object-balanced crop (rejection sampling on the
// first frame, centre crop fallback), applied in lockstep to frames, labels
// and flow; photometric changes touch RGB only.
Clip augment(const Clip& clip, const AugmentConfig& cfg, std::mt19937_64& rng,
             CropInfo* info = nullptr);

}  // namespace warpvos::dataset
