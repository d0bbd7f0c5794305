#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "warpvos/labels.hpp"

// Region (J) and boundary (F) scores following the DAVIS protocol.
namespace warpvos::metrics {

struct MetricConfig {
  double boundary_fraction = 0.008;  // of the image diagonal
  int theta = 0;                     // > 0 overrides the fraction
  double empty_score = 1.0;          // both masks (or boundaries) empty
};

int boundary_tolerance(std::int64_t height, std::int64_t width, const MetricConfig& cfg = {});

// Foreground pixels with a 4-neighbour outside the mask or on the image edge.
std::vector<std::uint8_t> boundary(const std::vector<std::uint8_t>& mask, std::int64_t height,
                                   std::int64_t width);
std::vector<std::uint8_t> object_mask(const LabelMap& labels, int object);

double j_score(const LabelMap& pred, const LabelMap& gt, int object, const MetricConfig& cfg = {});
// Matching by dilating each boundary with the disc of radius theta.
double f_score(const LabelMap& pred, const LabelMap& gt, int object, int theta,
               const MetricConfig& cfg = {});
double f_score(const LabelMap& pred, const LabelMap& gt, int object, const MetricConfig& cfg = {});

struct FrameScore {
  std::string sequence;
  int object = 0;
  int frame = 0;
  double j = 0, f = 0;
};

struct ObjectScore {
  std::string sequence;
  int object = 0;
  int frames = 0;
  double j = 0, f = 0;
  std::optional<bool> seen;
};

struct ScoreReport {
  std::vector<FrameScore> frames;
  std::vector<ObjectScore> objects;
  double j = 0, f = 0, jf = 0;
  // Present when objects carry a seen/unseen tag.
  std::optional<double> j_seen, f_seen, j_unseen, f_unseen;
};

// Scores every annotated frame after each object's first annotation; frames
// without ground truth are skipped.
std::vector<FrameScore> evaluate_sequence(const std::string& name, const std::vector<LabelMap>& pred,
                                          const std::vector<LabelMap>& gt,
                                          const std::map<int, int>& first_frame,
                                          const MetricConfig& cfg = {});

// Per-object means over frames, then dataset means over objects. `seen`
// maps "sequence/object" to a seen-category flag.
ScoreReport aggregate(const std::vector<FrameScore>& scores,
                      const std::map<std::string, bool>& seen = {});

nlohmann::json summary_json(const ScoreReport& report);
void write_jsonl(const ScoreReport& report, const std::filesystem::path& path);
void write_csv(const ScoreReport& report, const std::filesystem::path& path);
std::string format_table(const ScoreReport& report);

}  // namespace warpvos::metrics
