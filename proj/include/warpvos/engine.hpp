#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "warpvos/dataset.hpp"
#include "warpvos/flow.hpp"
#include "warpvos/network.hpp"

// Inference over whole sequences and the toy training loop.
namespace warpvos::engine {

// Long-term memory: entry 0 is the reference frame and is never evicted.
class MemoryBank {
 public:
  struct Entry {
    Tensor features;  // tokens [P, C]
    Tensor ids;       // identity embedding tokens [P, C]
    int frame = 0;
    bool pinned = false;
  };

  // capacity 0 keeps everything; capacity 1 keeps only the reference.
  explicit MemoryBank(int stride, int capacity = 0);

  bool due(int frame) const { return frame % stride_ == 0; }
  // Frames must be strictly increasing. Pinned entries (references) survive
  // capacity eviction.
  void append(Tensor features, Tensor ids, int frame, bool pinned = false);

  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  int stride() const { return stride_; }
  std::vector<Tensor> features() const;
  std::vector<Tensor> ids() const;

 private:
  int stride_, capacity_;
  std::vector<Entry> entries_;
};

struct InferenceConfig {
  int memory_stride = 5;
  int memory_capacity = 0;
};

struct FrameTiming {
  double flow_seconds = 0;
  double model_seconds = 0;
};

struct SequenceOutput {
  std::vector<LabelMap> labels;  // hard predictions at the on-disk extents
  std::vector<int> object_ids;
  identity::IdentityAssignment assignment;
  std::vector<FrameTiming> timing;
  std::vector<int> memory_frames;  // frames stored in long-term memory
};

// Objects start at their first annotated frame, where the annotation
// replaces the prediction. Frame 0 must carry an annotation. Only frames
// [0, max_frames) are processed when max_frames > 0.
SequenceOutput infer_sequence(const network::WarpFormer& model, const dataset::Sequence& seq,
                              const flow::FlowEstimator& estimator, const InferenceConfig& cfg = {},
                              int max_frames = 0);

// ---- losses -------------------------------------------------------------------

// Mean cross entropy over the `fraction` of pixels with the largest loss.
Tensor bootstrapped_ce(const Tensor& logits, const LabelMap& target, const std::vector<int>& object_ids,
                       double fraction);
// Soft dice 1 - (2*sum(p*g) + 1) / (sum(p) + sum(g) + 1) on softmax
// probabilities, averaged over the object channels.
Tensor dice_loss(const Tensor& logits, const LabelMap& target, const std::vector<int>& object_ids);

struct LossValue {
  Tensor total;
  double ce = 0, dice = 0;
  bool dice_used = false;
};
// 0.5 * CE + 0.5 * dice; the dice term is dropped when the target has no
// object pixels.
LossValue vos_loss(const Tensor& logits, const LabelMap& target, const std::vector<int>& object_ids,
                   double fraction);

// ---- training -----------------------------------------------------------------

struct TrainConfig {
  std::uint64_t seed = 0;
  int steps = 2000;               // both stages together
  double stage1_fraction = 0.4;   // remaining steps form stage 2
  int batch_size = 1;             // clips per step, gradients accumulated
  int clip_length = 5;
  int memory_stride = 2;
  double lr_start = 3e-4, lr_end = 2e-5, lr_power = 0.9;
  int warmup_steps = 0;
  double encoder_lr_scale = 0.1;
  double weight_decay = 0.07;
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  double max_grad_norm = 0;       // 0 disables clipping
  double bootstrap_start = 0.2;   // fraction of steps where annealing begins
  double bootstrap_end = 1.0;
  double bootstrap_final = 0.15;
  double merge_probability = 0.4;
  dataset::AugmentConfig augment;
  // Multiplies the loss at this step by NaN; for testing the abort path.
  int inject_nan_step = -1;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

double learning_rate(const TrainConfig& cfg, int step);
double bootstrap_fraction(const TrainConfig& cfg, int step);
int stage_of(const TrainConfig& cfg, int step);  // 1 or 2

// Which masks feed the sensory and long-term memory inputs.
enum class MaskSource { ground_truth, predicted };

struct ClipResult {
  Tensor loss;                     // mean over predicted frames
  std::vector<double> frame_loss;  // per predicted frame
  double ce = 0, dice = 0;
};

// Runs the model over a clip with ground-truth flow; frame 0 is the
// reference. Predicted masks are detached before reuse.
ClipResult clip_forward(const network::WarpFormer& model, const dataset::Clip& clip,
                        const identity::IdentityAssignment& assignment, MaskSource source,
                        double fraction, int memory_stride);

class AdamW {
 public:
  struct Group {
    std::string name;
    Tensor param;
    double lr_scale = 1.0;
    bool decay = true;
  };

  AdamW(std::vector<Group> groups, double beta1, double beta2, double eps, double weight_decay);
  // Skips parameters without a gradient.
  void step(double lr);
  int steps_taken() const { return t_; }
  void save(const std::filesystem::path& dir) const;
  void load(const std::filesystem::path& dir);

 private:
  std::vector<Group> groups_;
  std::vector<Tensor> m_, v_;
  double beta1_, beta2_, eps_, wd_;
  int t_ = 0;
};

struct StepRecord {
  int step = 0, stage = 1;
  double loss = 0, ce = 0, dice = 0, lr = 0, seconds = 0;
};

class Trainer {
 public:
  Trainer(network::WarpFormer& model, const std::vector<dataset::Sequence>& data, TrainConfig cfg);

  int step_index() const { return step_; }
  bool done() const { return step_ >= cfg_.steps; }
  // Runs one optimisation step. Throws NumericError on a non-finite loss.
  StepRecord step();
  // Model, optimizer moments and step counter.
  void save(const std::filesystem::path& dir) const;
  void resume(const std::filesystem::path& dir);

 private:
  dataset::Clip sample_clip(std::mt19937_64& rng) const;
  std::string parameter_report();

  network::WarpFormer& model_;
  const std::vector<dataset::Sequence>& data_;
  TrainConfig cfg_;
  AdamW opt_;
  int step_ = 0;
};

// Seed of the random stream used at `step`.
std::uint64_t step_seed(std::uint64_t seed, int step);

}  // namespace warpvos::engine
