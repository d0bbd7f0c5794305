#pragma once

#include <filesystem>
#include <memory>
#include <string>

#include "warpvos/dataset.hpp"
#include "warpvos/geometry.hpp"

// Optical-flow providers. Every estimator returns a backward field on the
// target grid: the target pixel p is found at p + f(p) in the source frame.
namespace warpvos::flow {

// Where the pair comes from, for providers that read precomputed fields.
struct PairContext {
  const dataset::Sequence* sequence = nullptr;
  int target_index = 0;  // source is target_index - 1
};

class FlowEstimator {
 public:
  virtual ~FlowEstimator() = default;
  virtual geometry::FlowField estimate(const Tensor& target, const Tensor& source,
                                       const PairContext& ctx) const = 0;
  virtual std::string name() const = 0;
};

class ZeroFlow final : public FlowEstimator {
 public:
  geometry::FlowField estimate(const Tensor& target, const Tensor& source,
                               const PairContext& ctx) const override;
  std::string name() const override { return "zero"; }
};

// Reads the generator's analytic flow carried by the loaded sequence.
class GroundTruthFlow final : public FlowEstimator {
 public:
  geometry::FlowField estimate(const Tensor& target, const Tensor& source,
                               const PairContext& ctx) const override;
  std::string name() const override { return "gt"; }
};

struct BlockMatchingConfig {
  int radius = 8;
  int block = 9;  // odd
  bool median = true;
};

// Exhaustive integer SSD search; ties go to the smallest |d|^2, then the
// lexicographically smallest (du, dv).
class BlockMatchingFlow final : public FlowEstimator {
 public:
  explicit BlockMatchingFlow(BlockMatchingConfig cfg = {});
  geometry::FlowField estimate(const Tensor& target, const Tensor& source,
                               const PairContext& ctx) const override;
  std::string name() const override { return "block"; }
  const BlockMatchingConfig& config() const { return cfg_; }

 private:
  BlockMatchingConfig cfg_;
};

// <dir>/<sequence>/flow_{t:05}.bin, or .flo when no blob exists.
class ExternalFlow final : public FlowEstimator {
 public:
  explicit ExternalFlow(std::filesystem::path dir);
  geometry::FlowField estimate(const Tensor& target, const Tensor& source,
                               const PairContext& ctx) const override;
  std::string name() const override { return "external:" + dir_.string(); }

 private:
  std::filesystem::path dir_;
};

// zero | gt | block | external:<dir>
std::unique_ptr<FlowEstimator> make_estimator(const std::string& source,
                                              const BlockMatchingConfig& block = {});

// Two-channel float file: magic 202021.25, int32 width, int32 height, then
// interleaved (u, v) rows.
geometry::FlowField read_flo(const std::filesystem::path& path);
void write_flo(const geometry::FlowField& flow, const std::filesystem::path& path);

// Replaces each component by the median of its 3x3 neighbourhood (clamped).
geometry::FlowField median3x3(const geometry::FlowField& flow);

// Mean absolute difference between target and the warped source over the
// pixels where `mask` is non-zero (all pixels when mask is empty).
double warp_l1(const Tensor& target, const Tensor& source, const geometry::FlowField& flow,
               const std::vector<std::uint8_t>& mask = {});

}  // namespace warpvos::flow
