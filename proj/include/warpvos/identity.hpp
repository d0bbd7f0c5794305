#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "warpvos/tensor.hpp"

namespace warpvos::identity {

// Patch edge of the identity encoding; features live on the 1/16 grid.
inline constexpr int kPatch = 16;

// Injective map from sequence object ids (>= 1) to bank slots (1..M).
// Background (id 0) always uses the dedicated background vector.
class IdentityAssignment {
 public:
  void assign(int object_id, int slot);
  int slot(int object_id) const;
  bool contains(int object_id) const { return slots_.contains(object_id); }
  const std::map<int, int>& map() const { return slots_; }
  std::vector<int> objects() const;
  // Checks injectivity and slot range; throws ConfigError.
  void validate(int bank_slots) const;

  // Uniformly random injective assignment.
  static IdentityAssignment random(const std::vector<int>& object_ids, int bank_slots,
                                   std::mt19937_64& rng);
  // Object ids in ascending order take slots 1, 2, ...
  static IdentityAssignment sequential(const std::vector<int>& object_ids, int bank_slots);
  // Adds `object_id` on the lowest free slot.
  int extend(int object_id, int bank_slots);

 private:
  std::map<int, int> slots_;
};

struct IdentityBank {
  Tensor vectors;     // [M, C_id]
  Tensor background;  // [C_id]
  bool frozen = false;

  static IdentityBank create(int slots, int dim, std::mt19937_64& rng, DType dtype = DType::f32);
  int slots() const { return static_cast<int>(vectors.dim(0)); }
  int dim() const { return static_cast<int>(vectors.dim(1)); }

  // Rows [background, ID_slot(object_ids[0]), ...] as [K+1, C_id]. Frozen
  // banks return values detached from the graph.
  Tensor embedding_table(const IdentityAssignment& assignment,
                         const std::vector<int>& object_ids) const;

  void visit(const std::function<void(const std::string&, Tensor&)>& fn);
};

enum class EncodePath { patch_sum, convolution };

// Soft mask [K+1, H, W] -> identity embedding [C_id, H/16, W/16]: every cell
// sums the probability-weighted identity vectors of the pixels in its patch.
// Channel k >= 1 of the mask belongs to object_ids[k-1].
Tensor encode_mask(const Tensor& mask, const IdentityBank& bank,
                   const IdentityAssignment& assignment, const std::vector<int>& object_ids,
                   EncodePath path = EncodePath::patch_sum);

// Decoded features [C_id, H, W] -> logits [K+1, H, W]; logit of row r is the
// dot product with embedding_table row r, divided by sqrt(C_id).
Tensor readout_logits(const Tensor& decoded, const IdentityBank& bank,
                      const IdentityAssignment& assignment, const std::vector<int>& object_ids);

}  // namespace warpvos::identity
