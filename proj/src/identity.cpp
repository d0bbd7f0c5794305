#include "warpvos/identity.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "warpvos/ops.hpp"

namespace warpvos::identity {

void IdentityAssignment::assign(int object_id, int slot) {
  if (object_id < 1) throw ConfigError("object ids start at 1, got " + std::to_string(object_id));
  slots_[object_id] = slot;
}

int IdentityAssignment::slot(int object_id) const {
  auto it = slots_.find(object_id);
  if (it == slots_.end())
    throw ConfigError("assignment has no slot for object id " + std::to_string(object_id));
  return it->second;
}

std::vector<int> IdentityAssignment::objects() const {
  std::vector<int> ids;
  for (const auto& [id, slot] : slots_) ids.push_back(id);
  return ids;
}

void IdentityAssignment::validate(int bank_slots) const {
  std::set<int> used;
  for (const auto& [id, slot] : slots_) {
    if (slot < 1 || slot > bank_slots)
      throw ConfigError("slot " + std::to_string(slot) + " for object " + std::to_string(id) +
                        " outside bank of " + std::to_string(bank_slots));
    if (!used.insert(slot).second)
      throw ConfigError("slot " + std::to_string(slot) + " assigned to more than one object");
  }
}

IdentityAssignment IdentityAssignment::random(const std::vector<int>& object_ids, int bank_slots,
                                              std::mt19937_64& rng) {
  if (static_cast<int>(object_ids.size()) > bank_slots)
    throw ConfigError(std::to_string(object_ids.size()) + " objects exceed the identity bank of " +
                      std::to_string(bank_slots));
  std::vector<int> slots(static_cast<std::size_t>(bank_slots));
  std::iota(slots.begin(), slots.end(), 1);
  // Explicit Fisher-Yates keeps the draw sequence independent of the
  // standard library implementation.
  for (std::size_t i = slots.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng() % i);
    std::swap(slots[i - 1], slots[j]);
  }
  IdentityAssignment a;
  for (std::size_t i = 0; i < object_ids.size(); ++i) a.assign(object_ids[i], slots[i]);
  return a;
}

IdentityAssignment IdentityAssignment::sequential(const std::vector<int>& object_ids,
                                                  int bank_slots) {
  std::vector<int> sorted = object_ids;
  std::sort(sorted.begin(), sorted.end());
  if (static_cast<int>(sorted.size()) > bank_slots)
    throw ConfigError(std::to_string(sorted.size()) + " objects exceed the identity bank of " +
                      std::to_string(bank_slots));
  IdentityAssignment a;
  for (std::size_t i = 0; i < sorted.size(); ++i) a.assign(sorted[i], static_cast<int>(i) + 1);
  return a;
}

int IdentityAssignment::extend(int object_id, int bank_slots) {
  if (contains(object_id)) return slot(object_id);
  std::set<int> used;
  for (const auto& [id, s] : slots_) used.insert(s);
  for (int s = 1; s <= bank_slots; ++s)
    if (!used.contains(s)) {
      assign(object_id, s);
      return s;
    }
  throw ConfigError("identity bank of " + std::to_string(bank_slots) +
                    " slots is exhausted by object " + std::to_string(object_id));
}

IdentityBank IdentityBank::create(int slots, int dim, std::mt19937_64& rng, DType dtype) {
  if (slots < 1 || dim < 1) throw ConfigError("identity bank needs positive slots and dim");
  // Unit-variance entries, so each vector has norm close to sqrt(dim).
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<double> v(static_cast<std::size_t>(slots * dim));
  for (auto& x : v) x = dist(rng);
  std::vector<double> b(static_cast<std::size_t>(dim));
  for (auto& x : b) x = dist(rng);
  IdentityBank bank;
  bank.vectors = Tensor::from_values({slots, dim}, v, dtype).requires_grad_();
  bank.background = Tensor::from_values({dim}, b, dtype).requires_grad_();
  return bank;
}

Tensor IdentityBank::embedding_table(const IdentityAssignment& assignment,
                                     const std::vector<int>& object_ids) const {
  const Tensor vec = frozen ? vectors.detach() : vectors;
  const Tensor bg = frozen ? background.detach() : background;
  std::vector<Tensor> rows{ops::reshape(bg, {1, dim()})};
  for (int id : object_ids) {
    const int s = assignment.slot(id);
    if (s < 1 || s > slots()) throw ConfigError("slot " + std::to_string(s) + " outside bank");
    rows.push_back(ops::slice(vec, 0, s - 1, 1));
  }
  return ops::concat(rows, 0);
}

void IdentityBank::visit(const std::function<void(const std::string&, Tensor&)>& fn) {
  fn("bank.vectors", vectors);
  fn("bank.background", background);
}

Tensor encode_mask(const Tensor& mask, const IdentityBank& bank,
                   const IdentityAssignment& assignment, const std::vector<int>& object_ids,
                   EncodePath path) {
  if (mask.rank() != 3 || mask.dim(0) != static_cast<std::int64_t>(object_ids.size()) + 1)
    throw DimensionError("encode_mask: mask " + shape_str(mask.shape()) + " does not hold " +
                         std::to_string(object_ids.size()) + " objects plus background");
  const std::int64_t h = mask.dim(1), w = mask.dim(2);
  if (h % kPatch != 0 || w % kPatch != 0)
    throw DimensionError("encode_mask: extents " + shape_str(mask.shape()) +
                         " are not multiples of 16");
  const std::int64_t k1 = mask.dim(0), c = bank.dim(), hp = h / kPatch, wp = w / kPatch;
  Tensor table = bank.embedding_table(assignment, object_ids);  // [K+1, C]
  if (table.dtype() != mask.dtype()) throw UsageError("encode_mask: dtype mismatch with bank");
  if (path == EncodePath::patch_sum) {
    Tensor pooled = ops::reshape(ops::sum_pool(mask, kPatch), {k1, hp * wp});
    return ops::reshape(ops::matmul(ops::transpose(table), pooled), {c, hp, wp});
  }
  // One stride-16 convolution whose kernel repeats each identity vector over
  // the whole 16 x 16 footprint.
  Tensor spread = Tensor::ones({1, kPatch * kPatch}, mask.dtype());
  Tensor kernel = ops::matmul(ops::reshape(ops::transpose(table), {c, k1, 1}), spread);
  kernel = ops::reshape(kernel, {c, k1, kPatch, kPatch});
  return ops::conv2d(mask, kernel, {}, kPatch, 0);
}

Tensor readout_logits(const Tensor& decoded, const IdentityBank& bank,
                      const IdentityAssignment& assignment, const std::vector<int>& object_ids) {
  if (decoded.rank() != 3 || decoded.dim(0) != bank.dim())
    throw DimensionError("readout_logits: decoded " + shape_str(decoded.shape()) +
                         " does not have " + std::to_string(bank.dim()) + " channels");
  const std::int64_t h = decoded.dim(1), w = decoded.dim(2);
  Tensor table = bank.embedding_table(assignment, object_ids);
  Tensor flat = ops::reshape(decoded, {bank.dim(), h * w});
  Tensor logits = ops::affine(ops::matmul(table, flat), 1.0 / std::sqrt(static_cast<double>(bank.dim())));
  return ops::reshape(logits, {table.dim(0), h, w});
}

}  // namespace warpvos::identity
