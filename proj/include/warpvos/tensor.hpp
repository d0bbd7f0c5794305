#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "warpvos/errors.hpp"

namespace warpvos {

enum class DType : std::uint8_t { f32, f64 };

using Shape = std::vector<std::int64_t>;

std::string shape_str(const Shape& shape);
std::int64_t shape_numel(const Shape& shape);
const char* dtype_name(DType dtype);

class Tensor;

namespace detail {

struct Storage {
  std::vector<float> f32;
  std::vector<double> f64;
};

struct Node;

struct TensorImpl {
  Shape shape;
  DType dtype = DType::f32;
  std::shared_ptr<Storage> data;
  std::shared_ptr<Storage> grad;
  bool requires_grad = false;
  std::shared_ptr<Node> grad_fn;
};

// One recorded operation. `backward` receives the gradient of the op output
// and returns one gradient per input; undefined entries are skipped.
struct Node {
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::function<std::vector<Tensor>(const Tensor&)> backward;
  const char* name = "";
};

}  // namespace detail

// Dense row-major array with optional reverse-mode gradient tracking.
//
// Data is treated as immutable once an op has produced it; the only in-place
// mutation paths are gradient accumulation and optimizer updates on leaves.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape, DType dtype = DType::f32);
  static Tensor full(const Shape& shape, double value, DType dtype = DType::f32);
  static Tensor ones(const Shape& shape, DType dtype = DType::f32) { return full(shape, 1.0, dtype); }
  static Tensor from_values(const Shape& shape, std::span<const double> values,
                            DType dtype = DType::f32);
  static Tensor from_values(const Shape& shape, std::initializer_list<double> values,
                            DType dtype = DType::f32);
  static Tensor from_floats(const Shape& shape, std::vector<float> values);
  static Tensor from_doubles(const Shape& shape, std::vector<double> values);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::int64_t dim(int axis) const;
  int rank() const { return static_cast<int>(shape().size()); }
  std::int64_t numel() const;
  DType dtype() const;

  template <class T>
  std::span<T> data();
  template <class T>
  std::span<const T> data() const;

  double item() const;
  double at(std::int64_t flat_index) const;
  std::vector<double> to_vector() const;

  bool requires_grad() const;
  Tensor& requires_grad_(bool flag = true);
  bool is_leaf() const;

  // Accumulated gradient, undefined until a backward pass reaches this tensor.
  Tensor grad() const;
  void zero_grad();

  // Shares storage with *this but drops graph history.
  Tensor detach() const;
  Tensor clone() const;
  Tensor to(DType dtype) const;

  // Reverse pass from a scalar. Gradients accumulate into tracked leaves.
  void backward() const;

  // Element-wise mutation for leaves outside of any graph (optimizers,
  // initializers). Throws UsageError on non-leaf tensors.
  void assign(const Tensor& values);

  std::shared_ptr<detail::TensorImpl> impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

// Scoped switch that disables graph recording on the current thread.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Hook for ops defined outside numerics (geometry, attention). Attaches a
// backward function to `out` when any input requires grad and recording is on.
void attach_grad(Tensor& out, std::vector<Tensor> inputs,
                 std::function<std::vector<Tensor>(const Tensor&)> backward, const char* name);

// Calls `fn.template operator()<T>()` with T matching the runtime dtype.
template <class Fn>
decltype(auto) dispatch(DType dtype, Fn&& fn) {
  if (dtype == DType::f64) return fn.template operator()<double>();
  return fn.template operator()<float>();
}

}  // namespace warpvos
