#include "warpvos/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace warpvos {

namespace {
thread_local bool g_grad_enabled = true;

std::shared_ptr<detail::Storage> make_storage(DType dtype, std::int64_t n) {
  auto s = std::make_shared<detail::Storage>();
  if (dtype == DType::f64)
    s->f64.assign(static_cast<std::size_t>(n), 0.0);
  else
    s->f32.assign(static_cast<std::size_t>(n), 0.0f);
  return s;
}

void check_shape(const Shape& shape) {
  for (auto e : shape)
    if (e < 0) throw DimensionError("negative extent in shape " + shape_str(shape));
}

template <class T>
std::span<T> storage_span(detail::Storage& s) {
  if constexpr (std::is_same_v<T, double>)
    return s.f64;
  else
    return s.f32;
}

void accumulate(detail::TensorImpl& impl, const Tensor& g) {
  if (g.shape() != impl.shape)
    throw DimensionError("gradient shape " + shape_str(g.shape()) + " does not match tensor shape " +
                         shape_str(impl.shape));
  const Tensor gc = g.dtype() == impl.dtype ? g : g.to(impl.dtype);
  if (!impl.grad) {
    impl.grad = make_storage(impl.dtype, shape_numel(impl.shape));
  }
  dispatch(impl.dtype, [&]<class T>() {
    auto dst = storage_span<T>(*impl.grad);
    auto src = gc.data<T>();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  });
}
}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

const char* dtype_name(DType dtype) { return dtype == DType::f64 ? "f64" : "f32"; }

Tensor Tensor::zeros(const Shape& shape, DType dtype) {
  check_shape(shape);
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = shape;
  impl->dtype = dtype;
  impl->data = make_storage(dtype, shape_numel(shape));
  return Tensor(std::move(impl));
}

Tensor Tensor::full(const Shape& shape, double value, DType dtype) {
  Tensor t = zeros(shape, dtype);
  dispatch(dtype, [&]<class T>() {
    auto d = t.data<T>();
    std::fill(d.begin(), d.end(), static_cast<T>(value));
  });
  return t;
}

Tensor Tensor::from_values(const Shape& shape, std::span<const double> values, DType dtype) {
  if (static_cast<std::int64_t>(values.size()) != shape_numel(shape))
    throw DimensionError("value count " + std::to_string(values.size()) + " does not fill shape " +
                         shape_str(shape));
  Tensor t = zeros(shape, dtype);
  dispatch(dtype, [&]<class T>() {
    auto d = t.data<T>();
    for (std::size_t i = 0; i < values.size(); ++i) d[i] = static_cast<T>(values[i]);
  });
  return t;
}

Tensor Tensor::from_values(const Shape& shape, std::initializer_list<double> values, DType dtype) {
  return from_values(shape, std::span<const double>(values.begin(), values.size()), dtype);
}

Tensor Tensor::from_floats(const Shape& shape, std::vector<float> values) {
  check_shape(shape);
  if (static_cast<std::int64_t>(values.size()) != shape_numel(shape))
    throw DimensionError("value count does not fill shape " + shape_str(shape));
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = shape;
  impl->dtype = DType::f32;
  impl->data = std::make_shared<detail::Storage>();
  impl->data->f32 = std::move(values);
  return Tensor(std::move(impl));
}

Tensor Tensor::from_doubles(const Shape& shape, std::vector<double> values) {
  check_shape(shape);
  if (static_cast<std::int64_t>(values.size()) != shape_numel(shape))
    throw DimensionError("value count does not fill shape " + shape_str(shape));
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = shape;
  impl->dtype = DType::f64;
  impl->data = std::make_shared<detail::Storage>();
  impl->data->f64 = std::move(values);
  return Tensor(std::move(impl));
}

const Shape& Tensor::shape() const {
  if (!impl_) throw UsageError("use of an undefined tensor");
  return impl_->shape;
}

std::int64_t Tensor::dim(int axis) const {
  const int r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r)
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_str(shape()));
  return impl_->shape[static_cast<std::size_t>(axis)];
}

std::int64_t Tensor::numel() const { return shape_numel(shape()); }

DType Tensor::dtype() const {
  if (!impl_) throw UsageError("use of an undefined tensor");
  return impl_->dtype;
}

template <class T>
std::span<T> Tensor::data() {
  if (!impl_) throw UsageError("use of an undefined tensor");
  if ((std::is_same_v<T, double>) != (impl_->dtype == DType::f64))
    throw UsageError(std::string("tensor dtype is ") + dtype_name(impl_->dtype));
  return storage_span<T>(*impl_->data);
}

template <class T>
std::span<const T> Tensor::data() const {
  return const_cast<Tensor*>(this)->data<T>();
}

template std::span<float> Tensor::data<float>();
template std::span<double> Tensor::data<double>();
template std::span<const float> Tensor::data<float>() const;
template std::span<const double> Tensor::data<double>() const;

double Tensor::at(std::int64_t flat_index) const {
  if (flat_index < 0 || flat_index >= numel()) throw DimensionError("flat index out of range");
  return dispatch(dtype(), [&]<class T>() {
    return static_cast<double>(data<T>()[static_cast<std::size_t>(flat_index)]);
  });
}

double Tensor::item() const {
  if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape()));
  return at(0);
}

std::vector<double> Tensor::to_vector() const {
  std::vector<double> out(static_cast<std::size_t>(numel()));
  dispatch(dtype(), [&]<class T>() {
    auto d = data<T>();
    std::copy(d.begin(), d.end(), out.begin());
  });
  return out;
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::requires_grad_(bool flag) {
  if (!impl_) throw UsageError("use of an undefined tensor");
  if (impl_->grad_fn && !flag) throw UsageError("cannot clear requires_grad on a non-leaf tensor");
  impl_->requires_grad = flag;
  return *this;
}

bool Tensor::is_leaf() const { return impl_ && !impl_->grad_fn; }

Tensor Tensor::grad() const {
  if (!impl_ || !impl_->grad) return {};
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = impl_->shape;
  impl->dtype = impl_->dtype;
  impl->data = impl_->grad;
  return Tensor(std::move(impl));
}

void Tensor::zero_grad() {
  if (impl_) impl_->grad.reset();
}

Tensor Tensor::detach() const {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = shape();
  impl->dtype = impl_->dtype;
  impl->data = impl_->data;
  return Tensor(std::move(impl));
}

Tensor Tensor::clone() const {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = shape();
  impl->dtype = impl_->dtype;
  impl->data = std::make_shared<detail::Storage>(*impl_->data);
  return Tensor(std::move(impl));
}

Tensor Tensor::to(DType target) const {
  if (dtype() == target) return clone();
  Tensor out = zeros(shape(), target);
  dispatch(dtype(), [&]<class S>() {
    auto src = data<S>();
    dispatch(target, [&]<class D>() {
      auto dst = out.data<D>();
      for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<D>(src[i]);
    });
  });
  return out;
}

void Tensor::assign(const Tensor& values) {
  if (!is_leaf()) throw UsageError("assign() on a non-leaf tensor");
  if (values.shape() != shape())
    throw DimensionError("assign shape " + shape_str(values.shape()) + " into " +
                         shape_str(shape()));
  const Tensor v = values.dtype() == dtype() ? values : values.to(dtype());
  dispatch(dtype(), [&]<class T>() {
    auto src = v.data<T>();
    auto dst = data<T>();
    std::copy(src.begin(), src.end(), dst.begin());
  });
}

void Tensor::backward() const {
  if (!impl_) throw UsageError("backward() on an undefined tensor");
  if (numel() != 1)
    throw UsageError("backward() requires a scalar loss, got shape " + shape_str(shape()));
  if (!impl_->requires_grad) throw UsageError("backward() on a tensor that does not require grad");

  // Topological order over impls reachable through grad_fn links.
  std::vector<detail::TensorImpl*> order;
  std::unordered_set<detail::TensorImpl*> seen;
  std::vector<std::pair<detail::TensorImpl*, std::size_t>> stack;
  stack.emplace_back(impl_.get(), 0);
  seen.insert(impl_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (node->grad_fn && next < node->grad_fn->inputs.size()) {
      detail::TensorImpl* child = node->grad_fn->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Intermediate gradients live in a scratch map so that repeated backward
  // calls only accumulate into leaves.
  std::unordered_map<detail::TensorImpl*, detail::TensorImpl> scratch;
  auto grad_slot = [&](detail::TensorImpl* t) -> detail::TensorImpl& {
    if (!t->grad_fn) return *t;
    auto [it, inserted] = scratch.try_emplace(t);
    if (inserted) {
      it->second.shape = t->shape;
      it->second.dtype = t->dtype;
    }
    return it->second;
  };

  accumulate(grad_slot(impl_.get()), Tensor::ones(shape(), dtype()));

  NoGradGuard no_grad;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::TensorImpl* node = *it;
    if (!node->grad_fn) continue;
    auto found = scratch.find(node);
    if (found == scratch.end() || !found->second.grad) continue;
    auto gimpl = std::make_shared<detail::TensorImpl>();
    gimpl->shape = node->shape;
    gimpl->dtype = node->dtype;
    gimpl->data = found->second.grad;
    const Tensor gout(gimpl);
    std::vector<Tensor> gins = node->grad_fn->backward(gout);
    found->second.grad.reset();
    auto& inputs = node->grad_fn->inputs;
    for (std::size_t i = 0; i < inputs.size() && i < gins.size(); ++i) {
      if (!gins[i].defined() || !inputs[i]->requires_grad) continue;
      accumulate(grad_slot(inputs[i].get()), gins[i]);
    }
  }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

void attach_grad(Tensor& out, std::vector<Tensor> inputs,
                 std::function<std::vector<Tensor>(const Tensor&)> backward, const char* name) {
  if (!g_grad_enabled) return;
  const bool any = std::any_of(inputs.begin(), inputs.end(),
                               [](const Tensor& t) { return t.defined() && t.requires_grad(); });
  if (!any) return;
  auto node = std::make_shared<detail::Node>();
  for (auto& t : inputs) {
    if (t.defined())
      node->inputs.push_back(t.impl());
    else
      node->inputs.push_back(std::make_shared<detail::TensorImpl>());
  }
  node->backward = std::move(backward);
  node->name = name;
  out.impl()->grad_fn = std::move(node);
  out.impl()->requires_grad = true;
}

}  // namespace warpvos
