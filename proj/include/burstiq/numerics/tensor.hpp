#pragma once

#include <cstddef>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "burstiq/core/error.hpp"

namespace burstiq::numerics {

template <typename T>
struct TensorData {
  std::vector<std::size_t> shape;
  std::vector<T> values;
  std::vector<T> grad;  // empty until a backward pass populates it
  bool requires_grad = false;
  int tape_uses = 0;  // live tapes this tensor participates in
};

inline std::string shape_string(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ")";
  return os.str();
}

inline std::size_t shape_numel(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

// N-dimensional row-major array with value semantics over a shared buffer.
// Copies are shallow; gradients land in the shared buffer, so leaves handed
// to a network are the same objects the optimizer later reads.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape, bool requires_grad = false)
      : data_(std::make_shared<TensorData<T>>()) {
    validate_shape(shape);
    data_->shape = std::move(shape);
    data_->values.assign(shape_numel(data_->shape), T(0));
    data_->requires_grad = requires_grad;
  }

  Tensor(std::vector<std::size_t> shape, std::vector<T> values, bool requires_grad = false)
      : data_(std::make_shared<TensorData<T>>()) {
    validate_shape(shape);
    if (shape_numel(shape) != values.size())
      throw ShapeError("tensor: shape " + shape_string(shape) + " needs " +
                       std::to_string(shape_numel(shape)) + " values, got " +
                       std::to_string(values.size()));
    data_->shape = std::move(shape);
    data_->values = std::move(values);
    data_->requires_grad = requires_grad;
  }

  static Tensor scalar(T v, bool requires_grad = false) {
    return Tensor({1}, std::vector<T>{v}, requires_grad);
  }

  static Tensor full(std::vector<std::size_t> shape, T v) {
    Tensor t(std::move(shape));
    for (T& x : t.data_->values) x = v;
    return t;
  }

  bool defined() const { return data_ != nullptr; }

  const std::vector<std::size_t>& shape() const { return data_->shape; }
  std::size_t rank() const { return data_->shape.size(); }
  std::size_t size() const { return data_->values.size(); }
  std::size_t extent(std::size_t axis) const { return data_->shape.at(axis); }

  const std::vector<T>& values() const { return data_->values; }

  // Mutable access is denied while any live tape references this tensor;
  // rewriting saved forward values would corrupt the reverse pass.
  std::vector<T>& raw_values() {
    if (data_->tape_uses > 0)
      throw NumericError("tensor: in-place mutation while registered on a live tape");
    return data_->values;
  }

  bool requires_grad() const { return data_->requires_grad; }
  void set_requires_grad(bool rg) { data_->requires_grad = rg; }

  bool has_grad() const { return !data_->grad.empty(); }
  const std::vector<T>& grad() const {
    if (data_->grad.empty()) throw NumericError("tensor: gradient not populated");
    return data_->grad;
  }
  void clear_grad() { data_->grad.clear(); }

  T item() const {
    if (size() != 1)
      throw ShapeError("tensor: item() on non-scalar shape " + shape_string(shape()));
    return data_->values[0];
  }

  std::shared_ptr<TensorData<T>> impl() const { return data_; }

  bool same_storage(const Tensor& other) const { return data_ == other.data_; }

 private:
  static void validate_shape(const std::vector<std::size_t>& shape) {
    if (shape.empty()) throw ShapeError("tensor: rank-0 shapes are not supported");
    for (std::size_t i = 0; i < shape.size(); ++i)
      if (shape[i] == 0)
        throw ShapeError("tensor: axis " + std::to_string(i) + " has zero extent");
  }

  std::shared_ptr<TensorData<T>> data_;
};

}  // namespace burstiq::numerics
