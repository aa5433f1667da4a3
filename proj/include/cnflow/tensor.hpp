#pragma once

#include <cmath>
#include <cstddef>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "cnflow/errors.hpp"

namespace cnflow {

/// Dense row-major array of doubles, rank 1 or 2. Data is immutable and
/// shared between copies; every operation allocates a fresh buffer.
/// A tensor may carry the id of the graph node that produced it (see
/// graph.hpp); detached tensors have node() == -1.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<std::size_t> shape) {
    return Tensor(std::move(shape), 0.0);
  }
  static Tensor ones(std::vector<std::size_t> shape) {
    return Tensor(std::move(shape), 1.0);
  }
  static Tensor full(std::vector<std::size_t> shape, double value) {
    return Tensor(std::move(shape), value);
  }
  static Tensor scalar(double value) { return Tensor({1}, value); }

  static Tensor from(std::vector<std::size_t> shape, std::vector<double> values) {
    Tensor t;
    t.shape_ = std::move(shape);
    if (t.shape_.empty() || t.shape_.size() > 2) {
      throw ShapeError("Tensor rank must be 1 or 2, got rank " +
                       std::to_string(t.shape_.size()));
    }
    std::size_t n = t.numel_from_shape();
    if (values.size() != n) {
      throw ShapeError("Tensor data length " + std::to_string(values.size()) +
                       " does not match shape product " + std::to_string(n));
    }
    t.data_ = std::make_shared<const std::vector<double>>(std::move(values));
    return t;
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_ ? data_->size() : 0; }
  bool empty() const { return size() == 0; }

  std::size_t rows() const { return shape_.empty() ? 0 : shape_[0]; }
  std::size_t cols() const {
    if (rank() != 2) throw ShapeError("cols() requires a rank-2 tensor");
    return shape_[1];
  }

  std::span<const double> data() const {
    static const std::vector<double> kEmpty;
    return data_ ? std::span<const double>(*data_) : std::span<const double>(kEmpty);
  }

  double at(std::size_t i) const { return (*data_)[i]; }
  double at(std::size_t r, std::size_t c) const { return (*data_)[r * shape_[1] + c]; }

  /// Value of a single-element tensor.
  double value() const {
    if (size() != 1) {
      throw ShapeError("value() requires a single-element tensor, size is " +
                       std::to_string(size()));
    }
    return (*data_)[0];
  }

  bool on_graph() const { return node_ >= 0; }
  int node() const { return node_; }
  const void* owner() const { return owner_; }

  /// Same data, no graph membership.
  Tensor detached() const {
    Tensor t = *this;
    t.node_ = -1;
    t.owner_ = nullptr;
    return t;
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  bool all_finite() const {
    if (!data_) return true;
    for (double v : *data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  std::vector<double> to_vector() const {
    return data_ ? *data_ : std::vector<double>{};
  }

 private:
  Tensor(std::vector<std::size_t> shape, double fill) : shape_(std::move(shape)) {
    if (shape_.empty() || shape_.size() > 2) {
      throw ShapeError("Tensor rank must be 1 or 2, got rank " +
                       std::to_string(shape_.size()));
    }
    data_ = std::make_shared<const std::vector<double>>(numel_from_shape(), fill);
  }

  std::size_t numel_from_shape() const {
    return std::accumulate(shape_.begin(), shape_.end(), std::size_t{1},
                           std::multiplies<>());
  }

  std::shared_ptr<const std::vector<double>> data_;
  std::vector<std::size_t> shape_;
  int node_ = -1;
  const void* owner_ = nullptr;

  friend struct detail_tensor_access;
};

struct detail_tensor_access {
  static Tensor make(std::vector<std::size_t> shape, std::vector<double> values) {
    return Tensor::from(std::move(shape), std::move(values));
  }
  static void set_node(Tensor& t, int node, const void* owner) {
    t.node_ = node;
    t.owner_ = owner;
  }
};

inline std::string shape_str(const Tensor& t) {
  std::string s = "(";
  for (std::size_t i = 0; i < t.shape().size(); ++i) {
    if (i) s += ",";
    s += std::to_string(t.shape()[i]);
  }
  return s + ")";
}

}  // namespace cnflow
