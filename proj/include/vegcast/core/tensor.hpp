#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace vegcast {

/// Raised when a caller breaks an operation's precondition (shapes, ranges, flags).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Raised for malformed or inconsistent on-disk artifacts.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool condition, const std::string& message) {
  if (!condition) throw ContractError(message);
}

using Shape = std::vector<int>;

inline std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major tensor with value semantics.
template <typename S>
class Tensor {
 public:
  using value_type = S;

  Tensor() = default;

  explicit Tensor(Shape shape, S fill = S(0)) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
    for (int d : shape_) require(d >= 0, "negative tensor dimension");
  }

  Tensor(Shape shape, std::vector<S> data) : shape_(std::move(shape)), data_(std::move(data)) {
    require(data_.size() == shape_size(shape_),
            "tensor data size " + std::to_string(data_.size()) + " does not match shape " + shape_string(shape_));
  }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i < 0 ? rank() + i : i)); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  S* data() { return data_.data(); }
  const S* data() const { return data_.data(); }
  std::span<S> values() { return data_; }
  std::span<const S> values() const { return data_; }
  std::vector<S>& storage() { return data_; }
  const std::vector<S>& storage() const { return data_; }

  S& operator[](std::size_t i) { return data_[i]; }
  const S& operator[](std::size_t i) const { return data_[i]; }

  template <typename... I>
  S& at(I... idx) {
    return data_[offset({static_cast<int>(idx)...})];
  }
  template <typename... I>
  const S& at(I... idx) const {
    return data_[offset({static_cast<int>(idx)...})];
  }

  void fill(S v) { std::fill(data_.begin(), data_.end(), v); }

  void reshape(Shape shape) {
    require(shape_size(shape) == data_.size(), "reshape " + shape_string(shape_) + " -> " + shape_string(shape));
    shape_ = std::move(shape);
  }

  Tensor reshaped(Shape shape) const {
    Tensor t = *this;
    t.reshape(std::move(shape));
    return t;
  }

  template <typename T>
  Tensor<T> cast() const {
    std::vector<T> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(), [](S v) { return static_cast<T>(v); });
    return Tensor<T>(shape_, std::move(out));
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

 private:
  std::size_t offset(std::initializer_list<int> idx) const {
    require(idx.size() == shape_.size(), "index rank mismatch");
    std::size_t off = 0;
    std::size_t k = 0;
    for (int i : idx) {
      off = off * static_cast<std::size_t>(shape_[k]) + static_cast<std::size_t>(i);
      ++k;
    }
    return off;
  }

  Shape shape_;
  std::vector<S> data_;
};

/// True when two tensors hold the same bytes (NaN payloads included).
template <typename S>
bool bit_equal(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape()) return false;
  return std::equal(a.values().begin(), a.values().end(), b.values().begin(), [](S x, S y) {
    return (std::isnan(x) && std::isnan(y)) || x == y;
  });
}

template <typename S>
S max_abs_diff(const Tensor<S>& a, const Tensor<S>& b) {
  require(a.shape() == b.shape(), "max_abs_diff shape mismatch");
  S m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, static_cast<S>(std::abs(a[i] - b[i])));
  return m;
}

}  // namespace vegcast
