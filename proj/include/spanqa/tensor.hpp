#pragma once

#include <algorithm>
#include <cstddef>
#include <initializer_list>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "spanqa/error.hpp"

namespace spanqa {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

// Dense row-major tensor. float for parameters and activations, double for
// the gradient-checking path.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0})
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}
  Tensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_numel(shape_)) {
      throw Error(ErrorKind::kShape, "tensor data length " +
                                         std::to_string(data_.size()) +
                                         " does not match shape " +
                                         shape_to_string(shape_));
    }
  }

  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::initializer_list<T> values) {
    return Tensor({rows, cols}, std::vector<T>(values));
  }
  static Tensor vector(std::initializer_list<T> values) {
    return Tensor({values.size()}, std::vector<T>(values));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  std::vector<T>& values() { return data_; }
  const std::vector<T>& values() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  // 2-D access, no bounds checks.
  T& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  const T& at(std::size_t r, std::size_t c) const {
    return data_[r * shape_[1] + c];
  }

  std::span<T> row(std::size_t r) {
    const std::size_t w = data_.size() / shape_[0];
    return std::span<T>(data_).subspan(r * w, w);
  }
  std::span<const T> row(std::size_t r) const {
    const std::size_t w = data_.size() / shape_[0];
    return std::span<const T>(data_).subspan(r * w, w);
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  bool operator==(const Tensor&) const = default;

 private:
  Shape shape_;
  std::vector<T> data_;
};

// Throws a kShape error naming both shapes when `ok` is false.
void require_shape(bool ok, const char* what, const Shape& a, const Shape& b);

template <typename T>
bool all_finite(const Tensor<T>& t);

// Named parameters with shape-matched gradient accumulators. std::map keeps
// iteration sorted by name.
template <typename T>
class ParamStore {
 public:
  using Map = std::map<std::string, Tensor<T>>;

  void add(const std::string& name, Tensor<T> value);
  bool contains(const std::string& name) const {
    return params_.count(name) != 0;
  }

  Tensor<T>& param(const std::string& name);
  const Tensor<T>& param(const std::string& name) const;
  Tensor<T>& grad(const std::string& name);
  const Tensor<T>& grad(const std::string& name) const;

  Map& params() { return params_; }
  const Map& params() const { return params_; }
  Map& grads() { return grads_; }
  const Map& grads() const { return grads_; }

  // Fresh zeroed accumulator map with the same names and shapes.
  Map zero_grads() const;
  void zero_grad();
  std::size_t num_parameters() const;
  std::vector<std::string> names() const;

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& [name, t] : params_) out.add(name, t.template cast<U>());
    return out;
  }

  bool operator==(const ParamStore& other) const {
    return params_ == other.params_;
  }

 private:
  Map params_;
  Map grads_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class ParamStore<float>;
extern template class ParamStore<double>;
extern template class Tensor<long double>;
extern template class ParamStore<long double>;

}  // namespace spanqa
