#include "spanqa/tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

namespace spanqa {

std::string_view error_kind_name(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kShape: return "shape";
    case ErrorKind::kConfig: return "config";
    case ErrorKind::kRange: return "range";
    case ErrorKind::kNumeric: return "numeric";
    case ErrorKind::kParse: return "parse";
    case ErrorKind::kFormat: return "format";
    case ErrorKind::kIo: return "io";
    case ErrorKind::kMismatch: return "mismatch";
  }
  return "unknown";
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

void require_shape(bool ok, const char* what, const Shape& a, const Shape& b) {
  if (!ok) {
    throw Error(ErrorKind::kShape, std::string(what) + ": shape mismatch " +
                                       shape_to_string(a) + " vs " +
                                       shape_to_string(b));
  }
}

template <typename T>
bool all_finite(const Tensor<T>& t) {
  for (T v : t.data()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

template <typename T>
void ParamStore<T>::add(const std::string& name, Tensor<T> value) {
  if (params_.count(name)) {
    throw Error(ErrorKind::kConfig, "duplicate parameter name '" + name + "'");
  }
  grads_.emplace(name, Tensor<T>(value.shape()));
  params_.emplace(name, std::move(value));
}

template <typename T>
Tensor<T>& ParamStore<T>::param(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) {
    throw Error(ErrorKind::kConfig, "unknown parameter '" + name + "'");
  }
  return it->second;
}

template <typename T>
const Tensor<T>& ParamStore<T>::param(const std::string& name) const {
  return const_cast<ParamStore*>(this)->param(name);
}

template <typename T>
Tensor<T>& ParamStore<T>::grad(const std::string& name) {
  auto it = grads_.find(name);
  if (it == grads_.end()) {
    throw Error(ErrorKind::kConfig, "unknown parameter '" + name + "'");
  }
  return it->second;
}

template <typename T>
const Tensor<T>& ParamStore<T>::grad(const std::string& name) const {
  return const_cast<ParamStore*>(this)->grad(name);
}

template <typename T>
typename ParamStore<T>::Map ParamStore<T>::zero_grads() const {
  Map out;
  for (const auto& [name, t] : params_) out.emplace(name, Tensor<T>(t.shape()));
  return out;
}

template <typename T>
void ParamStore<T>::zero_grad() {
  for (auto& [name, g] : grads_) g.fill(T{0});
}

template <typename T>
std::size_t ParamStore<T>::num_parameters() const {
  std::size_t n = 0;
  for (const auto& [name, t] : params_) n += t.size();
  return n;
}

template <typename T>
std::vector<std::string> ParamStore<T>::names() const {
  std::vector<std::string> out;
  out.reserve(params_.size());
  for (const auto& [name, t] : params_) out.push_back(name);
  return out;
}

template class Tensor<float>;
template class Tensor<double>;
template class ParamStore<float>;
template class ParamStore<double>;
template class Tensor<long double>;
template class ParamStore<long double>;
template bool all_finite(const Tensor<float>&);
template bool all_finite(const Tensor<double>&);
template bool all_finite(const Tensor<long double>&);

}  // namespace spanqa
