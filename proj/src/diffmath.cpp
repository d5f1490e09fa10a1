#include "spanqa/diffmath.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "spanqa/random.hpp"

namespace spanqa::diffmath {

namespace {

template <typename T>
void require_rank(const Tensor<T>& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    throw Error(ErrorKind::kShape, std::string(what) + ": expected rank " +
                                       std::to_string(rank) + ", got shape " +
                                       shape_to_string(t.shape()));
  }
}

template <typename T>
void require_same(const Tensor<T>* a, const Tensor<T>& b, const char* what) {
  if (a != nullptr) require_shape(a->shape() == b.shape(), what, a->shape(), b.shape());
}

}  // namespace

template <typename T>
Tensor<T> affine(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  require_rank(x, 2, "affine input");
  require_rank(w, 2, "affine weight");
  require_shape(x.dim(1) == w.dim(0), "affine x*W", x.shape(), w.shape());
  require_shape(b.size() == w.dim(1), "affine bias", b.shape(), w.shape());
  const std::size_t rows = x.dim(0), inner = w.dim(0), cols = w.dim(1);
  Tensor<T> out({rows, cols});
  for (std::size_t l = 0; l < rows; ++l) {
    T* o = &out.at(l, 0);
    for (std::size_t k = 0; k < cols; ++k) o[k] = b[k];
    for (std::size_t h = 0; h < inner; ++h) {
      const T xv = x.at(l, h);
      const T* wr = &w.at(h, 0);
      for (std::size_t k = 0; k < cols; ++k) o[k] += xv * wr[k];
    }
  }
  return out;
}

template <typename T>
void affine_backward(const Tensor<T>& x, const Tensor<T>& w,
                     const Tensor<T>& dout, Tensor<T>* dx, Tensor<T>* dw,
                     Tensor<T>* db) {
  const std::size_t rows = x.dim(0), inner = w.dim(0), cols = w.dim(1);
  require_shape(dout.rank() == 2 && dout.dim(0) == rows && dout.dim(1) == cols,
                "affine upstream", dout.shape(), Shape{rows, cols});
  require_same(dx, x, "affine dx");
  require_same(dw, w, "affine dW");
  for (std::size_t l = 0; l < rows; ++l) {
    const T* g = &dout.at(l, 0);
    if (db != nullptr) {
      for (std::size_t k = 0; k < cols; ++k) (*db)[k] += g[k];
    }
    for (std::size_t h = 0; h < inner; ++h) {
      const T* wr = &w.at(h, 0);
      if (dw != nullptr) {
        const T xv = x.at(l, h);
        T* dwr = &dw->at(h, 0);
        for (std::size_t k = 0; k < cols; ++k) dwr[k] += xv * g[k];
      }
      if (dx != nullptr) {
        T acc = 0;
        for (std::size_t k = 0; k < cols; ++k) acc += wr[k] * g[k];
        dx->at(l, h) += acc;
      }
    }
  }
}

template <typename T>
Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& kernel,
                 const Tensor<T>& bias) {
  require_rank(x, 2, "conv1d input");
  require_rank(kernel, 3, "conv1d kernel");
  const std::size_t len = x.dim(0), hidden = x.dim(1);
  const std::size_t width = kernel.dim(0), filters = kernel.dim(2);
  if (width < 1) throw Error(ErrorKind::kConfig, "conv1d kernel width must be >= 1");
  require_shape(kernel.dim(1) == hidden, "conv1d input/kernel", x.shape(), kernel.shape());
  require_shape(bias.size() == filters, "conv1d bias", bias.shape(), kernel.shape());

  const auto pad = same_padding(width);
  Tensor<T> out({len, filters});
  const T* kd = kernel.data().data();
  for (std::size_t l = 0; l < len; ++l) {
    T* o = &out.at(l, 0);
    for (std::size_t f = 0; f < filters; ++f) o[f] = bias[f];
    for (std::size_t i = 0; i < width; ++i) {
      const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(l + i) -
                                 static_cast<std::ptrdiff_t>(pad.left);
      if (src < 0 || src >= static_cast<std::ptrdiff_t>(len)) continue;
      const T* xr = &x.at(static_cast<std::size_t>(src), 0);
      for (std::size_t h = 0; h < hidden; ++h) {
        const T xv = xr[h];
        const T* kr = kd + (i * hidden + h) * filters;
        for (std::size_t f = 0; f < filters; ++f) o[f] += xv * kr[f];
      }
    }
  }
  return out;
}

template <typename T>
void conv1d_backward(const Tensor<T>& x, const Tensor<T>& kernel,
                     const Tensor<T>& dout, Tensor<T>* dx, Tensor<T>* dkernel,
                     Tensor<T>* dbias) {
  const std::size_t len = x.dim(0), hidden = x.dim(1);
  const std::size_t width = kernel.dim(0), filters = kernel.dim(2);
  require_shape(dout.rank() == 2 && dout.dim(0) == len && dout.dim(1) == filters,
                "conv1d upstream", dout.shape(), Shape{len, filters});
  require_same(dx, x, "conv1d dx");
  require_same(dkernel, kernel, "conv1d dkernel");

  const auto pad = same_padding(width);
  const T* kd = kernel.data().data();
  for (std::size_t l = 0; l < len; ++l) {
    const T* g = &dout.at(l, 0);
    if (dbias != nullptr) {
      for (std::size_t f = 0; f < filters; ++f) (*dbias)[f] += g[f];
    }
    for (std::size_t i = 0; i < width; ++i) {
      const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(l + i) -
                                 static_cast<std::ptrdiff_t>(pad.left);
      if (src < 0 || src >= static_cast<std::ptrdiff_t>(len)) continue;
      const auto s = static_cast<std::size_t>(src);
      const T* xr = &x.at(s, 0);
      for (std::size_t h = 0; h < hidden; ++h) {
        const std::size_t off = (i * hidden + h) * filters;
        if (dkernel != nullptr) {
          const T xv = xr[h];
          T* dk = dkernel->data().data() + off;
          for (std::size_t f = 0; f < filters; ++f) dk[f] += xv * g[f];
        }
        if (dx != nullptr) {
          const T* kr = kd + off;
          T acc = 0;
          for (std::size_t f = 0; f < filters; ++f) acc += kr[f] * g[f];
          dx->at(s, h) += acc;
        }
      }
    }
  }
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out = x;
  for (T& v : out.data()) v = v > T{0} ? v : T{0};
  return out;
}

template <typename T>
void relu_backward(const Tensor<T>& out, Tensor<T>& dout) {
  require_shape(out.shape() == dout.shape(), "relu upstream", out.shape(), dout.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!(out[i] > T{0})) dout[i] = T{0};
  }
}

template <typename T>
T sigmoid(T v) {
  if (v >= T{0}) return T{1} / (T{1} + std::exp(-v));
  const T e = std::exp(v);
  return e / (T{1} + e);
}

template <typename T>
LstmStep<T> lstm_cell(std::span<const T> x, std::span<const T> h_prev,
                      std::span<const T> c_prev, const Tensor<T>& w,
                      const Tensor<T>& b) {
  const std::size_t in = x.size(), d = h_prev.size();
  require_rank(w, 2, "lstm weight");
  require_shape(w.dim(0) == in + d && w.dim(1) == 4 * d, "lstm weight",
                w.shape(), Shape{in + d, 4 * d});
  require_shape(b.size() == 4 * d, "lstm bias", b.shape(), Shape{4 * d});
  require_shape(c_prev.size() == d, "lstm cell state", Shape{c_prev.size()}, Shape{d});

  LstmStep<T> s;
  s.x = Tensor<T>({in}, std::vector<T>(x.begin(), x.end()));
  s.h_prev = Tensor<T>({d}, std::vector<T>(h_prev.begin(), h_prev.end()));
  s.c_prev = Tensor<T>({d}, std::vector<T>(c_prev.begin(), c_prev.end()));

  std::vector<T> z(b.values());
  for (std::size_t r = 0; r < in + d; ++r) {
    const T v = r < in ? x[r] : h_prev[r - in];
    const T* wr = &w.at(r, 0);
    for (std::size_t k = 0; k < 4 * d; ++k) z[k] += v * wr[k];
  }
  s.i = Tensor<T>({d});
  s.f = Tensor<T>({d});
  s.g = Tensor<T>({d});
  s.o = Tensor<T>({d});
  s.c = Tensor<T>({d});
  s.tanh_c = Tensor<T>({d});
  s.h = Tensor<T>({d});
  for (std::size_t k = 0; k < d; ++k) {
    s.i[k] = sigmoid(z[LstmGate::kInput * d + k]);
    s.f[k] = sigmoid(z[LstmGate::kForget * d + k]);
    s.g[k] = std::tanh(z[LstmGate::kCandidate * d + k]);
    s.o[k] = sigmoid(z[LstmGate::kOutput * d + k]);
    s.c[k] = s.f[k] * c_prev[k] + s.i[k] * s.g[k];
    s.tanh_c[k] = std::tanh(s.c[k]);
    s.h[k] = s.o[k] * s.tanh_c[k];
  }
  return s;
}

template <typename T>
void lstm_cell_backward(const LstmStep<T>& s, const Tensor<T>& w,
                        std::span<const T> dh, std::span<const T> dc,
                        Tensor<T>* dx, Tensor<T>* dh_prev, Tensor<T>* dc_prev,
                        Tensor<T>* dw, Tensor<T>* db) {
  const std::size_t in = s.x.size(), d = s.h.size();
  require_shape(dh.size() == d && dc.size() == d, "lstm upstream",
                Shape{dh.size()}, Shape{d});
  std::vector<T> dz(4 * d);
  for (std::size_t k = 0; k < d; ++k) {
    const T d_o = dh[k] * s.tanh_c[k];
    const T d_c = dc[k] + dh[k] * s.o[k] * (T{1} - s.tanh_c[k] * s.tanh_c[k]);
    const T d_f = d_c * s.c_prev[k];
    const T d_i = d_c * s.g[k];
    const T d_g = d_c * s.i[k];
    if (dc_prev != nullptr) (*dc_prev)[k] += d_c * s.f[k];
    dz[LstmGate::kInput * d + k] = d_i * s.i[k] * (T{1} - s.i[k]);
    dz[LstmGate::kForget * d + k] = d_f * s.f[k] * (T{1} - s.f[k]);
    dz[LstmGate::kCandidate * d + k] = d_g * (T{1} - s.g[k] * s.g[k]);
    dz[LstmGate::kOutput * d + k] = d_o * s.o[k] * (T{1} - s.o[k]);
  }
  if (db != nullptr) {
    for (std::size_t k = 0; k < 4 * d; ++k) (*db)[k] += dz[k];
  }
  for (std::size_t r = 0; r < in + d; ++r) {
    const T v = r < in ? s.x[r] : s.h_prev[r - in];
    const T* wr = &w.at(r, 0);
    if (dw != nullptr) {
      T* dwr = &dw->at(r, 0);
      for (std::size_t k = 0; k < 4 * d; ++k) dwr[k] += v * dz[k];
    }
    Tensor<T>* target = r < in ? dx : dh_prev;
    if (target != nullptr) {
      T acc = 0;
      for (std::size_t k = 0; k < 4 * d; ++k) acc += wr[k] * dz[k];
      (*target)[r < in ? r : r - in] += acc;
    }
  }
}

template <typename T>
Tensor<T> softmax(std::span<const T> logits) {
  Tensor<T> p({logits.size()});
  if (logits.empty()) return p;
  const T mx = *std::max_element(logits.begin(), logits.end());
  T sum = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - mx);
    sum += p[i];
  }
  for (T& v : p.data()) v /= sum;
  return p;
}

template <typename T>
CrossEntropy<T> softmax_cross_entropy(std::span<const T> logits,
                                      std::size_t target) {
  if (target >= logits.size()) {
    throw Error(ErrorKind::kRange, "cross-entropy target " +
                                       std::to_string(target) +
                                       " out of range for length " +
                                       std::to_string(logits.size()));
  }
  const T mx = *std::max_element(logits.begin(), logits.end());
  T sum = 0;
  for (T v : logits) sum += std::exp(v - mx);
  const T log_z = mx + std::log(sum);
  CrossEntropy<T> out{log_z - logits[target], Tensor<T>({logits.size()})};
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out.grad[i] = std::exp(logits[i] - log_z);
  }
  out.grad[target] -= T{1};
  return out;
}

template <typename T>
DropoutResult<T> dropout(const Tensor<T>& x, double keep_prob,
                         std::uint64_t seed) {
  if (!(keep_prob > 0.0 && keep_prob <= 1.0)) {
    throw Error(ErrorKind::kConfig, "dropout keep_prob must be in (0, 1]");
  }
  DropoutResult<T> r{x, Tensor<T>(x.shape(), T{1})};
  if (keep_prob == 1.0) return r;
  SplitMix64 rng(seed);
  const T scale = static_cast<T>(1.0 / keep_prob);
  for (std::size_t i = 0; i < x.size(); ++i) {
    r.mask[i] = rng.uniform() < keep_prob ? scale : T{0};
    r.out[i] *= r.mask[i];
  }
  return r;
}

#define SPANQA_INSTANTIATE(T)                                                  \
  template Tensor<T> affine(const Tensor<T>&, const Tensor<T>&,                \
                            const Tensor<T>&);                                 \
  template void affine_backward(const Tensor<T>&, const Tensor<T>&,            \
                                const Tensor<T>&, Tensor<T>*, Tensor<T>*,      \
                                Tensor<T>*);                                   \
  template Tensor<T> conv1d(const Tensor<T>&, const Tensor<T>&,                \
                            const Tensor<T>&);                                 \
  template void conv1d_backward(const Tensor<T>&, const Tensor<T>&,            \
                                const Tensor<T>&, Tensor<T>*, Tensor<T>*,      \
                                Tensor<T>*);                                   \
  template Tensor<T> relu(const Tensor<T>&);                                   \
  template void relu_backward(const Tensor<T>&, Tensor<T>&);                   \
  template T sigmoid(T);                                                       \
  template LstmStep<T> lstm_cell(std::span<const T>, std::span<const T>,       \
                                 std::span<const T>, const Tensor<T>&,         \
                                 const Tensor<T>&);                            \
  template void lstm_cell_backward(const LstmStep<T>&, const Tensor<T>&,       \
                                   std::span<const T>, std::span<const T>,     \
                                   Tensor<T>*, Tensor<T>*, Tensor<T>*,         \
                                   Tensor<T>*, Tensor<T>*);                    \
  template Tensor<T> softmax(std::span<const T>);                              \
  template CrossEntropy<T> softmax_cross_entropy(std::span<const T>,           \
                                                 std::size_t);                 \
  template DropoutResult<T> dropout(const Tensor<T>&, double, std::uint64_t);

SPANQA_INSTANTIATE(float)
SPANQA_INSTANTIATE(double)
SPANQA_INSTANTIATE(long double)

#undef SPANQA_INSTANTIATE

}  // namespace spanqa::diffmath
