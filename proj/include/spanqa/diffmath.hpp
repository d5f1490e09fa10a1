#pragma once

// Differentiable primitives with hand-written reverse passes.
//
// Every forward function is pure. Every *_backward function takes the
// upstream gradient and ACCUMULATES into parameter gradients (dw, db, ...),
// while input gradients (dx) are accumulated too, so callers zero them once
// per pass. Null pointers skip a gradient that is not needed.

#include <cstddef>
#include <cstdint>
#include <span>
#include <utility>

#include "spanqa/tensor.hpp"

namespace spanqa::diffmath {

// out[l,k] = sum_h x[l,h] * w[h,k] + b[k]
template <typename T>
Tensor<T> affine(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

template <typename T>
void affine_backward(const Tensor<T>& x, const Tensor<T>& w,
                     const Tensor<T>& dout, Tensor<T>* dx, Tensor<T>* dw,
                     Tensor<T>* db);

// "Same" padding for a width-w cross-correlation.
struct ConvPadding {
  std::size_t left;
  std::size_t right;
};
constexpr ConvPadding same_padding(std::size_t width) {
  return {(width - 1) / 2, width / 2};
}

// Cross-correlation with zero "same" padding.
//   x: L x H, kernel: w x H x F, bias: F  ->  L x F
// out[l,f] = sum_{i,h} xpad[l+i,h] * kernel[i,h,f] + bias[f]
template <typename T>
Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& kernel,
                 const Tensor<T>& bias);

template <typename T>
void conv1d_backward(const Tensor<T>& x, const Tensor<T>& kernel,
                     const Tensor<T>& dout, Tensor<T>* dx, Tensor<T>* dkernel,
                     Tensor<T>* dbias);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);

// Zeroes dout where the ReLU output was not positive.
template <typename T>
void relu_backward(const Tensor<T>& out, Tensor<T>& dout);

template <typename T>
T sigmoid(T v);

// LSTM cell over the concatenated input [x_t; h_prev].
//   w: (H + D) x 4D with gate column blocks [input | forget | candidate | output]
//   b: 4D
struct LstmGate {
  static constexpr std::size_t kInput = 0;
  static constexpr std::size_t kForget = 1;
  static constexpr std::size_t kCandidate = 2;
  static constexpr std::size_t kOutput = 3;
};

// Everything the reverse pass needs from one step.
template <typename T>
struct LstmStep {
  Tensor<T> x, h_prev, c_prev;
  Tensor<T> i, f, g, o;
  Tensor<T> c, tanh_c, h;
};

template <typename T>
LstmStep<T> lstm_cell(std::span<const T> x, std::span<const T> h_prev,
                      std::span<const T> c_prev, const Tensor<T>& w,
                      const Tensor<T>& b);

// dh, dc: gradients w.r.t. the step's h_t and c_t outputs.
template <typename T>
void lstm_cell_backward(const LstmStep<T>& step, const Tensor<T>& w,
                        std::span<const T> dh, std::span<const T> dc,
                        Tensor<T>* dx, Tensor<T>* dh_prev, Tensor<T>* dc_prev,
                        Tensor<T>* dw, Tensor<T>* db);

template <typename T>
Tensor<T> softmax(std::span<const T> logits);

template <typename T>
struct CrossEntropy {
  T loss;
  Tensor<T> grad;  // softmax(logits) - onehot(target)
};

// -log softmax(logits)[target], computed with max subtraction.
template <typename T>
CrossEntropy<T> softmax_cross_entropy(std::span<const T> logits,
                                      std::size_t target);

// Inverted dropout: kept entries are scaled by 1/keep_prob so the
// expectation over masks equals the input. The mask holds 0 or 1/keep_prob.
template <typename T>
struct DropoutResult {
  Tensor<T> out;
  Tensor<T> mask;
};

template <typename T>
DropoutResult<T> dropout(const Tensor<T>& x, double keep_prob,
                         std::uint64_t seed);

}  // namespace spanqa::diffmath
