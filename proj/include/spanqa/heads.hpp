#pragma once

// Span-prediction heads. Each maps an L x H embedded sequence to start and
// end logits of length L.
//
// Only the first `valid_len` rows of the input are read. Rows past it are
// zero by construction of EmbeddedSequence, so running the convolutions on
// the valid prefix alone is the same computation as zero padding, and the
// logits at padded positions are pinned to kMaskedLogit.

#include <cstddef>
#include <cstdint>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "spanqa/tensor.hpp"

namespace spanqa {

inline constexpr double kMaskedLogit = -1e4;

enum class HeadVariant { kFullyConnected, kBasicCnn, kContextCnn, kLstm };

std::string_view head_variant_name(HeadVariant v);  // "fc", "cnn", ...
HeadVariant parse_head_variant(std::string_view name);

struct HeadConfig {
  HeadVariant variant = HeadVariant::kContextCnn;
  std::size_t hidden_size = 64;
  std::vector<std::size_t> kernel_widths{3, 5, 7};
  std::size_t filters_per_kernel = 64;
  std::size_t lstm_hidden = 256;
  std::size_t context_channels = 16;
  std::size_t generator_width = 5;
  std::size_t applied_width = 5;
  double dropout_keep_prob = 0.9;

  // Throws ErrorKind::kConfig naming the offending field.
  void validate() const;

  // Architecture fields only (dropout does not change the parameters).
  std::string canonical() const;
  std::uint64_t digest() const;
};

// Closed-form parameter counts:
//   fc      2H + 2
//   cnn     sum_w (w*H*F + F) + 2*F*|widths| + 2
//   ctx-cnn wg*H*(C*wa*H) + C*wa*H + C + 2C + 2
//   lstm    4*((H + D)*D + D) + 2D + 2
std::size_t expected_parameter_count(const HeadConfig& config);

template <typename T>
struct SpanLogits {
  Tensor<T> start;
  Tensor<T> end;
};

struct DropoutSpec {
  double keep_prob = 1.0;
  std::uint64_t seed = 0;
};

// Per-pass activations kept for the reverse pass.
struct HeadTape {
  virtual ~HeadTape() = default;
  std::size_t valid_len = 0;
};

template <typename T>
class HeadModel {
 public:
  explicit HeadModel(HeadConfig config) : config_(std::move(config)) {}
  virtual ~HeadModel() = default;

  const HeadConfig& config() const { return config_; }

  // Deterministic in `seed`. Weights are Glorot-uniform, biases zero, LSTM
  // forget-gate bias 1.
  ParamStore<T> init_params(std::uint64_t seed) const;

  // `tape` may be null for inference.
  SpanLogits<T> forward(const ParamStore<T>& params, const Tensor<T>& x,
                        std::size_t valid_len, const DropoutSpec& dropout = {},
                        std::unique_ptr<HeadTape>* tape = nullptr) const;

  // Accumulates parameter gradients for upstream dlogits into `grads`.
  // Gradients at masked positions are ignored.
  void backward(const ParamStore<T>& params, const HeadTape& tape,
                const SpanLogits<T>& dlogits,
                typename ParamStore<T>::Map& grads) const;

 protected:
  struct ParamSpec {
    std::string name;
    Shape shape;
    double fan_in;   // 0 for biases
    double fan_out;
    double fill;     // bias fill value
  };
  virtual std::vector<ParamSpec> param_specs() const = 0;
  virtual void finish_init(ParamStore<T>& /*store*/) const {}

  // Returns per-token logits as a valid_len x 2 matrix.
  virtual Tensor<T> forward_valid(const ParamStore<T>& params,
                                  const Tensor<T>& x, const DropoutSpec& dropout,
                                  std::unique_ptr<HeadTape>* tape) const = 0;

  // d_per_token is valid_len x 2.
  virtual void backward_valid(const ParamStore<T>& params, const HeadTape& tape,
                              const Tensor<T>& d_per_token,
                              typename ParamStore<T>::Map& grads) const = 0;

 private:
  HeadConfig config_;
};

template <typename T>
std::unique_ptr<HeadModel<T>> make_head(const HeadConfig& config);

struct HeadBundle {
  std::unique_ptr<HeadModel<float>> model;
  ParamStore<float> params;
};

// Validates `config`, then builds the model and its initial parameters.
HeadBundle build_head(const HeadConfig& config, std::uint64_t seed);

// Filters produced by the context-CNN generator stage for one sequence,
// shaped C x applied_width x H.
template <typename T>
Tensor<T> generated_filters(const HeadConfig& config, const ParamStore<T>& params,
                            const Tensor<T>& x, std::size_t valid_len);

// Splits a valid_len x 2 logit matrix into start/end vectors of length
// `total_len`, masking positions >= valid_len.
template <typename T>
SpanLogits<T> masked_span_logits(const Tensor<T>& per_token, std::size_t total_len);

extern template class HeadModel<float>;
extern template class HeadModel<double>;
extern template class HeadModel<long double>;

}  // namespace spanqa
