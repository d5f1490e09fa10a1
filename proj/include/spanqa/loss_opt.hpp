#pragma once

#include <cstddef>

#include "spanqa/heads.hpp"
#include "spanqa/tensor.hpp"

namespace spanqa {

template <typename T>
struct SpanLossResult {
  T loss;
  SpanLogits<T> grad;
};

// Mean of the start and end cross-entropies. Unanswerable examples use
// index 0 (the CLS slot) for both.
template <typename T>
SpanLossResult<T> span_loss(const SpanLogits<T>& logits, std::size_t start_gold,
                            std::size_t end_gold);

// Linear warmup from 0 to base_lr over warmup_fraction * total_steps, then
// linear decay to 0 at total_steps. total_steps == 0 means a constant
// base_lr.
double lr_schedule(double step, double total_steps, double warmup_fraction,
                   double base_lr);

struct AdamConfig {
  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-6;
  double warmup_fraction = 0.1;
  std::size_t total_steps = 0;
  // Decoupled weight decay on non-bias parameters. 0 disables.
  double weight_decay = 0.0;
  // Global-norm gradient clipping. 0 disables.
  double clip_norm = 0.0;
};

struct AdamState {
  AdamConfig config;
  std::size_t step = 0;
  ParamStore<float>::Map first_moment;
  ParamStore<float>::Map second_moment;
};

AdamState make_adam_state(const ParamStore<float>& params, const AdamConfig& config);

// One bias-corrected Adam step. The learning rate is
// lr_schedule(step + 1, ...). A non-finite gradient aborts before anything
// is modified. Returns the learning rate applied.
double adam_update(ParamStore<float>& params, const ParamStore<float>::Map& grads,
                   AdamState& state);

}  // namespace spanqa
