#include "spanqa/loss_opt.hpp"

#include <cmath>
#include <string>

#include "spanqa/diffmath.hpp"

namespace spanqa {

template <typename T>
SpanLossResult<T> span_loss(const SpanLogits<T>& logits, std::size_t start_gold,
                            std::size_t end_gold) {
  auto s = diffmath::softmax_cross_entropy<T>(logits.start.data(), start_gold);
  auto e = diffmath::softmax_cross_entropy<T>(logits.end.data(), end_gold);
  SpanLossResult<T> out{T{0.5} * (s.loss + e.loss), {std::move(s.grad), std::move(e.grad)}};
  for (T& g : out.grad.start.data()) g *= T{0.5};
  for (T& g : out.grad.end.data()) g *= T{0.5};
  return out;
}

template SpanLossResult<float> span_loss(const SpanLogits<float>&, std::size_t, std::size_t);
template SpanLossResult<double> span_loss(const SpanLogits<double>&, std::size_t, std::size_t);
template SpanLossResult<long double> span_loss(const SpanLogits<long double>&, std::size_t,
                                                std::size_t);

double lr_schedule(double step, double total_steps, double warmup_fraction,
                   double base_lr) {
  if (total_steps <= 0.0) return base_lr;
  const double warmup = warmup_fraction * total_steps;
  if (step < warmup) return base_lr * step / warmup;
  if (total_steps <= warmup) return base_lr;
  const double remaining = (total_steps - step) / (total_steps - warmup);
  return base_lr * std::max(0.0, remaining);
}

AdamState make_adam_state(const ParamStore<float>& params, const AdamConfig& config) {
  AdamState s;
  s.config = config;
  s.first_moment = params.zero_grads();
  s.second_moment = params.zero_grads();
  return s;
}

namespace {

bool is_bias(const std::string& name) {
  return name.size() >= 4 && name.compare(name.size() - 4, 4, "bias") == 0;
}

}  // namespace

double adam_update(ParamStore<float>& params, const ParamStore<float>::Map& grads,
                   AdamState& state) {
  const AdamConfig& cfg = state.config;
  double sq_norm = 0.0;
  for (const auto& [name, p] : params.params()) {
    auto it = grads.find(name);
    if (it == grads.end()) {
      throw Error(ErrorKind::kConfig, "adam: no gradient for '" + name + "'");
    }
    require_shape(it->second.shape() == p.shape(), ("adam gradient " + name).c_str(),
                  it->second.shape(), p.shape());
    for (float g : it->second.data()) {
      if (!std::isfinite(g)) {
        throw Error(ErrorKind::kNumeric, "adam: non-finite gradient in '" + name + "'");
      }
      sq_norm += static_cast<double>(g) * g;
    }
  }
  double scale = 1.0;
  if (cfg.clip_norm > 0.0) {
    const double norm = std::sqrt(sq_norm);
    if (norm > cfg.clip_norm) scale = cfg.clip_norm / norm;
  }

  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double lr = lr_schedule(t, static_cast<double>(cfg.total_steps),
                                cfg.warmup_fraction, cfg.learning_rate);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);

  for (auto& [name, p] : params.params()) {
    const Tensor<float>& g = grads.at(name);
    Tensor<float>& m = state.first_moment.at(name);
    Tensor<float>& v = state.second_moment.at(name);
    const bool decay = cfg.weight_decay > 0.0 && !is_bias(name);
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = static_cast<double>(g[i]) * scale;
      const double mi = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
      const double vi = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      double update = (mi / c1) / (std::sqrt(vi / c2) + cfg.epsilon);
      if (decay) update += cfg.weight_decay * p[i];
      p[i] = static_cast<float>(p[i] - lr * update);
    }
  }
  return lr;
}

}  // namespace spanqa
