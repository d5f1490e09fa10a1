#include "spanqa/heads.hpp"

#include <cmath>
#include <limits>
#include <sstream>

#include "spanqa/diffmath.hpp"
#include "spanqa/random.hpp"

namespace spanqa {

namespace dm = diffmath;

std::string_view head_variant_name(HeadVariant v) {
  switch (v) {
    case HeadVariant::kFullyConnected: return "fc";
    case HeadVariant::kBasicCnn: return "cnn";
    case HeadVariant::kContextCnn: return "ctx-cnn";
    case HeadVariant::kLstm: return "lstm";
  }
  return "?";
}

HeadVariant parse_head_variant(std::string_view name) {
  if (name == "fc") return HeadVariant::kFullyConnected;
  if (name == "cnn") return HeadVariant::kBasicCnn;
  if (name == "ctx-cnn") return HeadVariant::kContextCnn;
  if (name == "lstm") return HeadVariant::kLstm;
  throw Error(ErrorKind::kConfig,
              "head: unknown variant '" + std::string(name) +
                  "' (expected fc, cnn, ctx-cnn or lstm)");
}

void HeadConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw Error(ErrorKind::kConfig, "head config field '" + field + "' " + why);
  };
  if (hidden_size < 1) fail("hidden_size", "must be >= 1");
  if (!(dropout_keep_prob > 0.0 && dropout_keep_prob <= 1.0)) {
    fail("dropout_keep_prob", "must be in (0, 1]");
  }
  switch (variant) {
    case HeadVariant::kFullyConnected:
      break;
    case HeadVariant::kBasicCnn:
      if (kernel_widths.empty()) fail("kernel_widths", "must be non-empty");
      for (auto w : kernel_widths) {
        if (w < 1) fail("kernel_widths", "entries must be >= 1");
      }
      if (filters_per_kernel < 1) fail("filters_per_kernel", "must be >= 1");
      break;
    case HeadVariant::kContextCnn:
      if (context_channels < 1) fail("context_channels", "must be >= 1");
      if (generator_width < 1) fail("generator_width", "must be >= 1");
      if (applied_width < 1) fail("applied_width", "must be >= 1");
      break;
    case HeadVariant::kLstm:
      if (lstm_hidden < 1) fail("lstm_hidden", "must be >= 1");
      break;
  }
}

std::string HeadConfig::canonical() const {
  std::ostringstream os;
  os << "variant=" << head_variant_name(variant) << ";H=" << hidden_size;
  switch (variant) {
    case HeadVariant::kFullyConnected:
      break;
    case HeadVariant::kBasicCnn:
      os << ";widths=";
      for (std::size_t i = 0; i < kernel_widths.size(); ++i) {
        os << (i ? "," : "") << kernel_widths[i];
      }
      os << ";F=" << filters_per_kernel;
      break;
    case HeadVariant::kContextCnn:
      os << ";C=" << context_channels << ";wg=" << generator_width
         << ";wa=" << applied_width;
      break;
    case HeadVariant::kLstm:
      os << ";D=" << lstm_hidden;
      break;
  }
  return os.str();
}

std::uint64_t HeadConfig::digest() const { return fnv1a64(canonical()); }

std::size_t expected_parameter_count(const HeadConfig& c) {
  const std::size_t h = c.hidden_size;
  switch (c.variant) {
    case HeadVariant::kFullyConnected:
      return 2 * h + 2;
    case HeadVariant::kBasicCnn: {
      std::size_t n = 0;
      for (auto w : c.kernel_widths) n += w * h * c.filters_per_kernel + c.filters_per_kernel;
      return n + 2 * c.filters_per_kernel * c.kernel_widths.size() + 2;
    }
    case HeadVariant::kContextCnn: {
      const std::size_t cols = c.context_channels * c.applied_width * h;
      return c.generator_width * h * cols + cols + c.context_channels +
             2 * c.context_channels + 2;
    }
    case HeadVariant::kLstm: {
      const std::size_t d = c.lstm_hidden;
      return 4 * ((h + d) * d + d) + 2 * d + 2;
    }
  }
  return 0;
}

template <typename T>
SpanLogits<T> masked_span_logits(const Tensor<T>& per_token, std::size_t total_len) {
  const std::size_t valid = per_token.dim(0);
  SpanLogits<T> out{Tensor<T>({total_len}, static_cast<T>(kMaskedLogit)),
                    Tensor<T>({total_len}, static_cast<T>(kMaskedLogit))};
  for (std::size_t l = 0; l < valid; ++l) {
    out.start[l] = per_token.at(l, 0);
    out.end[l] = per_token.at(l, 1);
  }
  return out;
}

template <typename T>
ParamStore<T> HeadModel<T>::init_params(std::uint64_t seed) const {
  ParamStore<T> store;
  for (const auto& spec : param_specs()) {
    Tensor<T> t(spec.shape, static_cast<T>(spec.fill));
    if (spec.fan_in > 0) {
      SplitMix64 rng(mix_seed(seed, fnv1a64(spec.name)));
      const double limit = std::sqrt(6.0 / (spec.fan_in + spec.fan_out));
      for (T& v : t.data()) v = static_cast<T>(rng.uniform(-limit, limit));
    }
    store.add(spec.name, std::move(t));
  }
  finish_init(store);
  return store;
}

template <typename T>
SpanLogits<T> HeadModel<T>::forward(const ParamStore<T>& params, const Tensor<T>& x,
                                    std::size_t valid_len, const DropoutSpec& dropout,
                                    std::unique_ptr<HeadTape>* tape) const {
  if (x.rank() != 2 || x.dim(1) != config_.hidden_size) {
    throw Error(ErrorKind::kShape,
                "head input " + shape_to_string(x.shape()) +
                    " does not match configured hidden size " +
                    std::to_string(config_.hidden_size));
  }
  if (valid_len < 1 || valid_len > x.dim(0)) {
    throw Error(ErrorKind::kRange, "valid_len " + std::to_string(valid_len) +
                                       " outside [1, " + std::to_string(x.dim(0)) + "]");
  }
  const std::size_t h = config_.hidden_size;
  Tensor<T> prefix({valid_len, h},
                   std::vector<T>(x.values().begin(),
                                  x.values().begin() + static_cast<std::ptrdiff_t>(valid_len * h)));
  Tensor<T> per_token = forward_valid(params, prefix, dropout, tape);
  if (tape != nullptr) (*tape)->valid_len = valid_len;
  return masked_span_logits(per_token, x.dim(0));
}

template <typename T>
void HeadModel<T>::backward(const ParamStore<T>& params, const HeadTape& tape,
                            const SpanLogits<T>& dlogits,
                            typename ParamStore<T>::Map& grads) const {
  const std::size_t valid = tape.valid_len;
  if (dlogits.start.size() < valid || dlogits.end.size() < valid) {
    throw Error(ErrorKind::kShape, "upstream logit gradient shorter than valid_len");
  }
  Tensor<T> d({valid, 2});
  for (std::size_t l = 0; l < valid; ++l) {
    d.at(l, 0) = dlogits.start[l];
    d.at(l, 1) = dlogits.end[l];
  }
  backward_valid(params, tape, d, grads);
}

namespace {

template <typename T>
Tensor<T>* grad_slot(typename ParamStore<T>::Map& grads, const std::string& name) {
  auto it = grads.find(name);
  if (it == grads.end()) {
    throw Error(ErrorKind::kConfig, "missing gradient slot '" + name + "'");
  }
  return &it->second;
}

// Applies dropout (when active) and records the mask on the tape.
template <typename T>
Tensor<T> apply_dropout(const Tensor<T>& x, const DropoutSpec& spec, Tensor<T>* mask) {
  if (spec.keep_prob >= 1.0) {
    if (mask != nullptr) *mask = Tensor<T>();
    return x;
  }
  auto r = dm::dropout(x, spec.keep_prob, spec.seed);
  if (mask != nullptr) *mask = std::move(r.mask);
  return std::move(r.out);
}

template <typename T>
void dropout_backward(const Tensor<T>& mask, Tensor<T>& d) {
  if (mask.empty()) return;
  for (std::size_t i = 0; i < d.size(); ++i) d[i] *= mask[i];
}

// ---------------------------------------------------------------------------
// Fully connected: one affine H -> 2 per token.

template <typename T>
class FullyConnectedHead final : public HeadModel<T> {
 public:
  using HeadModel<T>::HeadModel;

 protected:
  struct Tape : HeadTape {
    Tensor<T> input;  // after dropout
  };

  std::vector<typename HeadModel<T>::ParamSpec> param_specs() const override {
    const double h = static_cast<double>(this->config().hidden_size);
    return {{"output/bias", {2}, 0, 0, 0},
            {"output/weight", {this->config().hidden_size, 2}, h, 2, 0}};
  }

  Tensor<T> forward_valid(const ParamStore<T>& p, const Tensor<T>& x,
                          const DropoutSpec& dropout,
                          std::unique_ptr<HeadTape>* tape) const override {
    Tensor<T> in = apply_dropout(x, dropout, static_cast<Tensor<T>*>(nullptr));
    Tensor<T> out = dm::affine(in, p.param("output/weight"), p.param("output/bias"));
    if (tape != nullptr) {
      auto t = std::make_unique<Tape>();
      t->input = std::move(in);
      *tape = std::move(t);
    }
    return out;
  }

  void backward_valid(const ParamStore<T>& p, const HeadTape& base, const Tensor<T>& d,
                      typename ParamStore<T>::Map& grads) const override {
    const auto& t = dynamic_cast<const Tape&>(base);
    dm::affine_backward(t.input, p.param("output/weight"), d, static_cast<Tensor<T>*>(nullptr),
                        grad_slot<T>(grads, "output/weight"),
                        grad_slot<T>(grads, "output/bias"));
  }
};

// ---------------------------------------------------------------------------
// Basic CNN: parallel same-padded convolutions, ReLU, channel concat, affine.

template <typename T>
class BasicCnnHead final : public HeadModel<T> {
 public:
  using HeadModel<T>::HeadModel;

 protected:
  struct Tape : HeadTape {
    Tensor<T> input;
    std::vector<Tensor<T>> branch_out;  // post-ReLU, L x F each
    Tensor<T> mask;
    Tensor<T> features;  // after dropout
  };

  static std::string branch(std::size_t i, const char* leaf) {
    return "conv" + std::to_string(i) + "/" + leaf;
  }

  std::vector<typename HeadModel<T>::ParamSpec> param_specs() const override {
    const auto& c = this->config();
    const std::size_t f = c.filters_per_kernel;
    std::vector<typename HeadModel<T>::ParamSpec> specs;
    for (std::size_t i = 0; i < c.kernel_widths.size(); ++i) {
      const std::size_t w = c.kernel_widths[i];
      specs.push_back({branch(i, "bias"), {f}, 0, 0, 0});
      specs.push_back({branch(i, "kernel"), {w, c.hidden_size, f},
                       static_cast<double>(w * c.hidden_size),
                       static_cast<double>(w * f), 0});
    }
    const std::size_t total = f * c.kernel_widths.size();
    specs.push_back({"output/bias", {2}, 0, 0, 0});
    specs.push_back({"output/weight", {total, 2}, static_cast<double>(total), 2, 0});
    return specs;
  }

  Tensor<T> forward_valid(const ParamStore<T>& p, const Tensor<T>& x,
                          const DropoutSpec& dropout,
                          std::unique_ptr<HeadTape>* tape) const override {
    const auto& c = this->config();
    const std::size_t len = x.dim(0), f = c.filters_per_kernel;
    const std::size_t nb = c.kernel_widths.size();
    std::vector<Tensor<T>> outs;
    outs.reserve(nb);
    Tensor<T> concat({len, f * nb});
    for (std::size_t b = 0; b < nb; ++b) {
      outs.push_back(dm::relu(dm::conv1d(x, p.param(branch(b, "kernel")),
                                         p.param(branch(b, "bias")))));
      for (std::size_t l = 0; l < len; ++l) {
        for (std::size_t k = 0; k < f; ++k) concat.at(l, b * f + k) = outs.back().at(l, k);
      }
    }
    Tensor<T> mask;
    Tensor<T> features = apply_dropout(concat, dropout, &mask);
    Tensor<T> logits = dm::affine(features, p.param("output/weight"), p.param("output/bias"));
    if (tape != nullptr) {
      auto t = std::make_unique<Tape>();
      t->input = x;
      t->branch_out = std::move(outs);
      t->mask = std::move(mask);
      t->features = std::move(features);
      *tape = std::move(t);
    }
    return logits;
  }

  void backward_valid(const ParamStore<T>& p, const HeadTape& base, const Tensor<T>& d,
                      typename ParamStore<T>::Map& grads) const override {
    const auto& t = dynamic_cast<const Tape&>(base);
    const auto& c = this->config();
    const std::size_t len = t.input.dim(0), f = c.filters_per_kernel;
    Tensor<T> dfeat(t.features.shape());
    dm::affine_backward(t.features, p.param("output/weight"), d, &dfeat,
                        grad_slot<T>(grads, "output/weight"),
                        grad_slot<T>(grads, "output/bias"));
    dropout_backward(t.mask, dfeat);
    for (std::size_t b = 0; b < c.kernel_widths.size(); ++b) {
      Tensor<T> dout({len, f});
      for (std::size_t l = 0; l < len; ++l) {
        for (std::size_t k = 0; k < f; ++k) dout.at(l, k) = dfeat.at(l, b * f + k);
      }
      dm::relu_backward(t.branch_out[b], dout);
      dm::conv1d_backward(t.input, p.param(branch(b, "kernel")), dout,
                          static_cast<Tensor<T>*>(nullptr),
                          grad_slot<T>(grads, branch(b, "kernel")),
                          grad_slot<T>(grads, branch(b, "bias")));
    }
  }
};

// ---------------------------------------------------------------------------
// Contextualized CNN with generated filters.
//
// Generation: a shared w_g-wide convolution maps the sequence to
// L x (C * w_a * H) and is max-pooled over positions, giving one
// w_a x H filter per output channel. Application: those filters are
// convolved over the same sequence (L x C), ReLU, then affine C -> 2.

template <typename T>
class ContextCnnHead final : public HeadModel<T> {
 public:
  using HeadModel<T>::HeadModel;

  struct Generated {
    Tensor<T> kernel;                  // w_a x H x C, ready for conv1d
    std::vector<std::size_t> argmax;   // pooled position per generator column
  };

  std::size_t columns() const {
    const auto& c = this->config();
    return c.context_channels * c.applied_width * c.hidden_size;
  }

  // Column index of generated entry (channel, tap, h).
  std::size_t column(std::size_t channel, std::size_t tap, std::size_t h) const {
    const auto& c = this->config();
    return (channel * c.applied_width + tap) * c.hidden_size + h;
  }

  Generated generate(const ParamStore<T>& p, const Tensor<T>& x) const {
    const auto& c = this->config();
    const std::size_t len = x.dim(0), hs = c.hidden_size;
    const std::size_t cols = columns();
    Tensor<T> stage1 = dm::conv1d(x, p.param("generator/kernel"), p.param("generator/bias"));
    Generated g{Tensor<T>({c.applied_width, hs, c.context_channels}),
                std::vector<std::size_t>(cols, 0)};
    std::vector<T> best(stage1.row(0).begin(), stage1.row(0).end());
    for (std::size_t l = 1; l < len; ++l) {
      const T* r = &stage1.at(l, 0);
      for (std::size_t k = 0; k < cols; ++k) {
        if (r[k] > best[k]) {
          best[k] = r[k];
          g.argmax[k] = l;
        }
      }
    }
    for (std::size_t ch = 0; ch < c.context_channels; ++ch) {
      for (std::size_t tap = 0; tap < c.applied_width; ++tap) {
        for (std::size_t h = 0; h < hs; ++h) {
          g.kernel[(tap * hs + h) * c.context_channels + ch] = best[column(ch, tap, h)];
        }
      }
    }
    return g;
  }

 protected:
  struct Tape : HeadTape {
    Tensor<T> input;
    Generated generated;
    Tensor<T> activated;  // post-ReLU, L x C
    Tensor<T> mask;
    Tensor<T> features;   // after dropout
  };

  std::vector<typename HeadModel<T>::ParamSpec> param_specs() const override {
    const auto& c = this->config();
    const std::size_t cols = columns();
    const double ch = static_cast<double>(c.context_channels);
    return {
        {"applied/bias", {c.context_channels}, 0, 0, 0},
        {"generator/bias", {cols}, 0, 0, 0},
        {"generator/kernel", {c.generator_width, c.hidden_size, cols},
         static_cast<double>(c.generator_width * c.hidden_size),
         static_cast<double>(c.generator_width * cols), 0},
        {"output/bias", {2}, 0, 0, 0},
        {"output/weight", {c.context_channels, 2}, ch, 2, 0},
    };
  }

  Tensor<T> forward_valid(const ParamStore<T>& p, const Tensor<T>& x,
                          const DropoutSpec& dropout,
                          std::unique_ptr<HeadTape>* tape) const override {
    Generated gen = generate(p, x);
    Tensor<T> activated = dm::relu(dm::conv1d(x, gen.kernel, p.param("applied/bias")));
    Tensor<T> mask;
    Tensor<T> features = apply_dropout(activated, dropout, &mask);
    Tensor<T> logits = dm::affine(features, p.param("output/weight"), p.param("output/bias"));
    if (tape != nullptr) {
      auto t = std::make_unique<Tape>();
      t->input = x;
      t->generated = std::move(gen);
      t->activated = std::move(activated);
      t->mask = std::move(mask);
      t->features = std::move(features);
      *tape = std::move(t);
    }
    return logits;
  }

  void backward_valid(const ParamStore<T>& p, const HeadTape& base, const Tensor<T>& d,
                      typename ParamStore<T>::Map& grads) const override {
    const auto& t = dynamic_cast<const Tape&>(base);
    const auto& c = this->config();
    const std::size_t len = t.input.dim(0), hs = c.hidden_size;

    Tensor<T> dfeat(t.features.shape());
    dm::affine_backward(t.features, p.param("output/weight"), d, &dfeat,
                        grad_slot<T>(grads, "output/weight"),
                        grad_slot<T>(grads, "output/bias"));
    dropout_backward(t.mask, dfeat);
    dm::relu_backward(t.activated, dfeat);

    // Application stage: the generated kernel plays the role of a parameter.
    Tensor<T> dkernel(t.generated.kernel.shape());
    dm::conv1d_backward(t.input, t.generated.kernel, dfeat,
                        static_cast<Tensor<T>*>(nullptr), &dkernel,
                        grad_slot<T>(grads, "applied/bias"));

    // Generation stage: each pooled column routes its gradient to the row
    // that won the max.
    Tensor<T>& dgk = *grad_slot<T>(grads, "generator/kernel");
    Tensor<T>& dgb = *grad_slot<T>(grads, "generator/bias");
    const std::size_t cols = columns();
    const auto pad = dm::same_padding(c.generator_width);
    for (std::size_t ch = 0; ch < c.context_channels; ++ch) {
      for (std::size_t tap = 0; tap < c.applied_width; ++tap) {
        for (std::size_t h = 0; h < hs; ++h) {
          const T g = dkernel[(tap * hs + h) * c.context_channels + ch];
          if (g == T{0}) continue;
          const std::size_t col = column(ch, tap, h);
          dgb[col] += g;
          const std::size_t pos = t.generated.argmax[col];
          for (std::size_t i = 0; i < c.generator_width; ++i) {
            const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(pos + i) -
                                       static_cast<std::ptrdiff_t>(pad.left);
            if (src < 0 || src >= static_cast<std::ptrdiff_t>(len)) continue;
            const T* xr = &t.input.at(static_cast<std::size_t>(src), 0);
            T* dk = dgk.data().data() + i * hs * cols + col;
            for (std::size_t hin = 0; hin < hs; ++hin) dk[hin * cols] += xr[hin] * g;
          }
        }
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Unidirectional LSTM over valid tokens, affine D -> 2 on each h_t.

template <typename T>
class LstmHead final : public HeadModel<T> {
 public:
  using HeadModel<T>::HeadModel;

 protected:
  struct Tape : HeadTape {
    std::vector<dm::LstmStep<T>> steps;
    Tensor<T> mask;
    Tensor<T> features;  // L x D after dropout
  };

  std::vector<typename HeadModel<T>::ParamSpec> param_specs() const override {
    const auto& c = this->config();
    const std::size_t d = c.lstm_hidden, h = c.hidden_size;
    // Forget-gate bias starts at 1; other gate biases at 0.
    return {{"lstm/bias", {4 * d}, 0, 0, 0},
            {"lstm/weight", {h + d, 4 * d}, static_cast<double>(h + d),
             static_cast<double>(4 * d), 0},
            {"output/bias", {2}, 0, 0, 0},
            {"output/weight", {d, 2}, static_cast<double>(d), 2, 0}};
  }

  void finish_init(ParamStore<T>& store) const override {
    const std::size_t d = this->config().lstm_hidden;
    Tensor<T>& b = store.param("lstm/bias");
    for (std::size_t k = 0; k < d; ++k) b[dm::LstmGate::kForget * d + k] = T{1};
  }

  Tensor<T> forward_valid(const ParamStore<T>& p, const Tensor<T>& x,
                          const DropoutSpec& dropout,
                          std::unique_ptr<HeadTape>* tape) const override {
    const std::size_t len = x.dim(0), d = this->config().lstm_hidden;
    const Tensor<T>& w = p.param("lstm/weight");
    const Tensor<T>& b = p.param("lstm/bias");
    std::vector<dm::LstmStep<T>> steps;
    steps.reserve(len);
    Tensor<T> hidden({len, d});
    std::vector<T> h(d, T{0}), cell(d, T{0});
    for (std::size_t l = 0; l < len; ++l) {
      steps.push_back(dm::lstm_cell<T>(x.row(l), h, cell, w, b));
      h = steps.back().h.values();
      cell = steps.back().c.values();
      std::copy(h.begin(), h.end(), hidden.row(l).begin());
    }
    Tensor<T> mask;
    Tensor<T> features = apply_dropout(hidden, dropout, &mask);
    Tensor<T> logits = dm::affine(features, p.param("output/weight"), p.param("output/bias"));
    if (tape != nullptr) {
      auto t = std::make_unique<Tape>();
      t->steps = std::move(steps);
      t->mask = std::move(mask);
      t->features = std::move(features);
      *tape = std::move(t);
    }
    return logits;
  }

  void backward_valid(const ParamStore<T>& p, const HeadTape& base, const Tensor<T>& d,
                      typename ParamStore<T>::Map& grads) const override {
    const auto& t = dynamic_cast<const Tape&>(base);
    const std::size_t len = t.steps.size(), dh = this->config().lstm_hidden;
    Tensor<T> dhidden(t.features.shape());
    dm::affine_backward(t.features, p.param("output/weight"), d, &dhidden,
                        grad_slot<T>(grads, "output/weight"),
                        grad_slot<T>(grads, "output/bias"));
    dropout_backward(t.mask, dhidden);

    const Tensor<T>& w = p.param("lstm/weight");
    Tensor<T>* dw = grad_slot<T>(grads, "lstm/weight");
    Tensor<T>* db = grad_slot<T>(grads, "lstm/bias");
    Tensor<T> dh_next({dh}), dc_next({dh});
    for (std::size_t l = len; l-- > 0;) {
      Tensor<T> dh_total = dh_next;
      for (std::size_t k = 0; k < dh; ++k) dh_total[k] += dhidden.at(l, k);
      Tensor<T> dh_prev({dh}), dc_prev({dh});
      dm::lstm_cell_backward<T>(t.steps[l], w, dh_total.data(), dc_next.data(),
                                nullptr, &dh_prev, &dc_prev, dw, db);
      dh_next = std::move(dh_prev);
      dc_next = std::move(dc_prev);
    }
  }
};

}  // namespace

template <typename T>
std::unique_ptr<HeadModel<T>> make_head(const HeadConfig& config) {
  config.validate();
  switch (config.variant) {
    case HeadVariant::kFullyConnected:
      return std::make_unique<FullyConnectedHead<T>>(config);
    case HeadVariant::kBasicCnn:
      return std::make_unique<BasicCnnHead<T>>(config);
    case HeadVariant::kContextCnn:
      return std::make_unique<ContextCnnHead<T>>(config);
    case HeadVariant::kLstm:
      return std::make_unique<LstmHead<T>>(config);
  }
  throw Error(ErrorKind::kConfig, "head: unhandled variant");
}

HeadBundle build_head(const HeadConfig& config, std::uint64_t seed) {
  HeadBundle bundle;
  bundle.model = make_head<float>(config);
  bundle.params = bundle.model->init_params(seed);
  return bundle;
}

template <typename T>
Tensor<T> generated_filters(const HeadConfig& config, const ParamStore<T>& params,
                            const Tensor<T>& x, std::size_t valid_len) {
  if (config.variant != HeadVariant::kContextCnn) {
    throw Error(ErrorKind::kConfig, "generated_filters requires the ctx-cnn head");
  }
  ContextCnnHead<T> head(config);
  if (x.rank() != 2 || x.dim(1) != config.hidden_size || valid_len < 1 ||
      valid_len > x.dim(0)) {
    throw Error(ErrorKind::kShape, "generated_filters: bad input " + shape_to_string(x.shape()));
  }
  const std::size_t hs = config.hidden_size;
  Tensor<T> prefix({valid_len, hs},
                   std::vector<T>(x.values().begin(),
                                  x.values().begin() + static_cast<std::ptrdiff_t>(valid_len * hs)));
  auto gen = head.generate(params, prefix);
  const std::size_t ch = config.context_channels, wa = config.applied_width;
  Tensor<T> out({ch, wa, hs});
  for (std::size_t c = 0; c < ch; ++c) {
    for (std::size_t tap = 0; tap < wa; ++tap) {
      for (std::size_t h = 0; h < hs; ++h) {
        out[(c * wa + tap) * hs + h] = gen.kernel[(tap * hs + h) * ch + c];
      }
    }
  }
  return out;
}

template class HeadModel<float>;
template class HeadModel<double>;
template std::unique_ptr<HeadModel<float>> make_head(const HeadConfig&);
template std::unique_ptr<HeadModel<double>> make_head(const HeadConfig&);
template Tensor<float> generated_filters(const HeadConfig&, const ParamStore<float>&,
                                         const Tensor<float>&, std::size_t);
template Tensor<double> generated_filters(const HeadConfig&, const ParamStore<double>&,
                                          const Tensor<double>&, std::size_t);
template SpanLogits<float> masked_span_logits(const Tensor<float>&, std::size_t);
template SpanLogits<double> masked_span_logits(const Tensor<double>&, std::size_t);

// Extended precision, used by gradient checks.
template class HeadModel<long double>;
template std::unique_ptr<HeadModel<long double>> make_head(const HeadConfig&);
template Tensor<long double> generated_filters(const HeadConfig&, const ParamStore<long double>&,
                                               const Tensor<long double>&, std::size_t);
template SpanLogits<long double> masked_span_logits(const Tensor<long double>&, std::size_t);

}  // namespace spanqa
