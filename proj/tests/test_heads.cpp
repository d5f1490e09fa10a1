#include <doctest.h>

#include <cmath>

#include "spanqa/checkpoint.hpp"
#include "spanqa/binary_io.hpp"
#include "spanqa/diffmath.hpp"
#include "spanqa/heads.hpp"
#include "support.hpp"

using namespace spanqa;
using spanqa::testing::make_head_problem;
using spanqa::testing::random_tensor;
using spanqa::testing::small_config;

namespace {

const HeadVariant kAll[] = {HeadVariant::kFullyConnected, HeadVariant::kBasicCnn,
                            HeadVariant::kContextCnn, HeadVariant::kLstm};

void zero_all(ParamStore<double>& p) {
  for (auto& [name, t] : p.params()) t.fill(0.0);
}

// Per-token logits (valid prefix) as an L x 2 tensor.
Tensor<double> stacked(const SpanLogits<double>& s, std::size_t len) {
  Tensor<double> out({len, 2});
  for (std::size_t l = 0; l < len; ++l) {
    out.at(l, 0) = s.start[l];
    out.at(l, 1) = s.end[l];
  }
  return out;
}

Tensor<double> relu_of(Tensor<double> t) {
  for (auto& v : t.data()) v = std::max(v, 0.0);
  return t;
}

}  // namespace

TEST_CASE("parameter counts match the closed forms") {
  for (HeadVariant v : kAll) {
    for (std::size_t H : {8, 16}) {
      HeadConfig c = small_config(v, H);
      auto bundle = build_head(c, 1);
      CHECK_MESSAGE(bundle.params.num_parameters() == expected_parameter_count(c),
                    head_variant_name(v));
    }
  }
  HeadConfig fc;
  fc.variant = HeadVariant::kFullyConnected;
  fc.hidden_size = 768;
  CHECK(expected_parameter_count(fc) == 1538);
  CHECK(build_head(fc, 0).params.num_parameters() == 1538);

  HeadConfig lstm;
  lstm.variant = HeadVariant::kLstm;
  lstm.hidden_size = 768;
  lstm.lstm_hidden = 256;
  auto b = build_head(lstm, 0);
  const std::size_t cell = b.params.param("lstm/weight").size() + b.params.param("lstm/bias").size();
  CHECK(cell == 1049600);
  CHECK(b.params.num_parameters() == 1049600 + 2 * 256 + 2);
}

TEST_CASE("initialization is deterministic per seed") {
  for (HeadVariant v : kAll) {
    auto c = small_config(v);
    CHECK(build_head(c, 5).params == build_head(c, 5).params);
    CHECK_FALSE(build_head(c, 5).params == build_head(c, 6).params);
  }
}

TEST_CASE("initial weights respect the uniform limit and biases start at zero") {
  auto c = small_config(HeadVariant::kLstm);
  auto p = build_head(c, 2).params;
  const std::size_t H = c.hidden_size, D = c.lstm_hidden;
  const double limit = std::sqrt(6.0 / static_cast<double>(H + D + 4 * D));
  for (float v : p.param("lstm/weight").data()) CHECK(std::abs(v) <= limit);
  const auto& bias = p.param("lstm/bias");
  for (std::size_t k = 0; k < 4 * D; ++k) {
    CHECK(bias[k] == (k >= D && k < 2 * D ? 1.0f : 0.0f));
  }
  for (float v : p.param("output/bias").data()) CHECK(v == 0.0f);
}

TEST_CASE("invalid configs name the field") {
  auto expect = [](HeadConfig c, const std::string& field) {
    try {
      c.validate();
      FAIL("accepted invalid " << field);
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::kConfig);
      CHECK_MESSAGE(std::string(e.what()).find(field) != std::string::npos, e.what());
    }
  };
  HeadConfig c = small_config(HeadVariant::kBasicCnn);
  auto bad = c;
  bad.hidden_size = 0;
  expect(bad, "hidden_size");
  bad = c;
  bad.kernel_widths.clear();
  expect(bad, "kernel_widths");
  bad = c;
  bad.dropout_keep_prob = 0.0;
  expect(bad, "dropout_keep_prob");
  bad = small_config(HeadVariant::kContextCnn);
  bad.applied_width = 0;
  expect(bad, "applied_width");
  bad = small_config(HeadVariant::kContextCnn);
  bad.context_channels = 0;
  expect(bad, "context_channels");
  bad = small_config(HeadVariant::kLstm);
  bad.lstm_hidden = 0;
  expect(bad, "lstm_hidden");
  CHECK_THROWS_AS(parse_head_variant("gru"), Error);
  for (HeadVariant v : kAll) CHECK(parse_head_variant(head_variant_name(v)) == v);
}

TEST_CASE("forward rejects a width mismatch") {
  auto c = small_config(HeadVariant::kFullyConnected, 8);
  auto model = make_head<double>(c);
  auto p = model->init_params(0);
  CHECK_THROWS_AS(model->forward(p, Tensor<double>({5, 9}), 5), Error);
  CHECK_THROWS_AS(model->forward(p, Tensor<double>({5, 8}), 6), Error);
}

TEST_CASE("all heads produce length-L logits with masked padding") {
  SplitMix64 rng(1);
  for (HeadVariant v : kAll) {
    auto c = small_config(v, 8);
    auto model = make_head<double>(c);
    auto p = model->init_params(3);
    const std::size_t L = 10, valid = 6;
    auto x = random_tensor<double>({L, 8}, rng);
    auto logits = model->forward(p, x, valid);
    REQUIRE(logits.start.size() == L);
    REQUIRE(logits.end.size() == L);
    for (std::size_t l = valid; l < L; ++l) {
      CHECK(logits.start[l] == kMaskedLogit);
      CHECK(logits.end[l] == kMaskedLogit);
    }
    // padded rows do not leak into the valid prefix
    auto y = x;
    for (std::size_t l = valid; l < L; ++l) {
      for (auto& e : y.row(l)) e = 0.0;
    }
    auto again = model->forward(p, y, valid);
    for (std::size_t l = 0; l < valid; ++l) {
      CHECK(again.start[l] == logits.start[l]);
      CHECK(again.end[l] == logits.end[l]);
    }
  }
}

TEST_CASE("fc head closed forms and composition") {
  auto c = small_config(HeadVariant::kFullyConnected, 8);
  auto model = make_head<double>(c);
  auto p = model->init_params(0);
  SplitMix64 rng(2);
  auto x = random_tensor<double>({5, 8}, rng);

  zero_all(p);
  auto z = model->forward(p, x, 5);
  for (std::size_t l = 0; l < 5; ++l) CHECK(z.start[l] == 0.0);
  p.param("output/bias")[0] = 2.0;
  p.param("output/bias")[1] = -1.0;
  auto bias = model->forward(p, x, 5);
  for (std::size_t l = 0; l < 5; ++l) {
    CHECK(bias.start[l] == 2.0);
    CHECK(bias.end[l] == -1.0);
  }

  p = model->init_params(9);
  auto want = diffmath::affine(x, p.param("output/weight"), p.param("output/bias"));
  auto got = stacked(model->forward(p, x, 5), 5);
  for (std::size_t i = 0; i < want.size(); ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-12));
}

TEST_CASE("basic cnn matches a branch-wise oracle") {
  auto c = small_config(HeadVariant::kBasicCnn, 8);
  c.kernel_widths = {1, 3, 5};
  auto model = make_head<double>(c);
  auto p = model->init_params(4);
  SplitMix64 rng(3);
  for (auto& [name, t] : p.params()) {
    if (name.find("bias") != std::string::npos) t = random_tensor<double>(t.shape(), rng, 0.3);
  }
  const std::size_t L = 9, F = c.filters_per_kernel, n = c.kernel_widths.size();
  auto x = random_tensor<double>({L, 8}, rng);

  Tensor<double> concat({L, F * n});
  for (std::size_t b = 0; b < n; ++b) {
    const std::string tag = "conv" + std::to_string(b);
    auto branch = relu_of(spanqa::testing::conv1d_oracle(x, p.param(tag + "/kernel"), p.param(tag + "/bias")));
    for (std::size_t l = 0; l < L; ++l) {
      for (std::size_t f = 0; f < F; ++f) concat.at(l, b * F + f) = branch.at(l, f);
    }
  }
  auto want = diffmath::affine(concat, p.param("output/weight"), p.param("output/bias"));
  auto got = stacked(model->forward(p, x, L), L);
  for (std::size_t i = 0; i < want.size(); ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-10));

  zero_all(p);
  auto z = model->forward(p, x, L);
  for (std::size_t l = 0; l < L; ++l) CHECK(z.start[l] == 0.0);
}

TEST_CASE("basic cnn width-1 identity reduces to an fc-like map") {
  const std::size_t H = 4;
  HeadConfig c = small_config(HeadVariant::kBasicCnn, H);
  c.kernel_widths = {1};
  c.filters_per_kernel = H;
  auto model = make_head<double>(c);
  auto p = model->init_params(0);
  zero_all(p);
  for (std::size_t h = 0; h < H; ++h) p.param("conv0/kernel")[h * H + h] = 1.0;
  for (std::size_t h = 0; h < H; ++h) {
    p.param("output/weight").at(h, 0) = 1.0 / H;
    p.param("output/weight").at(h, 1) = 1.0 / H;
  }
  SplitMix64 rng(4);
  auto x = random_tensor<double>({6, H}, rng);
  for (auto& v : x.data()) v = std::abs(v);  // positive, so ReLU is the identity
  auto got = model->forward(p, x, 6);
  for (std::size_t l = 0; l < 6; ++l) {
    double mean = 0.0;
    for (double v : x.row(l)) mean += v / H;
    CHECK(got.start[l] == doctest::Approx(mean).epsilon(1e-12));
  }
}

TEST_CASE("context cnn matches an independent two-stage oracle") {
  auto c = small_config(HeadVariant::kContextCnn, 6);
  c.context_channels = 3;
  c.generator_width = 3;
  c.applied_width = 2;
  auto model = make_head<double>(c);
  auto p = model->init_params(5);
  SplitMix64 rng(5);
  p.param("applied/bias") = random_tensor<double>({3}, rng, 0.2);
  p.param("generator/bias") = random_tensor<double>(p.param("generator/bias").shape(), rng, 0.2);
  const std::size_t L = 8, valid = 7, H = 6, C = 3, wa = 2;
  auto x = random_tensor<double>({L, H}, rng);
  for (auto& v : x.row(7)) v = 0.0;

  Tensor<double> prefix({valid, H});
  for (std::size_t l = 0; l < valid; ++l) {
    for (std::size_t h = 0; h < H; ++h) prefix.at(l, h) = x.at(l, h);
  }
  auto stage1 = spanqa::testing::conv1d_oracle(prefix, p.param("generator/kernel"), p.param("generator/bias"));
  // filters[c][tap][h] = max over valid positions of column (c*wa + tap)*H + h
  Tensor<double> filters({C, wa, H});
  Tensor<double> kernel({wa, H, C});
  for (std::size_t ch = 0; ch < C; ++ch) {
    for (std::size_t tap = 0; tap < wa; ++tap) {
      for (std::size_t h = 0; h < H; ++h) {
        const std::size_t col = (ch * wa + tap) * H + h;
        double m = stage1.at(0, col);
        for (std::size_t l = 1; l < valid; ++l) m = std::max(m, stage1.at(l, col));
        filters[(ch * wa + tap) * H + h] = m;
        kernel[(tap * H + h) * C + ch] = m;
      }
    }
  }
  auto got_filters = generated_filters(c, p, x, valid);
  REQUIRE(got_filters.shape() == filters.shape());
  for (std::size_t i = 0; i < filters.size(); ++i) CHECK(got_filters[i] == doctest::Approx(filters[i]).epsilon(1e-12));

  auto feats = relu_of(spanqa::testing::conv1d_oracle(prefix, kernel, p.param("applied/bias")));
  auto want = diffmath::affine(feats, p.param("output/weight"), p.param("output/bias"));
  auto got = stacked(model->forward(p, x, valid), valid);
  for (std::size_t i = 0; i < want.size(); ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-10));
}

TEST_CASE("context cnn zero generator reduces to the applied bias") {
  auto c = small_config(HeadVariant::kContextCnn, 8);
  auto model = make_head<double>(c);
  auto p = model->init_params(6);
  p.param("generator/kernel").fill(0.0);
  p.param("generator/bias").fill(0.0);
  p.param("applied/bias") = Tensor<double>::vector({0.5, -0.3, 0.2, 1.0});
  SplitMix64 rng(6);
  auto x = random_tensor<double>({7, 8}, rng);
  const auto filters = generated_filters(c, p, x, 7);
  for (double v : filters.data()) CHECK(v == 0.0);
  auto feats = Tensor<double>({1, 4}, std::vector<double>{0.5, 0.0, 0.2, 1.0});
  auto row = diffmath::affine(feats, p.param("output/weight"), p.param("output/bias"));
  auto got = model->forward(p, x, 7);
  for (std::size_t l = 0; l < 7; ++l) {
    CHECK(got.start[l] == doctest::Approx(row[0]).epsilon(1e-12));
    CHECK(got.end[l] == doctest::Approx(row[1]).epsilon(1e-12));
  }
}

TEST_CASE("context cnn filters are a function of the sequence") {
  auto c = small_config(HeadVariant::kContextCnn, 8);
  SplitMix64 rng(7);
  int differing = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto model = make_head<double>(c);
    auto p = model->init_params(seed);
    const std::size_t before = p.num_parameters();
    auto x = random_tensor<double>({9, 8}, rng);
    auto y = x;
    const std::size_t row = rng.below(9);
    for (auto& v : y.row(row)) v = rng.uniform(-1, 1);
    auto fx = generated_filters(c, p, x, 9);
    CHECK(fx == generated_filters(c, p, x, 9));
    CHECK(model->forward(p, x, 9).start == model->forward(p, x, 9).start);
    if (!(fx == generated_filters(c, p, y, 9))) ++differing;
    CHECK(p.num_parameters() == before);
  }
  CHECK(differing >= 19);
}

TEST_CASE("lstm closed forms") {
  auto c = small_config(HeadVariant::kLstm, 5);
  auto model = make_head<double>(c);
  auto p = model->init_params(8);
  SplitMix64 rng(8);
  auto x = random_tensor<double>({4, 5}, rng);

  auto zero = p;
  zero_all(zero);
  auto z = model->forward(zero, x, 4);
  for (std::size_t l = 0; l < 4; ++l) {
    CHECK(z.start[l] == 0.0);
    CHECK(z.end[l] == 0.0);
  }

  // one step equals lstm_cell followed by the output affine
  auto one = model->forward(p, x, 1);
  const std::vector<double> h0(c.lstm_hidden, 0.0);
  auto step = diffmath::lstm_cell<double>(x.row(0), h0, h0, p.param("lstm/weight"), p.param("lstm/bias"));
  Tensor<double> h({1, c.lstm_hidden}, step.h.values());
  auto want = diffmath::affine(h, p.param("output/weight"), p.param("output/bias"));
  CHECK(one.start[0] == doctest::Approx(want[0]).epsilon(1e-12));
  CHECK(one.end[0] == doctest::Approx(want[1]).epsilon(1e-12));
}

TEST_CASE("every head passes the end-to-end gradient check") {
  for (HeadVariant v : kAll) {
    for (std::uint64_t seed : {1, 2}) {
      auto c = small_config(v, 16);
      auto prob = make_head_problem(c, 12, seed == 1 ? 12 : 9, seed);
      const auto r = prob.check();
      CHECK_MESSAGE(r.passed(1e-4), head_variant_name(v) << " seed " << seed << ": " << r.describe());
    }
  }
}

TEST_CASE("lstm bptt gradient check at L=6, D=4") {
  auto c = small_config(HeadVariant::kLstm, 5);
  c.lstm_hidden = 4;
  auto prob = make_head_problem(c, 6, 6, 11);
  const auto r = prob.check();
  CHECK_MESSAGE(r.passed(1e-4), r.describe());
}

TEST_CASE("gradients stay exact under a fixed dropout mask") {
  for (HeadVariant v : kAll) {
    auto c = small_config(v, 8);
    auto prob = make_head_problem(c, 8, 8, 21);
    prob.dropout = DropoutSpec{0.7, 1234};
    const auto r = prob.check();
    CHECK_MESSAGE(r.passed(1e-4), head_variant_name(v) << ": " << r.describe());
    // same seed, same mask; different seed, different output
    const auto base = prob.model->forward(prob.params, prob.x, 8, prob.dropout);
    CHECK(prob.model->forward(prob.params, prob.x, 8, prob.dropout).start == base.start);
    CHECK_FALSE(prob.model->forward(prob.params, prob.x, 8, DropoutSpec{0.7, 99}).start == base.start);
  }
}

TEST_CASE("64-bit check: only the shift-invariant output bias sits at the noise floor") {
  for (HeadVariant v : kAll) {
    auto prob = make_head_problem<double>(small_config(v, 16), 12, 10, 3);
    const auto grads = prob.analytic();
    std::function<double(const ParamStore<double>&)> f = [&](const ParamStore<double>& p) {
      return prob.loss(p);
    };
    // the output bias gradient is zero up to rounding
    for (double g : grads.at("output/bias").data()) CHECK(std::abs(g) < 1e-12);
    auto without_bias = prob.params;
    ParamStore<double> trimmed;
    auto trimmed_grads = grads;
    trimmed_grads.erase("output/bias");
    for (const auto& [name, t] : without_bias.params()) {
      if (name != "output/bias") trimmed.add(name, t);
    }
    auto g = [&](const ParamStore<double>& p) {
      auto full = prob.params;
      for (const auto& [name, t] : p.params()) full.param(name) = t;
      return f(full);
    };
    const auto r = grad_check(g, trimmed, trimmed_grads);
    CHECK_MESSAGE(r.passed(1e-4), head_variant_name(v) << ": " << r.describe());
  }
}

TEST_CASE("checkpoint round trip is byte identical") {
  auto c = small_config(HeadVariant::kContextCnn, 8);
  auto bundle = build_head(c, 3);
  const auto bytes = encode_checkpoint(bundle.params.params(), c.digest());
  CHECK(bytes.substr(0, 4) == "SHLB");
  auto decoded = decode_checkpoint(bytes);
  CHECK(decoded.digest == c.digest());
  CHECK(decoded.params == bundle.params);
  CHECK(encode_checkpoint(decoded.params.params(), decoded.digest) == bytes);

  const auto dir = spanqa::testing::fresh_dir("ckpt");
  save_checkpoint(dir / "a.ckpt", bundle.params.params(), c.digest());
  CHECK(read_file(dir / "a.ckpt") == bytes);
  CHECK(load_checkpoint_for(dir / "a.ckpt", c) == bundle.params);

  auto other = c;
  other.context_channels = 5;
  try {
    load_checkpoint_for(dir / "a.ckpt", other);
    FAIL("digest mismatch accepted");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kMismatch);
  }
  // dropout does not change the architecture digest
  auto drop = c;
  drop.dropout_keep_prob = 0.5;
  CHECK(drop.digest() == c.digest());

  CHECK_THROWS_AS(decode_checkpoint("SHLX" + bytes.substr(4)), Error);
  CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, bytes.size() - 3)), Error);
  std::string wrong_version = bytes;
  wrong_version[4] = 2;
  CHECK_THROWS_AS(decode_checkpoint(wrong_version), Error);
}

TEST_CASE("float and double paths agree") {
  for (HeadVariant v : kAll) {
    auto c = small_config(v, 8);
    auto mf = make_head<float>(c);
    auto md = make_head<double>(c);
    auto pf = mf->init_params(4);
    auto pd = pf.cast<double>();
    SplitMix64 rng(9);
    auto xd = random_tensor<double>({7, 8}, rng);
    auto xf = xd.cast<float>();
    auto lf = mf->forward(pf, xf, 7);
    auto ld = md->forward(pd, xd, 7);
    for (std::size_t l = 0; l < 7; ++l) CHECK(lf.start[l] == doctest::Approx(ld.start[l]).epsilon(1e-4));
  }
}
