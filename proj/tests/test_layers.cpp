#include <doctest.h>

#include <cmath>
#include <numeric>

#include "dlbl/gradcheck.hpp"
#include "dlbl/layers.hpp"
#include "oracles.hpp"

using namespace dlbl;


TEST_CASE("size rules") {
  CHECK(conv_output_size(65, 7, 1, 3) == 65);
  CHECK(deconv_output_size(9, 3, 2, 1) == 17);
  CHECK(pool_output_size(65, 3, 2, 1) == 33);
  CHECK(pool_output_size(33, 3, 2, 1) == 17);
  CHECK(pool_output_size(17, 3, 2, 1) == 9);
  CHECK(pool_output_size(9, 3, 2, 1) == 5);
  CHECK_THROWS_AS(conv_output_size(10, 3, 2, 0), ShapeError);
  CHECK_THROWS_AS(pool_output_size(1, 5, 1, 0), ShapeError);

  // conv and deconv sizes are mutually inverse wherever conv divides exactly
  for (std::size_t m : {1u, 3u, 5u, 7u})
    for (std::size_t s : {1u, 2u})
      for (std::size_t z = 0; z <= (m - 1) / 2; ++z)
        for (std::size_t n = 1; n < 70; ++n) {
          const std::size_t up = deconv_output_size(n, m, s, z);
          CHECK(conv_output_size(up, m, s, z) == n);
        }
}

TEST_CASE("conv matches direct summation") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t m = 2 * (rng() % 4) + 1, s = 1 + rng() % 2, z = rng() % ((m + 1) / 2);
    std::size_t h = m + rng() % 6;
    while ((h + 2 * z - m) % s) ++h;
    const auto x = oracle::random_tensor<double>({2, 3, h, h}, rng);
    const auto w = oracle::random_tensor<double>({4, 3, m, m}, rng);
    const auto b = oracle::random_tensor<double>({1, 4, 1, 1}, rng);
    const auto y = conv_forward(x, w, b, {m, s, z});
    CHECK(oracle::max_abs_diff(y, oracle::conv(x, w, b, s, z)) < 1e-12);
  }
}

TEST_CASE("conv examples") {
  Tensor4 x(1, 1, 5, 5, 1.f);
  Tensor4 w(1, 1, 3, 3, 1.f);
  const Tensor4 y = conv_forward(x, w, Tensor4(1, 1, 1, 1), {3, 1, 1});
  CHECK(y(0, 0, 2, 2) == 9.f);
  CHECK(y(0, 0, 0, 0) == 4.f);
  CHECK(y(0, 0, 0, 2) == 6.f);

  std::mt19937_64 rng(2);
  const auto r = oracle::random_tensor<float>({1, 1, 4, 4}, rng);
  CHECK(conv_forward(r, Tensor4(1, 1, 1, 1, 1.f), Tensor4(1, 1, 1, 1), {1, 1, 0}) == r);

  const auto g0 = conv_backward(Tensor4(1, 2, 4, 4), r, Tensor4(2, 1, 3, 3, 1.f), {3, 1, 1});
  CHECK(sum(g0.dx) == 0.f);
  CHECK(sum(g0.dw) == 0.f);
  CHECK(sum(g0.db) == 0.f);

  Tensor4 dy(1, 1, 4, 4);
  dy(0, 0, 1, 2) = 1.f;
  const auto g1 = conv_backward(dy, r, Tensor4(1, 1, 1, 1, 1.f), {1, 1, 0});
  CHECK(g1.dx == dy);
  CHECK_THROWS_AS(conv_forward(Tensor4(1, 2, 4, 4), w, Tensor4(1, 1, 1, 1), {3, 1, 1}),
                  ShapeError);
}

TEST_CASE("deconv matches scatter oracle and impulse response") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t m = 2 * (rng() % 3) + 1, s = 1 + rng() % 2, z = rng() % ((m + 1) / 2);
    const auto x = oracle::random_tensor<double>({2, 3, 2 + rng() % 4, 2 + rng() % 4}, rng);
    const auto w = oracle::random_tensor<double>({3, 2, m, m}, rng);
    const auto b = oracle::random_tensor<double>({1, 2, 1, 1}, rng);
    CHECK(oracle::max_abs_diff(deconv_forward(x, w, b, {m, s, z}),
                               oracle::deconv(x, w, b, s, z)) < 1e-12);
  }
  Tensor4 impulse(1, 1, 1, 1, 1.f);
  const auto w = oracle::random_tensor<float>({1, 1, 3, 3}, rng);
  const Tensor4 y = deconv_forward(impulse, w, Tensor4(1, 1, 1, 1), {3, 1, 0});
  CHECK(y == w);

  const auto x = oracle::random_tensor<float>({2, 1, 3, 3}, rng);
  const Tensor4 dy = oracle::random_tensor<float>({2, 1, 7, 7}, rng);
  const auto g = deconv_backward(dy, x, w, {3, 2, 0});
  CHECK(g.db[0] == doctest::Approx(sum(dy)).epsilon(1e-5));
  const auto g0 = deconv_backward(Tensor4(2, 1, 7, 7), x, w, {3, 2, 0});
  CHECK(sum(g0.dx) == 0.f);
  CHECK(sum(g0.dw) == 0.f);
}

TEST_CASE("conv and deconv are adjoint") {
  std::mt19937_64 rng(4);
  double worst = 0;
  for (int trial = 0; trial < 120; ++trial) {
    const std::size_t m = 2 * (rng() % 4) + 1, s = 1 + rng() % 2, z = rng() % ((m + 1) / 2);
    const std::size_t n_small = 2 + rng() % 5;
    const std::size_t big = deconv_output_size(n_small, m, s, z);
    const std::size_t cin = 1 + rng() % 3, cout = 1 + rng() % 3;
    const auto w = oracle::random_tensor<double>({cout, cin, m, m}, rng);
    const auto x = oracle::random_tensor<double>({1, cin, big, big}, rng);
    const auto y = oracle::random_tensor<double>({1, cout, n_small, n_small}, rng);
    const double lhs = dot(conv_forward(x, w, Tensor4d(1, cout, 1, 1), {m, s, z}), y);
    const double rhs = dot(x, deconv_forward(y, w, Tensor4d(1, cin, 1, 1), {m, s, z}));
    worst = std::max(worst, std::abs(lhs - rhs) / std::max(1e-12, std::abs(lhs)));
  }
  CHECK(worst < 1e-5);
}

TEST_CASE("pooling") {
  Tensor4 x(1, 1, 3, 3);
  for (std::size_t i = 0; i < 9; ++i) x[i] = static_cast<float>(i + 1);
  CHECK(pool_forward(x, {3, 1, 0, PoolMode::max}, nullptr)[0] == 9.f);
  CHECK(pool_forward(x, {3, 1, 0, PoolMode::average}, nullptr)[0] == 5.f);

  const Tensor4 c(2, 2, 7, 7, 3.f);
  for (auto mode : {PoolMode::max, PoolMode::average}) {
    const Tensor4 y = pool_forward(c, {3, 2, 1, mode}, nullptr);
    CHECK(y.height() == 4);
    for (float v : y.values()) CHECK(v == 3.f);
  }

  // padding never wins a max, even over negative inputs
  const Tensor4 neg(1, 1, 3, 3, -1.f);
  const Tensor4 pooled = pool_forward(neg, {3, 2, 1, PoolMode::max}, nullptr);
  for (float v : pooled.values()) CHECK(v == -1.f);

  // ties go to the first element in row-major order
  Tensor4 tie(1, 1, 2, 2, 1.f);
  PoolCache cache;
  pool_forward(tie, {2, 2, 0, PoolMode::max}, &cache);
  const Tensor4 dx = pool_backward(Tensor4(1, 1, 1, 1, 1.f), cache);
  CHECK(dx(0, 0, 0, 0) == 1.f);
  CHECK(sum(dx) == 1.f);

  // non-overlapping windows: each input cell gets at most one contribution
  std::mt19937_64 rng(9);
  const auto r = oracle::random_tensor<float>({1, 1, 6, 6}, rng);
  pool_forward(r, {2, 2, 0, PoolMode::max}, &cache);
  const Tensor4 g = pool_backward(Tensor4(1, 1, 3, 3, 1.f), cache);
  for (float v : g.values()) CHECK((v == 0.f || v == 1.f));
  CHECK(sum(g) == 9.f);
  CHECK(sum(pool_backward(Tensor4(1, 1, 3, 3), cache)) == 0.f);
}

TEST_CASE("leaky relu") {
  Tensor4 x(1, 1, 1, 3);
  x[0] = 2.f;
  x[1] = -2.f;
  x[2] = 0.f;
  const Tensor4 y = leaky_relu_forward(x, 0.1f);
  CHECK(y[0] == 2.f);
  CHECK(y[1] == doctest::Approx(-0.2f));
  CHECK(y[2] == 0.f);
  const Tensor4 g = leaky_relu_backward(Tensor4(1, 1, 1, 3, 1.f), x, 0.1f);
  CHECK(g[0] == 1.f);
  CHECK(g[1] == doctest::Approx(0.1f));
  CHECK(g[2] == 1.f);
}

TEST_CASE("batch norm") {
  std::mt19937_64 rng(5);
  const auto x = oracle::random_tensor<double>({4, 3, 5, 5}, rng, -3, 5);
  auto st = BatchNormState<double>::identity(3);
  BatchNormCache<double> cache;
  const auto y = batchnorm_forward(x, st, Mode::train, &cache);
  for (std::size_t c = 0; c < 3; ++c) {
    double m = 0, v = 0;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t i = 0; i < 25; ++i) m += y.plane(n, c)[i];
    m /= 100;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t i = 0; i < 25; ++i) v += std::pow(y.plane(n, c)[i] - m, 2);
    v /= 100;
    CHECK(std::abs(m) < 1e-4);
    CHECK(std::abs(v - 1) < 1e-4);
  }
  // running stats moved off the identity towards the batch statistics
  CHECK(st.running_mean[0] != 0.0);

  auto eval_st = BatchNormState<double>::identity(3);
  const auto ye = batchnorm_forward<double>(x, eval_st, Mode::eval, nullptr);
  CHECK(oracle::max_abs_diff(ye, x) < 1e-4 * 5);

  const Tensor4d constant(2, 1, 3, 3, 7.0);
  auto cst = BatchNormState<double>::identity(1);
  cst.beta[0] = 0.25;
  const Tensor4d flat = batchnorm_forward(constant, cst, Mode::train, &cache);
  for (double v : flat.values()) CHECK(v == doctest::Approx(0.25));

  const auto dy = oracle::random_tensor<double>({4, 3, 5, 5}, rng);
  batchnorm_forward(x, st, Mode::train, &cache);
  const auto g = batchnorm_backward(dy, cache, st);
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t i = 0; i < 25; ++i) s += dy.plane(n, c)[i];
    CHECK(g.dbeta[c] == doctest::Approx(s));
  }
  const auto g0 = batchnorm_backward(Tensor4d(4, 3, 5, 5), cache, st);
  CHECK(sum(g0.dx) == 0.0);
}

TEST_CASE("dropout") {
  std::mt19937_64 rng(6);
  const auto x = oracle::random_tensor<float>({2, 3, 4, 4}, rng);
  Rng drng(1);
  CHECK(dropout_forward(x, 0.5, Mode::eval, drng, nullptr) == x);
  CHECK(dropout_forward(x, 0.0, Mode::train, drng, nullptr) == x);

  std::vector<std::uint8_t> mask;
  const Tensor4 y = dropout_forward(x, 0.5, Mode::train, drng, &mask);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(y[i] == (mask[i] ? x[i] / 0.5f : 0.f));
  CHECK(dropout_apply_mask(x, 0.5, mask) == y);

  // Monte Carlo: mean output equals the input within three standard errors
  const Tensor4 big(1, 1, 100, 100, 2.f);
  const Tensor4 out = dropout_forward(big, 0.5, Mode::train, drng, &mask);
  const double m = mean(out);
  const double se = 2.0 / std::sqrt(10000.0);  // sd of 4*Bernoulli(0.5) is 2
  CHECK(std::abs(m - 2.0) < 3 * se);
}

TEST_CASE("fully connected") {
  Tensor4 x(2, 2, 1, 2);
  std::iota(x.data(), x.data() + x.size(), 1.f);
  Tensor4 w(4, 2, 1, 2);
  for (std::size_t i = 0; i < 4; ++i) w(i, i / 2, 0, i % 2) = 1.f;
  const Tensor4 y = fc_forward(x, w, Tensor4(1, 4, 1, 1));
  CHECK(y.shape() == Shape{2, 4, 1, 1});
  for (std::size_t i = 0; i < 8; ++i) CHECK(y[i] == x[i]);
  Tensor4 b(1, 4, 1, 1);
  b[2] = 3.f;
  const Tensor4 yb = fc_forward(x, Tensor4(4, 2, 1, 2), b);
  CHECK(yb(1, 2, 0, 0) == 3.f);
  CHECK(yb(1, 1, 0, 0) == 0.f);
}

TEST_CASE("softmax cross-entropy") {
  Tensor4 uniform(1, 6, 2, 2);
  LabelBatch t(1, 2, 2, 3);
  const auto r = softmax_xent(uniform, t);
  CHECK(r.loss == doctest::Approx(std::log(6.0)).epsilon(1e-6));
  for (float p : r.probs.values()) CHECK(p == doctest::Approx(1.0 / 6));

  Tensor4 sat(1, 6, 1, 1);
  sat[2] = 50.f;
  LabelBatch t2(1, 1, 1, 2);
  CHECK(softmax_xent(sat, t2).loss < 1e-9);

  std::mt19937_64 rng(8);
  const auto s = oracle::random_tensor<float>({3, 5, 4, 4}, rng, -10, 10);
  LabelBatch lab(3, 4, 4);
  for (auto& l : lab.data) l = static_cast<Label>(rng() % 5);
  lab(1, 2, 2) = kIgnoreLabel;
  const auto res = softmax_xent(s, lab);
  CHECK(res.loss >= 0.f);
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t p = 0; p < 16; ++p) {
      double acc = 0;
      for (std::size_t c = 0; c < 5; ++c) {
        const float v = res.probs.plane(n, c)[p];
        CHECK(v > 0.f);
        CHECK(v < 1.f);
        acc += v;
      }
      CHECK(std::abs(acc - 1.0) < 1e-6);
    }
  for (std::size_t c = 0; c < 5; ++c) CHECK(res.dscores(1, c, 2, 2) == 0.f);

  LabelBatch all_ignored(1, 2, 2, kIgnoreLabel);
  CHECK_THROWS_AS(softmax_xent(uniform, all_ignored), DataError);
  LabelBatch bad(1, 2, 2, 9);
  CHECK_THROWS_AS(softmax_xent(uniform, bad), DataError);
}

TEST_CASE("layer objects accumulate gradients") {
  std::mt19937_64 rng(10);
  Conv2d<double> conv("c", 2, 3, {3, 1, 1});
  Rng init(2);
  conv.init_weights(init);
  const auto x = oracle::random_tensor<double>({2, 2, 5, 5}, rng);
  ForwardContext ctx;
  const auto y = conv.forward(x, ctx);
  const auto dy = oracle::random_tensor<double>(y.shape(), rng);
  conv.backward(dy);
  const Tensor4d once = conv.weight().grad;
  conv.backward(dy);
  for (std::size_t i = 0; i < once.size(); ++i) CHECK(conv.weight().grad[i] == 2 * once[i]);
}

TEST_CASE("initialisation scale") {
  Conv2d<float> conv("c", 16, 64, {5, 1, 2});
  Rng rng(3);
  conv.init_weights(rng);
  double ss = 0;
  for (float v : conv.weight().value.values()) ss += double(v) * v;
  const double sd = std::sqrt(ss / conv.weight().value.size());
  CHECK(sd == doctest::Approx(init_stddev(25, 64)).epsilon(0.03));
  for (float v : conv.bias().value.values()) CHECK(v == 0.f);
}

TEST_CASE("finite-difference gradient checks") {
  GradCheckConfig cfg;
  cfg.trials = 5;
  const auto report = run_gradcheck(cfg);
  for (const auto& s : report.summaries) {
    INFO(s.kind << " worst " << s.worst);
    CHECK(s.failures == 0);
  }
  CHECK(report.pass());
}

TEST_CASE("gradient check catches an injected fault") {
  for (const auto& kind : gradcheck_kinds()) {
    GradCheckConfig cfg;
    cfg.trials = 2;
    cfg.kinds = {kind};
    cfg.inject_fault = kind;
    INFO(kind);
    CHECK_FALSE(run_gradcheck(cfg).pass());
  }
}
