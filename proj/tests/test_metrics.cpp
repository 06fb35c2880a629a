#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dlbl/data.hpp"
#include "dlbl/metrics.hpp"
#include "oracles.hpp"

using namespace dlbl;

namespace {

LabelMap from(std::size_t h, std::size_t w, std::vector<Label> v) {
  LabelMap m(h, w);
  m.data = std::move(v);
  return m;
}

ConfusionMatrix matrix(std::size_t c, std::vector<std::uint64_t> v) {
  ConfusionMatrix cm(c);
  cm.counts = std::move(v);
  return cm;
}

}  // namespace

TEST_CASE("confusion counting") {
  const LabelMap ref = from(2, 5, {0, 1, 2, 2, 1, 0, 0, kIgnoreLabel, 1, 2});
  const LabelMap pred = from(2, 5, {0, 2, 2, 1, 1, 0, 1, 0, 1, 2});
  const ConfusionMatrix cm = confusion(pred, ref, nullptr, 3);
  // by hand: (0,0) x2, (0,1) x1, (1,1) x2, (1,2) x1, (2,2) x2, (2,1) x1, one ignore
  CHECK(cm.counts == std::vector<std::uint64_t>{2, 1, 0, 0, 2, 1, 0, 1, 2});
  CHECK(cm.ignored == 1);
  CHECK(cm.total() + cm.ignored == 10);

  const ConfusionMatrix diag = confusion(ref, ref, nullptr, 3);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 3; ++c)
      if (r != c) CHECK(diag.at(r, c) == 0);

  const Mask none(2, 5, 0);
  const ConfusionMatrix empty = confusion(pred, ref, &none, 3);
  CHECK(empty.total() == 0);
  CHECK(empty.ignored == 10);
  CHECK_THROWS_AS(derive_metrics(empty), DataError);
  CHECK_THROWS_AS(confusion(from(1, 1, {7}), from(1, 1, {0}), nullptr, 3), DataError);
}

TEST_CASE("derived metrics: worked examples") {
  const Metrics perfect = derive_metrics(matrix(3, {4, 0, 0, 0, 5, 0, 0, 0, 1}));
  CHECK(perfect.oa == 1.0);
  CHECK(perfect.kappa == 1.0);
  CHECK(perfect.aa == 1.0);
  CHECK(perfect.f1 == 1.0);

  const Metrics m = derive_metrics(matrix(2, {50, 10, 5, 35}));
  CHECK(m.oa == doctest::Approx(0.85).epsilon(1e-12));
  // p_e = (60*55 + 40*45) / 100^2 = 0.51
  CHECK(m.kappa == doctest::Approx((0.85 - 0.51) / 0.49).epsilon(1e-12));
  CHECK(std::abs(m.kappa - 0.6939) < 1e-4);
  CHECK(m.aa == doctest::Approx((50.0 / 60 + 35.0 / 40) / 2));
  const double p0 = 50.0 / 55, r0 = 50.0 / 60, p1 = 35.0 / 45, r1 = 35.0 / 40;
  CHECK(m.f1 == doctest::Approx((2 * p0 * r0 / (p0 + r0) + 2 * p1 * r1 / (p1 + r1)) / 2));
  const Metrics g = derive_metrics(matrix(2, {50, 10, 5, 35}), F1Form::geometric);
  CHECK(g.f1 == doctest::Approx((std::sqrt(p0 * r0) + std::sqrt(p1 * r1)) / 2));

  // classes absent from the reference are excluded; a present class never
  // predicted correctly scores F1 0
  const Metrics e = derive_metrics(matrix(3, {5, 0, 0, 0, 0, 0, 3, 0, 0}));
  CHECK(e.excluded_classes == 1);
  CHECK(std::isnan(e.class_f1[1]));
  CHECK(e.class_f1[2] == 0.0);
  CHECK(e.aa == doctest::Approx(0.5));
}

TEST_CASE("chance-level predictions have kappa near zero") {
  std::mt19937_64 rng(5);
  std::discrete_distribution<int> ref_d({5, 3, 1, 1, 0.2, 0.5}), pred_d({1, 1, 2, 1, 1, 3});
  LabelMap ref(100, 1000), pred(100, 1000);
  for (std::size_t i = 0; i < ref.size(); ++i) {
    ref.data[i] = static_cast<Label>(ref_d(rng));
    pred.data[i] = static_cast<Label>(pred_d(rng));
  }
  const Metrics m = derive_metrics(confusion(pred, ref, nullptr, 6));
  CHECK(std::abs(m.kappa) < 0.02);
}

TEST_CASE("metrics agree with the per-pixel oracle") {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t classes = 2 + rng() % 5;
    LabelMap ref(10, 10), pred(10, 10);
    Mask mask(10, 10, 1);
    const bool skewed = trial % 3 == 0;
    for (std::size_t i = 0; i < 100; ++i) {
      ref.data[i] = static_cast<Label>(rng() % classes);
      pred.data[i] = skewed && rng() % 2 ? ref.data[i] : static_cast<Label>(rng() % classes);
      if (rng() % 10 == 0) ref.data[i] = kIgnoreLabel;
      if (trial % 2 && rng() % 4 == 0) mask.data[i] = 0;
    }
    const auto o = oracle::pixel_scores(pred.data, ref.data, mask.data, classes);
    const Metrics m = derive_metrics(confusion(pred, ref, &mask, classes));
    REQUIRE(m.oa == o.oa);
    REQUIRE(m.kappa == o.kappa);
    REQUIRE(m.aa == o.aa);
    REQUIRE(m.f1 == o.f1);
  }
}

TEST_CASE("metric invariants") {
  std::mt19937_64 rng(23);
  for (int trial = 0; trial < 200; ++trial) {
    LabelMap ref(8, 8), pred(8, 8);
    for (std::size_t i = 0; i < 64; ++i) {
      ref.data[i] = static_cast<Label>(rng() % 4);
      pred.data[i] = rng() % 3 ? ref.data[i] : static_cast<Label>(rng() % 4);
    }
    const ConfusionMatrix cm = confusion(pred, ref, nullptr, 4);
    const Metrics m = derive_metrics(cm);
    REQUIRE(m.oa >= 0.0);
    REQUIRE(m.oa <= 1.0);
    REQUIRE(m.kappa >= -1.0);
    REQUIRE(m.kappa <= 1.0);
    if (m.oa > 0 && m.oa < 1) REQUIRE(m.kappa < m.oa);

    std::array<Label, 4> perm{0, 1, 2, 3};
    std::shuffle(perm.begin(), perm.end(), rng);
    LabelMap pr = ref, pp = pred;
    for (auto& v : pr.data) v = perm[v];
    for (auto& v : pp.data) v = perm[v];
    const Metrics q = derive_metrics(confusion(pp, pr, nullptr, 4));
    REQUIRE(q.oa == doctest::Approx(m.oa).epsilon(1e-12));
    REQUIRE(q.kappa == doctest::Approx(m.kappa).epsilon(1e-12));
    REQUIRE(q.aa == doctest::Approx(m.aa).epsilon(1e-12));
    REQUIRE(q.f1 == doctest::Approx(m.f1).epsilon(1e-12));
  }
}

TEST_CASE("reference erosion") {
  const LabelMap uniform(12, 9, 2);
  const Mask all = erode_reference(uniform);
  CHECK(std::all_of(all.data.begin(), all.data.end(), [](auto v) { return v == 1; }));

  const std::size_t k = 10;
  LabelMap halves(6, 20, 0);
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t c = k; c < 20; ++c) halves(r, c) = 1;
  const Mask m = erode_reference(halves);
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t c = 0; c < 20; ++c) {
      const bool near = c + 3 >= k && c <= k + 2;  // within 3 columns on either side
      REQUIRE(m(r, c) == (near ? 0 : 1));
    }

  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    LabelMap ref(14, 17);
    // blocky regions so that both eroded and surviving pixels occur
    for (std::size_t r = 0; r < 14; ++r)
      for (std::size_t c = 0; c < 17; ++c) ref(r, c) = static_cast<Label>((r / 7 + c / 9 + trial) % 3);
    for (int spot = 0; spot < 3; ++spot) ref(rng() % 14, rng() % 17) = kIgnoreLabel;
    const Mask e = erode_reference(ref);
    REQUIRE(e.data == oracle::eroded_mask(ref, 3));
  }
}

TEST_CASE("evaluation regimes") {
  LabelMap ref(64, 64, 0);
  for (std::size_t r = 0; r < 64; ++r)
    for (std::size_t c = 0; c < 64; ++c) {
      if (c >= 20 && c < 44 && r >= 10 && r < 50) ref(r, c) = 1;
      if (r >= 52 && c < 16) ref(r, c) = 5;
      if (r < 8 && c >= 50) ref(r, c) = 3;
    }
  const MetricsReport same = evaluate_regimes(ref, ref, 6, 5);
  for (const auto& m : same.regimes) {
    CHECK(m.oa == 1.0);
    CHECK(m.kappa == 1.0);
    CHECK(m.aa == 1.0);
    CHECK(m.f1 == 1.0);
  }

  // errors only inside the boundary band
  const Mask inner = erode_reference(ref);
  LabelMap pred = ref;
  std::size_t flipped = 0;
  for (std::size_t i = 0; i < pred.size(); ++i)
    if (!inner.data[i] && i % 2 == 0) {
      pred.data[i] = static_cast<Label>((pred.data[i] + 1) % 6);
      ++flipped;
    }
  REQUIRE(flipped > 0);
  const MetricsReport noisy = evaluate_regimes(pred, ref, 6, 5);
  CHECK(noisy[Regime::er_full].oa == 1.0);
  CHECK(noisy[Regime::er_no_bk].oa == 1.0);
  CHECK(noisy[Regime::er_full].oa > noisy[Regime::full].oa);
  CHECK(noisy[Regime::er_no_bk].oa > noisy[Regime::no_bk].oa);

  LabelMap no_clutter = ref;
  for (auto& v : no_clutter.data)
    if (v == 5) v = 2;
  const MetricsReport nb = evaluate_regimes(pred, no_clutter, 6, 5);
  CHECK(nb[Regime::no_bk].oa == nb[Regime::full].oa);
  CHECK(nb[Regime::no_bk].f1 == nb[Regime::full].f1);

  // dropping the background class removes its reference pixels only
  const ConfusionMatrix cm = matrix(3, {4, 1, 1, 0, 3, 2, 1, 1, 6});
  const ConfusionMatrix dropped = drop_reference_class(cm, 2);
  CHECK(dropped.total() == 11);
  CHECK(dropped.col_sum(2) == 3);
  CHECK(derive_metrics(dropped).excluded_classes == 1);

  const std::string table = noisy.table();
  CHECK(table.find("er no bk") != std::string::npos);
  CHECK(table.find("OA") != std::string::npos);
  const KeyValues kv = noisy.key_values();
  CHECK(kv.has("er_full.oa"));
  CHECK(kv.real("er_full.oa", 0) == doctest::Approx(1.0));
}
