#include "dlbl/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <numeric>

#include "dlbl/layers.hpp"

namespace dlbl {

namespace {

using T = Tensor4d;

std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

T uniform(const Shape& s, Rng& rng) {
  T t(s);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (auto& v : t.values()) v = u(rng);
  return t;
}

// Distinct values spread over [-1, 1] in random order, so no two window
// candidates are ever within a finite-difference step of each other.
T distinct(const Shape& s, Rng& rng) {
  T t(s);
  std::vector<std::size_t> order(t.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  const double span = static_cast<double>(std::max<std::size_t>(1, t.size() - 1));
  for (std::size_t i = 0; i < t.size(); ++i) {
    t[i] = -1.0 + 2.0 * static_cast<double>(order[i]) / span;
  }
  return t;
}

// Pushes entries away from the leaky ReLU kink at 0.
T away_from_zero(const Shape& s, Rng& rng) {
  T t = uniform(s, rng);
  for (auto& v : t.values()) {
    if (std::abs(v) < 0.05) v = v < 0 ? v - 0.05 : v + 0.05;
  }
  return t;
}

struct Case {
  std::unique_ptr<Layer<double>> layer;
  T input;
};

Case make_case(const std::string& kind, Rng& rng) {
  const std::size_t n = pick(rng, 1, 2);
  if (kind == "conv") {
    const std::size_t m = 2 * pick(rng, 0, 2) + 1;
    const std::size_t s = pick(rng, 1, 2);
    const std::size_t z = pick(rng, 0, (m - 1) / 2);
    auto side = [&] {
      std::size_t h;
      do {
        h = pick(rng, std::max<std::size_t>(1, m > 2 * z ? m - 2 * z : 1), m + 5);
      } while ((h + 2 * z - m) % s != 0);
      return h;
    };
    const std::size_t cin = pick(rng, 1, 3);
    const Shape in{n, cin, side(), side()};
    return {std::make_unique<Conv2d<double>>("conv", cin, pick(rng, 1, 3),
                                             ConvGeometry{m, s, z}),
            uniform(in, rng)};
  }
  if (kind == "deconv") {
    const std::size_t m = 2 * pick(rng, 0, 2) + 1;
    const std::size_t s = pick(rng, 1, 2);
    const std::size_t z = pick(rng, 0, (m - 1) / 2);
    const std::size_t cin = pick(rng, 1, 3);
    const Shape in{n, cin, pick(rng, 2, 5), pick(rng, 2, 5)};
    return {std::make_unique<Deconv2d<double>>("deconv", cin, pick(rng, 1, 3),
                                               ConvGeometry{m, s, z}),
            uniform(in, rng)};
  }
  if (kind == "maxpool" || kind == "avgpool") {
    PoolGeometry g;
    g.window = pick(rng, 2, 3);
    g.stride = pick(rng, 1, 2);
    g.pad = pick(rng, 0, g.window - 1);
    g.mode = kind == "maxpool" ? PoolMode::max : PoolMode::average;
    const Shape in{n, pick(rng, 1, 3), pick(rng, g.window, 7), pick(rng, g.window, 7)};
    return {std::make_unique<Pool2d<double>>(kind, g), distinct(in, rng)};
  }
  if (kind == "bn") {
    const std::size_t c = pick(rng, 1, 3);
    const Shape in{pick(rng, 2, 3), c, pick(rng, 2, 4), pick(rng, 2, 4)};
    return {std::make_unique<BatchNorm<double>>("bn", c), uniform(in, rng)};
  }
  if (kind == "lrelu") {
    const double tau = std::uniform_real_distribution<double>(0.05, 0.3)(rng);
    const Shape in{n, pick(rng, 1, 3), pick(rng, 1, 6), pick(rng, 1, 6)};
    return {std::make_unique<LeakyRelu<double>>("lrelu", tau), away_from_zero(in, rng)};
  }
  if (kind == "dropout") {
    const double rate = std::uniform_real_distribution<double>(0.2, 0.7)(rng);
    const Shape in{n, pick(rng, 1, 3), pick(rng, 1, 6), pick(rng, 1, 6)};
    auto layer = std::make_unique<Dropout<double>>("dropout", rate);
    layer->freeze_mask(true);
    return {std::move(layer), uniform(in, rng)};
  }
  if (kind == "fc") {
    const Shape extent{1, pick(rng, 1, 3), pick(rng, 1, 4), pick(rng, 1, 4)};
    const Shape in{n, extent.channels, extent.height, extent.width};
    return {std::make_unique<FullyConnected<double>>("fc", extent, pick(rng, 1, 4)),
            uniform(in, rng)};
  }
  throw ConfigError("gradcheck: unknown layer kind '" + kind + "'");
}

std::vector<double> to_vec(const T& t) { return {t.values().begin(), t.values().end()}; }

// Central differences of f with respect to every entry of `v`.
std::vector<double> numeric_grad(T& v, double h, const std::function<double()>& f) {
  std::vector<double> g(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double keep = v[i];
    v[i] = keep + h;
    const double fp = f();
    v[i] = keep - h;
    const double fm = f();
    v[i] = keep;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

void inject(std::vector<double>& g) {
  for (auto& v : g) v = v * 1.01 + 1e-3;
}

void check_layer(const std::string& kind, std::size_t trial, Rng& rng,
                 const GradCheckConfig& cfg, GradCheckReport& out) {
  Case c = make_case(kind, rng);
  Layer<double>& layer = *c.layer;
  layer.init_weights(rng);
  for (auto* p : layer.params()) {
    // random gammas/biases exercise more than the identity initialisation
    p->value = uniform(p->value.shape(), rng);
  }
  Rng drop_rng(rng());
  ForwardContext ctx{Mode::train, &drop_rng, true};
  T& x = c.input;
  const T y0 = layer.forward(x, ctx);
  const T r = uniform(y0.shape(), rng);

  for (auto* p : layer.params()) p->grad.fill(0.0);
  std::vector<double> dx = to_vec(layer.backward(r));

  auto objective = [&] { return dot(layer.forward(x, ctx), r); };
  const bool faulty = cfg.inject_fault == kind;

  auto record = [&](const std::string& target, std::vector<double> analytic,
                    const std::vector<double>& numeric) {
    if (faulty) inject(analytic);
    GradCheckRecord rec{kind, trial, target, x.shape().str(),
                        normwise_relative_error(analytic, numeric), false};
    rec.pass = std::isfinite(rec.rel_error) && rec.rel_error < cfg.tolerance;
    out.records.push_back(rec);
  };

  record("input", dx, numeric_grad(x, cfg.step, objective));
  for (auto* p : layer.params()) {
    record(p->name, to_vec(p->grad), numeric_grad(p->value, cfg.step, objective));
  }
}

void check_xent(std::size_t trial, Rng& rng, const GradCheckConfig& cfg,
                GradCheckReport& out) {
  const Shape s{pick(rng, 1, 3), pick(rng, 2, 5), pick(rng, 1, 5), pick(rng, 1, 5)};
  T scores = uniform(s, rng);
  for (auto& v : scores.values()) v *= 3.0;
  LabelBatch labels(s.batch, s.height, s.width);
  std::bernoulli_distribution ignore(0.2);
  for (auto& l : labels.data) {
    l = ignore(rng) ? kIgnoreLabel : static_cast<Label>(pick(rng, 0, s.channels - 1));
  }
  labels.data[0] = 0;  // at least one valid pixel
  const auto res = softmax_xent(scores, labels);
  std::vector<double> analytic = to_vec(res.dscores);
  if (cfg.inject_fault == "softmax_xent") inject(analytic);
  const auto numeric =
      numeric_grad(scores, cfg.step, [&] { return softmax_xent(scores, labels).loss; });
  GradCheckRecord rec{"softmax_xent", trial, "input", s.str(),
                      normwise_relative_error(analytic, numeric), false};
  rec.pass = std::isfinite(rec.rel_error) && rec.rel_error < cfg.tolerance;
  out.records.push_back(rec);
}

}  // namespace

const std::vector<std::string>& gradcheck_kinds() {
  static const std::vector<std::string> kinds{
      "conv", "deconv", "maxpool", "avgpool", "bn", "lrelu", "dropout", "fc", "softmax_xent"};
  return kinds;
}

bool GradCheckReport::pass() const {
  if (summaries.empty()) return false;
  return std::all_of(summaries.begin(), summaries.end(),
                     [](const GradCheckSummary& s) { return s.failures == 0; });
}

double normwise_relative_error(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ShapeError("gradient vectors differ in length");
  double diff = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::sqrt(std::max(na, nb));
  if (denom == 0.0) return std::sqrt(diff);
  return std::sqrt(diff) / denom;
}

GradCheckReport run_gradcheck(const GradCheckConfig& cfg) {
  const auto& kinds = cfg.kinds.empty() ? gradcheck_kinds() : cfg.kinds;
  if (!cfg.inject_fault.empty() &&
      std::find(gradcheck_kinds().begin(), gradcheck_kinds().end(), cfg.inject_fault) ==
          gradcheck_kinds().end()) {
    throw ConfigError("gradcheck: unknown fault target '" + cfg.inject_fault + "'");
  }
  GradCheckReport report;
  for (const auto& kind : kinds) {
    // one stream per kind so adding kinds never changes another kind's shapes
    Rng rng(cfg.seed ^ std::hash<std::string>{}(kind));
    const std::size_t first = report.records.size();
    for (std::size_t t = 0; t < cfg.trials; ++t) {
      if (kind == "softmax_xent") check_xent(t, rng, cfg, report);
      else check_layer(kind, t, rng, cfg, report);
    }
    GradCheckSummary sum{kind, cfg.trials, 0, 0.0};
    std::vector<bool> trial_failed(cfg.trials, false);
    for (std::size_t i = first; i < report.records.size(); ++i) {
      const auto& rec = report.records[i];
      sum.worst = std::max(sum.worst, rec.rel_error);
      if (!rec.pass) trial_failed[rec.trial] = true;
    }
    sum.failures = static_cast<std::size_t>(
        std::count(trial_failed.begin(), trial_failed.end(), true));
    report.summaries.push_back(sum);
  }
  return report;
}

}  // namespace dlbl
