#include "dlbl/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <limits>

#include "dlbl/data.hpp"
#include "dlbl/errors.hpp"

namespace dlbl {

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t s = 0;
  for (auto v : counts) s += v;
  return s;
}

std::uint64_t ConfusionMatrix::row_sum(std::size_t c) const {
  std::uint64_t s = 0;
  for (std::size_t p = 0; p < classes; ++p) s += at(c, p);
  return s;
}

std::uint64_t ConfusionMatrix::col_sum(std::size_t c) const {
  std::uint64_t s = 0;
  for (std::size_t r = 0; r < classes; ++r) s += at(r, c);
  return s;
}

std::uint64_t ConfusionMatrix::trace() const {
  std::uint64_t s = 0;
  for (std::size_t c = 0; c < classes; ++c) s += at(c, c);
  return s;
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& o) {
  if (o.classes != classes) throw DataError("cannot add confusion matrices of different class counts");
  for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += o.counts[i];
  ignored += o.ignored;
  return *this;
}

ConfusionMatrix confusion(const LabelMap& pred, const LabelMap& reference, const Mask* eval_mask,
                          std::size_t classes) {
  if (pred.height != reference.height || pred.width != reference.width) {
    throw DataError("prediction and reference sizes differ");
  }
  if (eval_mask && (eval_mask->height != reference.height || eval_mask->width != reference.width)) {
    throw DataError("evaluation mask size differs from the reference");
  }
  ConfusionMatrix cm(classes);
  for (std::size_t i = 0; i < reference.size(); ++i) {
    const Label r = reference.data[i];
    if ((eval_mask && !eval_mask->data[i]) || r == kIgnoreLabel) {
      ++cm.ignored;
      continue;
    }
    const Label p = pred.data[i];
    if (r >= classes) throw DataError("reference label " + std::to_string(r) + " out of range");
    if (p >= classes) throw DataError("predicted label " + std::to_string(p) + " out of range");
    ++cm.at(r, p);
  }
  return cm;
}

ConfusionMatrix drop_reference_class(const ConfusionMatrix& cm, std::size_t c) {
  ConfusionMatrix out = cm;
  for (std::size_t p = 0; p < cm.classes; ++p) {
    out.ignored += out.at(c, p);
    out.at(c, p) = 0;
  }
  return out;
}

Metrics derive_metrics(const ConfusionMatrix& cm, F1Form form) {
  const std::uint64_t total = cm.total();
  if (total == 0) throw DataError("confusion matrix is empty");
  const double n = static_cast<double>(total);
  Metrics m;
  m.oa = static_cast<double>(cm.trace()) / n;
  double expected = 0;
  for (std::size_t c = 0; c < cm.classes; ++c) {
    expected += static_cast<double>(cm.row_sum(c)) * static_cast<double>(cm.col_sum(c));
  }
  const double pe = expected / (n * n);
  m.kappa = pe >= 1.0 ? 1.0 : (m.oa - pe) / (1.0 - pe);

  const double nan = std::numeric_limits<double>::quiet_NaN();
  m.class_accuracy.assign(cm.classes, nan);
  m.class_f1.assign(cm.classes, nan);
  double aa = 0, f1 = 0;
  std::size_t used = 0;
  for (std::size_t c = 0; c < cm.classes; ++c) {
    const std::uint64_t row = cm.row_sum(c);
    if (row == 0) {
      ++m.excluded_classes;
      continue;
    }
    const std::uint64_t col = cm.col_sum(c);
    const double diag = static_cast<double>(cm.at(c, c));
    const double recall = diag / static_cast<double>(row);
    double score = 0;
    if (diag > 0) {
      const double precision = diag / static_cast<double>(col);
      score = form == F1Form::harmonic ? 2 * precision * recall / (precision + recall)
                                       : std::sqrt(precision * recall);
    }
    m.class_accuracy[c] = recall;
    m.class_f1[c] = score;
    aa += recall;
    f1 += score;
    ++used;
  }
  m.aa = aa / static_cast<double>(used);
  m.f1 = f1 / static_cast<double>(used);
  return m;
}

Mask erode_reference(const LabelMap& reference, int radius) {
  if (radius < 0) throw ConfigError("erosion radius must be non-negative");
  std::vector<std::pair<int, int>> disc;
  for (int dy = -radius; dy <= radius; ++dy)
    for (int dx = -radius; dx <= radius; ++dx)
      if ((dx != 0 || dy != 0) && dx * dx + dy * dy <= radius * radius) disc.emplace_back(dy, dx);
  const int h = static_cast<int>(reference.height), w = static_cast<int>(reference.width);
  Mask mask(reference.height, reference.width, 1);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const Label v = reference.data[static_cast<std::size_t>(y) * reference.width + x];
      for (const auto& [dy, dx] : disc) {
        const int yy = y + dy, xx = x + dx;
        if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
        if (reference.data[static_cast<std::size_t>(yy) * reference.width + xx] != v) {
          mask.data[static_cast<std::size_t>(y) * reference.width + x] = 0;
          break;
        }
      }
    }
  }
  return mask;
}

const char* regime_name(Regime r) {
  switch (r) {
    case Regime::full:
      return "full";
    case Regime::no_bk:
      return "no bk";
    case Regime::er_full:
      return "er full";
    case Regime::er_no_bk:
      return "er no bk";
  }
  return "?";
}

RegimeCounts::RegimeCounts(std::size_t classes) {
  for (auto& c : cm) c = ConfusionMatrix(classes);
}

void RegimeCounts::add(const LabelMap& pred, const LabelMap& reference, std::size_t background) {
  const std::size_t classes = cm[0].classes;
  const ConfusionMatrix full = confusion(pred, reference, nullptr, classes);
  const Mask eroded = erode_reference(reference);
  const ConfusionMatrix er = confusion(pred, reference, &eroded, classes);
  cm[0] += full;
  cm[1] += drop_reference_class(full, background);
  cm[2] += er;
  cm[3] += drop_reference_class(er, background);
}

RegimeCounts& RegimeCounts::operator+=(const RegimeCounts& o) {
  for (std::size_t i = 0; i < kRegimeCount; ++i) cm[i] += o.cm[i];
  return *this;
}

MetricsReport make_report(const RegimeCounts& counts, std::size_t background, F1Form form) {
  MetricsReport r;
  r.classes = counts.cm[0].classes;
  r.background = background;
  for (std::size_t i = 0; i < kRegimeCount; ++i) r.regimes[i] = derive_metrics(counts.cm[i], form);
  return r;
}

MetricsReport evaluate_regimes(const LabelMap& pred, const LabelMap& reference, std::size_t classes,
                               std::size_t background, F1Form form) {
  RegimeCounts counts(classes);
  counts.add(pred, reference, background);
  return make_report(counts, background, form);
}

namespace {

std::string label_of(std::size_t c, std::size_t classes) {
  if (classes == kNumClasses) return std::string(class_name(static_cast<Label>(c)));
  return "class" + std::to_string(c);
}

std::string pct(double v) {
  if (std::isnan(v)) return "-";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", 100.0 * v);
  return buf;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

std::string MetricsReport::table() const {
  std::vector<std::string> header{"regime"};
  for (std::size_t c = 0; c < classes; ++c) header.push_back(label_of(c, classes));
  for (const char* h : {"OA", "K", "AA", "F1"}) header.push_back(h);
  std::vector<std::vector<std::string>> rows{header};
  for (std::size_t i = 0; i < kRegimeCount; ++i) {
    const Metrics& m = regimes[i];
    std::vector<std::string> row{regime_name(static_cast<Regime>(i))};
    for (std::size_t c = 0; c < classes; ++c) row.push_back(pct(m.class_f1[c]));
    row.push_back(pct(m.oa));
    row.push_back(pct(m.kappa));
    row.push_back(pct(m.aa));
    row.push_back(pct(m.f1));
    rows.push_back(std::move(row));
  }
  std::vector<std::size_t> width(header.size(), 0);
  for (const auto& row : rows)
    for (std::size_t j = 0; j < row.size(); ++j) width[j] = std::max(width[j], row[j].size());
  std::string out;
  for (const auto& row : rows) {
    for (std::size_t j = 0; j < row.size(); ++j) {
      const std::string pad(width[j] - row[j].size(), ' ');
      out += j == 0 ? row[j] + pad : "  " + pad + row[j];
    }
    out += '\n';
  }
  return out;
}

KeyValues MetricsReport::key_values() const {
  KeyValues kv;
  kv.set("classes", std::to_string(classes));
  kv.set("background", std::to_string(background));
  static const char* keys[] = {"full", "no_bk", "er_full", "er_no_bk"};
  for (std::size_t i = 0; i < kRegimeCount; ++i) {
    const Metrics& m = regimes[i];
    const std::string p = std::string(keys[i]) + ".";
    kv.set(p + "oa", num(m.oa));
    kv.set(p + "kappa", num(m.kappa));
    kv.set(p + "aa", num(m.aa));
    kv.set(p + "f1", num(m.f1));
    kv.set(p + "excluded_classes", std::to_string(m.excluded_classes));
    for (std::size_t c = 0; c < classes; ++c) {
      if (std::isnan(m.class_f1[c])) continue;
      kv.set(p + "class" + std::to_string(c) + ".accuracy", num(m.class_accuracy[c]));
      kv.set(p + "class" + std::to_string(c) + ".f1", num(m.class_f1[c]));
    }
  }
  return kv;
}

}  // namespace dlbl
