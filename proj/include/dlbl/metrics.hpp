#pragma once

// Confusion-matrix accounting and the four evaluation regimes: full, no bk
// (background class dropped), and their eroded-reference variants.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "dlbl/kv.hpp"
#include "dlbl/tensor.hpp"

namespace dlbl {

// Rows are reference classes, columns predicted classes.
struct ConfusionMatrix {
  std::size_t classes = 0;
  std::vector<std::uint64_t> counts;
  std::uint64_t ignored = 0;  // pixels skipped (masked out or reference ignore)

  ConfusionMatrix() = default;
  explicit ConfusionMatrix(std::size_t c) : classes(c), counts(c * c, 0) {}

  std::uint64_t& at(std::size_t ref, std::size_t pred) { return counts[ref * classes + pred]; }
  std::uint64_t at(std::size_t ref, std::size_t pred) const { return counts[ref * classes + pred]; }
  std::uint64_t total() const;
  std::uint64_t row_sum(std::size_t c) const;
  std::uint64_t col_sum(std::size_t c) const;
  std::uint64_t trace() const;

  ConfusionMatrix& operator+=(const ConfusionMatrix& o);
  bool operator==(const ConfusionMatrix&) const = default;
};

// Counts pixels where the mask (if given) is non-zero and the reference is
// not kIgnoreLabel. Predictions outside [0, classes) throw DataError.
ConfusionMatrix confusion(const LabelMap& pred, const LabelMap& reference,
                          const Mask* eval_mask, std::size_t classes);

// Copy with every pixel whose reference is `c` removed; predictions of `c`
// elsewhere stay as errors.
ConfusionMatrix drop_reference_class(const ConfusionMatrix& cm, std::size_t c);

enum class F1Form { harmonic, geometric };

struct Metrics {
  double oa = 0, kappa = 0, aa = 0, f1 = 0;
  // Per class; NaN for classes with no reference pixels, which are left out
  // of the AA and F1 averages.
  std::vector<double> class_accuracy;
  std::vector<double> class_f1;
  std::size_t excluded_classes = 0;
};

// Throws DataError when the matrix is empty.
Metrics derive_metrics(const ConfusionMatrix& cm, F1Form form = F1Form::harmonic);

// Non-zero where every pixel of the disc dx^2 + dy^2 <= radius^2 around it
// has the same reference label. Pixels beyond the image border do not erode.
Mask erode_reference(const LabelMap& reference, int radius = 3);

enum class Regime { full = 0, no_bk = 1, er_full = 2, er_no_bk = 3 };
inline constexpr std::size_t kRegimeCount = 4;
const char* regime_name(Regime r);

// Confusion matrices of all four regimes, summable over tiles.
struct RegimeCounts {
  std::array<ConfusionMatrix, kRegimeCount> cm;

  RegimeCounts() = default;
  explicit RegimeCounts(std::size_t classes);
  void add(const LabelMap& pred, const LabelMap& reference, std::size_t background);
  RegimeCounts& operator+=(const RegimeCounts& o);
};

struct MetricsReport {
  std::size_t classes = 0;
  std::size_t background = 0;
  std::array<Metrics, kRegimeCount> regimes;

  const Metrics& operator[](Regime r) const { return regimes[static_cast<std::size_t>(r)]; }

  // Aligned table: one row per regime, per-class F1 then OA, Kappa, AA, F1.
  std::string table() const;
  KeyValues key_values() const;
};

MetricsReport make_report(const RegimeCounts& counts, std::size_t background,
                          F1Form form = F1Form::harmonic);

MetricsReport evaluate_regimes(const LabelMap& pred, const LabelMap& reference,
                               std::size_t classes, std::size_t background,
                               F1Form form = F1Form::harmonic);

}  // namespace dlbl
