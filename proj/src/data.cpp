#include "dlbl/data.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

namespace dlbl {

std::string_view class_name(Label c) {
  static constexpr std::array<std::string_view, kNumClasses> names{
      "impervious", "building", "low_vegetation", "tree", "car", "clutter"};
  if (c < kNumClasses) return names[c];
  return c == kIgnoreLabel ? "ignore" : "unknown";
}

const std::array<Rgb, kNumClasses>& class_palette() {
  static const std::array<Rgb, kNumClasses> palette{
      Rgb{255, 255, 255}, Rgb{0, 0, 255},   Rgb{0, 255, 255},
      Rgb{0, 255, 0},     Rgb{255, 255, 0}, Rgb{255, 0, 0}};
  return palette;
}

Label decode_color(Rgb c, bool lenient) {
  const auto& pal = class_palette();
  for (std::size_t k = 0; k < pal.size(); ++k)
    if (pal[k] == c) return static_cast<Label>(k);
  if (lenient) return kIgnoreLabel;
  throw DataError("label raster: colour (" + std::to_string(c.r) + "," +
                  std::to_string(c.g) + "," + std::to_string(c.b) +
                  ") is not in the class palette");
}

LabelMap decode_labels(const ColorRaster& colors, bool lenient) {
  LabelMap out(colors.height, colors.width);
  for (std::size_t i = 0; i < colors.size(); ++i) out.data[i] = decode_color(colors.data[i], lenient);
  return out;
}

ColorRaster encode_labels(const LabelMap& labels) {
  ColorRaster out(labels.height, labels.width);
  const auto& pal = class_palette();
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const Label l = labels.data[i];
    if (l < pal.size()) out.data[i] = pal[l];
    else if (l != kIgnoreLabel) throw DataError("encode_labels: class " + std::to_string(l) + " has no colour");
  }
  return out;
}

void check_tile(const Tile& t) {
  if (t.spectral.empty()) throw DataError("tile '" + t.id + "' has no spectral data");
  if (t.spectral.batch() != 1 || t.spectral.height() != t.labels.height ||
      t.spectral.width() != t.labels.width) {
    throw DataError("tile '" + t.id + "': spectral " + t.spectral.shape().str() +
                    " and labels " + std::to_string(t.labels.height) + "x" +
                    std::to_string(t.labels.width) + " are not co-registered");
  }
}

std::size_t Dataset::channels() const {
  if (!train.empty()) return train.front().channels();
  if (!validation.empty()) return validation.front().channels();
  return 0;
}

void Normalization::rescale(Tile& t) const {
  if (t.channels() != channels()) {
    throw DataError("tile '" + t.id + "' has " + std::to_string(t.channels()) +
                    " channels, normalisation expects " + std::to_string(channels()));
  }
  const std::size_t plane = t.spectral.shape().plane();
  for (std::size_t k = 0; k < channels(); ++k) {
    const float lo = min[k];
    const float span = max[k] > lo ? max[k] - lo : 1.f;
    float* p = t.spectral.plane(0, k);
    for (std::size_t i = 0; i < plane; ++i) p[i] = std::clamp((p[i] - lo) / span, 0.f, 1.f);
  }
}

Normalization fit_normalization(const std::vector<Tile>& train,
                                const std::vector<bool>& eight_bit) {
  if (train.empty()) throw DataError("normalisation needs at least one training tile");
  const std::size_t k = train.front().channels();
  if (eight_bit.size() != k) {
    throw ConfigError("normalisation: " + std::to_string(eight_bit.size()) +
                      " channel flags for " + std::to_string(k) + " channels");
  }
  Normalization n;
  n.min.assign(k, 0.f);
  n.max.assign(k, 255.f);
  for (std::size_t c = 0; c < k; ++c) {
    if (eight_bit[c]) continue;
    float lo = std::numeric_limits<float>::infinity(), hi = -lo;
    for (const auto& t : train) {
      const float* p = t.spectral.plane(0, c);
      for (std::size_t i = 0; i < t.spectral.shape().plane(); ++i) {
        if (t.labels.data[i] == kIgnoreLabel) continue;
        lo = std::min(lo, p[i]);
        hi = std::max(hi, p[i]);
      }
    }
    if (!(hi >= lo)) throw DataError("normalisation: channel " + std::to_string(c) + " has no pixels");
    n.min[c] = lo;
    n.max[c] = hi;
  }
  return n;
}

std::vector<double> class_frequencies(const std::vector<Tile>& tiles, std::size_t num_classes) {
  std::vector<double> f(num_classes, 0.0);
  double total = 0;
  for (const auto& t : tiles)
    for (Label l : t.labels.data) {
      if (l >= num_classes) continue;
      f[l] += 1;
      total += 1;
    }
  if (total > 0)
    for (auto& v : f) v /= total;
  return f;
}

void normalize(Dataset& ds, const std::vector<bool>& eight_bit) {
  std::set<std::string> ids;
  for (const auto& t : ds.train) {
    check_tile(t);
    ids.insert(t.id);
  }
  for (const auto& t : ds.validation) {
    check_tile(t);
    if (ids.count(t.id)) throw DataError("tile '" + t.id + "' is in both train and validation");
  }
  ds.norm = fit_normalization(ds.train, eight_bit);
  for (auto& t : ds.train) ds.norm.rescale(t);
  for (auto& t : ds.validation) ds.norm.rescale(t);

  const std::size_t k = ds.norm.channels();
  std::vector<double> sum(k, 0.0);
  double count = 0;
  for (const auto& t : ds.train) {
    const std::size_t plane = t.spectral.shape().plane();
    for (std::size_t i = 0; i < plane; ++i) {
      if (t.labels.data[i] == kIgnoreLabel) continue;
      for (std::size_t c = 0; c < k; ++c) sum[c] += t.spectral.plane(0, c)[i];
      count += 1;
    }
  }
  ds.norm.mean.resize(k);
  for (std::size_t c = 0; c < k; ++c) ds.norm.mean[c] = static_cast<float>(sum[c] / count);
  ds.class_frequency = class_frequencies(ds.train, ds.num_classes);
}

// ---------------------------------------------------------------------------
// Rotation

Tile rotate_tile(const Tile& t, double degrees) {
  check_tile(t);
  double turns = std::fmod(degrees, 360.0);
  if (turns < 0) turns += 360.0;
  double cs = std::cos(turns * std::numbers::pi / 180.0);
  double sn = std::sin(turns * std::numbers::pi / 180.0);
  // snap lattice-preserving angles so they become exact permutations
  const double quarter = turns / 90.0;
  if (std::abs(quarter - std::round(quarter)) < 1e-9) {
    const int q = static_cast<int>(std::round(quarter)) % 4;
    static constexpr int kc[4] = {1, 0, -1, 0}, ks[4] = {0, 1, 0, -1};
    cs = kc[q];
    sn = ks[q];
  }
  const double h = static_cast<double>(t.height()), w = static_cast<double>(t.width());
  const auto oh = static_cast<std::size_t>(std::ceil(std::abs(h * cs) + std::abs(w * sn) - 1e-9));
  const auto ow = static_cast<std::size_t>(std::ceil(std::abs(w * cs) + std::abs(h * sn) - 1e-9));

  Tile out;
  out.id = t.id;
  out.spectral = Tensor4(1, t.channels(), oh, ow);
  out.labels = LabelMap(oh, ow, kIgnoreLabel);
  const double scy = (h - 1) / 2, scx = (w - 1) / 2;
  const double dcy = (static_cast<double>(oh) - 1) / 2, dcx = (static_cast<double>(ow) - 1) / 2;
  const long ih = static_cast<long>(t.height()), iw = static_cast<long>(t.width());

  for (std::size_t r = 0; r < oh; ++r) {
    for (std::size_t c = 0; c < ow; ++c) {
      const double dy = static_cast<double>(r) - dcy, dx = static_cast<double>(c) - dcx;
      const double sx = scx + dx * cs - dy * sn;
      const double sy = scy + dx * sn + dy * cs;
      const long nr = std::lround(sy), nc = std::lround(sx);
      if (nr < 0 || nc < 0 || nr >= ih || nc >= iw) continue;
      out.labels(r, c) = t.labels(static_cast<std::size_t>(nr), static_cast<std::size_t>(nc));

      const double cy = std::clamp(sy, 0.0, h - 1), cx = std::clamp(sx, 0.0, w - 1);
      const auto y0 = static_cast<std::size_t>(std::floor(cy));
      const auto x0 = static_cast<std::size_t>(std::floor(cx));
      const std::size_t y1 = std::min(y0 + 1, t.height() - 1), x1 = std::min(x0 + 1, t.width() - 1);
      const float fy = static_cast<float>(cy - static_cast<double>(y0));
      const float fx = static_cast<float>(cx - static_cast<double>(x0));
      for (std::size_t k = 0; k < t.channels(); ++k) {
        out.spectral(0, k, r, c) =
            bilerp(t.spectral(0, k, y0, x0), t.spectral(0, k, y0, x1),
                   t.spectral(0, k, y1, x0), t.spectral(0, k, y1, x1), fx, fy);
      }
    }
  }
  return out;
}

std::vector<Tile> rotate_tiles(const std::vector<Tile>& tiles, Rng& rng) {
  std::uniform_real_distribution<double> angle(0.0, 360.0);
  std::vector<Tile> out;
  out.reserve(tiles.size());
  for (const auto& t : tiles) out.push_back(rotate_tile(t, angle(rng)));
  return out;
}

}  // namespace dlbl
