#include "dlbl/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "dlbl/raster_io.hpp"

namespace dlbl {

namespace {

using Color = std::array<float, 3>;

struct Canvas {
  std::size_t size;
  LabelMap labels;
  Raster<std::uint8_t> road;
  std::vector<Color> color;
  std::vector<float> height;

  explicit Canvas(std::size_t n)
      : size(n), labels(n, n, 0), road(n, n, 0), color(n * n), height(n * n, 0.f) {}

  bool inside(long r, long c) const {
    return r >= 0 && c >= 0 && r < static_cast<long>(size) && c < static_cast<long>(size);
  }
  std::size_t at(long r, long c) const { return static_cast<std::size_t>(r) * size + static_cast<std::size_t>(c); }
};

double uni(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
long uni_int(Rng& rng, long lo, long hi) { return std::uniform_int_distribution<long>(lo, hi)(rng); }

// Paints every non-road pixel of the bounding box [r0,r1]x[c0,c1] for which
// `inside(r, c)` holds; `h` gives the height at that pixel.
template <typename In, typename H>
void paint(Canvas& cv, long r0, long r1, long c0, long c1, Label cls, const Color& col,
           In inside, H h) {
  for (long r = std::max(0L, r0); r <= std::min<long>(r1, cv.size - 1); ++r)
    for (long c = std::max(0L, c0); c <= std::min<long>(c1, cv.size - 1); ++c) {
      if (!inside(r, c)) continue;
      const std::size_t i = cv.at(r, c);
      if (cv.road.data[i]) continue;
      cv.labels.data[i] = cls;
      cv.color[i] = col;
      cv.height[i] = h(r, c);
    }
}

void roads(Canvas& cv, Rng& rng) {
  const Color asphalt{80.f, 82.f, 88.f};
  const int n = static_cast<int>(uni_int(rng, 2, 3));
  for (int k = 0; k < n; ++k) {
    const bool horizontal = uni_int(rng, 0, 1) == 0;
    const long width = uni_int(rng, 20, 30);
    const long pos = uni_int(rng, 0, static_cast<long>(cv.size) - width);
    for (long a = pos; a < pos + width; ++a)
      for (long b = 0; b < static_cast<long>(cv.size); ++b) {
        const std::size_t i = horizontal ? cv.at(a, b) : cv.at(b, a);
        cv.road.data[i] = 1;
        cv.color[i] = asphalt;
      }
  }
}

void low_vegetation(Canvas& cv, Rng& rng) {
  const Color grass{190.f, 95.f, 110.f};
  const int blobs = static_cast<int>(uni_int(rng, 6, 12));
  for (int b = 0; b < blobs; ++b) {
    const double cy = uni(rng, 0, cv.size), cx = uni(rng, 0, cv.size);
    const int parts = static_cast<int>(uni_int(rng, 2, 4));
    std::vector<std::array<double, 3>> circles;
    for (int p = 0; p < parts; ++p)
      circles.push_back({cy + uni(rng, -30, 30), cx + uni(rng, -30, 30), uni(rng, 18, 45)});
    const float base = static_cast<float>(uni(rng, 0.1, 0.4));
    auto in = [&](long r, long c) {
      for (const auto& [y, x, rad] : circles)
        if ((r - y) * (r - y) + (c - x) * (c - x) <= rad * rad) return true;
      return false;
    };
    paint(cv, static_cast<long>(cy - 80), static_cast<long>(cy + 80), static_cast<long>(cx - 80),
          static_cast<long>(cx + 80), static_cast<Label>(LandCover::low_vegetation), grass, in,
          [&](long, long) { return base; });
  }
}

void buildings(Canvas& cv, Rng& rng) {
  static const Color roofs[] = {{150.f, 110.f, 100.f}, {120.f, 124.f, 130.f}, {170.f, 90.f, 80.f}};
  const int n = static_cast<int>(uni_int(rng, 3, 6));
  for (int b = 0; b < n; ++b) {
    const double cy = uni(rng, 0, cv.size), cx = uni(rng, 0, cv.size);
    const double hh = uni(rng, 20, 55), hw = uni(rng, 20, 55);
    const double a = uni(rng, 0, std::numbers::pi);
    const double ca = std::cos(a), sa = std::sin(a);
    const float h = static_cast<float>(uni(rng, 6, 15));
    const Color roof = roofs[uni_int(rng, 0, 2)];
    auto in = [&](long r, long c) {
      const double dy = r - cy, dx = c - cx;
      return std::abs(dx * ca + dy * sa) <= hw && std::abs(-dx * sa + dy * ca) <= hh;
    };
    const long ext = static_cast<long>(std::hypot(hh, hw)) + 1;
    paint(cv, static_cast<long>(cy) - ext, static_cast<long>(cy) + ext, static_cast<long>(cx) - ext,
          static_cast<long>(cx) + ext, static_cast<Label>(LandCover::building), roof, in,
          [&](long, long) { return h; });
  }
}

void trees(Canvas& cv, Rng& rng) {
  const Color leaves{170.f, 70.f, 90.f};
  const int n = static_cast<int>(uni_int(rng, 8, 20));
  for (int t = 0; t < n; ++t) {
    const double cy = uni(rng, 0, cv.size), cx = uni(rng, 0, cv.size);
    const double rad = uni(rng, 8, 22);
    const double top = uni(rng, 4, 10);
    auto in = [&](long r, long c) { return (r - cy) * (r - cy) + (c - cx) * (c - cx) <= rad * rad; };
    auto h = [&](long r, long c) {
      const double d2 = ((r - cy) * (r - cy) + (c - cx) * (c - cx)) / (rad * rad);
      return static_cast<float>(2.0 + top * std::sqrt(std::max(0.0, 1.0 - d2)));
    };
    paint(cv, static_cast<long>(cy - rad), static_cast<long>(cy + rad) + 1,
          static_cast<long>(cx - rad), static_cast<long>(cx + rad) + 1,
          static_cast<Label>(LandCover::tree), leaves, in, h);
  }
}

void clutter(Canvas& cv, Rng& rng) {
  const Color junk{140.f, 150.f, 70.f};
  const int n = static_cast<int>(uni_int(rng, 2, 5));
  for (int k = 0; k < n; ++k) {
    const double cy = uni(rng, 0, cv.size), cx = uni(rng, 0, cv.size);
    // star-shaped polygon: radius per angular sector
    std::array<double, 9> radius{};
    for (auto& r : radius) r = uni(rng, 5, 16);
    const float h = static_cast<float>(uni(rng, 0.0, 1.5));
    auto in = [&](long r, long c) {
      const double dy = r - cy, dx = c - cx;
      const double ang = std::atan2(dy, dx) + std::numbers::pi;
      const double pos = ang / (2 * std::numbers::pi) * radius.size();
      const std::size_t s0 = static_cast<std::size_t>(pos) % radius.size();
      const std::size_t s1 = (s0 + 1) % radius.size();
      const double f = pos - std::floor(pos);
      const double lim = radius[s0] + (radius[s1] - radius[s0]) * f;
      return dx * dx + dy * dy <= lim * lim;
    };
    paint(cv, static_cast<long>(cy - 17), static_cast<long>(cy + 17), static_cast<long>(cx - 17),
          static_cast<long>(cx + 17), static_cast<Label>(LandCover::clutter), junk, in,
          [&](long, long) { return h; });
  }
}

void cars(Canvas& cv, Rng& rng) {
  static const Color paints[] = {
      {230.f, 60.f, 60.f}, {225.f, 225.f, 225.f}, {40.f, 40.f, 50.f}, {60.f, 90.f, 200.f}};
  const int want = static_cast<int>(uni_int(rng, 12, 25));
  int placed = 0;
  for (int attempt = 0; attempt < 400 && placed < want; ++attempt) {
    const long r0 = uni_int(rng, 0, static_cast<long>(cv.size) - 1);
    const long c0 = uni_int(rng, 0, static_cast<long>(cv.size) - 1);
    if (!cv.road(r0, c0)) continue;
    // orient along the road: horizontal if the row is road for a long stretch
    const bool horizontal =
        cv.inside(r0, c0 + 12) && cv.road(r0, c0 + 12) && cv.inside(r0, c0 - 12) && cv.road(r0, c0 - 12);
    const long len = 12, wid = 6;
    const long h = horizontal ? wid : len, w = horizontal ? len : wid;
    bool ok = true;
    for (long r = r0; r < r0 + h && ok; ++r)
      for (long c = c0; c < c0 + w && ok; ++c)
        ok = cv.inside(r, c) && cv.road(r, c) && cv.labels(r, c) == 0;
    if (!ok) continue;
    const Color col = paints[uni_int(rng, 0, 3)];
    for (long r = r0; r < r0 + h; ++r)
      for (long c = c0; c < c0 + w; ++c) {
        const std::size_t i = cv.at(r, c);
        cv.labels.data[i] = static_cast<Label>(LandCover::car);
        cv.color[i] = col;
        cv.height[i] = 0.f;
      }
    ++placed;
  }
}

}  // namespace

Tile synth_tile(std::uint64_t seed, std::size_t index, std::size_t size) {
  if (size < 16) throw ConfigError("synthetic tiles must be at least 16 pixels");
  Rng rng = named_stream(seed, "synth.tile." + std::to_string(index));
  Canvas cv(size);
  const Color ground{110.f, 115.f, 120.f};
  std::fill(cv.color.begin(), cv.color.end(), ground);

  roads(cv, rng);
  low_vegetation(cv, rng);
  buildings(cv, rng);
  trees(cv, rng);
  clutter(cv, rng);
  cars(cv, rng);

  // smooth illumination texture plus per-pixel sensor noise
  std::array<std::array<double, 4>, 3> waves{};
  for (auto& w : waves) w = {uni(rng, 0.01, 0.05), uni(rng, 0.01, 0.05), uni(rng, 0, 6.3), uni(rng, 4, 10)};
  std::normal_distribution<float> noise(0.f, 8.f);
  std::normal_distribution<float> hnoise(0.f, 0.15f);

  Tile t;
  t.id = "synth" + std::to_string(index);
  t.spectral = Tensor4(1, 4, size, size);
  t.labels = cv.labels;
  for (std::size_t r = 0; r < size; ++r)
    for (std::size_t c = 0; c < size; ++c) {
      const std::size_t i = r * size + c;
      double shade = 0;
      for (const auto& w : waves) shade += w[3] * std::sin(w[0] * r + w[1] * c + w[2]);
      for (std::size_t k = 0; k < 3; ++k) {
        const float v = cv.color[i][k] + static_cast<float>(shade) + noise(rng);
        t.spectral(0, k, r, c) = std::round(std::clamp(v, 0.f, 255.f));
      }
      const Label l = cv.labels.data[i];
      const bool ground_level = l == static_cast<Label>(LandCover::impervious) ||
                                l == static_cast<Label>(LandCover::car);
      t.spectral(0, 3, r, c) = ground_level ? 0.f : std::max(0.f, cv.height[i] + hnoise(rng));
    }
  return t;
}

namespace {

Dataset raw_synth(const SynthConfig& cfg) {
  if (cfg.tiles < 2) throw ConfigError("synthetic dataset needs at least 2 tiles");
  const std::size_t val = cfg.validation_tiles ? cfg.validation_tiles : std::max<std::size_t>(1, cfg.tiles / 4);
  if (val >= cfg.tiles) throw ConfigError("synthetic dataset needs at least one training tile");
  Dataset ds;
  for (std::size_t i = 0; i < cfg.tiles; ++i) {
    Tile t = synth_tile(cfg.seed, i, cfg.tile_size);
    (i < cfg.tiles - val ? ds.train : ds.validation).push_back(std::move(t));
  }
  ds.height_channel = kSynthHeightChannel;
  return ds;
}

}  // namespace

Dataset synth_dataset(const SynthConfig& cfg) {
  Dataset ds = raw_synth(cfg);
  normalize(ds, {true, true, true, false});
  return ds;
}

void write_synth_dataset(const SynthConfig& cfg, const std::filesystem::path& dir) {
  const Dataset raw = raw_synth(cfg);
  Dataset fitted = raw;
  normalize(fitted, {true, true, true, false});
  export_dataset(raw.train, raw.validation, fitted.norm, dir);
}

}  // namespace dlbl
