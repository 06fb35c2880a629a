#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numeric>

#include "dlbl/data.hpp"
#include "dlbl/raster_io.hpp"
#include "dlbl/synth.hpp"
#include "oracles.hpp"

using namespace dlbl;
namespace fs = std::filesystem;

namespace {

Tile random_tile(std::size_t h, std::size_t w, std::size_t k, std::size_t classes,
                 std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  Tile t;
  t.id = "t" + std::to_string(seed);
  t.spectral = oracle::random_tensor<float>({1, k, h, w}, gen, 0, 1);
  t.labels = LabelMap(h, w);
  for (auto& l : t.labels.data) l = static_cast<Label>(gen() % classes);
  return t;
}

const Dataset& small_synth() {
  static const Dataset ds = [] {
    SynthConfig cfg;
    cfg.seed = 7;
    cfg.tiles = 4;
    cfg.tile_size = 256;
    return synth_dataset(cfg);
  }();
  return ds;
}

}  // namespace

TEST_CASE("label colour coding") {
  CHECK(decode_color({255, 255, 255}) == 0);
  CHECK(decode_color({0, 255, 0}) == 3);
  CHECK(decode_color({255, 0, 0}) == 5);
  CHECK_THROWS_AS(decode_color({1, 2, 3}), DataError);
  CHECK(decode_color({1, 2, 3}, true) == kIgnoreLabel);

  ColorRaster colors(3, 4);
  for (std::size_t i = 0; i < colors.size(); ++i) colors.data[i] = class_palette()[i % 6];
  CHECK(encode_labels(decode_labels(colors)) == colors);
  CHECK_THROWS_AS(encode_labels(LabelMap(1, 1, 9)), DataError);
}

TEST_CASE("normalisation") {
  Dataset ds;
  Tile a = random_tile(8, 8, 2, 6, 1), b = random_tile(8, 8, 2, 6, 2);
  for (auto& v : a.spectral.values()) v *= 255.f;
  a.spectral(0, 0, 0, 0) = 255.f;
  a.spectral(0, 0, 0, 1) = 0.f;
  for (std::size_t i = 0; i < 64; ++i) a.spectral.plane(0, 1)[i] = 10.f + static_cast<float>(i);
  for (std::size_t i = 0; i < 64; ++i) b.spectral.plane(0, 1)[i] = 500.f;
  ds.train = {a};
  ds.validation = {b};
  normalize(ds, {true, false});
  CHECK(ds.train[0].spectral(0, 0, 0, 0) == 1.f);
  CHECK(ds.train[0].spectral(0, 0, 0, 1) == 0.f);
  CHECK(ds.norm.min[1] == 10.f);
  CHECK(ds.norm.max[1] == 73.f);
  CHECK(ds.train[0].spectral(0, 1, 0, 63 % 8) >= 0.f);
  // validation values clamp into [0, 1]; the mean comes from training alone
  CHECK(ds.validation[0].spectral(0, 1, 3, 3) == 1.f);
  CHECK(ds.norm.mean[1] == doctest::Approx(0.5));
  for (const auto& t : ds.train)
    for (float v : t.spectral.values()) CHECK((v >= 0.f && v <= 1.f));

  Dataset dup;
  dup.train = {a};
  dup.validation = {a};
  CHECK_THROWS_AS(normalize(dup, {true, false}), DataError);
}

TEST_CASE("centred patch population has near-zero mean") {
  const Dataset& ds = small_synth();
  auto tiles = std::make_shared<const std::vector<Tile>>(ds.train);
  Rng rng(3);
  const PatchStore store = sample_patches(tiles, 65, 4000, 6, false, rng);
  std::vector<std::size_t> idx(store.size());
  std::iota(idx.begin(), idx.end(), 0);
  const Batch b = extract_batch(store, idx, ds.norm.mean);
  for (std::size_t c = 0; c < b.patches.channels(); ++c) {
    double s = 0;
    for (std::size_t n = 0; n < b.patches.batch(); ++n)
      for (std::size_t i = 0; i < 65 * 65; ++i) s += b.patches.plane(n, c)[i];
    CHECK(std::abs(s / (b.patches.batch() * 65.0 * 65.0)) < 0.02);
  }
}

TEST_CASE("synthetic scenes") {
  const Tile a = synth_tile(3, 1, 128), b = synth_tile(3, 1, 128);
  CHECK(a.spectral == b.spectral);
  CHECK(a.labels == b.labels);
  CHECK_FALSE(synth_tile(4, 1, 128).labels == a.labels);

  const Dataset& ds = small_synth();
  CHECK(ds.train.size() == 3);
  CHECK(ds.validation.size() == 1);
  std::vector<std::size_t> count(6, 0);
  for (const auto* split : {&ds.train, &ds.validation})
    for (const auto& t : *split)
      for (std::size_t i = 0; i < t.labels.size(); ++i) {
        const Label l = t.labels.data[i];
        REQUIRE(l < 6);
        ++count[l];
        if (l == static_cast<Label>(LandCover::car)) {
          REQUIRE(t.spectral.plane(0, kSynthHeightChannel)[i] == 0.f);
        }
      }
  for (std::size_t k = 0; k < 6; ++k) CHECK(count[k] > 0);
  CHECK(count[4] * 10 < count[0]);  // cars are rare
}

TEST_CASE("balanced sampling") {
  const Dataset& ds = small_synth();
  SamplerConfig cfg;
  cfg.minibatch = 128;
  CHECK(cfg.superbatch_size() == 64000);
  SamplerStreams streams(11);
  cfg.superbatch_factor = 40;
  const PatchStore store = sample_superbatch(ds.train, cfg, 6, streams);
  CHECK(store.size() == 5120);
  std::vector<double> hist(6, 0);
  for (std::size_t i = 0; i < store.size(); ++i) {
    const Label l = store.center_label(i);
    REQUIRE(l < 6);
    ++hist[l];
    const auto& r = store.refs[i];
    const Tile& t = (*store.tiles)[r.tile];
    REQUIRE(r.top + 65 <= t.height());
    REQUIRE(r.left + 65 <= t.width());
  }
  for (double h : hist) CHECK(std::abs(h / store.size() - 1.0 / 6) < 0.02);

  // a single-class dataset only ever yields that class
  Tile mono = random_tile(80, 80, 2, 1, 5);
  auto tiles = std::make_shared<const std::vector<Tile>>(std::vector<Tile>{mono});
  Rng rng(2);
  const PatchStore one = sample_patches(tiles, 65, 100, 1, true, rng);
  for (std::size_t i = 0; i < one.size(); ++i) CHECK(one.center_label(i) == 0);
  CHECK_THROWS_AS(sample_patches(tiles, 65, 10, 2, true, rng), DataError);
  CHECK_THROWS_AS(sample_patches(tiles, 99, 10, 1, true, rng), DataError);
}

TEST_CASE("ignore pixels are never patch centres") {
  Tile t = random_tile(90, 90, 1, 3, 8);
  for (std::size_t r = 0; r < 90; ++r)
    for (std::size_t c = 0; c < 90; c += 2) t.labels(r, c) = kIgnoreLabel;
  auto tiles = std::make_shared<const std::vector<Tile>>(std::vector<Tile>{t});
  Rng rng(1);
  for (bool balanced : {true, false}) {
    const PatchStore s = sample_patches(tiles, 65, 2000, 3, balanced, rng);
    for (std::size_t i = 0; i < s.size(); ++i) REQUIRE(s.center_label(i) != kIgnoreLabel);
  }
}

TEST_CASE("rotation") {
  const Tile t = random_tile(7, 7, 2, 6, 4);
  const Tile same = rotate_tile(t, 0.0);
  CHECK(same.spectral == t.spectral);
  CHECK(same.labels == t.labels);

  const Tile q = rotate_tile(t, 90.0);
  CHECK(q.height() == 7);
  bool permutation = true;
  for (std::size_t r = 0; r < 7; ++r)
    for (std::size_t c = 0; c < 7; ++c) {
      permutation = permutation && q.labels(r, c) == t.labels(c, 6 - r) &&
                    q.spectral(0, 1, r, c) == t.spectral(0, 1, c, 6 - r);
    }
  CHECK(permutation);
  Tile full = t;
  for (int i = 0; i < 4; ++i) full = rotate_tile(full, 90.0);
  CHECK(full.spectral == t.spectral);
  CHECK(rotate_tile(t, -90.0).labels == rotate_tile(t, 270.0).labels);

  const Tile rect = random_tile(10, 30, 1, 6, 9);
  const Tile rq = rotate_tile(rect, 90.0);
  CHECK(rq.height() == 30);
  CHECK(rq.width() == 10);

  Rng rng(6);
  std::uniform_real_distribution<double> ang(0, 360);
  for (int trial = 0; trial < 10; ++trial) {
    const Tile r = rotate_tile(rect, ang(rng));
    std::size_t voids = 0;
    for (std::size_t i = 0; i < r.labels.size(); ++i) {
      const Label l = r.labels.data[i];
      REQUIRE((l < 6 || l == kIgnoreLabel));
      if (l == kIgnoreLabel) {
        ++voids;
        CHECK(r.spectral.plane(0, 0)[i] == 0.f);
      }
    }
    CHECK(r.labels.size() >= rect.labels.size());
  }
}

TEST_CASE("colour decoding commutes with flips and quarter turns") {
  const Tile t = random_tile(9, 9, 1, 6, 12);
  const ColorRaster colors = encode_labels(t.labels);
  Tile as_colors = t;  // rotate the decoded map vs. decode the rotated colours
  const Tile rot = rotate_tile(t, 90.0);
  ColorRaster rot_colors(9, 9);
  for (std::size_t r = 0; r < 9; ++r)
    for (std::size_t c = 0; c < 9; ++c) rot_colors(r, c) = colors(c, 8 - r);
  CHECK(decode_labels(rot_colors) == rot.labels);

  ColorRaster flipped = colors;
  for (std::size_t r = 0; r < 9; ++r) std::reverse(&flipped.data[r * 9], &flipped.data[r * 9] + 9);
  Batch b{Tensor4(1, 1, 9, 9), LabelBatch(1, 9, 9)};
  b.labels.data = t.labels.data;
  flip_horizontal(b, 0);
  CHECK(decode_labels(flipped).data == b.labels.data);
}

TEST_CASE("mini-batches: flips, jitter, labels") {
  const Dataset& ds = small_synth();
  auto tiles = std::make_shared<const std::vector<Tile>>(ds.train);
  Rng rng(4);
  const PatchStore store = sample_patches(tiles, 65, 300, 6, true, rng);

  std::vector<std::size_t> idx{0, 1, 2};
  const Batch clean = extract_batch(store, idx, ds.norm.mean);
  Batch twice = clean;
  flip_horizontal(twice, 1);
  flip_vertical(twice, 1);
  CHECK_FALSE(twice.patches == clean.patches);
  flip_horizontal(twice, 1);
  flip_vertical(twice, 1);
  CHECK(twice.patches == clean.patches);
  CHECK(twice.labels.data == clean.labels.data);

  // jitter statistics, with the same sampling stream and flips disabled
  SamplerConfig cfg;
  cfg.minibatch = 60;
  cfg.flips = false;
  SamplerStreams s1(21), s2(21);
  cfg.jitter_sigma = 0;
  const Batch base = draw_minibatch(store, cfg, ds.norm.mean, ds.height_channel, s1);
  cfg.jitter_sigma = 0.01;
  const Batch noisy = draw_minibatch(store, cfg, ds.norm.mean, ds.height_channel, s2);
  CHECK(noisy.labels.data == base.labels.data);
  double m = 0, sq = 0;
  const double n = static_cast<double>(base.patches.size());
  CHECK(n >= 1e6);
  for (std::size_t i = 0; i < base.patches.size(); ++i) {
    const double d = double(noisy.patches[i]) - base.patches[i];
    m += d;
    sq += d * d;
  }
  m /= n;
  const double sd = std::sqrt(sq / n - m * m);
  CHECK(std::abs(m) < 1e-4);
  CHECK(std::abs(sd - 0.01) < 0.0005);

  // height exemption
  SamplerStreams s3(21);
  cfg.jitter_height = false;
  const Batch exempt = draw_minibatch(store, cfg, ds.norm.mean, ds.height_channel, s3);
  for (std::size_t i = 0; i < 65 * 65; ++i)
    REQUIRE(exempt.patches.plane(0, kSynthHeightChannel)[i] == base.patches.plane(0, kSynthHeightChannel)[i]);
}

TEST_CASE("overlap grid") {
  using V = std::vector<std::size_t>;
  CHECK(grid_starts(65, 65, 32) == V{0});
  CHECK(grid_starts(97, 65, 32) == V{0, 32});
  CHECK(grid_starts(129, 65, 32) == V{0, 32, 64});
  CHECK(grid_starts(140, 65, 32) == V{0, 32, 64, 75});

  const Tile t = random_tile(150, 200, 1, 6, 3);
  auto tiles = std::make_shared<const std::vector<Tile>>(std::vector<Tile>{t});
  const PatchStore g = grid_superbatch(tiles, 65, 33);
  Raster<int> covered(150, 200, 0);
  for (const auto& r : g.refs)
    for (std::size_t y = 0; y < 65; ++y)
      for (std::size_t x = 0; x < 65; ++x) covered(r.top + y, r.left + x) = 1;
  CHECK(std::all_of(covered.data.begin(), covered.data.end(), [](int v) { return v == 1; }));
}

TEST_CASE("target layouts") {
  LabelBatch full(2, 65, 65);
  for (std::size_t i = 0; i < full.data.size(); ++i) full.data[i] = static_cast<Label>(i % 7);
  const LabelBatch c = center_labels(full);
  CHECK(c(1, 0, 0) == full(1, 32, 32));
  const LabelBatch l = lattice_labels(full, 8);
  CHECK(l.height == 9);
  CHECK(l(1, 4, 4) == full(1, 32, 32));
  CHECK(l(0, 8, 2) == full(0, 64, 16));
  CHECK_THROWS_AS(lattice_labels(full, 5), ShapeError);
}

TEST_CASE("raster files and manifest round trip") {
  SynthConfig cfg;
  cfg.seed = 2;
  cfg.tiles = 4;
  cfg.tile_size = 96;
  std::vector<Tile> raw_train, raw_val;
  for (std::size_t i = 0; i < 4; ++i) (i < 3 ? raw_train : raw_val).push_back(synth_tile(2, i, 96));
  const Dataset ds = synth_dataset(cfg);
  const fs::path dir = fs::temp_directory_path() / "dlbl_test_export";
  fs::remove_all(dir);
  export_dataset(raw_train, raw_val, ds.norm, dir);
  const Manifest m = Manifest::read(dir / "manifest.txt");
  CHECK(m.tiles.size() == 4);
  const Dataset back = load_dataset(m);
  REQUIRE(back.train.size() == 3);
  CHECK(back.height_channel == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(back.train[i].labels == ds.train[i].labels);
    CHECK(oracle::max_abs_diff(back.train[i].spectral, ds.train[i].spectral) < 1e-6);
  }
  for (std::size_t k = 0; k < 4; ++k) CHECK(back.norm.mean[k] == doctest::Approx(ds.norm.mean[k]));
  fs::remove_all(dir);
}
