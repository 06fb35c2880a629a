#pragma once

// Tiles, label colour coding, normalisation, and the patch sampler that feeds
// training: class-balanced super-batches drawn from (randomly rotated) tiles,
// mini-batches with flips and jitter, and the deterministic overlap grid.

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "dlbl/layers.hpp"
#include "dlbl/tensor.hpp"

namespace dlbl {

inline constexpr std::size_t kNumClasses = 6;

// Class indices of the six land-cover categories.
enum class LandCover : Label {
  impervious = 0,
  building = 1,
  low_vegetation = 2,
  tree = 3,
  car = 4,
  clutter = 5,
};

inline constexpr Label kBackgroundClass = static_cast<Label>(LandCover::clutter);

std::string_view class_name(Label c);

// ---------------------------------------------------------------------------
// Colour coding

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  bool operator==(const Rgb&) const = default;
};

using ColorRaster = Raster<Rgb>;

// White, blue, cyan, green, yellow, red for classes 0..5.
const std::array<Rgb, kNumClasses>& class_palette();

// Unknown colours throw DataError, or map to kIgnoreLabel when lenient.
Label decode_color(Rgb c, bool lenient = false);
LabelMap decode_labels(const ColorRaster& colors, bool lenient = false);
// kIgnoreLabel encodes as black.
ColorRaster encode_labels(const LabelMap& labels);

// ---------------------------------------------------------------------------
// Tiles and datasets

struct Tile {
  std::string id;
  Tensor4 spectral;  // (1, K, H, W)
  LabelMap labels;   // H x W, classes or kIgnoreLabel

  std::size_t channels() const { return spectral.channels(); }
  std::size_t height() const { return labels.height; }
  std::size_t width() const { return labels.width; }
};

// Throws DataError unless spectral and labels are co-registered.
void check_tile(const Tile& t);

// Per-channel affine rescaling into [0, 1], followed by centring on the
// training mean when patches are cut.
struct Normalization {
  std::vector<float> min;
  std::vector<float> max;
  std::vector<float> mean;  // of the rescaled training pixels

  std::size_t channels() const { return min.size(); }
  bool empty() const { return min.empty(); }
  // (v - min) / (max - min), clamped to [0, 1].
  void rescale(Tile& t) const;
};

struct Dataset {
  std::vector<Tile> train;
  std::vector<Tile> validation;
  std::size_t num_classes = kNumClasses;
  Normalization norm;
  std::vector<double> class_frequency;  // over training pixels
  // Index of the height channel, or -1 when there is none.
  int height_channel = -1;

  std::size_t channels() const;
};

// Per-channel range of raw values. Channels flagged as 8-bit use the fixed
// range [0, 255]; the others use the min/max over the training tiles.
Normalization fit_normalization(const std::vector<Tile>& train,
                                const std::vector<bool>& eight_bit);

// Fits on the training tiles, rescales every tile, computes the training mean
// and class frequencies. Throws if train and validation share a tile id.
void normalize(Dataset& ds, const std::vector<bool>& eight_bit);

std::vector<double> class_frequencies(const std::vector<Tile>& tiles,
                                      std::size_t num_classes);

// ---------------------------------------------------------------------------
// Geometric augmentation

// Rotation about the tile centre by `degrees` (counter-clockwise) onto the
// bounding box of the rotated support. Spectra are bilinear, labels nearest
// neighbour; pixels outside the source get zero spectra and kIgnoreLabel.
// Multiples of 90 degrees are exact permutations.
Tile rotate_tile(const Tile& t, double degrees);

// Every tile rotated by an angle drawn uniformly in [0, 360).
std::vector<Tile> rotate_tiles(const std::vector<Tile>& tiles, Rng& rng);

// ---------------------------------------------------------------------------
// Sampling

struct SamplerConfig {
  std::size_t patch_size = 65;
  std::size_t minibatch = 32;
  std::size_t superbatch_factor = 500;  // N_trp = minibatch * factor
  std::size_t resample_interval = 20;   // epochs
  bool balanced = true;
  bool rotate = true;
  bool flips = true;
  double jitter_sigma = 0.01;
  bool jitter_height = true;

  std::size_t superbatch_size() const { return minibatch * superbatch_factor; }
};

struct PatchRef {
  std::uint32_t tile = 0;
  std::uint32_t top = 0;
  std::uint32_t left = 0;
};

// Patch positions over a shared, immutable tile set; pixels are copied out
// only when a mini-batch is assembled.
struct PatchStore {
  std::shared_ptr<const std::vector<Tile>> tiles;
  std::size_t patch_size = 65;
  std::vector<PatchRef> refs;

  std::size_t size() const { return refs.size(); }
  Label center_label(std::size_t i) const;
};

// Independent named streams so changing one augmentation never shifts another.
Rng named_stream(std::uint64_t seed, std::string_view name);

struct SamplerStreams {
  Rng sampling, flips, jitter, rotation;
  explicit SamplerStreams(std::uint64_t seed);
};

// `count` patches lying fully inside their tiles. Balanced: class uniform over
// [0, num_classes), then a centre uniform over that class's eligible pixels
// (ignore-labelled pixels are never eligible). Unbalanced: uniform position.
// Throws DataError in balanced mode if a class has no eligible centre.
PatchStore sample_patches(std::shared_ptr<const std::vector<Tile>> tiles,
                          std::size_t patch_size, std::size_t count,
                          std::size_t num_classes, bool balanced, Rng& rng);

// N_trp patches for one resample period, rotating the tiles first when the
// config asks for it.
PatchStore sample_superbatch(const std::vector<Tile>& tiles, const SamplerConfig& cfg,
                             std::size_t num_classes, SamplerStreams& streams);

// Patch starts along one axis of length `extent`: multiples of `stride` up to
// extent - patch, plus a final start clamped to the far edge.
std::vector<std::size_t> grid_starts(std::size_t extent, std::size_t patch,
                                     std::size_t stride);

// Every patch of the overlap grid (stride = patch - overlap) of every tile.
PatchStore grid_superbatch(std::shared_ptr<const std::vector<Tile>> tiles,
                           std::size_t patch_size, std::size_t overlap = 33);

struct Batch {
  Tensor4 patches;     // (N, K, P, P), mean-centred
  LabelBatch labels;   // (N, P, P)
};

// Copies the given store entries, centred on `mean`, without augmentation.
Batch extract_batch(const PatchStore& store, const std::vector<std::size_t>& indices,
                    const std::vector<float>& mean);

// N_b entries drawn uniformly with replacement; independent horizontal and
// vertical flips (p = 0.5) on patch and labels; Gaussian jitter on spectra.
Batch draw_minibatch(const PatchStore& store, const SamplerConfig& cfg,
                     const std::vector<float>& mean, int height_channel,
                     SamplerStreams& streams);

void flip_horizontal(Batch& b, std::size_t i);
void flip_vertical(Batch& b, std::size_t i);

// Training targets for each output layout, cut from full patch labels:
// the centre pixel (PC), the bottleneck lattice at rows/cols 0, 8, ..., 64
// (SPL), or the full patch (FPL).
LabelBatch center_labels(const LabelBatch& full);
LabelBatch lattice_labels(const LabelBatch& full, std::size_t stride);

}  // namespace dlbl
