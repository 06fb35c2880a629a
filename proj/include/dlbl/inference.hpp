#pragma once

// Dense prediction over whole images. FPL and SPL run fully convolutionally
// on overlapping tiles whose margins are discarded; PC slides its patch
// classifier over a strided grid of window centres. Coarse score grids are
// anchored at pixel (i*stride + stride/2) and resampled bilinearly to full
// resolution.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dlbl/architectures.hpp"
#include "dlbl/tensor.hpp"

namespace dlbl {

// (1, C, H, W) per-pixel class probabilities.
using ScoreMap = Tensor4;

// Square tiles of `tile` = 8k+1 pixels; `margin` pixels on every side are
// discarded. Both margin and the kept core (tile - 1 - 2*margin) are
// multiples of 8, so every tile sees the same pooling phase.
struct TilingPlan {
  std::size_t tile = 257;
  std::size_t margin = 48;

  std::size_t core() const { return tile - 1 - 2 * margin; }
  // Throws ConfigError unless the alignment rules hold.
  void validate() const;
};

// Smallest admissible margin for a network: half its output receptive field,
// rounded up to a multiple of 8.
std::size_t minimum_margin(const ArchSpec& spec);

// Mirror index into [0, n): ..., 2, 1, 0, 1, 2, ..., n-2, n-1, n-2, ...
std::ptrdiff_t reflect_index(std::ptrdiff_t i, std::size_t n);

// The (1, K, rows, cols) window of `image` starting at (top, left), reading
// outside the image by reflection.
Tensor4 reflect_window(const Tensor4& image, std::ptrdiff_t top, std::ptrdiff_t left,
                       std::size_t rows, std::size_t cols);

// Number of grid points per axis for an n-pixel axis at `stride`, with points
// at i*stride + stride/2.
std::size_t grid_points(std::size_t n, std::size_t stride);

struct SlidingPlan {
  std::size_t rows = 0, cols = 0;
  std::uint64_t windows() const { return static_cast<std::uint64_t>(rows) * cols; }
};
SlidingPlan plan_sliding(std::size_t height, std::size_t width, std::size_t stride);

// The image passed to the predictors is the normalised tile minus the
// training mean (what the networks see during training).
Tensor4 center_image(const Tensor4& normalized, const std::vector<float>& mean);

// Worker count 0 means worker_count().
ScoreMap predict_fpl(const Network<float>& net, const Tensor4& image,
                     const TilingPlan& plan = {}, std::size_t workers = 0);
ScoreMap predict_spl(const Network<float>& net, const Tensor4& image,
                     const TilingPlan& plan = {}, std::size_t workers = 0);
ScoreMap predict_pc_sliding(const Network<float>& net, const Tensor4& image,
                            std::size_t stride, std::size_t batch = 32,
                            std::size_t workers = 0);

// Dispatches on the network's architecture tag. `stride` applies to PC only.
ScoreMap predict(const Network<float>& net, const Tensor4& image, std::size_t stride = 1,
                 const TilingPlan& plan = {}, std::size_t workers = 0);

// Per-pixel argmax, ties to the lowest class index.
LabelMap scores_to_map(const ScoreMap& scores);

// Raw score dump: "DLSC" | u32 version | u32 H | u32 W | u32 C | f32 data in
// (C, H, W) order, little-endian.
void write_scores(const std::filesystem::path& path, const ScoreMap& scores);
ScoreMap read_scores(const std::filesystem::path& path);

struct BenchmarkEntry {
  std::string method;
  double seconds = 0;
};

// Seconds per image for each network given (null entries are skipped); PC is
// timed at every stride in `pc_strides`.
std::vector<BenchmarkEntry> benchmark_inference(const Network<float>* fpl, const Network<float>* spl,
                                                const Network<float>* pc, const Tensor4& image,
                                                const std::vector<std::size_t>& pc_strides,
                                                const TilingPlan& plan = {},
                                                std::size_t workers = 0);

}  // namespace dlbl
