#pragma once

// Procedural aerial-like scenes with the six land-cover classes, for
// desk-scale training and verification without the benchmark imagery.
//
// Channels: three 8-bit pseudo-spectral bands (stored as 0..255 before
// normalisation) and a height channel in metres. Scene rules:
//   impervious  ground texture everywhere, plus darker road ribbons
//   building    rotated rectangles, raised 6-15 m
//   low veg     blobs of overlapping circles, barely raised
//   tree        discs with a dome-shaped canopy, raised
//   car         small rectangles lying on road ribbons only, height exactly 0
//   clutter     sparse irregular polygons
// Roads are never overdrawn, so cars only ever sit on impervious ribbons.

#include <cstdint>
#include <filesystem>
#include <vector>

#include "dlbl/data.hpp"

namespace dlbl {

struct SynthConfig {
  std::uint64_t seed = 1;
  std::size_t tiles = 16;
  std::size_t tile_size = 512;
  // The last `validation_tiles` tiles form the validation split; 0 means a
  // quarter of the tiles.
  std::size_t validation_tiles = 0;
};

// One raw (un-normalised) tile, a pure function of (seed, index, size).
Tile synth_tile(std::uint64_t seed, std::size_t index, std::size_t size);

// Height channel index of synthetic tiles.
inline constexpr int kSynthHeightChannel = 3;

// Raw tiles split into train / validation, then normalised (8-bit bands by
// /255, height by training min/max).
Dataset synth_dataset(const SynthConfig& cfg);

// Writes the raw tiles as image files plus a manifest (with the fitted
// normalisation) into `dir`; loading that manifest reproduces synth_dataset.
void write_synth_dataset(const SynthConfig& cfg, const std::filesystem::path& dir);

}  // namespace dlbl
