#pragma once

// Image files in and out (PNG / TIFF through OpenCV) and the plain-text
// dataset manifest.
//
// Manifest keys (paths relative to the manifest's directory):
//   tile.<id>.spectral = nirrg.png     8-bit, 3 or 4 bands
//   tile.<id>.height   = ndsm.tif      optional; 8/16-bit or 32-bit float
//   tile.<id>.labels   = gt.png        optional colour-coded ground truth
//   tile.<id>.split    = train | validation | test
//   norm.min.<k>, norm.max.<k>, norm.mean.<k>   optional, written after fitting

#include <filesystem>
#include <string>
#include <vector>

#include "dlbl/data.hpp"

namespace dlbl {

// (1, bands, H, W) raw values 0..255 in file band order (RGB order for
// colour files).
Tensor4 read_spectral(const std::filesystem::path& path);
Raster<float> read_height(const std::filesystem::path& path);
ColorRaster read_color_raster(const std::filesystem::path& path);

// Writes bands 0..2 of a (1, >=3, H, W) raw tensor as an 8-bit RGB image.
void write_spectral(const std::filesystem::path& path, const Tensor4& raw);
// 32-bit float single-channel TIFF.
void write_height(const std::filesystem::path& path, const Raster<float>& height);
void write_color_raster(const std::filesystem::path& path, const ColorRaster& colors);
void write_label_map(const std::filesystem::path& path, const LabelMap& labels);

struct ManifestEntry {
  std::string id;
  std::filesystem::path spectral;
  std::filesystem::path height;  // empty when absent
  std::filesystem::path labels;  // empty when absent
  std::string split = "train";
};

struct Manifest {
  std::vector<ManifestEntry> tiles;
  Normalization norm;  // empty unless stored

  static Manifest read(const std::filesystem::path& path);
  void write(const std::filesystem::path& path) const;
};

// Spectral bands followed by the height channel when present. Labels are
// decoded strictly unless `lenient_labels`; a tile without labels gets an
// all-ignore map.
Tile load_tile(const ManifestEntry& e, bool lenient_labels = false);

// Loads the train/validation tiles, then rescales with the stored constants
// or fits new ones (8-bit bands /255, height by training min/max).
Dataset load_dataset(const Manifest& m, bool lenient_labels = false);

// Writes every tile of `ds` as raw files plus a manifest carrying its
// normalisation. `raw` holds the un-normalised tiles in the same order
// (train then validation).
void export_dataset(const std::vector<Tile>& raw_train, const std::vector<Tile>& raw_val,
                    const Normalization& norm, const std::filesystem::path& dir);

}  // namespace dlbl
