#include "dlbl/raster_io.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "dlbl/kv.hpp"

namespace dlbl {

namespace fs = std::filesystem;

namespace {

cv::Mat imread_checked(const fs::path& path, int flags) {
  if (!fs::exists(path)) throw DataError("raster not found: " + path.string());
  cv::Mat m = cv::imread(path.string(), flags);
  if (m.empty()) throw DataError("cannot decode raster " + path.string());
  return m;
}

void imwrite_checked(const fs::path& path, const cv::Mat& m) {
  bool ok = false;
  try {
    ok = cv::imwrite(path.string(), m);
  } catch (const cv::Exception& e) {
    throw DataError("cannot write " + path.string() + ": " + e.what());
  }
  if (!ok) throw DataError("cannot write " + path.string());
}

}  // namespace

Tensor4 read_spectral(const fs::path& path) {
  cv::Mat m = imread_checked(path, cv::IMREAD_UNCHANGED);
  if (m.depth() != CV_8U) throw DataError(path.string() + ": spectral rasters must be 8-bit");
  const int bands = m.channels();
  Tensor4 t(1, static_cast<std::size_t>(bands), static_cast<std::size_t>(m.rows),
            static_cast<std::size_t>(m.cols));
  for (int r = 0; r < m.rows; ++r) {
    const std::uint8_t* row = m.ptr<std::uint8_t>(r);
    for (int c = 0; c < m.cols; ++c)
      for (int b = 0; b < bands; ++b) {
        // OpenCV stores colour images as BGR(A); report file order
        const int src = bands >= 3 && b < 3 ? 2 - b : b;
        t(0, static_cast<std::size_t>(b), static_cast<std::size_t>(r), static_cast<std::size_t>(c)) =
            row[c * bands + src];
      }
  }
  return t;
}

Raster<float> read_height(const fs::path& path) {
  cv::Mat m = imread_checked(path, cv::IMREAD_UNCHANGED);
  if (m.channels() != 1) throw DataError(path.string() + ": height raster must be single-band");
  cv::Mat f;
  m.convertTo(f, CV_32F);
  Raster<float> out(static_cast<std::size_t>(f.rows), static_cast<std::size_t>(f.cols));
  for (int r = 0; r < f.rows; ++r)
    std::copy_n(f.ptr<float>(r), f.cols, &out(static_cast<std::size_t>(r), 0));
  return out;
}

ColorRaster read_color_raster(const fs::path& path) {
  cv::Mat m = imread_checked(path, cv::IMREAD_COLOR);
  ColorRaster out(static_cast<std::size_t>(m.rows), static_cast<std::size_t>(m.cols));
  for (int r = 0; r < m.rows; ++r) {
    const cv::Vec3b* row = m.ptr<cv::Vec3b>(r);
    for (int c = 0; c < m.cols; ++c)
      out(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = Rgb{row[c][2], row[c][1], row[c][0]};
  }
  return out;
}

void write_spectral(const fs::path& path, const Tensor4& raw) {
  if (raw.channels() < 3) throw DataError("write_spectral needs at least 3 bands");
  cv::Mat m(static_cast<int>(raw.height()), static_cast<int>(raw.width()), CV_8UC3);
  for (int r = 0; r < m.rows; ++r) {
    cv::Vec3b* row = m.ptr<cv::Vec3b>(r);
    for (int c = 0; c < m.cols; ++c)
      for (int b = 0; b < 3; ++b) {
        const float v = raw(0, static_cast<std::size_t>(b), static_cast<std::size_t>(r), static_cast<std::size_t>(c));
        row[c][2 - b] = cv::saturate_cast<std::uint8_t>(v);
      }
  }
  imwrite_checked(path, m);
}

void write_height(const fs::path& path, const Raster<float>& height) {
  cv::Mat m(static_cast<int>(height.height), static_cast<int>(height.width), CV_32FC1);
  for (int r = 0; r < m.rows; ++r) std::copy_n(height.data.data() + static_cast<std::size_t>(r) * height.width, m.cols, m.ptr<float>(r));
  imwrite_checked(path, m);
}

void write_color_raster(const fs::path& path, const ColorRaster& colors) {
  cv::Mat m(static_cast<int>(colors.height), static_cast<int>(colors.width), CV_8UC3);
  for (int r = 0; r < m.rows; ++r) {
    cv::Vec3b* row = m.ptr<cv::Vec3b>(r);
    for (int c = 0; c < m.cols; ++c) {
      const Rgb v = colors(static_cast<std::size_t>(r), static_cast<std::size_t>(c));
      row[c] = cv::Vec3b(v.b, v.g, v.r);
    }
  }
  imwrite_checked(path, m);
}

void write_label_map(const fs::path& path, const LabelMap& labels) {
  write_color_raster(path, encode_labels(labels));
}

// ---------------------------------------------------------------------------
// Manifest

Manifest Manifest::read(const fs::path& path) {
  const KeyValues kv = KeyValues::read(path);
  const fs::path base = path.parent_path();
  auto resolve = [&](const std::string& p) { return p.empty() ? fs::path{} : base / p; };
  Manifest m;
  std::vector<std::string> ids;
  for (const auto& key : kv.keys_with_prefix("tile.")) {
    const auto dot = key.rfind('.');
    const std::string id = key.substr(5, dot - 5);
    if (std::find(ids.begin(), ids.end(), id) == ids.end()) ids.push_back(id);
  }
  for (const auto& id : ids) {
    ManifestEntry e;
    e.id = id;
    const std::string p = "tile." + id + ".";
    e.spectral = resolve(kv.require(p + "spectral"));
    e.height = resolve(kv.str(p + "height", ""));
    e.labels = resolve(kv.str(p + "labels", ""));
    e.split = kv.str(p + "split", "train");
    if (e.split != "train" && e.split != "validation" && e.split != "test") {
      throw ConfigError(path.string() + ": tile '" + id + "' has unknown split '" + e.split + "'");
    }
    m.tiles.push_back(e);
  }
  const auto channels = static_cast<std::size_t>(kv.integer("norm.channels", 0));
  for (std::size_t k = 0; k < channels; ++k) {
    const std::string s = std::to_string(k);
    m.norm.min.push_back(static_cast<float>(kv.real("norm.min." + s, 0)));
    m.norm.max.push_back(static_cast<float>(kv.real("norm.max." + s, 255)));
    m.norm.mean.push_back(static_cast<float>(kv.real("norm.mean." + s, 0)));
  }
  kv.reject_unconsumed();
  return m;
}

void Manifest::write(const fs::path& path) const {
  KeyValues kv;
  const fs::path base = path.parent_path();
  auto rel = [&](const fs::path& p) { return p.empty() ? std::string{} : fs::relative(p, base).string(); };
  for (const auto& e : tiles) {
    const std::string p = "tile." + e.id + ".";
    kv.set(p + "spectral", rel(e.spectral));
    if (!e.height.empty()) kv.set(p + "height", rel(e.height));
    if (!e.labels.empty()) kv.set(p + "labels", rel(e.labels));
    kv.set(p + "split", e.split);
  }
  if (!norm.empty()) {
    kv.set("norm.channels", std::to_string(norm.channels()));
    for (std::size_t k = 0; k < norm.channels(); ++k) {
      char buf[64];
      const std::string s = std::to_string(k);
      std::snprintf(buf, sizeof buf, "%.9g", norm.min[k]);
      kv.set("norm.min." + s, buf);
      std::snprintf(buf, sizeof buf, "%.9g", norm.max[k]);
      kv.set("norm.max." + s, buf);
      std::snprintf(buf, sizeof buf, "%.9g", norm.mean[k]);
      kv.set("norm.mean." + s, buf);
    }
  }
  kv.write(path);
}

Tile load_tile(const ManifestEntry& e, bool lenient_labels) {
  Tensor4 spectral = read_spectral(e.spectral);
  const std::size_t h = spectral.height(), w = spectral.width();
  Tile t;
  t.id = e.id;
  if (!e.height.empty()) {
    const Raster<float> height = read_height(e.height);
    if (height.height != h || height.width != w) {
      throw DataError("tile '" + e.id + "': height raster size differs from the spectral raster");
    }
    Tensor4 stacked(1, spectral.channels() + 1, h, w);
    std::copy_n(spectral.data(), spectral.size(), stacked.data());
    std::copy(height.data.begin(), height.data.end(), stacked.plane(0, spectral.channels()));
    t.spectral = std::move(stacked);
  } else {
    t.spectral = std::move(spectral);
  }
  if (!e.labels.empty()) {
    t.labels = decode_labels(read_color_raster(e.labels), lenient_labels);
  } else {
    t.labels = LabelMap(h, w, kIgnoreLabel);
  }
  check_tile(t);
  return t;
}

Dataset load_dataset(const Manifest& m, bool lenient_labels) {
  Dataset ds;
  bool has_height = false;
  for (const auto& e : m.tiles) {
    if (e.split == "test") continue;
    if (e.labels.empty()) throw DataError("tile '" + e.id + "' in split " + e.split + " has no labels");
    has_height = has_height || !e.height.empty();
    (e.split == "train" ? ds.train : ds.validation).push_back(load_tile(e, lenient_labels));
  }
  if (ds.train.empty()) throw DataError("manifest lists no training tiles");
  const std::size_t k = ds.train.front().channels();
  for (const auto& t : ds.train)
    if (t.channels() != k) throw DataError("training tiles disagree on channel count");
  std::vector<bool> eight_bit(k, true);
  if (has_height) {
    eight_bit.back() = false;
    ds.height_channel = static_cast<int>(k - 1);
  }
  if (m.norm.empty()) {
    normalize(ds, eight_bit);
  } else {
    if (m.norm.channels() != k) throw DataError("manifest normalisation has the wrong channel count");
    ds.norm = m.norm;
    for (auto& t : ds.train) ds.norm.rescale(t);
    for (auto& t : ds.validation) ds.norm.rescale(t);
    ds.class_frequency = class_frequencies(ds.train, ds.num_classes);
  }
  return ds;
}

void export_dataset(const std::vector<Tile>& raw_train, const std::vector<Tile>& raw_val,
                    const Normalization& norm, const fs::path& dir) {
  fs::create_directories(dir);
  Manifest m;
  m.norm = norm;
  auto emit = [&](const Tile& t, const std::string& split) {
    ManifestEntry e;
    e.id = t.id;
    e.split = split;
    e.spectral = dir / (t.id + "_spectral.png");
    e.labels = dir / (t.id + "_labels.png");
    write_spectral(e.spectral, t.spectral);
    write_label_map(e.labels, t.labels);
    if (t.channels() == 4) {
      e.height = dir / (t.id + "_height.tif");
      Raster<float> h(t.height(), t.width());
      std::copy_n(t.spectral.plane(0, 3), h.size(), h.data.data());
      write_height(e.height, h);
    }
    m.tiles.push_back(e);
  };
  for (const auto& t : raw_train) emit(t, "train");
  for (const auto& t : raw_val) emit(t, "validation");
  m.write(dir / "manifest.txt");
}

}  // namespace dlbl
