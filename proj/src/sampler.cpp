#include <algorithm>
#include <numeric>

#include "dlbl/data.hpp"

namespace dlbl {

namespace {

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

void check_patch_fits(const std::vector<Tile>& tiles, std::size_t patch) {
  if (tiles.empty()) throw DataError("no tiles to sample patches from");
  for (const auto& t : tiles) {
    if (t.height() < patch || t.width() < patch) {
      throw DataError("tile '" + t.id + "' (" + std::to_string(t.height()) + "x" +
                      std::to_string(t.width()) + ") is smaller than the " +
                      std::to_string(patch) + "-pixel patch");
    }
  }
}

}  // namespace

Rng named_stream(std::uint64_t seed, std::string_view name) {
  const std::uint64_t h = fnv1a(name);
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(h >> 32)};
  return Rng(seq);
}

SamplerStreams::SamplerStreams(std::uint64_t seed)
    : sampling(named_stream(seed, "sampling")),
      flips(named_stream(seed, "flips")),
      jitter(named_stream(seed, "jitter")),
      rotation(named_stream(seed, "rotation")) {}

Label PatchStore::center_label(std::size_t i) const {
  const PatchRef& r = refs.at(i);
  const std::size_t half = patch_size / 2;
  return (*tiles)[r.tile].labels(r.top + half, r.left + half);
}

PatchStore sample_patches(std::shared_ptr<const std::vector<Tile>> tiles,
                          std::size_t patch_size, std::size_t count,
                          std::size_t num_classes, bool balanced, Rng& rng) {
  check_patch_fits(*tiles, patch_size);
  const std::size_t half = patch_size / 2;
  PatchStore store;
  store.tiles = tiles;
  store.patch_size = patch_size;
  store.refs.reserve(count);

  if (!balanced) {
    std::uniform_int_distribution<std::size_t> pick_tile(0, tiles->size() - 1);
    while (store.refs.size() < count) {
      const std::uint32_t ti = static_cast<std::uint32_t>(pick_tile(rng));
      const Tile& t = (*tiles)[ti];
      const auto top = std::uniform_int_distribution<std::size_t>(0, t.height() - patch_size)(rng);
      const auto left = std::uniform_int_distribution<std::size_t>(0, t.width() - patch_size)(rng);
      // a void centre carries no label for classifiers; draw again
      if (t.labels(top + half, left + half) == kIgnoreLabel) continue;
      store.refs.push_back({ti, static_cast<std::uint32_t>(top), static_cast<std::uint32_t>(left)});
    }
    return store;
  }

  // per class: eligible centres as (tile, flat index), pooled over tiles
  std::vector<std::vector<std::pair<std::uint32_t, std::uint32_t>>> centres(num_classes);
  for (std::uint32_t ti = 0; ti < tiles->size(); ++ti) {
    const Tile& t = (*tiles)[ti];
    for (std::size_t r = half; r + half < t.height(); ++r)
      for (std::size_t c = half; c + half < t.width(); ++c) {
        const Label l = t.labels(r, c);
        if (l < num_classes) centres[l].push_back({ti, static_cast<std::uint32_t>(r * t.width() + c)});
      }
  }
  for (std::size_t k = 0; k < num_classes; ++k) {
    if (centres[k].empty()) {
      throw DataError("balanced sampling: class " + std::to_string(k) + " (" +
                      std::string(class_name(static_cast<Label>(k))) +
                      ") has no eligible patch centre in the training tiles");
    }
  }
  std::uniform_int_distribution<std::size_t> pick_class(0, num_classes - 1);
  for (std::size_t i = 0; i < count; ++i) {
    const auto& pool = centres[pick_class(rng)];
    const auto [ti, flat] = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
    const std::size_t w = (*tiles)[ti].width();
    store.refs.push_back({ti, static_cast<std::uint32_t>(flat / w - half),
                          static_cast<std::uint32_t>(flat % w - half)});
  }
  return store;
}

PatchStore sample_superbatch(const std::vector<Tile>& tiles, const SamplerConfig& cfg,
                             std::size_t num_classes, SamplerStreams& streams) {
  auto working = std::make_shared<const std::vector<Tile>>(
      cfg.rotate ? rotate_tiles(tiles, streams.rotation) : tiles);
  return sample_patches(working, cfg.patch_size, cfg.superbatch_size(), num_classes,
                        cfg.balanced, streams.sampling);
}

std::vector<std::size_t> grid_starts(std::size_t extent, std::size_t patch, std::size_t stride) {
  if (stride == 0) throw ConfigError("grid stride must be >= 1");
  if (extent < patch) throw DataError("extent smaller than the patch");
  std::vector<std::size_t> starts;
  for (std::size_t s = 0; s + patch <= extent; s += stride) starts.push_back(s);
  if (starts.back() + patch < extent) starts.push_back(extent - patch);
  return starts;
}

PatchStore grid_superbatch(std::shared_ptr<const std::vector<Tile>> tiles,
                           std::size_t patch_size, std::size_t overlap) {
  if (overlap >= patch_size) throw ConfigError("grid overlap must be smaller than the patch");
  check_patch_fits(*tiles, patch_size);
  PatchStore store;
  store.tiles = tiles;
  store.patch_size = patch_size;
  const std::size_t stride = patch_size - overlap;
  for (std::uint32_t ti = 0; ti < tiles->size(); ++ti) {
    const Tile& t = (*tiles)[ti];
    for (std::size_t top : grid_starts(t.height(), patch_size, stride))
      for (std::size_t left : grid_starts(t.width(), patch_size, stride))
        store.refs.push_back({ti, static_cast<std::uint32_t>(top), static_cast<std::uint32_t>(left)});
  }
  return store;
}

Batch extract_batch(const PatchStore& store, const std::vector<std::size_t>& indices,
                    const std::vector<float>& mean) {
  if (indices.empty()) throw DataError("empty batch");
  const std::size_t p = store.patch_size;
  const std::size_t k = (*store.tiles).front().channels();
  if (!mean.empty() && mean.size() != k) throw DataError("mean has the wrong channel count");
  Batch b{Tensor4(indices.size(), k, p, p), LabelBatch(indices.size(), p, p)};
  for (std::size_t n = 0; n < indices.size(); ++n) {
    const PatchRef& r = store.refs.at(indices[n]);
    const Tile& t = (*store.tiles)[r.tile];
    for (std::size_t c = 0; c < k; ++c) {
      const float m = mean.empty() ? 0.f : mean[c];
      for (std::size_t y = 0; y < p; ++y) {
        const float* src = t.spectral.plane(0, c) + (r.top + y) * t.width() + r.left;
        float* dst = b.patches.plane(n, c) + y * p;
        for (std::size_t x = 0; x < p; ++x) dst[x] = src[x] - m;
      }
    }
    for (std::size_t y = 0; y < p; ++y)
      std::copy_n(&t.labels.data[(r.top + y) * t.width() + r.left], p, &b.labels(n, y, 0));
  }
  return b;
}

void flip_horizontal(Batch& b, std::size_t i) {
  const std::size_t h = b.patches.height(), w = b.patches.width();
  for (std::size_t c = 0; c < b.patches.channels(); ++c)
    for (std::size_t y = 0; y < h; ++y) {
      float* row = b.patches.plane(i, c) + y * w;
      std::reverse(row, row + w);
    }
  for (std::size_t y = 0; y < h; ++y) {
    Label* row = &b.labels(i, y, 0);
    std::reverse(row, row + w);
  }
}

void flip_vertical(Batch& b, std::size_t i) {
  const std::size_t h = b.patches.height(), w = b.patches.width();
  for (std::size_t c = 0; c < b.patches.channels(); ++c)
    for (std::size_t y = 0; y < h / 2; ++y)
      std::swap_ranges(b.patches.plane(i, c) + y * w, b.patches.plane(i, c) + (y + 1) * w,
                       b.patches.plane(i, c) + (h - 1 - y) * w);
  for (std::size_t y = 0; y < h / 2; ++y)
    std::swap_ranges(&b.labels(i, y, 0), &b.labels(i, y, 0) + w, &b.labels(i, h - 1 - y, 0));
}

Batch draw_minibatch(const PatchStore& store, const SamplerConfig& cfg,
                     const std::vector<float>& mean, int height_channel,
                     SamplerStreams& streams) {
  if (store.size() == 0) throw DataError("cannot draw from an empty patch store");
  std::uniform_int_distribution<std::size_t> pick(0, store.size() - 1);
  std::vector<std::size_t> idx(cfg.minibatch);
  for (auto& i : idx) i = pick(streams.sampling);
  Batch b = extract_batch(store, idx, mean);

  if (cfg.flips) {
    std::bernoulli_distribution coin(0.5);
    for (std::size_t n = 0; n < b.patches.batch(); ++n) {
      if (coin(streams.flips)) flip_horizontal(b, n);
      if (coin(streams.flips)) flip_vertical(b, n);
    }
  }
  if (cfg.jitter_sigma > 0) {
    std::normal_distribution<float> noise(0.f, static_cast<float>(cfg.jitter_sigma));
    for (std::size_t n = 0; n < b.patches.batch(); ++n)
      for (std::size_t c = 0; c < b.patches.channels(); ++c) {
        if (!cfg.jitter_height && static_cast<int>(c) == height_channel) continue;
        float* p = b.patches.plane(n, c);
        for (std::size_t i = 0; i < b.patches.shape().plane(); ++i) p[i] += noise(streams.jitter);
      }
  }
  return b;
}

LabelBatch center_labels(const LabelBatch& full) {
  LabelBatch out(full.batch, 1, 1);
  for (std::size_t n = 0; n < full.batch; ++n) out(n, 0, 0) = full(n, full.height / 2, full.width / 2);
  return out;
}

LabelBatch lattice_labels(const LabelBatch& full, std::size_t stride) {
  if (stride == 0 || (full.height - 1) % stride || (full.width - 1) % stride) {
    throw ShapeError("lattice stride " + std::to_string(stride) + " does not tile a " +
                     std::to_string(full.height) + "x" + std::to_string(full.width) + " patch");
  }
  const std::size_t h = (full.height - 1) / stride + 1, w = (full.width - 1) / stride + 1;
  LabelBatch out(full.batch, h, w);
  for (std::size_t n = 0; n < full.batch; ++n)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) out(n, i, j) = full(n, i * stride, j * stride);
  return out;
}

}  // namespace dlbl
