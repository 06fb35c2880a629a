#include "dlbl/inference.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cstring>
#include <fstream>

#include "dlbl/errors.hpp"
#include "dlbl/parallel.hpp"

namespace dlbl {

static_assert(std::endian::native == std::endian::little, "score dumps assume a little-endian host");

void TilingPlan::validate() const {
  if (tile % 8 != 1) throw ConfigError("tile size must be 8k+1, got " + std::to_string(tile));
  if (margin % 8 != 0) throw ConfigError("tile margin must be a multiple of 8, got " + std::to_string(margin));
  if (tile < 2 * margin + 9) throw ConfigError("tile too small for its margin");
}

std::size_t minimum_margin(const ArchSpec& spec) {
  const std::size_t half = receptive_field(spec).output / 2;
  return (half + 7) / 8 * 8;
}

std::ptrdiff_t reflect_index(std::ptrdiff_t i, std::size_t n) {
  if (n == 1) return 0;
  const auto period = static_cast<std::ptrdiff_t>(2 * (n - 1));
  i %= period;
  if (i < 0) i += period;
  return i < static_cast<std::ptrdiff_t>(n) ? i : period - i;
}

Tensor4 reflect_window(const Tensor4& image, std::ptrdiff_t top, std::ptrdiff_t left, std::size_t rows,
                       std::size_t cols) {
  Tensor4 out(1, image.channels(), rows, cols);
  std::vector<std::size_t> ri(rows), ci(cols);
  for (std::size_t r = 0; r < rows; ++r)
    ri[r] = static_cast<std::size_t>(reflect_index(top + static_cast<std::ptrdiff_t>(r), image.height()));
  for (std::size_t c = 0; c < cols; ++c)
    ci[c] = static_cast<std::size_t>(reflect_index(left + static_cast<std::ptrdiff_t>(c), image.width()));
  for (std::size_t k = 0; k < image.channels(); ++k) {
    const float* src = image.plane(0, k);
    float* dst = out.plane(0, k);
    for (std::size_t r = 0; r < rows; ++r) {
      const float* row = src + ri[r] * image.width();
      for (std::size_t c = 0; c < cols; ++c) dst[r * cols + c] = row[ci[c]];
    }
  }
  return out;
}

std::size_t grid_points(std::size_t n, std::size_t stride) {
  if (stride == 0) throw ConfigError("stride must be >= 1");
  const std::size_t first = stride / 2;
  if (n == 0) return 0;
  if (n - 1 < first) return 1;
  return (n - 1 - first) / stride + 1;
}

SlidingPlan plan_sliding(std::size_t height, std::size_t width, std::size_t stride) {
  return SlidingPlan{grid_points(height, stride), grid_points(width, stride)};
}

Tensor4 center_image(const Tensor4& normalized, const std::vector<float>& mean) {
  if (mean.size() != normalized.channels()) {
    throw DataError("image has " + std::to_string(normalized.channels()) + " channels, mean has " +
                    std::to_string(mean.size()));
  }
  Tensor4 out = normalized;
  for (std::size_t k = 0; k < mean.size(); ++k) {
    float* p = out.plane(0, k);
    for (std::size_t i = 0; i < out.height() * out.width(); ++i) p[i] -= mean[k];
  }
  return out;
}

namespace {

std::size_t resolve_workers(std::size_t workers, std::size_t jobs) {
  if (workers == 0) workers = worker_count();
  return std::max<std::size_t>(1, std::min(workers, jobs));
}

std::vector<Network<float>> eval_clones(const Network<float>& net, std::size_t n) {
  std::vector<Network<float>> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back(net);
    out.back().set_mode(Mode::eval);
  }
  return out;
}

void check_image(const ArchSpec& spec, const Tensor4& image) {
  if (image.batch() != 1) throw ShapeError("predict expects a single image, got " + image.shape().str());
  if (image.channels() != spec.in_channels) {
    throw DataError("image has " + std::to_string(image.channels()) + " channels, network expects " +
                    std::to_string(spec.in_channels));
  }
}

// Tiling along one axis for a coarse grid of `points` cells at
// anchor + stride*g.
struct AxisTiling {
  std::size_t tile = 0, core = 0, count = 0;
};

AxisTiling plan_axis(std::size_t points, std::size_t stride, const TilingPlan& plan) {
  const std::size_t span = points * stride;
  AxisTiling a;
  if (span <= plan.core()) {
    a.core = (span + 7) / 8 * 8;
    a.tile = a.core + 2 * plan.margin + 1;
  } else {
    a.core = plan.core();
    a.tile = plan.tile;
  }
  a.count = (span + a.core - 1) / a.core;
  return a;
}

// Fully convolutional tiled forward. Output cell i of a tile corresponds to
// tile pixel stride*i; tile origins sit at anchor - margin + j*core so that
// kept cells land on the image grid anchor + stride*g.
Tensor4 run_tiled(const Network<float>& net, const Tensor4& image, const TilingPlan& plan,
                  std::size_t stride, std::size_t anchor, std::size_t workers) {
  plan.validate();
  const std::size_t gy = grid_points(image.height(), stride);
  const std::size_t gx = grid_points(image.width(), stride);
  const AxisTiling ty = plan_axis(gy, stride, plan), tx = plan_axis(gx, stride, plan);
  const std::size_t tiles = ty.count * tx.count;
  workers = resolve_workers(workers, tiles);
  auto nets = eval_clones(net, workers);

  const Shape out_shape = net.shape_chain(Shape{1, image.channels(), ty.tile, tx.tile}).back();
  const std::size_t classes = out_shape.channels;
  if (out_shape.height != (ty.tile - 1) / stride + 1 || out_shape.width != (tx.tile - 1) / stride + 1) {
    throw ShapeError("network output " + out_shape.str() + " does not have stride " + std::to_string(stride));
  }
  Tensor4 coarse(1, classes, gy, gx);
  const std::size_t skip = plan.margin / stride;
  parallel_for(tiles, workers, [&](std::size_t w, std::size_t t) {
    const std::size_t jy = t / tx.count, jx = t % tx.count;
    const auto oy = static_cast<std::ptrdiff_t>(anchor) - static_cast<std::ptrdiff_t>(plan.margin) +
                    static_cast<std::ptrdiff_t>(jy * ty.core);
    const auto ox = static_cast<std::ptrdiff_t>(anchor) - static_cast<std::ptrdiff_t>(plan.margin) +
                    static_cast<std::ptrdiff_t>(jx * tx.core);
    const Tensor4 probs = softmax(nets[w].infer(reflect_window(image, oy, ox, ty.tile, tx.tile)));
    const std::size_t g0y = jy * ty.core / stride, g0x = jx * tx.core / stride;
    const std::size_t ny = std::min(ty.core / stride, gy - g0y), nx = std::min(tx.core / stride, gx - g0x);
    for (std::size_t c = 0; c < classes; ++c) {
      const float* src = probs.plane(0, c);
      float* dst = coarse.plane(0, c);
      for (std::size_t r = 0; r < ny; ++r)
        std::copy_n(src + (skip + r) * probs.width() + skip, nx, dst + (g0y + r) * gx + g0x);
    }
  });
  return coarse;
}

void renormalize(ScoreMap& s) {
  const std::size_t plane = s.height() * s.width();
  std::vector<float> sum(plane, 0.f);
  for (std::size_t c = 0; c < s.channels(); ++c) {
    const float* p = s.plane(0, c);
    for (std::size_t i = 0; i < plane; ++i) sum[i] += p[i];
  }
  for (std::size_t c = 0; c < s.channels(); ++c) {
    float* p = s.plane(0, c);
    for (std::size_t i = 0; i < plane; ++i) p[i] /= sum[i];
  }
}

ScoreMap upsample_grid(const Tensor4& coarse, std::size_t stride, std::size_t h, std::size_t w) {
  const double origin = static_cast<double>(stride / 2);
  ScoreMap full = resample_grid(coarse, origin, origin, static_cast<double>(stride), h, w);
  renormalize(full);
  return full;
}

}  // namespace

ScoreMap predict_fpl(const Network<float>& net, const Tensor4& image, const TilingPlan& plan,
                     std::size_t workers) {
  const ArchSpec spec = ArchSpec::parse(net.arch_tag());
  if (spec.tag != ArchTag::FPL) throw ConfigError("predict_fpl needs an FPL network");
  check_image(spec, image);
  if (plan.margin < minimum_margin(spec)) {
    throw ConfigError("tile margin " + std::to_string(plan.margin) + " is below the receptive-field bound " +
                      std::to_string(minimum_margin(spec)));
  }
  return run_tiled(net, image, plan, 1, 0, workers);
}

ScoreMap predict_spl(const Network<float>& net, const Tensor4& image, const TilingPlan& plan,
                     std::size_t workers) {
  const ArchSpec spec = ArchSpec::parse(net.arch_tag());
  if (spec.tag != ArchTag::SPL) throw ConfigError("predict_spl needs an SPL network");
  check_image(spec, image);
  if (plan.margin < minimum_margin(spec)) {
    throw ConfigError("tile margin " + std::to_string(plan.margin) + " is below the receptive-field bound " +
                      std::to_string(minimum_margin(spec)));
  }
  constexpr std::size_t stride = 8;
  const Tensor4 coarse = run_tiled(net, image, plan, stride, stride / 2, workers);
  return upsample_grid(coarse, stride, image.height(), image.width());
}

ScoreMap predict_pc_sliding(const Network<float>& net, const Tensor4& image, std::size_t stride,
                            std::size_t batch, std::size_t workers) {
  const ArchSpec spec = ArchSpec::parse(net.arch_tag());
  if (spec.tag != ArchTag::PC) throw ConfigError("predict_pc_sliding needs a PC network");
  check_image(spec, image);
  if (batch == 0) throw ConfigError("batch must be >= 1");
  const SlidingPlan plan = plan_sliding(image.height(), image.width(), stride);
  const std::size_t windows = static_cast<std::size_t>(plan.windows());
  const std::size_t jobs = (windows + batch - 1) / batch;
  workers = resolve_workers(workers, jobs);
  auto nets = eval_clones(net, workers);
  const std::size_t p = spec.patch_size, half = p / 2, classes = spec.num_classes;
  const std::size_t k = image.channels();
  Tensor4 coarse(1, classes, plan.rows, plan.cols);
  parallel_for(jobs, workers, [&](std::size_t w, std::size_t j) {
    const std::size_t first = j * batch, n = std::min(batch, windows - first);
    Tensor4 x(n, k, p, p);
    for (std::size_t b = 0; b < n; ++b) {
      const std::size_t gr = (first + b) / plan.cols, gc = (first + b) % plan.cols;
      const auto cy = static_cast<std::ptrdiff_t>(gr * stride + stride / 2);
      const auto cx = static_cast<std::ptrdiff_t>(gc * stride + stride / 2);
      const Tensor4 win = reflect_window(image, cy - static_cast<std::ptrdiff_t>(half),
                                         cx - static_cast<std::ptrdiff_t>(half), p, p);
      std::copy_n(win.data(), win.size(), x.sample(b));
    }
    const Tensor4 probs = softmax(nets[w].infer(x));
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t c = 0; c < classes; ++c) coarse.plane(0, c)[first + b] = probs(b, c, 0, 0);
  });
  return upsample_grid(coarse, stride, image.height(), image.width());
}

ScoreMap predict(const Network<float>& net, const Tensor4& image, std::size_t stride, const TilingPlan& plan,
                 std::size_t workers) {
  switch (ArchSpec::parse(net.arch_tag()).tag) {
    case ArchTag::PC:
      return predict_pc_sliding(net, image, stride, 32, workers);
    case ArchTag::SPL:
      return predict_spl(net, image, plan, workers);
    case ArchTag::FPL:
      return predict_fpl(net, image, plan, workers);
  }
  throw ConfigError("unknown architecture");
}

LabelMap scores_to_map(const ScoreMap& scores) {
  const LabelBatch b = argmax_channels(scores);
  LabelMap m(scores.height(), scores.width());
  std::copy_n(b.data.begin(), m.size(), m.data.begin());
  return m;
}

namespace {

constexpr char kScoreMagic[4] = {'D', 'L', 'S', 'C'};
constexpr std::uint32_t kScoreVersion = 1;

}  // namespace

void write_scores(const std::filesystem::path& path, const ScoreMap& scores) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(kScoreMagic, 4);
  const std::uint32_t header[4] = {kScoreVersion, static_cast<std::uint32_t>(scores.height()),
                                   static_cast<std::uint32_t>(scores.width()),
                                   static_cast<std::uint32_t>(scores.channels())};
  out.write(reinterpret_cast<const char*>(header), sizeof header);
  out.write(reinterpret_cast<const char*>(scores.data()),
            static_cast<std::streamsize>(scores.size() * sizeof(float)));
  if (!out) throw DataError("failed writing " + path.string());
}

ScoreMap read_scores(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  char magic[4];
  std::uint32_t header[4];
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(header), sizeof header);
  if (!in || std::memcmp(magic, kScoreMagic, 4) != 0) throw DataError(path.string() + " is not a score dump");
  if (header[0] != kScoreVersion) throw DataError(path.string() + ": unsupported score dump version");
  ScoreMap s(1, header[3], header[1], header[2]);
  in.read(reinterpret_cast<char*>(s.data()), static_cast<std::streamsize>(s.size() * sizeof(float)));
  if (!in) throw DataError(path.string() + " is truncated");
  return s;
}

std::vector<BenchmarkEntry> benchmark_inference(const Network<float>* fpl, const Network<float>* spl,
                                                const Network<float>* pc, const Tensor4& image,
                                                const std::vector<std::size_t>& pc_strides,
                                                const TilingPlan& plan, std::size_t workers) {
  const bool was_deterministic = deterministic();
  set_deterministic(false);
  std::vector<BenchmarkEntry> out;
  auto time = [&](const std::string& name, auto&& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - t0;
    out.push_back({name, dt.count()});
  };
  try {
    if (fpl) time("FPL", [&] { predict_fpl(*fpl, image, plan, workers); });
    if (spl) time("SPL", [&] { predict_spl(*spl, image, plan, workers); });
    if (pc) {
      for (std::size_t s : pc_strides)
        time("PC stride " + std::to_string(s), [&] { predict_pc_sliding(*pc, image, s, 32, workers); });
    }
  } catch (...) {
    set_deterministic(was_deterministic);
    throw;
  }
  set_deterministic(was_deterministic);
  return out;
}

}  // namespace dlbl
