#pragma once

// Dense 4-D tensors and the small set of shape / padding / interpolation
// primitives the rest of the engine is written against.
//
// Layout is fixed: batch-major, then channel, then row, then column
// (NCHW, row-major). Checkpoints and every kernel rely on it.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "dlbl/errors.hpp"

namespace dlbl {

struct Shape {
  std::size_t batch = 0;
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t count() const { return batch * channels * height * width; }
  std::size_t plane() const { return height * width; }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

std::ostream& operator<<(std::ostream& os, const Shape& s);

// When set, every reduction runs as a plain sequential left-to-right loop and
// worker pools fall back to a fixed partitioning.
void set_deterministic(bool on);
bool deterministic();

template <typename Scalar>
class BasicTensor4 {
 public:
  using value_type = Scalar;

  BasicTensor4() = default;

  explicit BasicTensor4(const Shape& shape, Scalar fill = Scalar(0))
      : shape_(shape) {
    if (shape.batch == 0 || shape.channels == 0 || shape.height == 0 ||
        shape.width == 0) {
      throw ShapeError("tensor dimensions must all be >= 1, got " + shape.str());
    }
    data_.assign(shape.count(), fill);
  }

  BasicTensor4(std::size_t n, std::size_t c, std::size_t h, std::size_t w,
               Scalar fill = Scalar(0))
      : BasicTensor4(Shape{n, c, h, w}, fill) {}

  const Shape& shape() const { return shape_; }
  std::size_t batch() const { return shape_.batch; }
  std::size_t channels() const { return shape_.channels; }
  std::size_t height() const { return shape_.height; }
  std::size_t width() const { return shape_.width; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::size_t index(std::size_t n, std::size_t c, std::size_t h,
                    std::size_t w) const {
    return ((n * shape_.channels + c) * shape_.height + h) * shape_.width + w;
  }

  Scalar& operator()(std::size_t n, std::size_t c, std::size_t h,
                     std::size_t w) {
    return data_[index(n, c, h, w)];
  }
  Scalar operator()(std::size_t n, std::size_t c, std::size_t h,
                    std::size_t w) const {
    return data_[index(n, c, h, w)];
  }
  Scalar& operator[](std::size_t i) { return data_[i]; }
  Scalar operator[](std::size_t i) const { return data_[i]; }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  std::span<Scalar> values() { return data_; }
  std::span<const Scalar> values() const { return data_; }

  // Contiguous (height x width) plane of one (sample, channel) pair.
  Scalar* plane(std::size_t n, std::size_t c) {
    return data_.data() + index(n, c, 0, 0);
  }
  const Scalar* plane(std::size_t n, std::size_t c) const {
    return data_.data() + index(n, c, 0, 0);
  }
  // All channels of one sample.
  Scalar* sample(std::size_t n) { return data_.data() + index(n, 0, 0, 0); }
  const Scalar* sample(std::size_t n) const {
    return data_.data() + index(n, 0, 0, 0);
  }

  void fill(Scalar v) { std::fill(data_.begin(), data_.end(), v); }

  // Same element count, different view of the dimensions.
  void reshape(const Shape& s) {
    if (s.count() != data_.size()) {
      throw ShapeError("reshape " + shape_.str() + " -> " + s.str() +
                       " changes element count");
    }
    shape_ = s;
  }

  bool operator==(const BasicTensor4& o) const = default;

 private:
  Shape shape_;
  std::vector<Scalar> data_;
};

using Tensor4 = BasicTensor4<float>;
using Tensor4d = BasicTensor4<double>;

template <typename To, typename From>
BasicTensor4<To> tensor_cast(const BasicTensor4<From>& t) {
  BasicTensor4<To> out(t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) out[i] = static_cast<To>(t[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Label rasters

using Label = std::uint8_t;
inline constexpr Label kIgnoreLabel = 255;

template <typename T>
struct Raster {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<T> data;

  Raster() = default;
  Raster(std::size_t h, std::size_t w, T fill = T{})
      : height(h), width(w), data(h * w, fill) {}

  T& operator()(std::size_t r, std::size_t c) { return data[r * width + c]; }
  T operator()(std::size_t r, std::size_t c) const {
    return data[r * width + c];
  }
  std::size_t size() const { return data.size(); }
  bool operator==(const Raster&) const = default;
};

using LabelMap = Raster<Label>;
using Mask = Raster<std::uint8_t>;

// Per-sample label planes aligned with a (batch, C, height, width) score tensor.
struct LabelBatch {
  std::size_t batch = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<Label> data;

  LabelBatch() = default;
  LabelBatch(std::size_t n, std::size_t h, std::size_t w, Label fill = 0)
      : batch(n), height(h), width(w), data(n * h * w, fill) {}

  Label& operator()(std::size_t n, std::size_t r, std::size_t c) {
    return data[(n * height + r) * width + c];
  }
  Label operator()(std::size_t n, std::size_t r, std::size_t c) const {
    return data[(n * height + r) * width + c];
  }
};

// ---------------------------------------------------------------------------
// Primitives

template <typename Scalar>
BasicTensor4<Scalar> pad_zero(const BasicTensor4<Scalar>& t, std::size_t z) {
  if (z == 0) return t;
  const Shape& s = t.shape();
  BasicTensor4<Scalar> out(s.batch, s.channels, s.height + 2 * z,
                           s.width + 2 * z);
  for (std::size_t n = 0; n < s.batch; ++n)
    for (std::size_t c = 0; c < s.channels; ++c)
      for (std::size_t h = 0; h < s.height; ++h)
        std::copy_n(t.data() + t.index(n, c, h, 0), s.width, &out(n, c, h + z, z));
  return out;
}

// Spatial window [top, top+h) x [left, left+w) of every (sample, channel).
template <typename Scalar>
BasicTensor4<Scalar> crop(const BasicTensor4<Scalar>& t, std::size_t top,
                          std::size_t left, std::size_t h, std::size_t w) {
  const Shape& s = t.shape();
  if (top + h > s.height || left + w > s.width) {
    throw ShapeError("crop window exceeds tensor " + s.str());
  }
  BasicTensor4<Scalar> out(s.batch, s.channels, h, w);
  for (std::size_t n = 0; n < s.batch; ++n)
    for (std::size_t c = 0; c < s.channels; ++c)
      for (std::size_t r = 0; r < h; ++r)
        std::copy_n(t.data() + t.index(n, c, top + r, left), w, &out(n, c, r, 0));
  return out;
}

template <typename Scalar>
BasicTensor4<Scalar> center_crop(const BasicTensor4<Scalar>& t, std::size_t z) {
  if (2 * z >= t.height() || 2 * z >= t.width()) {
    throw ShapeError("center crop of " + std::to_string(z) + " empties " +
                     t.shape().str());
  }
  return crop(t, z, z, t.height() - 2 * z, t.width() - 2 * z);
}

// a + (b - a) * w keeps constant neighbourhoods exact.
template <typename Scalar>
inline Scalar bilerp(Scalar tl, Scalar tr, Scalar bl, Scalar br, Scalar wx,
                     Scalar wy) {
  const Scalar top = tl + (tr - tl) * wx;
  const Scalar bot = bl + (br - bl) * wx;
  return top + (bot - top) * wy;
}

// Corner-aligned bilinear interpolation of every channel: source corners land
// exactly on destination corners.
template <typename Scalar>
BasicTensor4<Scalar> bilinear_resize(const BasicTensor4<Scalar>& t,
                                     std::size_t out_h, std::size_t out_w) {
  if (out_h == 0 || out_w == 0) throw ShapeError("bilinear_resize to zero size");
  const Shape& s = t.shape();
  if (out_h == s.height && out_w == s.width) return t;

  auto axis = [](std::size_t in, std::size_t out, std::vector<std::size_t>& i0,
                 std::vector<Scalar>& frac) {
    i0.resize(out);
    frac.resize(out);
    for (std::size_t o = 0; o < out; ++o) {
      if (in == 1 || out == 1) {
        i0[o] = 0;
        frac[o] = 0;
        continue;
      }
      // exact rational position o*(in-1)/(out-1)
      const std::size_t num = o * (in - 1);
      std::size_t base = num / (out - 1);
      Scalar f = static_cast<Scalar>(num % (out - 1)) /
                 static_cast<Scalar>(out - 1);
      if (base >= in - 1) {
        base = in - 2;
        f = Scalar(1);
      }
      i0[o] = base;
      frac[o] = f;
    }
  };
  std::vector<std::size_t> r0, c0;
  std::vector<Scalar> fr, fc;
  axis(s.height, out_h, r0, fr);
  axis(s.width, out_w, c0, fc);

  BasicTensor4<Scalar> out(s.batch, s.channels, out_h, out_w);
  for (std::size_t n = 0; n < s.batch; ++n) {
    for (std::size_t c = 0; c < s.channels; ++c) {
      const Scalar* src = t.plane(n, c);
      Scalar* dst = out.plane(n, c);
      for (std::size_t y = 0; y < out_h; ++y) {
        const std::size_t ya = r0[y];
        const std::size_t yb = s.height > 1 ? ya + 1 : ya;
        const Scalar wy = fr[y];
        for (std::size_t x = 0; x < out_w; ++x) {
          const std::size_t xa = c0[x];
          const std::size_t xb = s.width > 1 ? xa + 1 : xa;
          const Scalar wx = fc[x];
          dst[y * out_w + x] =
              bilerp(src[ya * s.width + xa], src[ya * s.width + xb],
                     src[yb * s.width + xa], src[yb * s.width + xb], wx, wy);
        }
      }
    }
  }
  return out;
}

// Bilinear resampling of a coarse grid whose point i sits at destination
// coordinate origin + i*step (per axis). Positions outside the first/last grid
// point clamp to the edge value. With origin 0 and step (out-1)/(in-1) this is
// the corner-aligned resize.
template <typename Scalar>
BasicTensor4<Scalar> resample_grid(const BasicTensor4<Scalar>& coarse,
                                   double origin_y, double origin_x,
                                   double step, std::size_t out_h,
                                   std::size_t out_w) {
  const Shape& s = coarse.shape();
  auto axis = [&](std::size_t in, std::size_t out, double origin,
                  std::vector<std::size_t>& i0, std::vector<Scalar>& frac) {
    i0.resize(out);
    frac.resize(out);
    for (std::size_t o = 0; o < out; ++o) {
      double g = (static_cast<double>(o) - origin) / step;
      g = std::clamp(g, 0.0, static_cast<double>(in - 1));
      std::size_t base = static_cast<std::size_t>(std::floor(g));
      if (base >= in - 1) base = in > 1 ? in - 2 : 0;
      i0[o] = base;
      frac[o] = in > 1 ? static_cast<Scalar>(g - static_cast<double>(base))
                       : Scalar(0);
    }
  };
  std::vector<std::size_t> r0, c0;
  std::vector<Scalar> fr, fc;
  axis(s.height, out_h, origin_y, r0, fr);
  axis(s.width, out_w, origin_x, c0, fc);
  BasicTensor4<Scalar> out(s.batch, s.channels, out_h, out_w);
  for (std::size_t n = 0; n < s.batch; ++n) {
    for (std::size_t c = 0; c < s.channels; ++c) {
      const Scalar* src = coarse.plane(n, c);
      Scalar* dst = out.plane(n, c);
      for (std::size_t y = 0; y < out_h; ++y) {
        const std::size_t ya = r0[y];
        const std::size_t yb = s.height > 1 ? ya + 1 : ya;
        const Scalar wy = fr[y];
        for (std::size_t x = 0; x < out_w; ++x) {
          const std::size_t xa = c0[x];
          const std::size_t xb = s.width > 1 ? xa + 1 : xa;
          const Scalar wx = fc[x];
          dst[y * out_w + x] =
              bilerp(src[ya * s.width + xa], src[ya * s.width + xb],
                     src[yb * s.width + xa], src[yb * s.width + xb], wx, wy);
        }
      }
    }
  }
  return out;
}

template <typename Scalar>
void check_same_shape(const BasicTensor4<Scalar>& a,
                      const BasicTensor4<Scalar>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape().str() +
                     " vs " + b.shape().str());
  }
}

template <typename Scalar>
BasicTensor4<Scalar> add(const BasicTensor4<Scalar>& a,
                         const BasicTensor4<Scalar>& b) {
  check_same_shape(a, b, "add");
  BasicTensor4<Scalar> out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

template <typename Scalar>
void add_inplace(BasicTensor4<Scalar>& a, const BasicTensor4<Scalar>& b) {
  check_same_shape(a, b, "add_inplace");
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

template <typename Scalar>
BasicTensor4<Scalar> scale(const BasicTensor4<Scalar>& a, Scalar k) {
  BasicTensor4<Scalar> out = a;
  for (auto& v : out.values()) v *= k;
  return out;
}

template <typename Scalar>
Scalar sum(const BasicTensor4<Scalar>& a) {
  Scalar acc = 0;
  for (Scalar v : a.values()) acc += v;
  return acc;
}

template <typename Scalar>
Scalar max(const BasicTensor4<Scalar>& a) {
  if (a.empty()) throw ShapeError("max of empty tensor");
  return *std::max_element(a.values().begin(), a.values().end());
}

template <typename Scalar>
Scalar mean(const BasicTensor4<Scalar>& a) {
  if (a.empty()) throw ShapeError("mean of empty tensor");
  return sum(a) / static_cast<Scalar>(a.size());
}

template <typename Scalar>
Scalar dot(const BasicTensor4<Scalar>& a, const BasicTensor4<Scalar>& b) {
  check_same_shape(a, b, "dot");
  Scalar acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

// Channel index of the largest score at every (sample, row, col); ties go to
// the lowest channel index.
template <typename Scalar>
LabelBatch argmax_channels(const BasicTensor4<Scalar>& scores) {
  const Shape& s = scores.shape();
  LabelBatch out(s.batch, s.height, s.width);
  const std::size_t plane = s.plane();
  for (std::size_t n = 0; n < s.batch; ++n) {
    const Scalar* base = scores.sample(n);
    for (std::size_t p = 0; p < plane; ++p) {
      std::size_t best = 0;
      Scalar best_v = base[p];
      for (std::size_t c = 1; c < s.channels; ++c) {
        const Scalar v = base[c * plane + p];
        if (v > best_v) {
          best_v = v;
          best = c;
        }
      }
      out.data[n * plane + p] = static_cast<Label>(best);
    }
  }
  return out;
}

template <typename Scalar>
bool all_finite(const BasicTensor4<Scalar>& a) {
  for (Scalar v : a.values())
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace dlbl
