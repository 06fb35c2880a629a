#pragma once

// Brute-force reference implementations the tests compare the engine against.

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "dlbl/tensor.hpp"

namespace oracle {

template <typename S>
dlbl::BasicTensor4<S> random_tensor(const dlbl::Shape& s, std::mt19937_64& rng,
                                    double lo = -1.0, double hi = 1.0) {
  dlbl::BasicTensor4<S> t(s);
  std::uniform_real_distribution<double> d(lo, hi);
  for (auto& v : t.values()) v = static_cast<S>(d(rng));
  return t;
}

// Direct convolution: w (out, in, M, M), zero padding z, stride s.
template <typename S>
dlbl::BasicTensor4<S> conv(const dlbl::BasicTensor4<S>& x, const dlbl::BasicTensor4<S>& w,
                           const dlbl::BasicTensor4<S>& b, std::size_t stride,
                           std::size_t pad) {
  const std::size_t m = w.height();
  const std::size_t oh = (x.height() + 2 * pad - m) / stride + 1;
  const std::size_t ow = (x.width() + 2 * pad - m) / stride + 1;
  dlbl::BasicTensor4<S> y(x.batch(), w.batch(), oh, ow);
  for (std::size_t n = 0; n < x.batch(); ++n)
    for (std::size_t k = 0; k < w.batch(); ++k)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          double acc = b.empty() ? 0.0 : b[k];
          for (std::size_t c = 0; c < x.channels(); ++c)
            for (std::size_t p = 0; p < m; ++p)
              for (std::size_t q = 0; q < m; ++q) {
                const long r = static_cast<long>(i * stride + p) - static_cast<long>(pad);
                const long col = static_cast<long>(j * stride + q) - static_cast<long>(pad);
                if (r < 0 || col < 0 || r >= static_cast<long>(x.height()) ||
                    col >= static_cast<long>(x.width()))
                  continue;
                acc += double(w(k, c, p, q)) * double(x(n, c, r, col));
              }
          y(n, k, i, j) = static_cast<S>(acc);
        }
  return y;
}

// Direct transposed convolution by scattering: w (in, out, M, M), crop z.
template <typename S>
dlbl::BasicTensor4<S> deconv(const dlbl::BasicTensor4<S>& x, const dlbl::BasicTensor4<S>& w,
                             const dlbl::BasicTensor4<S>& b, std::size_t stride,
                             std::size_t crop) {
  const std::size_t m = w.height();
  const std::size_t oh = (x.height() - 1) * stride + m - 2 * crop;
  const std::size_t ow = (x.width() - 1) * stride + m - 2 * crop;
  std::vector<double> acc(x.batch() * w.channels() * oh * ow, 0.0);
  auto at = [&](std::size_t n, std::size_t k, std::size_t r, std::size_t c) -> double& {
    return acc[((n * w.channels() + k) * oh + r) * ow + c];
  };
  for (std::size_t n = 0; n < x.batch(); ++n)
    for (std::size_t c = 0; c < x.channels(); ++c)
      for (std::size_t i = 0; i < x.height(); ++i)
        for (std::size_t j = 0; j < x.width(); ++j)
          for (std::size_t k = 0; k < w.channels(); ++k)
            for (std::size_t p = 0; p < m; ++p)
              for (std::size_t q = 0; q < m; ++q) {
                const long r = static_cast<long>(i * stride + p) - static_cast<long>(crop);
                const long col = static_cast<long>(j * stride + q) - static_cast<long>(crop);
                if (r < 0 || col < 0 || r >= static_cast<long>(oh) || col >= static_cast<long>(ow))
                  continue;
                at(n, k, r, col) += double(w(c, k, p, q)) * double(x(n, c, i, j));
              }
  dlbl::BasicTensor4<S> y(x.batch(), w.channels(), oh, ow);
  for (std::size_t n = 0; n < x.batch(); ++n)
    for (std::size_t k = 0; k < w.channels(); ++k)
      for (std::size_t r = 0; r < oh; ++r)
        for (std::size_t c = 0; c < ow; ++c)
          y(n, k, r, c) = static_cast<S>(at(n, k, r, c) + (b.empty() ? 0.0 : double(b[k])));
  return y;
}

template <typename S>
double max_abs_diff(const dlbl::BasicTensor4<S>& a, const dlbl::BasicTensor4<S>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

// Per-pixel accuracy figures over the pixels with mask != 0 and a valid
// reference, computed by direct counting without a confusion matrix.
struct PixelScores {
  double oa = 0, kappa = 0, aa = 0, f1 = 0;
};

inline PixelScores pixel_scores(const std::vector<dlbl::Label>& pred,
                                const std::vector<dlbl::Label>& ref,
                                const std::vector<std::uint8_t>& mask, std::size_t classes) {
  auto counted = [&](std::size_t i) { return mask[i] != 0 && ref[i] != dlbl::kIgnoreLabel; };
  double n = 0, hits = 0;
  for (std::size_t i = 0; i < ref.size(); ++i)
    if (counted(i)) {
      n += 1;
      hits += pred[i] == ref[i];
    }
  PixelScores s;
  s.oa = hits / n;
  double expected = 0, aa = 0, f1 = 0, used = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    double in_ref = 0, in_pred = 0, both = 0;
    for (std::size_t i = 0; i < ref.size(); ++i) {
      if (!counted(i)) continue;
      in_ref += ref[i] == c;
      in_pred += pred[i] == c;
      both += ref[i] == c && pred[i] == c;
    }
    expected += in_ref * in_pred;
    if (in_ref == 0) continue;
    const double recall = both / in_ref;
    aa += recall;
    if (both > 0) {
      const double precision = both / in_pred;
      f1 += 2 * precision * recall / (precision + recall);
    }
    used += 1;
  }
  const double pe = expected / (n * n);
  s.kappa = pe >= 1.0 ? 1.0 : (s.oa - pe) / (1.0 - pe);
  s.aa = aa / used;
  s.f1 = f1 / used;
  return s;
}

// Erosion by brute force over all pixel pairs: a pixel survives unless some
// pixel with a different label lies within Euclidean distance `radius`.
inline std::vector<std::uint8_t> eroded_mask(const dlbl::LabelMap& ref, int radius) {
  const int h = static_cast<int>(ref.height), w = static_cast<int>(ref.width);
  std::vector<std::uint8_t> keep(ref.size(), 1);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int v = 0; v < h; ++v)
        for (int u = 0; u < w; ++u) {
          const double d = std::hypot(double(u - x), double(v - y));
          if (d <= radius + 1e-9 && ref(v, u) != ref(y, x)) keep[y * w + x] = 0;
        }
  return keep;
}

}  // namespace oracle
