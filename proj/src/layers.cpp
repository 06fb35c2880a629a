#include "dlbl/layers.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <string>

namespace dlbl {

namespace {

template <typename Scalar>
using RowMatrix =
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using MatMap = Eigen::Map<RowMatrix<Scalar>>;
template <typename Scalar>
using ConstMatMap = Eigen::Map<const RowMatrix<Scalar>>;

std::string geom_str(std::size_t n, std::size_t m, std::size_t s,
                     std::size_t z) {
  return "(n=" + std::to_string(n) + ", M=" + std::to_string(m) +
         ", s=" + std::to_string(s) + ", z=" + std::to_string(z) + ")";
}

// Unfolds one sample (channels x h x w) into a (channels*M*M) x (oh*ow) matrix.
template <typename Scalar>
void im2col(const Scalar* src, std::size_t channels, std::size_t h,
            std::size_t w, const ConvGeometry& g, std::size_t oh,
            std::size_t ow, Scalar* col) {
  const std::size_t m = g.kernel;
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(g.pad);
  const std::size_t out_plane = oh * ow;
  for (std::size_t c = 0; c < channels; ++c) {
    const Scalar* plane = src + c * h * w;
    for (std::size_t p = 0; p < m; ++p) {
      for (std::size_t q = 0; q < m; ++q) {
        Scalar* row = col + ((c * m + p) * m + q) * out_plane;
        for (std::size_t i = 0; i < oh; ++i) {
          const std::ptrdiff_t y =
              static_cast<std::ptrdiff_t>(i * g.stride + p) - pad;
          Scalar* dst = row + i * ow;
          if (y < 0 || y >= static_cast<std::ptrdiff_t>(h)) {
            std::fill_n(dst, ow, Scalar(0));
            continue;
          }
          const Scalar* line = plane + static_cast<std::size_t>(y) * w;
          if (g.stride == 1) {
            // contiguous run, zero the padded ends
            const std::ptrdiff_t x0 = static_cast<std::ptrdiff_t>(q) - pad;
            for (std::size_t j = 0; j < ow; ++j) {
              const std::ptrdiff_t x = x0 + static_cast<std::ptrdiff_t>(j);
              dst[j] = (x >= 0 && x < static_cast<std::ptrdiff_t>(w))
                           ? line[x]
                           : Scalar(0);
            }
          } else {
            for (std::size_t j = 0; j < ow; ++j) {
              const std::ptrdiff_t x =
                  static_cast<std::ptrdiff_t>(j * g.stride + q) - pad;
              dst[j] = (x >= 0 && x < static_cast<std::ptrdiff_t>(w))
                           ? line[x]
                           : Scalar(0);
            }
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatters-adds the column matrix back into the image.
template <typename Scalar>
void col2im(const Scalar* col, std::size_t channels, std::size_t h,
            std::size_t w, const ConvGeometry& g, std::size_t oh,
            std::size_t ow, Scalar* dst) {
  const std::size_t m = g.kernel;
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(g.pad);
  const std::size_t out_plane = oh * ow;
  std::fill_n(dst, channels * h * w, Scalar(0));
  for (std::size_t c = 0; c < channels; ++c) {
    Scalar* plane = dst + c * h * w;
    for (std::size_t p = 0; p < m; ++p) {
      for (std::size_t q = 0; q < m; ++q) {
        const Scalar* row = col + ((c * m + p) * m + q) * out_plane;
        for (std::size_t i = 0; i < oh; ++i) {
          const std::ptrdiff_t y =
              static_cast<std::ptrdiff_t>(i * g.stride + p) - pad;
          if (y < 0 || y >= static_cast<std::ptrdiff_t>(h)) continue;
          Scalar* line = plane + static_cast<std::size_t>(y) * w;
          const Scalar* srcrow = row + i * ow;
          for (std::size_t j = 0; j < ow; ++j) {
            const std::ptrdiff_t x =
                static_cast<std::ptrdiff_t>(j * g.stride + q) - pad;
            if (x >= 0 && x < static_cast<std::ptrdiff_t>(w)) line[x] += srcrow[j];
          }
        }
      }
    }
  }
}

bool is_pointwise(const ConvGeometry& g) {
  return g.kernel == 1 && g.stride == 1 && g.pad == 0;
}

template <typename Scalar>
void check_bias(const BasicTensor4<Scalar>& bias, std::size_t channels,
                const char* op) {
  if (bias.shape() != Shape{1, channels, 1, 1}) {
    throw ShapeError(std::string(op) + ": bias shape " + bias.shape().str() +
                     " does not match " + std::to_string(channels) +
                     " output channels");
  }
}

template <typename Scalar>
void add_bias(BasicTensor4<Scalar>& y, const BasicTensor4<Scalar>& bias) {
  const std::size_t plane = y.shape().plane();
  for (std::size_t n = 0; n < y.batch(); ++n)
    for (std::size_t c = 0; c < y.channels(); ++c) {
      Scalar* p = y.plane(n, c);
      const Scalar b = bias[c];
      for (std::size_t i = 0; i < plane; ++i) p[i] += b;
    }
}

template <typename Scalar>
BasicTensor4<Scalar> bias_grad(const BasicTensor4<Scalar>& dy) {
  BasicTensor4<Scalar> db(1, dy.channels(), 1, 1);
  const std::size_t plane = dy.shape().plane();
  for (std::size_t n = 0; n < dy.batch(); ++n)
    for (std::size_t c = 0; c < dy.channels(); ++c) {
      const Scalar* p = dy.plane(n, c);
      Scalar acc = 0;
      for (std::size_t i = 0; i < plane; ++i) acc += p[i];
      db[c] += acc;
    }
  return db;
}

template <typename Scalar>
void normal_fill(BasicTensor4<Scalar>& t, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  for (auto& v : t.values()) v = static_cast<Scalar>(stddev * dist(rng));
}

}  // namespace

// ---------------------------------------------------------------------------
// Size rules

std::size_t conv_output_size(std::size_t n, std::size_t kernel,
                             std::size_t stride, std::size_t pad) {
  if (kernel == 0 || stride == 0) {
    throw ShapeError("conv: kernel and stride must be >= 1 " +
                     geom_str(n, kernel, stride, pad));
  }
  const std::size_t padded = n + 2 * pad;
  if (padded < kernel) {
    throw ShapeError("conv: kernel larger than padded input " +
                     geom_str(n, kernel, stride, pad));
  }
  if ((padded - kernel) % stride != 0) {
    throw ShapeError("conv: non-integer output size " +
                     geom_str(n, kernel, stride, pad));
  }
  return (padded - kernel) / stride + 1;
}

std::size_t deconv_output_size(std::size_t n, std::size_t kernel,
                               std::size_t stride, std::size_t crop) {
  if (n == 0 || kernel == 0 || stride == 0) {
    throw ShapeError("deconv: degenerate geometry " +
                     geom_str(n, kernel, stride, crop));
  }
  const std::size_t full = (n - 1) * stride + kernel;
  if (full <= 2 * crop) {
    throw ShapeError("deconv: output size < 1 " +
                     geom_str(n, kernel, stride, crop));
  }
  return full - 2 * crop;
}

std::size_t pool_output_size(std::size_t n, std::size_t window,
                             std::size_t stride, std::size_t pad) {
  if (window == 0 || stride == 0) {
    throw ShapeError("pool: window and stride must be >= 1 " +
                     geom_str(n, window, stride, pad));
  }
  if (pad >= window) {
    throw ShapeError("pool: padding must be smaller than the window " +
                     geom_str(n, window, stride, pad));
  }
  if (n + 2 * pad < window) {
    throw ShapeError("pool: window larger than padded input " +
                     geom_str(n, window, stride, pad));
  }
  return (n + 2 * pad - window) / stride + 1;
}

double init_stddev(std::size_t kernel_area, std::size_t out_channels) {
  return std::sqrt(2.0 / static_cast<double>(kernel_area * out_channels));
}

// ---------------------------------------------------------------------------
// Convolution

template <typename Scalar>
BasicTensor4<Scalar> conv_forward(const BasicTensor4<Scalar>& x,
                                  const BasicTensor4<Scalar>& weight,
                                  const BasicTensor4<Scalar>& bias,
                                  const ConvGeometry& g) {
  const std::size_t out_c = weight.batch();
  const std::size_t in_c = weight.channels();
  if (weight.height() != g.kernel || weight.width() != g.kernel) {
    throw ShapeError("conv: weight " + weight.shape().str() +
                     " does not match kernel " + std::to_string(g.kernel));
  }
  if (x.channels() != in_c) {
    throw ShapeError("conv: input has " + std::to_string(x.channels()) +
                     " channels, weight expects " + std::to_string(in_c));
  }
  check_bias(bias, out_c, "conv");
  const std::size_t oh = conv_output_size(x.height(), g.kernel, g.stride, g.pad);
  const std::size_t ow = conv_output_size(x.width(), g.kernel, g.stride, g.pad);
  BasicTensor4<Scalar> y(x.batch(), out_c, oh, ow);

  const std::size_t rows = in_c * g.kernel * g.kernel;
  const std::size_t cols = oh * ow;
  ConstMatMap<Scalar> w(weight.data(), out_c, rows);
  std::vector<Scalar> col;
  if (!is_pointwise(g)) col.resize(rows * cols);
  for (std::size_t n = 0; n < x.batch(); ++n) {
    const Scalar* colp = x.sample(n);
    if (!is_pointwise(g)) {
      im2col(x.sample(n), in_c, x.height(), x.width(), g, oh, ow, col.data());
      colp = col.data();
    }
    MatMap<Scalar> out(y.sample(n), out_c, cols);
    out.noalias() = w * ConstMatMap<Scalar>(colp, rows, cols);
  }
  add_bias(y, bias);
  return y;
}

template <typename Scalar>
ConvGrads<Scalar> conv_backward(const BasicTensor4<Scalar>& dy,
                                const BasicTensor4<Scalar>& x,
                                const BasicTensor4<Scalar>& weight,
                                const ConvGeometry& g) {
  const std::size_t out_c = weight.batch();
  const std::size_t in_c = weight.channels();
  const std::size_t oh = conv_output_size(x.height(), g.kernel, g.stride, g.pad);
  const std::size_t ow = conv_output_size(x.width(), g.kernel, g.stride, g.pad);
  if (dy.shape() != Shape{x.batch(), out_c, oh, ow}) {
    throw ShapeError("conv backward: dy " + dy.shape().str() +
                     " does not match forward output " +
                     Shape{x.batch(), out_c, oh, ow}.str());
  }
  ConvGrads<Scalar> grads{BasicTensor4<Scalar>(x.shape()),
                          BasicTensor4<Scalar>(weight.shape()),
                          bias_grad(dy)};
  const std::size_t rows = in_c * g.kernel * g.kernel;
  const std::size_t cols = oh * ow;
  ConstMatMap<Scalar> w(weight.data(), out_c, rows);
  MatMap<Scalar> dw(grads.dw.data(), out_c, rows);
  const bool pointwise = is_pointwise(g);
  std::vector<Scalar> col(pointwise ? 0 : rows * cols);
  std::vector<Scalar> dcol(pointwise ? 0 : rows * cols);
  for (std::size_t n = 0; n < x.batch(); ++n) {
    ConstMatMap<Scalar> d(dy.sample(n), out_c, cols);
    if (pointwise) {
      dw.noalias() += d * ConstMatMap<Scalar>(x.sample(n), rows, cols).transpose();
      MatMap<Scalar>(grads.dx.sample(n), rows, cols).noalias() = w.transpose() * d;
      continue;
    }
    im2col(x.sample(n), in_c, x.height(), x.width(), g, oh, ow, col.data());
    dw.noalias() += d * ConstMatMap<Scalar>(col.data(), rows, cols).transpose();
    MatMap<Scalar>(dcol.data(), rows, cols).noalias() = w.transpose() * d;
    col2im(dcol.data(), in_c, x.height(), x.width(), g, oh, ow,
           grads.dx.sample(n));
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Transposed convolution

template <typename Scalar>
BasicTensor4<Scalar> deconv_forward(const BasicTensor4<Scalar>& x,
                                    const BasicTensor4<Scalar>& weight,
                                    const BasicTensor4<Scalar>& bias,
                                    const ConvGeometry& g) {
  const std::size_t in_c = weight.batch();
  const std::size_t out_c = weight.channels();
  if (weight.height() != g.kernel || weight.width() != g.kernel) {
    throw ShapeError("deconv: weight " + weight.shape().str() +
                     " does not match kernel " + std::to_string(g.kernel));
  }
  if (x.channels() != in_c) {
    throw ShapeError("deconv: input has " + std::to_string(x.channels()) +
                     " channels, weight expects " + std::to_string(in_c));
  }
  check_bias(bias, out_c, "deconv");
  const std::size_t oh = deconv_output_size(x.height(), g.kernel, g.stride, g.pad);
  const std::size_t ow = deconv_output_size(x.width(), g.kernel, g.stride, g.pad);
  BasicTensor4<Scalar> y(x.batch(), out_c, oh, ow);

  const std::size_t rows = out_c * g.kernel * g.kernel;
  const std::size_t cols = x.height() * x.width();
  ConstMatMap<Scalar> w(weight.data(), in_c, rows);
  std::vector<Scalar> col(rows * cols);
  for (std::size_t n = 0; n < x.batch(); ++n) {
    MatMap<Scalar>(col.data(), rows, cols).noalias() =
        w.transpose() * ConstMatMap<Scalar>(x.sample(n), in_c, cols);
    col2im(col.data(), out_c, oh, ow, g, x.height(), x.width(), y.sample(n));
  }
  add_bias(y, bias);
  return y;
}

template <typename Scalar>
ConvGrads<Scalar> deconv_backward(const BasicTensor4<Scalar>& dy,
                                  const BasicTensor4<Scalar>& x,
                                  const BasicTensor4<Scalar>& weight,
                                  const ConvGeometry& g) {
  const std::size_t in_c = weight.batch();
  const std::size_t out_c = weight.channels();
  const std::size_t oh = deconv_output_size(x.height(), g.kernel, g.stride, g.pad);
  const std::size_t ow = deconv_output_size(x.width(), g.kernel, g.stride, g.pad);
  if (dy.shape() != Shape{x.batch(), out_c, oh, ow}) {
    throw ShapeError("deconv backward: dy " + dy.shape().str() +
                     " does not match forward output " +
                     Shape{x.batch(), out_c, oh, ow}.str());
  }
  ConvGrads<Scalar> grads{BasicTensor4<Scalar>(x.shape()),
                          BasicTensor4<Scalar>(weight.shape()),
                          bias_grad(dy)};
  const std::size_t rows = out_c * g.kernel * g.kernel;
  const std::size_t cols = x.height() * x.width();
  ConstMatMap<Scalar> w(weight.data(), in_c, rows);
  MatMap<Scalar> dw(grads.dw.data(), in_c, rows);
  std::vector<Scalar> col(rows * cols);
  for (std::size_t n = 0; n < x.batch(); ++n) {
    // dx is a plain convolution of dy
    im2col(dy.sample(n), out_c, oh, ow, g, x.height(), x.width(), col.data());
    ConstMatMap<Scalar> c(col.data(), rows, cols);
    MatMap<Scalar>(grads.dx.sample(n), in_c, cols).noalias() = w * c;
    dw.noalias() += ConstMatMap<Scalar>(x.sample(n), in_c, cols) * c.transpose();
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Pooling

template <typename Scalar>
BasicTensor4<Scalar> pool_forward(const BasicTensor4<Scalar>& x,
                                  const PoolGeometry& g, PoolCache* cache) {
  const std::size_t h = x.height();
  const std::size_t w = x.width();
  const std::size_t oh = pool_output_size(h, g.window, g.stride, g.pad);
  const std::size_t ow = pool_output_size(w, g.window, g.stride, g.pad);
  BasicTensor4<Scalar> y(x.batch(), x.channels(), oh, ow);
  const bool is_max = g.mode == PoolMode::max;
  if (cache) {
    cache->input = x.shape();
    cache->geometry = g;
    cache->argmax.clear();
    if (is_max) cache->argmax.resize(y.size());
  }
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(g.pad);
  std::size_t out_idx = 0;
  for (std::size_t n = 0; n < x.batch(); ++n) {
    for (std::size_t c = 0; c < x.channels(); ++c) {
      const Scalar* src = x.plane(n, c);
      for (std::size_t i = 0; i < oh; ++i) {
        const std::ptrdiff_t y0 = static_cast<std::ptrdiff_t>(i * g.stride) - pad;
        const std::size_t r0 = static_cast<std::size_t>(std::max<std::ptrdiff_t>(y0, 0));
        const std::size_t r1 = static_cast<std::size_t>(std::min<std::ptrdiff_t>(
            y0 + static_cast<std::ptrdiff_t>(g.window), static_cast<std::ptrdiff_t>(h)));
        for (std::size_t j = 0; j < ow; ++j, ++out_idx) {
          const std::ptrdiff_t x0 = static_cast<std::ptrdiff_t>(j * g.stride) - pad;
          const std::size_t c0 = static_cast<std::size_t>(std::max<std::ptrdiff_t>(x0, 0));
          const std::size_t c1 = static_cast<std::size_t>(std::min<std::ptrdiff_t>(
              x0 + static_cast<std::ptrdiff_t>(g.window), static_cast<std::ptrdiff_t>(w)));
          if (is_max) {
            std::size_t best = r0 * w + c0;
            Scalar best_v = src[best];
            for (std::size_t r = r0; r < r1; ++r)
              for (std::size_t cc = c0; cc < c1; ++cc) {
                const Scalar v = src[r * w + cc];
                if (v > best_v) {
                  best_v = v;
                  best = r * w + cc;
                }
              }
            y[out_idx] = best_v;
            if (cache) cache->argmax[out_idx] = static_cast<std::int32_t>(best);
          } else {
            Scalar acc = 0;
            for (std::size_t r = r0; r < r1; ++r)
              for (std::size_t cc = c0; cc < c1; ++cc) acc += src[r * w + cc];
            y[out_idx] = acc / static_cast<Scalar>((r1 - r0) * (c1 - c0));
          }
        }
      }
    }
  }
  return y;
}

template <typename Scalar>
BasicTensor4<Scalar> pool_backward(const BasicTensor4<Scalar>& dy,
                                   const PoolCache& cache) {
  const PoolGeometry& g = cache.geometry;
  const Shape& in = cache.input;
  if (in.count() == 0) throw ShapeError("pool backward without a forward cache");
  const std::size_t oh = pool_output_size(in.height, g.window, g.stride, g.pad);
  const std::size_t ow = pool_output_size(in.width, g.window, g.stride, g.pad);
  if (dy.shape() != Shape{in.batch, in.channels, oh, ow}) {
    throw ShapeError("pool backward: dy " + dy.shape().str() +
                     " does not match cached forward");
  }
  BasicTensor4<Scalar> dx(in);
  const std::size_t plane_in = in.height * in.width;
  const std::size_t plane_out = oh * ow;
  if (g.mode == PoolMode::max) {
    if (cache.argmax.size() != dy.size()) {
      throw ShapeError("pool backward: missing argmax cache");
    }
    for (std::size_t nc = 0; nc < in.batch * in.channels; ++nc) {
      Scalar* dst = dx.data() + nc * plane_in;
      const Scalar* src = dy.data() + nc * plane_out;
      const std::int32_t* am = cache.argmax.data() + nc * plane_out;
      for (std::size_t k = 0; k < plane_out; ++k) dst[am[k]] += src[k];
    }
    return dx;
  }
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(g.pad);
  const std::ptrdiff_t h = static_cast<std::ptrdiff_t>(in.height);
  const std::ptrdiff_t w = static_cast<std::ptrdiff_t>(in.width);
  for (std::size_t nc = 0; nc < in.batch * in.channels; ++nc) {
    Scalar* dst = dx.data() + nc * plane_in;
    const Scalar* src = dy.data() + nc * plane_out;
    for (std::size_t i = 0; i < oh; ++i) {
      const std::ptrdiff_t y0 = static_cast<std::ptrdiff_t>(i * g.stride) - pad;
      const std::ptrdiff_t r0 = std::max<std::ptrdiff_t>(y0, 0);
      const std::ptrdiff_t r1 = std::min<std::ptrdiff_t>(y0 + static_cast<std::ptrdiff_t>(g.window), h);
      for (std::size_t j = 0; j < ow; ++j) {
        const std::ptrdiff_t x0 = static_cast<std::ptrdiff_t>(j * g.stride) - pad;
        const std::ptrdiff_t c0 = std::max<std::ptrdiff_t>(x0, 0);
        const std::ptrdiff_t c1 = std::min<std::ptrdiff_t>(x0 + static_cast<std::ptrdiff_t>(g.window), w);
        const Scalar share = src[i * ow + j] / static_cast<Scalar>((r1 - r0) * (c1 - c0));
        for (std::ptrdiff_t r = r0; r < r1; ++r)
          for (std::ptrdiff_t c = c0; c < c1; ++c) dst[r * w + c] += share;
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Leaky ReLU

template <typename Scalar>
BasicTensor4<Scalar> leaky_relu_forward(const BasicTensor4<Scalar>& x,
                                        Scalar tau) {
  BasicTensor4<Scalar> y = x;
  for (auto& v : y.values()) v = v >= 0 ? v : tau * v;
  return y;
}

template <typename Scalar>
BasicTensor4<Scalar> leaky_relu_backward(const BasicTensor4<Scalar>& dy,
                                         const BasicTensor4<Scalar>& x,
                                         Scalar tau) {
  check_same_shape(dy, x, "leaky_relu_backward");
  BasicTensor4<Scalar> dx = dy;
  for (std::size_t i = 0; i < dx.size(); ++i)
    if (x[i] < 0) dx[i] *= tau;
  return dx;
}

// ---------------------------------------------------------------------------
// Batch normalisation

template <typename Scalar>
BatchNormState<Scalar> BatchNormState<Scalar>::identity(std::size_t channels) {
  BatchNormState s;
  s.gamma = BasicTensor4<Scalar>(1, channels, 1, 1, Scalar(1));
  s.beta = BasicTensor4<Scalar>(1, channels, 1, 1, Scalar(0));
  s.running_mean = BasicTensor4<Scalar>(1, channels, 1, 1, Scalar(0));
  s.running_var = BasicTensor4<Scalar>(1, channels, 1, 1, Scalar(1));
  return s;
}

template <typename Scalar>
BasicTensor4<Scalar> batchnorm_forward(const BasicTensor4<Scalar>& x,
                                       BatchNormState<Scalar>& state, Mode mode,
                                       BatchNormCache<Scalar>* cache) {
  const std::size_t channels = x.channels();
  if (state.gamma.size() != channels) {
    throw ShapeError("batchnorm: " + std::to_string(state.gamma.size()) +
                     " channels configured, input has " +
                     std::to_string(channels));
  }
  const std::size_t plane = x.shape().plane();
  const std::size_t count = x.batch() * plane;
  BasicTensor4<Scalar> y(x.shape());
  if (cache) {
    cache->mode = mode;
    cache->xhat = BasicTensor4<Scalar>(x.shape());
    cache->inv_std.assign(channels, 0);
  }
  for (std::size_t c = 0; c < channels; ++c) {
    Scalar mu;
    Scalar var;
    if (mode == Mode::train) {
      if (count < 2) {
        throw ShapeError("batchnorm: train mode needs at least 2 values per channel");
      }
      Scalar acc = 0;
      for (std::size_t n = 0; n < x.batch(); ++n) {
        const Scalar* p = x.plane(n, c);
        for (std::size_t i = 0; i < plane; ++i) acc += p[i];
      }
      mu = acc / static_cast<Scalar>(count);
      Scalar sq = 0;
      for (std::size_t n = 0; n < x.batch(); ++n) {
        const Scalar* p = x.plane(n, c);
        for (std::size_t i = 0; i < plane; ++i) sq += (p[i] - mu) * (p[i] - mu);
      }
      var = sq / static_cast<Scalar>(count);
      const Scalar m = state.momentum;
      state.running_mean[c] = (1 - m) * state.running_mean[c] + m * mu;
      state.running_var[c] =
          (1 - m) * state.running_var[c] +
          m * sq / static_cast<Scalar>(count - 1);
    } else {
      mu = state.running_mean[c];
      var = state.running_var[c];
    }
    const Scalar inv_std = Scalar(1) / std::sqrt(var + state.epsilon);
    const Scalar g = state.gamma[c];
    const Scalar b = state.beta[c];
    for (std::size_t n = 0; n < x.batch(); ++n) {
      const Scalar* p = x.plane(n, c);
      Scalar* q = y.plane(n, c);
      Scalar* xh = cache ? cache->xhat.plane(n, c) : nullptr;
      for (std::size_t i = 0; i < plane; ++i) {
        const Scalar v = (p[i] - mu) * inv_std;
        if (xh) xh[i] = v;
        q[i] = g * v + b;
      }
    }
    if (cache) cache->inv_std[c] = inv_std;
  }
  return y;
}

template <typename Scalar>
BatchNormGrads<Scalar> batchnorm_backward(const BasicTensor4<Scalar>& dy,
                                          const BatchNormCache<Scalar>& cache,
                                          const BatchNormState<Scalar>& state) {
  if (cache.xhat.empty()) throw ShapeError("batchnorm backward without a forward cache");
  check_same_shape(dy, cache.xhat, "batchnorm_backward");
  const std::size_t channels = dy.channels();
  const std::size_t plane = dy.shape().plane();
  const Scalar count = static_cast<Scalar>(dy.batch() * plane);
  BatchNormGrads<Scalar> g{BasicTensor4<Scalar>(dy.shape()),
                           BasicTensor4<Scalar>(1, channels, 1, 1),
                           BasicTensor4<Scalar>(1, channels, 1, 1)};
  for (std::size_t c = 0; c < channels; ++c) {
    Scalar sum_dy = 0;
    Scalar sum_dy_xhat = 0;
    for (std::size_t n = 0; n < dy.batch(); ++n) {
      const Scalar* d = dy.plane(n, c);
      const Scalar* xh = cache.xhat.plane(n, c);
      for (std::size_t i = 0; i < plane; ++i) {
        sum_dy += d[i];
        sum_dy_xhat += d[i] * xh[i];
      }
    }
    g.dbeta[c] = sum_dy;
    g.dgamma[c] = sum_dy_xhat;
    const Scalar k = state.gamma[c] * cache.inv_std[c];
    for (std::size_t n = 0; n < dy.batch(); ++n) {
      const Scalar* d = dy.plane(n, c);
      const Scalar* xh = cache.xhat.plane(n, c);
      Scalar* dx = g.dx.plane(n, c);
      if (cache.mode == Mode::eval) {
        for (std::size_t i = 0; i < plane; ++i) dx[i] = k * d[i];
      } else {
        const Scalar mean_dy = sum_dy / count;
        const Scalar mean_dy_xhat = sum_dy_xhat / count;
        for (std::size_t i = 0; i < plane; ++i)
          dx[i] = k * (d[i] - mean_dy - xh[i] * mean_dy_xhat);
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Dropout

template <typename Scalar>
BasicTensor4<Scalar> dropout_apply_mask(const BasicTensor4<Scalar>& x,
                                        double rate,
                                        const std::vector<std::uint8_t>& mask) {
  if (mask.size() != x.size()) throw ShapeError("dropout: mask size mismatch");
  BasicTensor4<Scalar> y(x.shape());
  const Scalar keep = static_cast<Scalar>(1.0 - rate);
  for (std::size_t i = 0; i < x.size(); ++i)
    y[i] = mask[i] ? x[i] / keep : Scalar(0);
  return y;
}

template <typename Scalar>
BasicTensor4<Scalar> dropout_forward(const BasicTensor4<Scalar>& x, double rate,
                                     Mode mode, Rng& rng,
                                     std::vector<std::uint8_t>* mask) {
  if (mode == Mode::eval || rate <= 0.0) {
    if (mask) mask->assign(x.size(), 1);
    return x;
  }
  std::vector<std::uint8_t> local;
  std::vector<std::uint8_t>& m = mask ? *mask : local;
  m.resize(x.size());
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (auto& bit : m) bit = u(rng) >= rate ? 1 : 0;
  return dropout_apply_mask(x, rate, m);
}

template <typename Scalar>
BasicTensor4<Scalar> dropout_backward(const BasicTensor4<Scalar>& dy,
                                      double rate,
                                      const std::vector<std::uint8_t>& mask) {
  return dropout_apply_mask(dy, rate, mask);
}

// ---------------------------------------------------------------------------
// Fully connected

template <typename Scalar>
BasicTensor4<Scalar> fc_forward(const BasicTensor4<Scalar>& x,
                                const BasicTensor4<Scalar>& weight,
                                const BasicTensor4<Scalar>& bias) {
  const std::size_t out_f = weight.batch();
  const std::size_t in_f = weight.size() / out_f;
  const std::size_t per_sample = x.size() / x.batch();
  if (per_sample != in_f) {
    throw ShapeError("fc: input " + x.shape().str() + " flattens to " +
                     std::to_string(per_sample) + " features, weight expects " +
                     std::to_string(in_f));
  }
  check_bias(bias, out_f, "fc");
  BasicTensor4<Scalar> y(x.batch(), out_f, 1, 1);
  MatMap<Scalar> out(y.data(), x.batch(), out_f);
  out.noalias() = ConstMatMap<Scalar>(x.data(), x.batch(), in_f) *
                  ConstMatMap<Scalar>(weight.data(), out_f, in_f).transpose();
  add_bias(y, bias);
  return y;
}

template <typename Scalar>
ConvGrads<Scalar> fc_backward(const BasicTensor4<Scalar>& dy,
                              const BasicTensor4<Scalar>& x,
                              const BasicTensor4<Scalar>& weight) {
  const std::size_t out_f = weight.batch();
  const std::size_t in_f = weight.size() / out_f;
  if (dy.shape() != Shape{x.batch(), out_f, 1, 1}) {
    throw ShapeError("fc backward: dy " + dy.shape().str() + " mismatch");
  }
  ConvGrads<Scalar> g{BasicTensor4<Scalar>(x.shape()),
                      BasicTensor4<Scalar>(weight.shape()), bias_grad(dy)};
  ConstMatMap<Scalar> d(dy.data(), x.batch(), out_f);
  MatMap<Scalar>(g.dw.data(), out_f, in_f).noalias() =
      d.transpose() * ConstMatMap<Scalar>(x.data(), x.batch(), in_f);
  MatMap<Scalar>(g.dx.data(), x.batch(), in_f).noalias() =
      d * ConstMatMap<Scalar>(weight.data(), out_f, in_f);
  return g;
}

// ---------------------------------------------------------------------------
// Softmax + cross-entropy

template <typename Scalar>
BasicTensor4<Scalar> softmax(const BasicTensor4<Scalar>& scores) {
  const Shape& s = scores.shape();
  BasicTensor4<Scalar> probs(s);
  const std::size_t plane = s.plane();
  for (std::size_t n = 0; n < s.batch; ++n) {
    const Scalar* in = scores.sample(n);
    Scalar* out = probs.sample(n);
    for (std::size_t p = 0; p < plane; ++p) {
      Scalar mx = in[p];
      for (std::size_t c = 1; c < s.channels; ++c) mx = std::max(mx, in[c * plane + p]);
      Scalar z = 0;
      for (std::size_t c = 0; c < s.channels; ++c) {
        const Scalar e = std::exp(in[c * plane + p] - mx);
        out[c * plane + p] = e;
        z += e;
      }
      for (std::size_t c = 0; c < s.channels; ++c) out[c * plane + p] /= z;
    }
  }
  return probs;
}

template <typename Scalar>
XentResult<Scalar> softmax_xent(const BasicTensor4<Scalar>& scores,
                                const LabelBatch& targets) {
  const Shape& s = scores.shape();
  if (targets.batch != s.batch || targets.height != s.height ||
      targets.width != s.width) {
    throw ShapeError("softmax_xent: targets do not match scores " + s.str());
  }
  const std::size_t plane = s.plane();
  XentResult<Scalar> r;
  r.probs = softmax(scores);
  r.dscores = BasicTensor4<Scalar>(s);

  std::vector<std::size_t> valid(s.batch, 0);
  std::size_t patches = 0;
  for (std::size_t n = 0; n < s.batch; ++n) {
    for (std::size_t p = 0; p < plane; ++p) {
      const Label t = targets.data[n * plane + p];
      if (t == kIgnoreLabel) continue;
      if (t >= s.channels) {
        throw DataError("softmax_xent: label " + std::to_string(t) +
                        " outside [0, " + std::to_string(s.channels) + ")");
      }
      ++valid[n];
    }
    if (valid[n] > 0) ++patches;
    r.valid_pixels += valid[n];
  }
  if (patches == 0) {
    throw DataError("softmax_xent: every target pixel is ignored, loss undefined");
  }

  // log p computed from the stabilised logits rather than log(probs) so that
  // saturated scores still give a finite, accurate loss
  Scalar total = 0;
  for (std::size_t n = 0; n < s.batch; ++n) {
    if (valid[n] == 0) continue;
    const Scalar norm = static_cast<Scalar>(valid[n] * patches);
    const Scalar* in = scores.sample(n);
    const Scalar* pr = r.probs.sample(n);
    Scalar* d = r.dscores.sample(n);
    Scalar patch_loss = 0;
    for (std::size_t p = 0; p < plane; ++p) {
      const Label t = targets.data[n * plane + p];
      if (t == kIgnoreLabel) continue;
      Scalar mx = in[p];
      for (std::size_t c = 1; c < s.channels; ++c) mx = std::max(mx, in[c * plane + p]);
      Scalar z = 0;
      for (std::size_t c = 0; c < s.channels; ++c) z += std::exp(in[c * plane + p] - mx);
      patch_loss += std::log(z) - (in[t * plane + p] - mx);
      for (std::size_t c = 0; c < s.channels; ++c) {
        const Scalar onehot = c == t ? Scalar(1) : Scalar(0);
        d[c * plane + p] = (pr[c * plane + p] - onehot) / norm;
      }
    }
    total += patch_loss / static_cast<Scalar>(valid[n]);
  }
  r.loss = total / static_cast<Scalar>(patches);
  return r;
}

// ---------------------------------------------------------------------------
// Layer objects

template <typename Scalar>
Conv2d<Scalar>::Conv2d(std::string name, std::size_t in_channels,
                       std::size_t out_channels, ConvGeometry g)
    : Layer<Scalar>(std::move(name)), geom_(g) {
  weight_ = {this->name() + ".weight",
             BasicTensor4<Scalar>(out_channels, in_channels, g.kernel, g.kernel),
             BasicTensor4<Scalar>(out_channels, in_channels, g.kernel, g.kernel),
             true};
  bias_ = {this->name() + ".bias", BasicTensor4<Scalar>(1, out_channels, 1, 1),
           BasicTensor4<Scalar>(1, out_channels, 1, 1), false};
}

template <typename Scalar>
Shape Conv2d<Scalar>::output_shape(const Shape& in) const {
  if (in.channels != weight_.value.channels()) {
    throw ShapeError("expects " + std::to_string(weight_.value.channels()) +
                     " input channels, got " + std::to_string(in.channels));
  }
  return {in.batch, weight_.value.batch(),
          conv_output_size(in.height, geom_.kernel, geom_.stride, geom_.pad),
          conv_output_size(in.width, geom_.kernel, geom_.stride, geom_.pad)};
}

template <typename Scalar>
BasicTensor4<Scalar> Conv2d<Scalar>::forward(const Tensor& x, ForwardContext& ctx) {
  if (ctx.retain) input_ = x;
  return conv_forward(x, weight_.value, bias_.value, geom_);
}

template <typename Scalar>
BasicTensor4<Scalar> Conv2d<Scalar>::backward(const Tensor& dy) {
  if (input_.empty()) throw ShapeError("conv backward without a forward cache");
  auto g = conv_backward(dy, input_, weight_.value, geom_);
  add_inplace(weight_.grad, g.dw);
  add_inplace(bias_.grad, g.db);
  return std::move(g.dx);
}

template <typename Scalar>
void Conv2d<Scalar>::init_weights(Rng& rng) {
  normal_fill(weight_.value,
              init_stddev(geom_.kernel * geom_.kernel, weight_.value.batch()), rng);
  bias_.value.fill(0);
}

template <typename Scalar>
Deconv2d<Scalar>::Deconv2d(std::string name, std::size_t in_channels,
                           std::size_t out_channels, ConvGeometry g)
    : Layer<Scalar>(std::move(name)), geom_(g) {
  weight_ = {this->name() + ".weight",
             BasicTensor4<Scalar>(in_channels, out_channels, g.kernel, g.kernel),
             BasicTensor4<Scalar>(in_channels, out_channels, g.kernel, g.kernel),
             true};
  bias_ = {this->name() + ".bias", BasicTensor4<Scalar>(1, out_channels, 1, 1),
           BasicTensor4<Scalar>(1, out_channels, 1, 1), false};
}

template <typename Scalar>
Shape Deconv2d<Scalar>::output_shape(const Shape& in) const {
  if (in.channels != weight_.value.batch()) {
    throw ShapeError("expects " + std::to_string(weight_.value.batch()) +
                     " input channels, got " + std::to_string(in.channels));
  }
  return {in.batch, weight_.value.channels(),
          deconv_output_size(in.height, geom_.kernel, geom_.stride, geom_.pad),
          deconv_output_size(in.width, geom_.kernel, geom_.stride, geom_.pad)};
}

template <typename Scalar>
BasicTensor4<Scalar> Deconv2d<Scalar>::forward(const Tensor& x, ForwardContext& ctx) {
  if (ctx.retain) input_ = x;
  return deconv_forward(x, weight_.value, bias_.value, geom_);
}

template <typename Scalar>
BasicTensor4<Scalar> Deconv2d<Scalar>::backward(const Tensor& dy) {
  if (input_.empty()) throw ShapeError("deconv backward without a forward cache");
  auto g = deconv_backward(dy, input_, weight_.value, geom_);
  add_inplace(weight_.grad, g.dw);
  add_inplace(bias_.grad, g.db);
  return std::move(g.dx);
}

template <typename Scalar>
void Deconv2d<Scalar>::init_weights(Rng& rng) {
  normal_fill(weight_.value,
              init_stddev(geom_.kernel * geom_.kernel, weight_.value.channels()),
              rng);
  bias_.value.fill(0);
}

template <typename Scalar>
Shape Pool2d<Scalar>::output_shape(const Shape& in) const {
  return {in.batch, in.channels,
          pool_output_size(in.height, geom_.window, geom_.stride, geom_.pad),
          pool_output_size(in.width, geom_.window, geom_.stride, geom_.pad)};
}

template <typename Scalar>
BasicTensor4<Scalar> Pool2d<Scalar>::forward(const Tensor& x, ForwardContext& ctx) {
  return pool_forward(x, geom_, ctx.retain ? &cache_ : nullptr);
}

template <typename Scalar>
BasicTensor4<Scalar> Pool2d<Scalar>::backward(const Tensor& dy) {
  return pool_backward(dy, cache_);
}

template <typename Scalar>
LeakyRelu<Scalar>::LeakyRelu(std::string name, Scalar tau)
    : Layer<Scalar>(std::move(name)), tau_(tau) {
  if (!(tau >= 0 && tau < 1)) throw ConfigError("leaky relu: tau must lie in [0, 1)");
}

template <typename Scalar>
BasicTensor4<Scalar> LeakyRelu<Scalar>::forward(const Tensor& x, ForwardContext& ctx) {
  if (ctx.retain) input_ = x;
  return leaky_relu_forward(x, tau_);
}

template <typename Scalar>
BasicTensor4<Scalar> LeakyRelu<Scalar>::backward(const Tensor& dy) {
  if (input_.empty()) throw ShapeError("lrelu backward without a forward cache");
  return leaky_relu_backward(dy, input_, tau_);
}

template <typename Scalar>
BatchNorm<Scalar>::BatchNorm(std::string name, std::size_t channels)
    : Layer<Scalar>(std::move(name)) {
  auto st = BatchNormState<Scalar>::identity(channels);
  const BasicTensor4<Scalar> zeros(1, channels, 1, 1);
  gamma_ = {this->name() + ".gamma", st.gamma, zeros, false};
  beta_ = {this->name() + ".beta", st.beta, zeros, false};
  running_mean_ = {this->name() + ".running_mean", st.running_mean, {}, false};
  running_var_ = {this->name() + ".running_var", st.running_var, {}, false};
}

template <typename Scalar>
Shape BatchNorm<Scalar>::output_shape(const Shape& in) const {
  if (in.channels != gamma_.value.size()) {
    throw ShapeError("expects " + std::to_string(gamma_.value.size()) +
                     " channels, got " + std::to_string(in.channels));
  }
  return in;
}

template <typename Scalar>
BatchNormState<Scalar> BatchNorm<Scalar>::state() const {
  BatchNormState<Scalar> s;
  s.gamma = gamma_.value;
  s.beta = beta_.value;
  s.running_mean = running_mean_.value;
  s.running_var = running_var_.value;
  return s;
}

template <typename Scalar>
BasicTensor4<Scalar> BatchNorm<Scalar>::forward(const Tensor& x, ForwardContext& ctx) {
  BatchNormState<Scalar> s = state();
  auto y = batchnorm_forward(x, s, ctx.mode, ctx.retain ? &cache_ : nullptr);
  if (ctx.mode == Mode::train) {
    running_mean_.value = std::move(s.running_mean);
    running_var_.value = std::move(s.running_var);
  }
  return y;
}

template <typename Scalar>
BasicTensor4<Scalar> BatchNorm<Scalar>::backward(const Tensor& dy) {
  auto g = batchnorm_backward(dy, cache_, state());
  add_inplace(gamma_.grad, g.dgamma);
  add_inplace(beta_.grad, g.dbeta);
  return std::move(g.dx);
}

template <typename Scalar>
void BatchNorm<Scalar>::init_weights(Rng&) {
  gamma_.value.fill(1);
  beta_.value.fill(0);
  running_mean_.value.fill(0);
  running_var_.value.fill(1);
}

template <typename Scalar>
Dropout<Scalar>::Dropout(std::string name, double rate)
    : Layer<Scalar>(std::move(name)), rate_(rate) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("dropout rate must lie in [0, 1)");
}

template <typename Scalar>
BasicTensor4<Scalar> Dropout<Scalar>::forward(const Tensor& x, ForwardContext& ctx) {
  if (ctx.mode == Mode::eval || rate_ <= 0.0) {
    masked_ = false;
    return x;
  }
  masked_ = true;
  if (frozen_ && mask_.size() == x.size()) return dropout_apply_mask(x, rate_, mask_);
  if (!ctx.rng) throw ConfigError("dropout in train mode needs a random stream");
  return dropout_forward(x, rate_, ctx.mode, *ctx.rng, &mask_);
}

template <typename Scalar>
BasicTensor4<Scalar> Dropout<Scalar>::backward(const Tensor& dy) {
  if (!masked_) return dy;
  return dropout_backward(dy, rate_, mask_);
}

template <typename Scalar>
FullyConnected<Scalar>::FullyConnected(std::string name, Shape input,
                                       std::size_t out_features)
    : Layer<Scalar>(std::move(name)), input_extent_(input) {
  input_extent_.batch = 1;
  const Shape ws{out_features, input.channels, input.height, input.width};
  weight_ = {this->name() + ".weight", BasicTensor4<Scalar>(ws),
             BasicTensor4<Scalar>(ws), true};
  bias_ = {this->name() + ".bias", BasicTensor4<Scalar>(1, out_features, 1, 1),
           BasicTensor4<Scalar>(1, out_features, 1, 1), false};
}

template <typename Scalar>
Shape FullyConnected<Scalar>::output_shape(const Shape& in) const {
  if (in.channels != input_extent_.channels || in.height != input_extent_.height ||
      in.width != input_extent_.width) {
    Shape expected = input_extent_;
    expected.batch = in.batch;
    throw ShapeError("expects input " + expected.str() + ", got " + in.str());
  }
  return {in.batch, weight_.value.batch(), 1, 1};
}

template <typename Scalar>
BasicTensor4<Scalar> FullyConnected<Scalar>::forward(const Tensor& x,
                                                     ForwardContext& ctx) {
  if (ctx.retain) input_ = x;
  return fc_forward(x, weight_.value, bias_.value);
}

template <typename Scalar>
BasicTensor4<Scalar> FullyConnected<Scalar>::backward(const Tensor& dy) {
  if (input_.empty()) throw ShapeError("fc backward without a forward cache");
  auto g = fc_backward(dy, input_, weight_.value);
  add_inplace(weight_.grad, g.dw);
  add_inplace(bias_.grad, g.db);
  return std::move(g.dx);
}

// The dense layer is a convolution whose kernel spans the whole input map.
template <typename Scalar>
void FullyConnected<Scalar>::init_weights(Rng& rng) {
  normal_fill(weight_.value,
              init_stddev(input_extent_.height * input_extent_.width,
                          weight_.value.batch()),
              rng);
  bias_.value.fill(0);
}

// ---------------------------------------------------------------------------

#define DLBL_INSTANTIATE_LAYERS(S)                                              \
  template BasicTensor4<S> conv_forward(const BasicTensor4<S>&,                 \
                                        const BasicTensor4<S>&,                 \
                                        const BasicTensor4<S>&,                 \
                                        const ConvGeometry&);                   \
  template ConvGrads<S> conv_backward(const BasicTensor4<S>&,                   \
                                      const BasicTensor4<S>&,                   \
                                      const BasicTensor4<S>&,                   \
                                      const ConvGeometry&);                     \
  template BasicTensor4<S> deconv_forward(const BasicTensor4<S>&,               \
                                          const BasicTensor4<S>&,               \
                                          const BasicTensor4<S>&,               \
                                          const ConvGeometry&);                 \
  template ConvGrads<S> deconv_backward(const BasicTensor4<S>&,                 \
                                        const BasicTensor4<S>&,                 \
                                        const BasicTensor4<S>&,                 \
                                        const ConvGeometry&);                   \
  template BasicTensor4<S> pool_forward(const BasicTensor4<S>&,                 \
                                        const PoolGeometry&, PoolCache*);       \
  template BasicTensor4<S> pool_backward(const BasicTensor4<S>&,                \
                                         const PoolCache&);                     \
  template BasicTensor4<S> leaky_relu_forward(const BasicTensor4<S>&, S);       \
  template BasicTensor4<S> leaky_relu_backward(const BasicTensor4<S>&,          \
                                               const BasicTensor4<S>&, S);      \
  template struct BatchNormState<S>;                                            \
  template BasicTensor4<S> batchnorm_forward(const BasicTensor4<S>&,            \
                                             BatchNormState<S>&, Mode,          \
                                             BatchNormCache<S>*);               \
  template BatchNormGrads<S> batchnorm_backward(const BasicTensor4<S>&,         \
                                                const BatchNormCache<S>&,       \
                                                const BatchNormState<S>&);      \
  template BasicTensor4<S> dropout_forward(const BasicTensor4<S>&, double,      \
                                           Mode, Rng&,                          \
                                           std::vector<std::uint8_t>*);         \
  template BasicTensor4<S> dropout_apply_mask(                                  \
      const BasicTensor4<S>&, double, const std::vector<std::uint8_t>&);        \
  template BasicTensor4<S> dropout_backward(const BasicTensor4<S>&, double,     \
                                            const std::vector<std::uint8_t>&);  \
  template BasicTensor4<S> fc_forward(const BasicTensor4<S>&,                   \
                                      const BasicTensor4<S>&,                   \
                                      const BasicTensor4<S>&);                  \
  template ConvGrads<S> fc_backward(const BasicTensor4<S>&,                     \
                                    const BasicTensor4<S>&,                     \
                                    const BasicTensor4<S>&);                    \
  template BasicTensor4<S> softmax(const BasicTensor4<S>&);                     \
  template XentResult<S> softmax_xent(const BasicTensor4<S>&,                   \
                                      const LabelBatch&);                       \
  template class Conv2d<S>;                                                     \
  template class Deconv2d<S>;                                                   \
  template class Pool2d<S>;                                                     \
  template class LeakyRelu<S>;                                                  \
  template class BatchNorm<S>;                                                  \
  template class Dropout<S>;                                                    \
  template class FullyConnected<S>;

DLBL_INSTANTIATE_LAYERS(float)
DLBL_INSTANTIATE_LAYERS(double)

#undef DLBL_INSTANTIATE_LAYERS

}  // namespace dlbl
