#pragma once

// Forward / backward kernels for every layer type the three architectures use,
// and the Layer objects that wrap them with parameters and per-call caches.
//
// Parameter layouts:
//   conv weight    (out, in, M, M)     bias (1, out, 1, 1)
//   deconv weight  (in, out, M, M)     bias (1, out, 1, 1)
//   fc weight      (out, C, H, W)      bias (1, out, 1, 1)
//   bn gamma/beta/running stats (1, C, 1, 1)
// A deconv weight is exactly the weight of the convolution it is the adjoint of.

#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "dlbl/tensor.hpp"

namespace dlbl {

using Rng = std::mt19937_64;

enum class Mode { train, eval };

// ---------------------------------------------------------------------------
// Size rules

// (n - M + 2z) / s + 1; throws unless the division is exact and the result >= 1.
std::size_t conv_output_size(std::size_t n, std::size_t kernel,
                             std::size_t stride, std::size_t pad);
// (n - 1) s - 2z + M; throws if < 1.
std::size_t deconv_output_size(std::size_t n, std::size_t kernel,
                               std::size_t stride, std::size_t crop);
// floor((n - P + 2z) / s) + 1; throws if the window exceeds the padded input.
std::size_t pool_output_size(std::size_t n, std::size_t window,
                             std::size_t stride, std::size_t pad);

struct ConvGeometry {
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t pad = 0;  // zero padding for conv, crop for deconv
};

enum class PoolMode { max, average };

struct PoolGeometry {
  std::size_t window = 3;
  std::size_t stride = 2;
  std::size_t pad = 1;
  PoolMode mode = PoolMode::max;
};

// ---------------------------------------------------------------------------
// Kernels

template <typename Scalar>
struct ConvGrads {
  BasicTensor4<Scalar> dx;
  BasicTensor4<Scalar> dw;
  BasicTensor4<Scalar> db;
};

template <typename Scalar>
BasicTensor4<Scalar> conv_forward(const BasicTensor4<Scalar>& x,
                                  const BasicTensor4<Scalar>& weight,
                                  const BasicTensor4<Scalar>& bias,
                                  const ConvGeometry& g);

template <typename Scalar>
ConvGrads<Scalar> conv_backward(const BasicTensor4<Scalar>& dy,
                                const BasicTensor4<Scalar>& x,
                                const BasicTensor4<Scalar>& weight,
                                const ConvGeometry& g);

template <typename Scalar>
BasicTensor4<Scalar> deconv_forward(const BasicTensor4<Scalar>& x,
                                    const BasicTensor4<Scalar>& weight,
                                    const BasicTensor4<Scalar>& bias,
                                    const ConvGeometry& g);

template <typename Scalar>
ConvGrads<Scalar> deconv_backward(const BasicTensor4<Scalar>& dy,
                                  const BasicTensor4<Scalar>& x,
                                  const BasicTensor4<Scalar>& weight,
                                  const ConvGeometry& g);

// Max mode records, per output element, the flat in-plane index of the
// selected input; average mode records nothing.
struct PoolCache {
  Shape input;
  PoolGeometry geometry;
  std::vector<std::int32_t> argmax;
};

template <typename Scalar>
BasicTensor4<Scalar> pool_forward(const BasicTensor4<Scalar>& x,
                                  const PoolGeometry& g, PoolCache* cache);

template <typename Scalar>
BasicTensor4<Scalar> pool_backward(const BasicTensor4<Scalar>& dy,
                                   const PoolCache& cache);

template <typename Scalar>
BasicTensor4<Scalar> leaky_relu_forward(const BasicTensor4<Scalar>& x,
                                        Scalar tau);
template <typename Scalar>
BasicTensor4<Scalar> leaky_relu_backward(const BasicTensor4<Scalar>& dy,
                                         const BasicTensor4<Scalar>& x,
                                         Scalar tau);

template <typename Scalar>
struct BatchNormState {
  BasicTensor4<Scalar> gamma;
  BasicTensor4<Scalar> beta;
  BasicTensor4<Scalar> running_mean;
  BasicTensor4<Scalar> running_var;
  Scalar momentum = Scalar(0.1);
  Scalar epsilon = Scalar(1e-5);

  static BatchNormState identity(std::size_t channels);
};

template <typename Scalar>
struct BatchNormCache {
  BasicTensor4<Scalar> xhat;
  std::vector<Scalar> inv_std;
  Mode mode = Mode::train;
};

template <typename Scalar>
BasicTensor4<Scalar> batchnorm_forward(const BasicTensor4<Scalar>& x,
                                       BatchNormState<Scalar>& state, Mode mode,
                                       BatchNormCache<Scalar>* cache);

template <typename Scalar>
struct BatchNormGrads {
  BasicTensor4<Scalar> dx;
  BasicTensor4<Scalar> dgamma;
  BasicTensor4<Scalar> dbeta;
};

template <typename Scalar>
BatchNormGrads<Scalar> batchnorm_backward(const BasicTensor4<Scalar>& dy,
                                          const BatchNormCache<Scalar>& cache,
                                          const BatchNormState<Scalar>& state);

// Inverted dropout. `mask` receives 1 for kept elements (train mode only).
template <typename Scalar>
BasicTensor4<Scalar> dropout_forward(const BasicTensor4<Scalar>& x, double rate,
                                     Mode mode, Rng& rng,
                                     std::vector<std::uint8_t>* mask);
template <typename Scalar>
BasicTensor4<Scalar> dropout_apply_mask(const BasicTensor4<Scalar>& x,
                                        double rate,
                                        const std::vector<std::uint8_t>& mask);
template <typename Scalar>
BasicTensor4<Scalar> dropout_backward(const BasicTensor4<Scalar>& dy,
                                      double rate,
                                      const std::vector<std::uint8_t>& mask);

template <typename Scalar>
BasicTensor4<Scalar> fc_forward(const BasicTensor4<Scalar>& x,
                                const BasicTensor4<Scalar>& weight,
                                const BasicTensor4<Scalar>& bias);
template <typename Scalar>
ConvGrads<Scalar> fc_backward(const BasicTensor4<Scalar>& dy,
                              const BasicTensor4<Scalar>& x,
                              const BasicTensor4<Scalar>& weight);

template <typename Scalar>
struct XentResult {
  Scalar loss = 0;
  BasicTensor4<Scalar> probs;
  BasicTensor4<Scalar> dscores;
  std::size_t valid_pixels = 0;
};

// Per-pixel softmax cross-entropy. The loss is the mean over valid pixels of
// each patch, then the mean over patches with at least one valid pixel.
// Pixels labelled kIgnoreLabel contribute neither loss nor gradient.
template <typename Scalar>
XentResult<Scalar> softmax_xent(const BasicTensor4<Scalar>& scores,
                                const LabelBatch& targets);

template <typename Scalar>
BasicTensor4<Scalar> softmax(const BasicTensor4<Scalar>& scores);

// ---------------------------------------------------------------------------
// Layer objects

template <typename Scalar>
struct Param {
  std::string name;
  BasicTensor4<Scalar> value;
  BasicTensor4<Scalar> grad;
  bool decay = false;
};

struct ForwardContext {
  Mode mode = Mode::train;
  Rng* rng = nullptr;
  // false skips the caches needed by backward (inference)
  bool retain = true;
};

// Spatial footprint used for receptive-field bookkeeping.
struct Footprint {
  std::size_t kernel = 1;
  std::size_t stride = 1;
  bool transposed = false;
};

template <typename Scalar>
class Layer {
 public:
  using Tensor = BasicTensor4<Scalar>;

  explicit Layer(std::string name) : name_(std::move(name)) {}
  virtual ~Layer() = default;

  const std::string& name() const { return name_; }
  virtual std::string kind() const = 0;
  virtual Shape output_shape(const Shape& in) const = 0;
  virtual Tensor forward(const Tensor& x, ForwardContext& ctx) = 0;
  // Returns dL/dx and adds parameter gradients into each Param::grad.
  virtual Tensor backward(const Tensor& dy) = 0;
  virtual std::unique_ptr<Layer> clone() const = 0;

  virtual std::vector<Param<Scalar>*> params() { return {}; }
  // Non-learnable state saved with checkpoints (batch-norm running stats).
  virtual std::vector<Param<Scalar>*> buffers() { return {}; }
  virtual void init_weights(Rng&) {}
  virtual Footprint footprint() const { return {}; }
  virtual void release_cache() {}

 protected:
  Layer(const Layer&) = default;
  Layer& operator=(const Layer&) = default;

 private:
  std::string name_;
};

template <typename Scalar>
class Conv2d final : public Layer<Scalar> {
 public:
  using Tensor = BasicTensor4<Scalar>;
  Conv2d(std::string name, std::size_t in_channels, std::size_t out_channels,
         ConvGeometry g);

  std::string kind() const override { return "conv"; }
  Shape output_shape(const Shape& in) const override;
  Tensor forward(const Tensor& x, ForwardContext& ctx) override;
  Tensor backward(const Tensor& dy) override;
  std::unique_ptr<Layer<Scalar>> clone() const override {
    return std::make_unique<Conv2d>(*this);
  }
  std::vector<Param<Scalar>*> params() override { return {&weight_, &bias_}; }
  void init_weights(Rng& rng) override;
  Footprint footprint() const override { return {geom_.kernel, geom_.stride}; }
  void release_cache() override { input_ = {}; }

  const ConvGeometry& geometry() const { return geom_; }
  Param<Scalar>& weight() { return weight_; }
  Param<Scalar>& bias() { return bias_; }

 private:
  ConvGeometry geom_;
  Param<Scalar> weight_;
  Param<Scalar> bias_;
  Tensor input_;
};

template <typename Scalar>
class Deconv2d final : public Layer<Scalar> {
 public:
  using Tensor = BasicTensor4<Scalar>;
  Deconv2d(std::string name, std::size_t in_channels, std::size_t out_channels,
           ConvGeometry g);

  std::string kind() const override { return "deconv"; }
  Shape output_shape(const Shape& in) const override;
  Tensor forward(const Tensor& x, ForwardContext& ctx) override;
  Tensor backward(const Tensor& dy) override;
  std::unique_ptr<Layer<Scalar>> clone() const override {
    return std::make_unique<Deconv2d>(*this);
  }
  std::vector<Param<Scalar>*> params() override { return {&weight_, &bias_}; }
  void init_weights(Rng& rng) override;
  Footprint footprint() const override {
    return {geom_.kernel, geom_.stride, true};
  }
  void release_cache() override { input_ = {}; }

  Param<Scalar>& weight() { return weight_; }
  Param<Scalar>& bias() { return bias_; }

 private:
  ConvGeometry geom_;
  Param<Scalar> weight_;
  Param<Scalar> bias_;
  Tensor input_;
};

template <typename Scalar>
class Pool2d final : public Layer<Scalar> {
 public:
  using Tensor = BasicTensor4<Scalar>;
  Pool2d(std::string name, PoolGeometry g) : Layer<Scalar>(std::move(name)), geom_(g) {}

  std::string kind() const override {
    return geom_.mode == PoolMode::max ? "maxpool" : "avgpool";
  }
  Shape output_shape(const Shape& in) const override;
  Tensor forward(const Tensor& x, ForwardContext& ctx) override;
  Tensor backward(const Tensor& dy) override;
  std::unique_ptr<Layer<Scalar>> clone() const override {
    return std::make_unique<Pool2d>(*this);
  }
  Footprint footprint() const override { return {geom_.window, geom_.stride}; }
  void release_cache() override { cache_ = {}; }

 private:
  PoolGeometry geom_;
  PoolCache cache_;
};

template <typename Scalar>
class LeakyRelu final : public Layer<Scalar> {
 public:
  using Tensor = BasicTensor4<Scalar>;
  LeakyRelu(std::string name, Scalar tau);

  std::string kind() const override { return "lrelu"; }
  Shape output_shape(const Shape& in) const override { return in; }
  Tensor forward(const Tensor& x, ForwardContext& ctx) override;
  Tensor backward(const Tensor& dy) override;
  std::unique_ptr<Layer<Scalar>> clone() const override {
    return std::make_unique<LeakyRelu>(*this);
  }
  void release_cache() override { input_ = {}; }

 private:
  Scalar tau_;
  Tensor input_;
};

template <typename Scalar>
class BatchNorm final : public Layer<Scalar> {
 public:
  using Tensor = BasicTensor4<Scalar>;
  BatchNorm(std::string name, std::size_t channels);

  std::string kind() const override { return "bn"; }
  Shape output_shape(const Shape& in) const override;
  Tensor forward(const Tensor& x, ForwardContext& ctx) override;
  Tensor backward(const Tensor& dy) override;
  std::unique_ptr<Layer<Scalar>> clone() const override {
    return std::make_unique<BatchNorm>(*this);
  }
  std::vector<Param<Scalar>*> params() override { return {&gamma_, &beta_}; }
  std::vector<Param<Scalar>*> buffers() override {
    return {&running_mean_, &running_var_};
  }
  void init_weights(Rng&) override;
  void release_cache() override { cache_ = {}; }

 private:
  BatchNormState<Scalar> state() const;
  Param<Scalar> gamma_;
  Param<Scalar> beta_;
  Param<Scalar> running_mean_;
  Param<Scalar> running_var_;
  BatchNormCache<Scalar> cache_;
};

template <typename Scalar>
class Dropout final : public Layer<Scalar> {
 public:
  using Tensor = BasicTensor4<Scalar>;
  Dropout(std::string name, double rate);

  std::string kind() const override { return "dropout"; }
  Shape output_shape(const Shape& in) const override { return in; }
  Tensor forward(const Tensor& x, ForwardContext& ctx) override;
  Tensor backward(const Tensor& dy) override;
  std::unique_ptr<Layer<Scalar>> clone() const override {
    return std::make_unique<Dropout>(*this);
  }
  void release_cache() override { mask_.clear(); }

  double rate() const { return rate_; }
  // Reuse the current mask on later train-mode forwards (gradient checking).
  void freeze_mask(bool on) { frozen_ = on; }
  const std::vector<std::uint8_t>& mask() const { return mask_; }

 private:
  double rate_;
  bool frozen_ = false;
  bool masked_ = false;
  std::vector<std::uint8_t> mask_;
};

template <typename Scalar>
class FullyConnected final : public Layer<Scalar> {
 public:
  using Tensor = BasicTensor4<Scalar>;
  // `input` is the per-sample (channels, height, width) extent it flattens.
  FullyConnected(std::string name, Shape input, std::size_t out_features);

  std::string kind() const override { return "fc"; }
  Shape output_shape(const Shape& in) const override;
  Tensor forward(const Tensor& x, ForwardContext& ctx) override;
  Tensor backward(const Tensor& dy) override;
  std::unique_ptr<Layer<Scalar>> clone() const override {
    return std::make_unique<FullyConnected>(*this);
  }
  std::vector<Param<Scalar>*> params() override { return {&weight_, &bias_}; }
  void init_weights(Rng& rng) override;
  Footprint footprint() const override { return {input_extent_.height, 1}; }
  void release_cache() override { input_ = {}; }

 private:
  Shape input_extent_;
  Param<Scalar> weight_;
  Param<Scalar> bias_;
  Tensor input_;
};

// Standard deviation of the scaled-normal initialisation for a filter bank of
// `out_channels` filters with an M x M spatial support: sqrt(2 / (M^2 K')).
double init_stddev(std::size_t kernel_area, std::size_t out_channels);

}  // namespace dlbl
