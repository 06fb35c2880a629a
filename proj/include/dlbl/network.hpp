#pragma once

// Sequential layer composition with a named parameter registry, plus the
// binary checkpoint format and partial (warm-start) loading.

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dlbl/layers.hpp"

namespace dlbl {

template <typename Scalar>
class Network {
 public:
  using Tensor = BasicTensor4<Scalar>;
  using LayerPtr = std::unique_ptr<Layer<Scalar>>;

  Network() = default;
  explicit Network(std::string arch_tag) : arch_tag_(std::move(arch_tag)) {}
  Network(const Network& other);
  Network& operator=(const Network& other);
  Network(Network&&) noexcept = default;
  Network& operator=(Network&&) noexcept = default;

  const std::string& arch_tag() const { return arch_tag_; }
  void set_arch_tag(std::string tag) { arch_tag_ = std::move(tag); }

  // Throws if the name is already taken.
  Layer<Scalar>& add(LayerPtr layer);
  std::size_t size() const { return layers_.size(); }
  Layer<Scalar>& layer(std::size_t i) { return *layers_.at(i); }
  const Layer<Scalar>& layer(std::size_t i) const { return *layers_.at(i); }
  Layer<Scalar>* find_layer(const std::string& name);

  Mode mode() const { return mode_; }
  void set_mode(Mode m) { mode_ = m; }

  // Dropout stream.
  Rng& rng() { return rng_; }
  void seed(std::uint64_t s) { rng_.seed(s); }

  // Output shape of every layer for a given input; throws with the layer name
  // on the first incompatibility.
  std::vector<Shape> shape_chain(const Shape& input) const;

  Tensor forward(const Tensor& x);
  // Eval-style forward that keeps no backward caches.
  Tensor infer(const Tensor& x);
  // Adds into every registered gradient; returns dL/dinput.
  Tensor backward(const Tensor& dy);
  void release_caches();

  std::vector<Param<Scalar>*> params();
  std::vector<Param<Scalar>*> buffers();
  Param<Scalar>* find(const std::string& name);
  void zero_grad();

  // Scaled-normal weights, zero biases, identity batch norm.
  void init_weights(Rng& rng);

 private:
  std::string arch_tag_;
  std::vector<LayerPtr> layers_;
  Mode mode_ = Mode::train;
  Rng rng_{0x5eed};
};

// ---------------------------------------------------------------------------
// Checkpoints
//
// Little-endian binary:
//   "DLBL" | u32 version | str arch_tag | u32 tensor_count
//   tensor_count x { str name | u32 rank | u32 dims[rank] | f32 data[prod] }
//   u32 meta_count | meta_count x { str key | u64 value }
// where str is a u32 byte length followed by UTF-8 bytes.
//
// Tensor names: network parameters and buffers by registry name, optimizer
// velocities under "opt.", auxiliary data (normalisation constants) under
// "aux.". Epoch counter and seeds live in the meta block.

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TensorRecord {
  std::vector<std::uint32_t> dims;
  std::vector<float> data;
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::string arch_tag;
  std::vector<std::pair<std::string, TensorRecord>> tensors;
  std::vector<std::pair<std::string, std::uint64_t>> meta;

  const TensorRecord* find(const std::string& name) const;
  std::optional<std::uint64_t> meta_value(const std::string& key) const;
  void set_tensor(const std::string& name, TensorRecord rec);
  void set_meta(const std::string& key, std::uint64_t value);
};

TensorRecord to_record(const Tensor4& t);
TensorRecord to_record(const std::vector<float>& v);
Tensor4 from_record(const TensorRecord& r);

// Parameters and buffers of `net`, in registry order.
Checkpoint make_checkpoint(Network<float>& net);
void write_checkpoint(const Checkpoint& ck, const std::filesystem::path& path);
Checkpoint read_checkpoint(const std::filesystem::path& path);

// Strict load: the tag must match and every parameter/buffer must be present
// with the right shape. Extra "opt."/"aux." tensors are ignored; any other
// unknown tensor is an error.
void load_into(Network<float>& net, const Checkpoint& ck);

struct WarmStartReport {
  std::vector<std::string> loaded;
  std::vector<std::string> skipped;
};

// Copies every network tensor (parameters and batch-norm running stats) whose
// name, rewritten through the first matching prefix of `prefix_map`
// (network prefix -> checkpoint prefix), exists in the checkpoint with the
// same shape. Everything else keeps its current value and is reported as
// skipped.
WarmStartReport warm_start(Network<float>& net, const Checkpoint& ck,
                           const std::map<std::string, std::string>& prefix_map);

}  // namespace dlbl
