#pragma once

// Builders for the three labelling networks and structural introspection.
//
// Shared block: conv (stride 1, size-preserving padding) -> batch norm ->
// leaky ReLU -> max pool 3x3/2 (z=1) -> dropout.
//
//   PC   blocks 64@7, 64@5, 128@5, 256@5, all pooled (65 -> 5), dense head.
//   SPL  same blocks, last pool removed (65 -> 9), 1x1 conv head.
//   FPL  SPL downsampling, then three 3x3/2 (crop 1) deconv blocks of 512
//        (9 -> 17 -> 33 -> 65), 1x1 conv head.
//
// Tensor names are shared across the three (block{i}.conv.weight, ...), so
// warm starting from a PC checkpoint is an identity prefix map.

#include <array>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "dlbl/arch_tag.hpp"
#include "dlbl/network.hpp"

namespace dlbl {

enum class DropoutPlacement { after_pool, before_pool };

struct ArchSpec {
  ArchTag tag = ArchTag::FPL;
  std::size_t in_channels = 4;
  std::size_t num_classes = 6;
  std::size_t patch_size = 65;
  std::array<std::size_t, 4> conv_channels{64, 64, 128, 256};
  std::array<std::size_t, 4> conv_kernels{7, 5, 5, 5};
  std::size_t deconv_channels = 512;
  std::size_t deconv_kernel = 3;
  double leak = 0.1;
  double dropout = 0.5;
  DropoutPlacement dropout_placement = DropoutPlacement::after_pool;

  // Channel widths divided by `divisor` (at least 1 channel each); the
  // desk-scale experiments train these thinner variants.
  ArchSpec thinned(std::size_t divisor) const;

  // Canonical text form stored in checkpoints, e.g.
  // "FPL;in=4;classes=6;patch=65;conv=64,64,128,256;kernels=7,5,5,5;deconv=512;..."
  std::string tag_string() const;
  static ArchSpec parse(const std::string& tag);

  bool operator==(const ArchSpec&) const = default;
};

Network<float> build(const ArchSpec& spec);
Network<double> build_double(const ArchSpec& spec);

// Output shape of every layer for one input patch of spec.patch_size.
std::vector<Shape> shape_chain(const ArchSpec& spec);

// Input side length followed by the spatial size after every resampling layer
// (pool / deconv), e.g. 65,33,17,9,17,33,65 for FPL.
std::vector<std::size_t> spatial_chain(const ArchSpec& spec);

struct ParamCount {
  std::string name;
  std::size_t weights = 0;
  std::size_t biases = 0;  // bias or batch-norm beta
  std::size_t other = 0;   // batch-norm gamma
};

struct ParamCountReport {
  std::vector<ParamCount> layers;
  std::size_t total = 0;
  std::size_t learnable_tensors = 0;
};

ParamCountReport param_count(const ArchSpec& spec);

// Number of learnable tensors the builder registers: 4 per block
// (conv weight/bias, bn gamma/beta) plus 2 for the head.
std::size_t documented_tensor_count(ArchTag tag);

struct ReceptiveField {
  std::size_t bottleneck = 0;  // side length, in input pixels
  std::size_t output = 0;      // of one final output cell
};

// Composes per-layer (kernel, stride) expansions: rf += (k-1) * jump for
// forward layers, rf += (ceil(k/s)-1) * jump_in for transposed ones.
ReceptiveField receptive_field(const ArchSpec& spec);
std::size_t receptive_field(const Network<float>& net, std::size_t first_layer,
                            std::size_t last_layer);

// Index of the last downsampling layer's output (the bottleneck activation).
std::size_t bottleneck_layer(const Network<float>& net);

// Network prefix -> checkpoint prefix for warm starting `target` from a PC
// checkpoint: the four convolutional blocks.
std::map<std::string, std::string> pc_warm_start_map();

// Rebuilds the architecture named by the checkpoint tag and loads it.
Network<float> load_network(const std::filesystem::path& path);
Network<float> load_network(const Checkpoint& ck);
// Same, but rejects a checkpoint whose tag differs from `expected`.
Network<float> load_network(const std::filesystem::path& path,
                            const ArchSpec& expected);

}  // namespace dlbl
