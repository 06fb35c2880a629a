#pragma once

// Training loop: epochs of mini-batches drawn from a periodically resampled
// super-batch, per-epoch validation on class-uniform patches from the
// validation tiles, warm starting from a PC checkpoint, and the optional
// grid warm-up phase.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dlbl/architectures.hpp"
#include "dlbl/data.hpp"
#include "dlbl/kv.hpp"
#include "dlbl/optimizer.hpp"

namespace dlbl {

struct TrainConfig {
  ArchSpec arch;
  int epochs = 0;  // 0: the architecture's default schedule length
  std::size_t minibatches_per_epoch = 500;
  SamplerConfig sampler;
  std::size_t validation_factor = 100;  // validation patches = N_b * factor
  OptimizerConfig optimizer;
  // Replaces the architecture schedule when non-empty.
  std::vector<LrPhase> schedule;
  std::filesystem::path warm_start;  // PC checkpoint, optional
  int grid_epochs = 0;               // leading epochs drawn from the overlap grid
  std::size_t grid_overlap = 33;
  std::filesystem::path checkpoint_dir;  // empty: no intermediate checkpoints
  int checkpoint_every = 0;              // 0: every resample interval
  std::uint64_t seed = 1;
  bool deterministic = true;

  // Paper defaults for `tag`: mini-batch 128 (PC, SPL) or 32 (FPL).
  static TrainConfig defaults(ArchTag tag);
  Schedule resolved_schedule() const;
};

// Reads the [arch] and [train] sections. Values are range-checked here; the
// caller rejects keys nobody consumed once every section has been read.
TrainConfig parse_train_config(const KeyValues& kv);

// "1-100:1e-3,101-200:5e-4" -> phases.
std::vector<LrPhase> parse_schedule(const std::string& text);

struct EpochRecord {
  int epoch = 0;
  double lr = 0;
  std::size_t steps = 0;  // mini-batches consumed
  double train_loss = 0;
  double train_accuracy = 0;  // pixel accuracy on the training mini-batches
  double val_loss = 0;
  double val_accuracy = 0;
  double grad_norm = 0;  // mean over the epoch's steps
  double seconds = 0;
  std::string source;  // "grid" or "superbatch"
  std::uint64_t seed = 0;

  std::string line() const;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  // Appends one key=value line per record not yet in the file.
  void append_to(const std::filesystem::path& path) const;
  std::string text() const;
};

struct TrainResult {
  Network<float> net;
  Checkpoint checkpoint;
  TrainLog log;
  WarmStartReport warm;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

// Throws NumericError when the training loss becomes non-finite.
TrainResult train(const TrainConfig& cfg, const Dataset& ds, const EpochCallback& on_epoch = {});

// Labels the network is trained against for full-patch labels.
LabelBatch targets_for(ArchTag tag, const LabelBatch& full);

// Network parameters, optimizer state, normalisation constants (as
// aux.norm.min / max / mean) and meta (epoch, seed).
Checkpoint make_training_checkpoint(Network<float>& net, const SgdMomentum* opt,
                                    const Normalization& norm, int epoch, std::uint64_t seed);
Normalization normalization_from(const Checkpoint& ck);

// Memorisation check on a small fixed patch set: one epoch is one shuffled
// pass over the patches; stops once eval-mode pixel accuracy on the set
// exceeds `target`.
struct OverfitConfig {
  ArchSpec arch;
  std::size_t patches = 200;
  int max_epochs = 200;
  std::size_t minibatch = 32;
  double lr = 1e-2;
  double target = 0.99;
  std::uint64_t seed = 1;
};

struct OverfitResult {
  std::vector<double> losses;      // mean training loss per epoch
  std::vector<double> accuracies;  // eval-mode accuracy on the set per epoch
  // Train-mode accuracy on the mini-batches as they were stepped on.
  std::vector<double> train_accuracies;
  int epochs = 0;
  bool reached = false;
};

OverfitResult overfit_smoke(const OverfitConfig& cfg, const Dataset& ds);

// Trailing moving average of width `window` (shorter at the start).
std::vector<double> moving_average(const std::vector<double>& v, std::size_t window);

}  // namespace dlbl
