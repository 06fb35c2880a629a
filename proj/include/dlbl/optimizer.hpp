#pragma once

// Heavy-ball SGD with weight decay restricted to filter weights, and the
// per-architecture learning-rate schedules.

#include <map>
#include <string>
#include <vector>

#include "dlbl/arch_tag.hpp"
#include "dlbl/network.hpp"

namespace dlbl {

struct OptimizerConfig {
  double momentum = 0.9;
  double weight_decay = 0.01;
};

class SgdMomentum {
 public:
  explicit SgdMomentum(OptimizerConfig cfg = {}) : cfg_(cfg) {}

  const OptimizerConfig& config() const { return cfg_; }

  // v <- mu v - lr (g + lambda w [decay-eligible]);  w <- w + v; then clears g.
  void step(const std::vector<Param<float>*>& params, double lr);
  void step(Network<float>& net, double lr) { step(net.params(), lr); }

  // Velocity buffers by parameter name (created lazily, zero-initialised).
  const std::map<std::string, Tensor4>& velocities() const { return velocity_; }

  void save_state(Checkpoint& ck) const;
  void load_state(const Checkpoint& ck);

 private:
  OptimizerConfig cfg_;
  std::map<std::string, Tensor4> velocity_;
};

struct LrPhase {
  int first_epoch;
  int last_epoch;
  double lr;
};

class Schedule {
 public:
  Schedule(std::vector<LrPhase> phases);

  // Paper schedules: PC 400 epochs, SPL 400 (PC rates x 0.1), FPL 600. A
  // different total stretches or truncates the final phase.
  static Schedule for_arch(ArchTag tag, int total_epochs = 0);
  static int default_epochs(ArchTag tag);

  double lr(int epoch) const;
  int total_epochs() const { return phases_.back().last_epoch; }
  const std::vector<LrPhase>& phases() const { return phases_; }

 private:
  std::vector<LrPhase> phases_;
};

inline double schedule_lr(ArchTag tag, int epoch) {
  return Schedule::for_arch(tag).lr(epoch);
}

}  // namespace dlbl
