#include "dlbl/optimizer.hpp"

#include <algorithm>

namespace dlbl {

void SgdMomentum::step(const std::vector<Param<float>*>& params, double lr) {
  const float mu = static_cast<float>(cfg_.momentum);
  const float rate = static_cast<float>(lr);
  const float lambda = static_cast<float>(cfg_.weight_decay);
  for (Param<float>* p : params) {
    auto [it, fresh] = velocity_.try_emplace(p->name);
    if (fresh || it->second.shape() != p->value.shape()) {
      it->second = Tensor4(p->value.shape());
    }
    Tensor4& v = it->second;
    float* w = p->value.data();
    float* g = p->grad.data();
    float* vel = v.data();
    const bool decay = p->decay && lambda != 0.0f;
    for (std::size_t i = 0; i < v.size(); ++i) {
      const float grad = decay ? g[i] + lambda * w[i] : g[i];
      vel[i] = mu * vel[i] - rate * grad;
      w[i] += vel[i];
      g[i] = 0.0f;
    }
  }
}

void SgdMomentum::save_state(Checkpoint& ck) const {
  for (const auto& [name, v] : velocity_) ck.set_tensor("opt.velocity." + name, to_record(v));
}

void SgdMomentum::load_state(const Checkpoint& ck) {
  const std::string prefix = "opt.velocity.";
  for (const auto& [name, rec] : ck.tensors) {
    if (name.rfind(prefix, 0) == 0) velocity_[name.substr(prefix.size())] = from_record(rec);
  }
}

Schedule::Schedule(std::vector<LrPhase> phases) : phases_(std::move(phases)) {
  if (phases_.empty()) throw ConfigError("schedule needs at least one phase");
  int expect = 1;
  for (const auto& p : phases_) {
    if (p.first_epoch != expect || p.last_epoch < p.first_epoch) {
      throw ConfigError("schedule phases must be contiguous, non-empty and start at epoch 1");
    }
    if (!(p.lr > 0)) throw ConfigError("schedule learning rates must be positive");
    expect = p.last_epoch + 1;
  }
}

int Schedule::default_epochs(ArchTag tag) { return tag == ArchTag::FPL ? 600 : 400; }

Schedule Schedule::for_arch(ArchTag tag, int total_epochs) {
  if (total_epochs <= 0) total_epochs = default_epochs(tag);
  std::vector<LrPhase> base;
  switch (tag) {
    case ArchTag::PC:
      base = {{1, 100, 1e-3}, {101, 200, 5e-4}, {201, 300, 2.5e-4}, {301, 400, 1e-5}};
      break;
    case ArchTag::SPL:
      base = {{1, 100, 1e-4}, {101, 200, 5e-5}, {201, 300, 2.5e-5}, {301, 400, 1e-6}};
      break;
    case ArchTag::FPL:
      base = {{1, 100, 1e-3}, {101, 200, 5e-4}, {201, 300, 1e-4}, {301, 600, 1e-5}};
      break;
  }
  std::vector<LrPhase> phases;
  for (auto p : base) {
    if (p.first_epoch > total_epochs) break;
    p.last_epoch = std::min(p.last_epoch, total_epochs);
    phases.push_back(p);
  }
  phases.back().last_epoch = total_epochs;
  return Schedule(std::move(phases));
}

double Schedule::lr(int epoch) const {
  for (const auto& p : phases_)
    if (epoch >= p.first_epoch && epoch <= p.last_epoch) return p.lr;
  throw ConfigError("epoch " + std::to_string(epoch) + " outside schedule [1, " +
                    std::to_string(total_epochs()) + "]");
}

}  // namespace dlbl
