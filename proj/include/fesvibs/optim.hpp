#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "fesvibs/error.hpp"
#include "fesvibs/tensor.hpp"

namespace fesvibs {

struct AdamSettings {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const {
    if (!(lr > 0)) throw ValidationError("adam: lr must be > 0");
    if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1)
      throw ValidationError("adam: betas must lie in [0,1)");
    if (!(eps > 0)) throw ValidationError("adam: eps must be > 0");
  }
};

// First/second moment estimates plus the bias-correction step count for one
// parameter tensor.
struct AdamSlot {
  std::vector<double> m;
  std::vector<double> v;
  long step = 0;
};

// One Adam update with bias correction. `slot` must start zeroed with
// step == 0 and is advanced in place.
inline void adam_step(std::span<double> param, std::span<const double> grad,
                      AdamSlot& slot, const AdamSettings& cfg) {
  cfg.validate();
  if (param.size() != grad.size())
    throw DimensionError("adam_step: param/grad size mismatch");
  if (slot.m.size() != param.size()) {
    slot.m.assign(param.size(), 0.0);
    slot.v.assign(param.size(), 0.0);
  }
  slot.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(slot.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(slot.step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    slot.m[i] = cfg.beta1 * slot.m[i] + (1.0 - cfg.beta1) * grad[i];
    slot.v[i] = cfg.beta2 * slot.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
    const double mhat = slot.m[i] / bc1;
    const double vhat = slot.v[i] / bc2;
    param[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
  }
}

// Steps a fixed set of leaf tensors. Tensors without a populated gradient
// are skipped entirely (their slots do not advance); gradients are cleared
// after a step.
class AdamOptimizer {
 public:
  AdamOptimizer(AdamSettings cfg, std::vector<Tensor> params)
      : cfg_(cfg), params_(std::move(params)), slots_(params_.size()) {
    cfg_.validate();
  }

  void step() {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (!params_[i].has_grad()) continue;
      adam_step(params_[i].mutable_data(), params_[i].grad(), slots_[i], cfg_);
      params_[i].zero_grad();
    }
  }

  const AdamSettings& settings() const { return cfg_; }
  std::vector<AdamSlot>& slots() { return slots_; }
  const std::vector<Tensor>& params() const { return params_; }

  // Round-start snapshot support for abort rollback.
  std::vector<AdamSlot> snapshot_slots() const { return slots_; }
  void restore_slots(std::vector<AdamSlot> s) { slots_ = std::move(s); }

 private:
  AdamSettings cfg_;
  std::vector<Tensor> params_;
  std::vector<AdamSlot> slots_;
};

}  // namespace fesvibs
