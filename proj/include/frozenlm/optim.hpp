#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "frozenlm/param_store.hpp"

namespace frozenlm {

enum class DecayKind { none, linear };

struct OptimizerConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-6;
  double weight_decay = 0.0;
  double warmup_fraction = 0.0;
  DecayKind decay = DecayKind::none;

  void validate() const {
    if (learning_rate <= 0) throw std::invalid_argument("learning_rate must be positive");
    if (beta1 <= 0 || beta1 >= 1) throw std::invalid_argument("beta1 must be in (0,1)");
    if (beta2 <= 0 || beta2 >= 1) throw std::invalid_argument("beta2 must be in (0,1)");
    if (epsilon <= 0) throw std::invalid_argument("epsilon must be positive");
    if (weight_decay < 0) throw std::invalid_argument("weight_decay must be non-negative");
    if (warmup_fraction < 0 || warmup_fraction >= 1)
      throw std::invalid_argument("warmup_fraction must be in [0,1)");
  }
};

// Linear warmup to the peak rate over warmup_fraction * total_steps, then
// either a constant rate or a linear decay to zero at total_steps.
inline double lr_schedule(const OptimizerConfig& cfg, int64_t step, int64_t total_steps) {
  if (step < 0 || step > total_steps)
    throw std::invalid_argument("lr_schedule: step outside [0, total_steps]");
  const auto warmup_steps = int64_t(std::llround(cfg.warmup_fraction * double(total_steps)));
  if (warmup_steps > 0 && step < warmup_steps)
    return cfg.learning_rate * double(step) / double(warmup_steps);
  if (cfg.decay == DecayKind::none) return cfg.learning_rate;
  const double span = double(total_steps - warmup_steps);
  if (span <= 0) return 0.0;
  return cfg.learning_rate * double(total_steps - step) / span;
}

template <class S>
struct AdamState {
  struct Slot {
    std::vector<S> m, v;
  };
  std::unordered_map<std::string, Slot> slots;
  int64_t step = 0;  // completed steps
};

// Bias-corrected Adam with decoupled weight decay. Updates trainable
// parameters only; frozen tensors are untouched no matter what their grad
// buffers hold. Trainable grads are cleared afterwards.
template <class S>
void adam_step(ParamStore<S>& store, AdamState<S>& state, const OptimizerConfig& cfg,
               int64_t step, double lr) {
  if (step < 1) throw std::invalid_argument("adam_step: step must be >= 1");
  const double bc1 = 1.0 - std::pow(cfg.beta1, double(step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, double(step));
  for (auto& [name, t] : store.items(Partition::trainable)) {
    auto* node = t.node();
    if (node->grad.empty())
      throw std::runtime_error("adam_step: missing gradient for trainable parameter " + name);
    auto& slot = state.slots[name];
    if (slot.m.empty()) {
      slot.m.assign(node->val.size(), S(0));
      slot.v.assign(node->val.size(), S(0));
    }
    const S b1 = S(cfg.beta1), b2 = S(cfg.beta2);
    const S eps = S(cfg.epsilon);
    const S step_size = S(lr);
    const S wd = S(cfg.weight_decay);
    for (size_t i = 0; i < node->val.size(); ++i) {
      const S g = node->grad[i];
      slot.m[i] = b1 * slot.m[i] + (S(1) - b1) * g;
      slot.v[i] = b2 * slot.v[i] + (S(1) - b2) * g * g;
      const S mhat = slot.m[i] / S(bc1);
      const S vhat = slot.v[i] / S(bc2);
      node->val[i] -= step_size * (mhat / (std::sqrt(vhat) + eps) + wd * node->val[i]);
    }
    node->zero_grad();
  }
  state.step = step;
}

}  // namespace frozenlm
