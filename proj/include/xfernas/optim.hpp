#pragma once

#include "xfernas/tensor.hpp"

namespace xfernas {

struct AdamConfig {
  double lr = 1e-3;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// One Adam update with decoupled weight decay:
//   p <- p - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * p
// The decay term is skipped for parameters stored with decay == false.
// `grads` must have exactly the store's keys and shapes.
void adam_step(ParamStore& store, const Gradients& grads, const AdamConfig& cfg);

// Rescales all gradients in place so that their joint L2 norm is at most
// max_norm. Returns the norm before clipping.
double clip_global_norm(Gradients& grads, double max_norm);

}  // namespace xfernas
