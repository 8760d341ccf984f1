#include "xfernas/optim.hpp"

#include <cmath>

#include "xfernas/errors.hpp"

namespace xfernas {

void adam_step(ParamStore& store, const Gradients& grads, const AdamConfig& cfg) {
  if (grads.size() != store.size()) {
    throw ContractViolation("adam_step: gradient set does not match the parameter store");
  }
  for (auto& [path, p] : store) {
    auto it = grads.find(path);
    if (it == grads.end()) throw ContractViolation("adam_step: no gradient for " + path);
    const Tensor& grad = it->second;
    if (!grad.same_shape(p.value)) {
      throw ContractViolation("adam_step: gradient shape " + shape_string(grad.shape()) +
                              " does not match " + path + " " + shape_string(p.value.shape()));
    }
    ++p.step;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(p.step));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(p.step));
    const double decay = p.decay ? cfg.lr * cfg.weight_decay : 0.0;
    auto value = p.value.data();
    auto m = p.first_moment.data();
    auto v = p.second_moment.data();
    const auto g = grad.data();
    for (std::size_t i = 0; i < value.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double m_hat = m[i] / c1;
      const double v_hat = v[i] / c2;
      value[i] -= cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps) + decay * value[i];
    }
  }
}

double clip_global_norm(Gradients& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& [_, g] : grads) {
    for (double x : g.data()) sq += x * x;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double f = max_norm / norm;
    for (auto& [_, g] : grads) {
      for (double& x : g.data()) x *= f;
    }
  }
  return norm;
}

}  // namespace xfernas
