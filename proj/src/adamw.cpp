#include "hica/adamw.hpp"

#include <cmath>
#include <stdexcept>

namespace hica {

void adamw_step(const std::vector<Param*>& params, const GradSet& grads, AdamWState& state) {
  const AdamWConfig& c = state.cfg;
  state.global_step += 1;
  for (Param* p : params) {
    const Tensor2* g = grads.find(*p);
    if (g == nullptr) continue;  // untouched by this loss: skip entirely
    if (!g->same_shape(p->value))
      throw std::invalid_argument("adamw_step: grad " + g->shape_str() + " vs param '" + p->name +
                                  "' " + p->value.shape_str());
    auto& mom = state.moments[p->name];
    if (mom.m.size() == 0) {
      mom.m = Tensor2(p->value.rows, p->value.cols);
      mom.v = Tensor2(p->value.rows, p->value.cols);
    }
    mom.t += 1;
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(mom.t));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(mom.t));
    for (int i = 0; i < p->value.size(); ++i) {
      const double gi = g->data[i];
      mom.m.data[i] = c.beta1 * mom.m.data[i] + (1.0 - c.beta1) * gi;
      mom.v.data[i] = c.beta2 * mom.v.data[i] + (1.0 - c.beta2) * gi * gi;
      const double mhat = mom.m.data[i] / bc1;
      const double vhat = mom.v.data[i] / bc2;
      // decoupled decay: applied to the raw parameter, outside the moments
      p->value.data[i] -= c.learning_rate * (mhat / (std::sqrt(vhat) + c.eps) +
                                             c.weight_decay * p->value.data[i]);
    }
  }
}

}  // namespace hica
