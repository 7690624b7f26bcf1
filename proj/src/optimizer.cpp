#include "probgrowth/optimizer.hpp"

#include <cmath>

namespace probgrowth {

void AdamState::ensure_shapes(const std::vector<Param*>& params) {
  if (m.size() == params.size()) return;
  m.clear();
  v.clear();
  for (const Param* p : params) {
    m.emplace_back(p->size(), 0.0);
    v.emplace_back(p->size(), 0.0);
  }
}

void AdamState::apply(const std::vector<Param*>& params) {
  ensure_shapes(params);
  ++step;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Param& p = *params[k];
    auto& mk = m[k];
    auto& vk = v[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double g = p.grad[i];
      mk[i] = beta1 * mk[i] + (1.0 - beta1) * g;
      vk[i] = beta2 * vk[i] + (1.0 - beta2) * g * g;
      p.value[i] -= learning_rate * (mk[i] / c1) / (std::sqrt(vk[i] / c2) + epsilon);
    }
  }
}

}  // namespace probgrowth
