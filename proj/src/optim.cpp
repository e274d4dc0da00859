#include "pear/optim.hpp"

#include <cmath>

#include "pear/errors.hpp"

namespace pear {

AdamW::AdamW(std::vector<Tensor> params, AdamWConfig config)
    : cfg_(config), params_(std::move(params)) {
  if (!(cfg_.learning_rate > 0.0)) throw usage_error("learning rate must be positive");
  if (cfg_.beta1 < 0.0 || cfg_.beta1 >= 1.0 || cfg_.beta2 < 0.0 || cfg_.beta2 >= 1.0)
    throw usage_error("adam betas must lie in [0, 1)");
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    m_.emplace_back(p.data().size(), 0.0);
    v_.emplace_back(p.data().size(), 0.0);
  }
}

void AdamW::step() {
  ++step_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
  for (size_t pi = 0; pi < params_.size(); ++pi) {
    auto& w = params_[pi].data();
    const auto& g = params_[pi].grad();
    if (!g.empty() && g.size() != w.size())
      throw shape_error("optimizer state size " + std::to_string(w.size()) +
                        " does not match gradient size " + std::to_string(g.size()));
    auto& m = m_[pi];
    auto& v = v_[pi];
    const double shrink = 1.0 - cfg_.learning_rate * cfg_.weight_decay;
    for (size_t i = 0; i < w.size(); ++i) {
      const double gi = g.empty() ? 0.0 : g[i];
      if (cfg_.weight_decay != 0.0) w[i] *= shrink;
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= cfg_.learning_rate * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

}  // namespace pear
