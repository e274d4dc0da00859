#pragma once

#include <vector>

#include "pear/tensor.hpp"

namespace pear {

struct AdamWConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// AdamW with decoupled weight decay and bias correction. Weight decay is
// applied as a multiplicative shrink before the moment update, so a zero
// gradient with nonzero decay still shrinks the parameter by (1 - lr*wd).
class AdamW {
 public:
  AdamW(std::vector<Tensor> params, AdamWConfig config);

  // One update from the gradients currently stored on the parameters.
  // A parameter without an allocated gradient is treated as zero-gradient.
  void step();

  long steps_taken() const { return step_; }
  const AdamWConfig& config() const { return cfg_; }

 private:
  AdamWConfig cfg_;
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  long step_ = 0;
};

}  // namespace pear
