#pragma once

#include <cstdint>
#include <vector>

#include "uniref/common.hpp"

namespace uniref {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

/// Adaptive moments with decoupled weight decay over a list of arrays.
class AdamW {
 public:
  AdamW(AdamConfig config, const std::vector<Mat>& shapes_like);

  void step(std::vector<Mat*> params, const std::vector<Mat>& grads, double lr);
  std::int64_t steps_taken() const { return t_; }

 private:
  AdamConfig cfg_;
  std::vector<Mat> m_;
  std::vector<Mat> v_;
  std::int64_t t_ = 0;
};

/// Linear warmup to `peak` then cosine decay to zero at `total_steps`.
double cosine_lr(std::int64_t step, std::int64_t total_steps, std::int64_t warmup, double peak);

/// Scale gradients in place so their global L2 norm is at most max_norm; returns the pre-clip norm.
double clip_global_norm(std::vector<Mat>& grads, double max_norm);

}  // namespace uniref
