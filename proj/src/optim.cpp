#include "uniref/optim.hpp"

#include <cmath>

namespace uniref {

AdamW::AdamW(AdamConfig config, const std::vector<Mat>& shapes_like) : cfg_(config) {
  for (const auto& a : shapes_like) {
    m_.push_back(Mat::Zero(a.rows(), a.cols()));
    v_.push_back(Mat::Zero(a.rows(), a.cols()));
  }
}

void AdamW::step(std::vector<Mat*> params, const std::vector<Mat>& grads, double lr) {
  if (params.size() != m_.size() || grads.size() != m_.size())
    throw InvalidArgument("optimizer state does not match parameter list");
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Mat& p = *params[i];
    const Mat& g = grads[i];
    if (g.rows() != p.rows() || g.cols() != p.cols()) throw InvalidArgument("gradient shape mismatch");
    m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
    v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
    p *= (1.0 - lr * cfg_.weight_decay);
    p.array() -= lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + cfg_.eps);
  }
}

double cosine_lr(std::int64_t step, std::int64_t total_steps, std::int64_t warmup, double peak) {
  if (warmup > 0 && step < warmup) return peak * double(step + 1) / double(warmup);
  const double span = double(std::max<std::int64_t>(total_steps - warmup, 1));
  const double progress = std::min(1.0, double(step - warmup) / span);
  return peak * 0.5 * (1.0 + std::cos(3.141592653589793 * progress));
}

double clip_global_norm(std::vector<Mat>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads) sq += g.squaredNorm();
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& g : grads) g *= s;
  }
  return norm;
}

}  // namespace uniref
