#include "uniref/sampler.hpp"

#include <cmath>
#include <numbers>

namespace uniref {
namespace {

void require_finite(const Mat& m, const char* what) {
  if (!m.allFinite()) throw NonFiniteError(std::string(what) + " contains non-finite values");
}

void require_same_shape(const Mat& a, const Mat& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw InvalidArgument(std::string(what) + ": shape mismatch");
}

}  // namespace

double sigma_at(double t, double a) {
  if (!(t >= 0.0 && t <= 1.0)) throw InvalidArgument("sigma_at: t must lie in [0, 1]");
  if (!(a >= 0.0) || !std::isfinite(a)) throw InvalidArgument("sigma_at: noise level must be finite and >= 0");
  return a * std::sqrt(t * (1.0 - t));
}

Mat drift(const Mat& x, const Mat& v, double t, double sigma, double eps) {
  require_same_shape(x, v, "drift");
  if (!(eps > 0.0)) throw InvalidArgument("drift: eps must be positive");
  require_finite(x, "drift state");
  require_finite(v, "drift velocity");
  const double c = sigma * sigma / (2.0 * std::max(t, eps));
  Mat out = v + c * (x + (1.0 - t) * v);
  require_finite(out, "drift");
  return out;
}

Mat step_mean(const Mat& x, const Mat& v, double t, double dt, double sigma, double eps) {
  return x + drift(x, v, t, sigma, eps) * dt;
}

Mat sde_step(const Mat& x, const Mat& v, double t, double dt, double sigma, const Mat& noise, double eps) {
  if (!(dt > 0.0)) throw InvalidArgument("sde_step: dt must be positive");
  require_same_shape(x, noise, "sde_step");
  require_finite(noise, "sde_step noise");
  Mat out = x + drift(x, v, t, sigma, eps) * dt + (sigma * std::sqrt(dt)) * noise;
  require_finite(out, "sde_step result");
  return out;
}

double transition_logpdf(const Mat& x_next, const Mat& x, const Mat& v, double t, double dt, double sigma,
                         double eps) {
  require_same_shape(x_next, x, "transition_logpdf");
  const double std_dev = sigma * std::sqrt(dt);
  if (!(std_dev > 0.0)) throw InvalidArgument("transition_logpdf: sigma_t * sqrt(dt) must be positive");
  const double var = std_dev * std_dev;
  const Mat r = x_next - step_mean(x, v, t, dt, sigma, eps);
  const double d = double(r.size());
  const double lp = -0.5 * d * std::log(2.0 * std::numbers::pi * var) - r.squaredNorm() / (2.0 * var);
  if (!std::isfinite(lp)) throw NonFiniteError("transition_logpdf is non-finite");
  return lp;
}

void SampleOptions::validate() const {
  if (steps < 1) throw InvalidArgument("sample: steps must be >= 1");
  if (!(noise_level >= 0.0) || !std::isfinite(noise_level)) throw InvalidArgument("sample: noise level must be >= 0");
  if (!(time_eps > 0.0)) throw InvalidArgument("sample: time eps must be positive");
  if (patch_pixels < 1 || height < 1 || width < 1 || height % patch_pixels || width % patch_pixels)
    throw InvalidArgument("sample: target size must be a positive multiple of the patch size");
}

SampleResult sample(const PolicyView& policy, const Conditioning& cond, const SampleOptions& options, Rng& rng) {
  options.validate();
  const int T = options.steps;
  const double dt = 1.0 / T;
  const bool stochastic = options.mode == SampleMode::Stochastic;
  const double a = stochastic ? options.noise_level : 0.0;

  Trajectory tr;
  tr.mode = options.mode;
  tr.noise_level = a;
  tr.time_eps = options.time_eps;
  const Eigen::Index n = Eigen::Index(cond.target_rows) * cond.target_cols;
  const Eigen::Index ch = 3 * options.patch_pixels * options.patch_pixels;
  tr.states.push_back(normal_matrix(rng, n, ch));

  for (int i = 0; i < T; ++i) {
    const double t = double(i) / T;
    const Mat& x = tr.states.back();
    Mat v = forward(policy, pack(cond, x), t, cond.instruction);
    const double sigma = sigma_at(t, a);
    Mat noise = stochastic ? normal_matrix(rng, n, ch) : Mat::Zero(n, ch);
    // Deterministic steps go through the same update with sigma = 0 so both modes agree bit for bit.
    Mat next = sde_step(x, v, t, dt, sigma, noise, options.time_eps);
    if (sigma > 0.0) {
      tr.stochastic_steps.push_back(i);
      tr.step_logpdfs.push_back(transition_logpdf(next, x, v, t, dt, sigma, options.time_eps));
    }
    tr.times.push_back(t);
    tr.velocities.push_back(std::move(v));
    tr.noises.push_back(std::move(noise));
    tr.states.push_back(std::move(next));
  }
  SampleResult out{tokens_image(tr.states.back(), cond.target_rows, cond.target_cols, options.patch_pixels),
                   std::move(tr)};
  return out;
}

SampleResult sample(const PolicyView& policy, const std::vector<RasterImage>& references,
                    const Instruction& instruction, const SampleOptions& options, Rng& rng) {
  options.validate();
  const auto cond = make_conditioning(references, instruction, options.budget, options.patch_pixels, options.height,
                                      options.width);
  return sample(policy, cond, options, rng);
}

}  // namespace uniref
