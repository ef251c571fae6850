#pragma once

#include <cstdint>
#include <vector>

#include "uniref/backbone.hpp"
#include "uniref/conditioning.hpp"
#include "uniref/rasters.hpp"

namespace uniref {

enum class SampleMode { Deterministic, Stochastic };

inline constexpr double kDefaultTimeEps = 1e-4;

/// sigma_t = a * sqrt(t (1 - t)).
double sigma_at(double t, double a);

/// v + sigma^2 / (2 max(t, eps)) * (x + (1 - t) v).
Mat drift(const Mat& x, const Mat& v, double t, double sigma, double eps = kDefaultTimeEps);
/// Mean of the one-step transition kernel: x + drift * dt.
Mat step_mean(const Mat& x, const Mat& v, double t, double dt, double sigma, double eps = kDefaultTimeEps);
/// x + drift * dt + sigma * sqrt(dt) * noise.
Mat sde_step(const Mat& x, const Mat& v, double t, double dt, double sigma, const Mat& noise,
             double eps = kDefaultTimeEps);
/// Log-density of x_next under N(step_mean, sigma^2 dt I), summed over coordinates.
double transition_logpdf(const Mat& x_next, const Mat& x, const Mat& v, double t, double dt, double sigma,
                         double eps = kDefaultTimeEps);

struct Trajectory {
  SampleMode mode = SampleMode::Deterministic;
  double noise_level = 0.0;
  double time_eps = kDefaultTimeEps;
  std::vector<double> times;          // t_0 .. t_{T-1}
  std::vector<Mat> states;            // x_{t_0} .. x_{t_T}
  std::vector<Mat> velocities;        // one per step
  std::vector<Mat> noises;            // one per step; zeros in deterministic mode
  std::vector<int> stochastic_steps;  // indices with sigma_t > 0
  std::vector<double> step_logpdfs;   // aligned with stochastic_steps

  int num_steps() const { return static_cast<int>(times.size()); }
  double dt() const { return times.empty() ? 0.0 : 1.0 / double(times.size()); }
};

struct SampleOptions {
  int steps = 25;
  SampleMode mode = SampleMode::Deterministic;
  double noise_level = 1.5;
  double time_eps = kDefaultTimeEps;
  std::int64_t budget = 32 * 32;
  int patch_pixels = 4;
  int height = 32;
  int width = 32;

  void validate() const;
};

struct SampleResult {
  RasterImage image;
  Trajectory trajectory;
};

SampleResult sample(const PolicyView& policy, const Conditioning& cond, const SampleOptions& options, Rng& rng);
SampleResult sample(const PolicyView& policy, const std::vector<RasterImage>& references,
                    const Instruction& instruction, const SampleOptions& options, Rng& rng);

}  // namespace uniref
