#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "uniref/backbone.hpp"
#include "uniref/flowmatch.hpp"
#include "uniref/optim.hpp"
#include "uniref/rewards.hpp"
#include "uniref/sampler.hpp"

namespace uniref {

/// Group-normalized advantages with population std; all zeros when std < floor.
std::vector<double> advantages(const std::vector<double>& rewards, double floor = 1e-8);
/// exp(new - old) with the log-ratio clamped to [log 1e-6, log 1e6].
double ratio(double new_logpdf, double old_logpdf);
/// min(r A, clip(r, 1 - eps, 1 + eps) A).
double surrogate(double r, double advantage, double clip_eps);
/// Closed-form per-step KL between the current and reference transition kernels, with the
/// squared velocity gap averaged over coordinates.
double kl_closed_form(const Mat& v_new, const Mat& v_ref, double t, double dt, double sigma,
                      double eps = kDefaultTimeEps);
/// Gaussian KL of two isotropic kernels sharing variance sigma^2 dt, averaged over coordinates.
double gaussian_mean_kl(const Mat& mu_new, const Mat& mu_ref, double sigma, double dt);

struct RlPhase {
  std::string name;
  TaskKind kind = TaskKind::Compose;
  std::int64_t steps = 0;
  friend bool operator==(const RlPhase&, const RlPhase&) = default;
};

struct RlConfig {
  int group_size = 16;
  int steps = 25;  // sampler steps T
  double noise_level = 1.5;
  double beta = 0.0;
  double clip_eps = 0.2;
  double lr = 1e-4;
  int adapter_rank = 4;
  double adapter_alpha = 4.0;
  bool full_params = false;
  std::vector<RlPhase> phases{{"composition", TaskKind::Compose, 100}, {"editing", TaskKind::Edit, 100}};
  int prompts_per_step = 2;
  int reuse = 1;
  std::int64_t budget = 32 * 32;
  int patch_pixels = 4;
  int height = 32;
  int width = 32;
  double time_eps = kDefaultTimeEps;
  RewardWeights weights{};
  double advantage_floor = 1e-8;
  AdamConfig adam{0.9, 0.999, 1e-8, 1e-4};
  double grad_clip = 1.0;
  std::uint64_t seed = 0;
  int workers = 1;
  std::int64_t checkpoint_every = 0;
  std::string out_dir;
  std::string run_id = "rl";

  void validate() const;
  SampleOptions sample_options() const;
};

struct GroupRollout {
  std::string prompt_id;
  Conditioning cond;
  std::vector<Trajectory> trajectories;
  std::vector<RasterImage> images;
  std::vector<RewardBreakdown> scores;
  std::vector<double> rewards;  // weighted totals
  std::vector<double> advantages;
  std::vector<std::vector<double>> old_logpdfs;
  bool failed = false;
  std::string failure;
};

/// G stochastic samples of one prompt scored by `judge`. Member i uses seed derive_seed(seed, i).
GroupRollout rollout_group(const PolicyView& policy, const TrainingSample& prompt, const RlConfig& config,
                           Judge& judge, std::uint64_t seed);

struct LossResult {
  double loss = 0.0;
  std::vector<Mat> grads;  // mirrors the trainable set; empty when not requested
  double clip_fraction = 0.0;
  double mean_kl = 0.0;
  std::size_t terms = 0;
};

/// -(1/G) sum_i (1/S_i) sum_steps [S(r, A_i) - beta KL] for one group, with exact gradients.
LossResult msgrpo_loss(const GroupRollout& group, const PolicyView& policy, Trainable trainable,
                       const PolicyView& reference, const RlConfig& config, bool with_grad = true);

/// Per-step ratios of `policy` against the frozen rollout log-densities.
std::vector<std::vector<double>> policy_ratios(const GroupRollout& group, const PolicyView& policy,
                                               const RlConfig& config);

struct RlMetrics {
  std::int64_t step = 0;
  std::string phase;
  double mean_reward = 0.0;
  double reward_std = 0.0;
  double clip_fraction = 0.0;
  double mean_kl = 0.0;
  double loss = 0.0;
  bool skipped = false;
  double wall_ms = 0.0;
};

std::string to_json_line(const RlMetrics& m);

struct RlResult {
  ModelParams params;  // adapter merged into the base
  AdapterParams adapter;
  std::vector<std::string> checkpoints;
  std::vector<RlMetrics> metrics;
};

/// Adapter-only policy optimization over the configured phases. `prompts[i]` feeds phases[i].
RlResult train_rl(const RlConfig& config, const std::vector<std::vector<TrainingSample>>& prompts,
                  const ModelParams& sft_params, Judge& judge,
                  const std::function<void(const RlMetrics&)>& on_step = {});

}  // namespace uniref
