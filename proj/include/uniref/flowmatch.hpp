#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "uniref/backbone.hpp"
#include "uniref/conditioning.hpp"
#include "uniref/optim.hpp"
#include "uniref/rasters.hpp"

namespace uniref {

enum class TaskKind { Edit, Compose };

struct TrainingSample {
  std::string id;
  TaskKind kind = TaskKind::Compose;
  std::vector<RasterImage> references;
  Instruction instruction;
  RasterImage target;

  int num_references() const { return static_cast<int>(references.size()); }
  friend bool operator==(const TrainingSample&, const TrainingSample&) = default;
};

/// t = sigmoid(location + scale * n), n ~ N(0, 1).
double sample_timestep(Rng& rng, double location, double scale);

/// x_t = t * x0 + (1 - t) * x1 (t = 1 is data, t = 0 is noise).
Mat interpolate(const Mat& x0, const Mat& x1, double t);
Latent interpolate(const Latent& x0, const Latent& x1, double t);
/// v = x0 - x1.
Mat velocity_target(const Mat& x0, const Mat& x1);
Latent velocity_target(const Latent& x0, const Latent& x1);
/// Mean squared error of predicted_v against x0 - x1.
double sft_loss(const Mat& predicted_v, const Mat& x0, const Mat& x1);

/// Differentiable per-sample flow-matching loss on a tape.
ad::Var sft_loss_graph(const ModelConfig& config, const BoundModel& model, const Conditioning& cond, const Mat& x0,
                       const Mat& x1, double t);

struct SftConfig {
  std::int64_t steps = 5000;
  int batch_size = 16;
  double peak_lr = 3e-4;
  std::int64_t warmup_steps = 200;
  std::uint64_t seed = 0;
  BudgetSchedule schedule = BudgetSchedule::desk_default();
  double logit_location = 0.0;
  double logit_scale = 1.0;
  int patch_pixels = 4;
  AdamConfig adam{};
  double grad_clip = 1.0;
  std::int64_t checkpoint_every = 1000;
  int workers = 1;
  std::string out_dir;  // empty: no files written

  void validate() const;
};

struct SftMetrics {
  std::int64_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  std::int64_t budget = 0;
  double wall_ms = 0.0;
};

struct SftResult {
  ModelParams params;
  std::vector<std::string> checkpoints;
  std::vector<SftMetrics> metrics;
};

std::string to_json_line(const SftMetrics& m);

/// Supervised flow-matching training with the budget curriculum. Deterministic for a fixed
/// seed regardless of worker count. Writes metrics.jsonl and checkpoints when out_dir is set.
SftResult train_sft(const SftConfig& config, const std::vector<TrainingSample>& dataset, ModelParams params,
                    const std::function<void(const SftMetrics&)>& on_step = {});

/// Run fn(i) for i in [0, n) on up to `workers` threads.
void parallel_for(int n, int workers, const std::function<void(int)>& fn);

}  // namespace uniref
