#include "uniref/flowmatch.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <thread>

#include <json.hpp>

#include "uniref/checkpoint.hpp"

namespace uniref {
namespace {

void check_shapes(const Mat& a, const Mat& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw InvalidArgument("latent shapes differ");
}

void check_shapes(const Latent& a, const Latent& b) {
  if (a.rows != b.rows || a.cols != b.cols || a.channels != b.channels) throw InvalidArgument("latent shapes differ");
}

}  // namespace

double sample_timestep(Rng& rng, double location, double scale) {
  if (!(scale > 0.0)) throw InvalidArgument("logit-normal scale must be positive");
  const double z = location + scale * standard_normal(rng);
  double t = 1.0 / (1.0 + std::exp(-z));
  // Keep strictly inside (0, 1) even for extreme draws.
  t = std::clamp(t, 1e-12, 1.0 - 1e-12);
  return t;
}

Mat interpolate(const Mat& x0, const Mat& x1, double t) {
  check_shapes(x0, x1);
  if (!(t >= 0.0 && t <= 1.0)) throw InvalidArgument("interpolation time must lie in [0, 1]");
  if (t == 1.0) return x0;
  if (t == 0.0) return x1;
  return t * x0 + (1.0 - t) * x1;
}

Latent interpolate(const Latent& x0, const Latent& x1, double t) {
  check_shapes(x0, x1);
  if (!(t >= 0.0 && t <= 1.0)) throw InvalidArgument("interpolation time must lie in [0, 1]");
  Latent out = x0;
  if (t == 1.0) return out;
  if (t == 0.0) return x1;
  for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] = t * x0.values[i] + (1.0 - t) * x1.values[i];
  return out;
}

Mat velocity_target(const Mat& x0, const Mat& x1) {
  check_shapes(x0, x1);
  return x0 - x1;
}

Latent velocity_target(const Latent& x0, const Latent& x1) {
  check_shapes(x0, x1);
  Latent out = x0;
  for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] = x0.values[i] - x1.values[i];
  return out;
}

double sft_loss(const Mat& predicted_v, const Mat& x0, const Mat& x1) {
  check_shapes(predicted_v, x0);
  check_shapes(x0, x1);
  if (!predicted_v.allFinite() || !x0.allFinite() || !x1.allFinite())
    throw NonFiniteError("sft_loss received non-finite input");
  if (predicted_v.size() == 0) throw InvalidArgument("sft_loss of an empty latent");
  return (predicted_v - (x0 - x1)).squaredNorm() / double(predicted_v.size());
}

ad::Var sft_loss_graph(const ModelConfig& config, const BoundModel& model, const Conditioning& cond, const Mat& x0,
                       const Mat& x1, double t) {
  ad::Tape& tape = *model.arrays.front().tape;
  const PackedSequence packed = pack(cond, interpolate(x0, x1, t));
  ad::Var v = forward(config, model, packed, t, cond.instruction);
  return ad::mean_square(ad::sub(v, tape.constant(velocity_target(x0, x1))));
}

void SftConfig::validate() const {
  if (steps < 0) throw InvalidArgument("sft.steps must be non-negative");
  if (batch_size < 1) throw InvalidArgument("sft.batch_size must be positive");
  if (!(peak_lr > 0.0)) throw InvalidArgument("sft.peak_lr must be positive");
  if (warmup_steps < 0) throw InvalidArgument("sft.warmup_steps must be non-negative");
  if (!(logit_scale > 0.0)) throw InvalidArgument("sft.logit_scale must be positive");
  if (patch_pixels < 1) throw InvalidArgument("sft.patch_pixels must be positive");
  if (checkpoint_every < 0) throw InvalidArgument("sft.checkpoint_every must be non-negative");
  if (workers < 1) throw InvalidArgument("sft.workers must be positive");
}

std::string to_json_line(const SftMetrics& m) {
  nlohmann::ordered_json j;
  j["step"] = m.step;
  j["loss"] = m.loss;
  j["lr"] = m.lr;
  j["budget"] = m.budget;
  j["wall_ms"] = m.wall_ms;
  return j.dump();
}

void parallel_for(int n, int workers, const std::function<void(int)>& fn) {
  if (workers <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  std::vector<std::thread> pool;
  for (int w = 0; w < std::min(workers, n); ++w)
    pool.emplace_back([&] {
      for (int i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mu);
          if (!error) error = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

SftResult train_sft(const SftConfig& config, const std::vector<TrainingSample>& dataset, ModelParams params,
                    const std::function<void(const SftMetrics&)>& on_step) {
  config.validate();
  if (dataset.empty()) throw InvalidArgument("training dataset is empty");
  if (params.config().channels != 3 * config.patch_pixels * config.patch_pixels)
    throw InvalidArgument("model channel count does not match patch size");

  SftResult result;
  std::ofstream metrics_out;
  if (!config.out_dir.empty()) {
    std::filesystem::create_directories(config.out_dir);
    metrics_out.open(std::filesystem::path(config.out_dir) / "metrics.jsonl", std::ios::trunc);
    if (!metrics_out) throw IoError("cannot open metrics file in " + config.out_dir);
  }
  const auto save = [&](std::int64_t step) {
    if (config.out_dir.empty()) return;
    const auto path = (std::filesystem::path(config.out_dir) / ("ckpt_" + std::to_string(step) + ".bin")).string();
    save_checkpoint(path, params, step);
    result.checkpoints.push_back(path);
  };

  // Encoded references depend only on (sample, budget); cache them across steps.
  std::map<std::pair<std::size_t, std::int64_t>, Conditioning> cond_cache;
  std::vector<std::optional<Mat>> target_cache(dataset.size());
  const auto conditioning_for = [&](std::size_t idx, std::int64_t budget) -> const Conditioning& {
    auto key = std::make_pair(idx, budget);
    auto it = cond_cache.find(key);
    if (it == cond_cache.end()) {
      const auto& s = dataset[idx];
      it = cond_cache
               .emplace(key, make_conditioning(s.references, s.instruction, budget, config.patch_pixels,
                                               s.target.height(), s.target.width()))
               .first;
    }
    return it->second;
  };

  AdamW opt(config.adam, params.arrays());
  std::vector<Mat*> slots;
  for (auto& a : params.arrays()) slots.push_back(&a);

  for (std::int64_t step = 0; step < config.steps; ++step) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::int64_t budget = config.schedule.budget_at(step);
    Rng batch_rng(derive_seed(config.seed, 0xba7c4, static_cast<std::uint64_t>(step)));
    std::vector<std::size_t> picks(config.batch_size);
    for (auto& p : picks) p = static_cast<std::size_t>(batch_rng() % dataset.size());

    // Serial preparation keeps the caches single-writer.
    std::vector<const Conditioning*> conds;
    std::vector<const Mat*> targets;
    for (auto p : picks) {
      conds.push_back(&conditioning_for(p, budget));
      if (!target_cache[p]) target_cache[p] = image_tokens(dataset[p].target, config.patch_pixels);
      targets.push_back(&*target_cache[p]);
    }

    const auto abort_non_finite = [&](const std::string& why) {
      const std::string last = result.checkpoints.empty() ? "none" : result.checkpoints.back();
      throw NonFiniteError("non-finite SFT loss at step " + std::to_string(step) + " (" + why +
                           "); last good checkpoint: " + last);
    };
    std::vector<GradResult> per_sample(config.batch_size);
    try {
      parallel_for(config.batch_size, config.workers, [&](int b) {
        Rng rng(derive_seed(config.seed, static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(b) + 1));
        const double t = sample_timestep(rng, config.logit_location, config.logit_scale);
        const Mat& x0 = *targets[b];
        const Mat x1 = normal_matrix(rng, x0.rows(), x0.cols());
        per_sample[b] = grad(params, [&](ad::Tape&, const BoundModel& m) {
          return sft_loss_graph(params.config(), m, *conds[b], x0, x1, t);
        });
      });
    } catch (const NonFiniteError& e) {
      abort_non_finite(e.what());
    }

    double loss = 0.0;
    std::vector<Mat> grads = std::move(per_sample[0].grads);
    loss += per_sample[0].loss;
    for (int b = 1; b < config.batch_size; ++b) {
      loss += per_sample[b].loss;
      for (std::size_t i = 0; i < grads.size(); ++i) grads[i] += per_sample[b].grads[i];
    }
    loss /= config.batch_size;
    for (auto& g : grads) g /= double(config.batch_size);
    if (!std::isfinite(loss)) abort_non_finite("batch mean");

    clip_global_norm(grads, config.grad_clip);
    const double lr = cosine_lr(step, config.steps, config.warmup_steps, config.peak_lr);
    opt.step(slots, grads, lr);

    SftMetrics m{step, loss, lr, budget,
                 std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count()};
    result.metrics.push_back(m);
    if (metrics_out.is_open()) metrics_out << to_json_line(m) << '\n' << std::flush;
    if (on_step) on_step(m);
    if (config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 && step + 1 < config.steps)
      save(step + 1);
  }
  save(config.steps);
  result.params = std::move(params);
  return result;
}

}  // namespace uniref
