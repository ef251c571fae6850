#include "uniref/msgrpo.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numbers>
#include <numeric>

#include <json.hpp>

#include "uniref/checkpoint.hpp"

namespace uniref {
namespace {

const double kLogRatioMin = std::log(1e-6);
const double kLogRatioMax = std::log(1e6);

// Everything one (member, step) term needs besides the network.
struct StepTerm {
  int member = 0;
  int step = 0;
  double t = 0.0, dt = 0.0, sigma = 0.0, c = 0.0;
  const Mat* x = nullptr;
  const Mat* x_next = nullptr;
  double old_logpdf = 0.0;
  double advantage = 0.0;
  double weight = 0.0;  // 1 / (G S_i)
};

std::vector<StepTerm> collect_terms(const GroupRollout& g, const RlConfig& cfg) {
  std::vector<StepTerm> out;
  const int G = static_cast<int>(g.trajectories.size());
  for (int i = 0; i < G; ++i) {
    const Trajectory& tr = g.trajectories[i];
    const int S = static_cast<int>(tr.stochastic_steps.size());
    for (int k = 0; k < S; ++k) {
      StepTerm s;
      s.member = i;
      s.step = tr.stochastic_steps[k];
      s.t = tr.times[s.step];
      s.dt = tr.dt();
      s.sigma = sigma_at(s.t, tr.noise_level);
      s.c = s.sigma * s.sigma / (2.0 * std::max(s.t, cfg.time_eps));
      s.x = &tr.states[s.step];
      s.x_next = &tr.states[s.step + 1];
      s.old_logpdf = g.old_logpdfs[i][k];
      s.advantage = g.advantages[i];
      s.weight = 1.0 / (double(G) * double(S));
      out.push_back(s);
    }
  }
  return out;
}

// x' - x - dt c x: the part of the transition residual that does not depend on v.
Mat residual_base(const StepTerm& s) { return *s.x_next - *s.x - (s.dt * s.c) * *s.x; }
double velocity_gain(const StepTerm& s) { return s.dt * (1.0 + s.c * (1.0 - s.t)); }

double logpdf_constant(const StepTerm& s, Eigen::Index d) {
  const double var = s.sigma * s.sigma * s.dt;
  return -0.5 * double(d) * std::log(2.0 * std::numbers::pi * var);
}

double logpdf_value(const StepTerm& s, const Mat& v) {
  const double var = s.sigma * s.sigma * s.dt;
  const Mat r = residual_base(s) - velocity_gain(s) * v;
  return logpdf_constant(s, r.size()) - r.squaredNorm() / (2.0 * var);
}

// Clipped surrogate as a function of the new log-density.
ad::Var surrogate_node(ad::Var logpdf, double old_logpdf, double adv, double eps) {
  const double raw = logpdf.scalar() - old_logpdf;
  const double lr = std::clamp(raw, kLogRatioMin, kLogRatioMax);
  const double r = std::exp(lr);
  const double value = surrogate(r, adv, eps);
  const bool clamped = raw != lr;
  const double unclipped = r * adv;
  // d/dlogpdf of r A is r A; the clipped branch is flat in r.
  const double slope = (!clamped && unclipped <= std::clamp(r, 1.0 - eps, 1.0 + eps) * adv) ? unclipped : 0.0;
  Mat out(1, 1);
  out(0, 0) = value;
  ad::Tape& tape = *logpdf.tape;
  return tape.push(std::move(out), tape.requires_grad(logpdf),
                   [id = logpdf.id, slope](ad::Tape& t, const Mat& g) { t.accumulate(id, g * slope); });
}

double population_std(const std::vector<double>& xs) {
  if (xs.empty()) return 0.0;
  const double m = std::accumulate(xs.begin(), xs.end(), 0.0) / double(xs.size());
  double s = 0.0;
  for (double x : xs) s += (x - m) * (x - m);
  return std::sqrt(s / double(xs.size()));
}

}  // namespace

std::vector<double> advantages(const std::vector<double>& rewards, double floor) {
  if (rewards.size() < 2) throw InvalidArgument("advantages need a group of at least 2");
  for (double r : rewards)
    if (!std::isfinite(r)) throw NonFiniteError("non-finite reward");
  const double n = double(rewards.size());
  const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double sd = std::sqrt(var / n);
  std::vector<double> out(rewards.size(), 0.0);
  if (sd < floor) return out;
  for (std::size_t i = 0; i < rewards.size(); ++i) out[i] = (rewards[i] - mean) / sd;
  return out;
}

double ratio(double new_logpdf, double old_logpdf) {
  if (!std::isfinite(new_logpdf) || !std::isfinite(old_logpdf)) throw NonFiniteError("ratio of non-finite log-densities");
  return std::exp(std::clamp(new_logpdf - old_logpdf, kLogRatioMin, kLogRatioMax));
}

double surrogate(double r, double a, double eps) {
  if (!(eps > 0.0 && eps < 1.0)) throw InvalidArgument("clip epsilon must lie in (0, 1)");
  return std::min(r * a, std::clamp(r, 1.0 - eps, 1.0 + eps) * a);
}

double kl_closed_form(const Mat& v_new, const Mat& v_ref, double t, double dt, double sigma, double eps) {
  if (v_new.rows() != v_ref.rows() || v_new.cols() != v_ref.cols()) throw InvalidArgument("kl: shape mismatch");
  if (!(sigma > 0.0)) throw InvalidArgument("kl: sigma must be positive (deterministic steps carry no KL)");
  const double coef = sigma * (1.0 - t) / (2.0 * std::max(t, eps)) + 1.0 / sigma;
  const double msd = (v_new - v_ref).squaredNorm() / double(v_new.size());
  return 0.5 * dt * coef * coef * msd;
}

double gaussian_mean_kl(const Mat& mu_new, const Mat& mu_ref, double sigma, double dt) {
  if (!(sigma > 0.0) || !(dt > 0.0)) throw InvalidArgument("gaussian kl: sigma and dt must be positive");
  return (mu_new - mu_ref).squaredNorm() / double(mu_new.size()) / (2.0 * sigma * sigma * dt);
}

void RlConfig::validate() const {
  if (group_size < 2) throw InvalidArgument("rl.group_size must be at least 2");
  if (steps < 1) throw InvalidArgument("rl.steps must be at least 1");
  if (!(noise_level >= 0.0)) throw InvalidArgument("rl.noise_level must be >= 0");
  if (!(beta >= 0.0)) throw InvalidArgument("rl.beta must be >= 0");
  if (!(clip_eps > 0.0 && clip_eps < 1.0)) throw InvalidArgument("rl.clip_eps must lie in (0, 1)");
  if (!(lr > 0.0)) throw InvalidArgument("rl.lr must be positive");
  if (adapter_rank < 1) throw InvalidArgument("rl.adapter_rank must be positive");
  if (prompts_per_step < 1) throw InvalidArgument("rl.prompts_per_step must be positive");
  if (reuse < 1) throw InvalidArgument("rl.reuse must be positive");
  if (workers < 1) throw InvalidArgument("rl.workers must be positive");
  if (phases.empty()) throw InvalidArgument("rl.phases must not be empty");
  for (const auto& p : phases)
    if (p.steps < 0) throw InvalidArgument("rl phase " + p.name + " has negative steps");
  weights.validate();
  sample_options().validate();
}

SampleOptions RlConfig::sample_options() const {
  SampleOptions o;
  o.steps = steps;
  o.mode = SampleMode::Stochastic;
  o.noise_level = noise_level;
  o.time_eps = time_eps;
  o.budget = budget;
  o.patch_pixels = patch_pixels;
  o.height = height;
  o.width = width;
  return o;
}

GroupRollout rollout_group(const PolicyView& policy, const TrainingSample& prompt, const RlConfig& cfg, Judge& judge,
                           std::uint64_t seed) {
  cfg.validate();
  GroupRollout g;
  g.prompt_id = prompt.id;
  g.cond = make_conditioning(prompt.references, prompt.instruction, cfg.budget, cfg.patch_pixels, cfg.height,
                             cfg.width);
  const int G = cfg.group_size;
  g.trajectories.resize(G);
  g.images.resize(G);
  g.scores.resize(G);
  const SampleOptions opts = cfg.sample_options();
  parallel_for(G, cfg.workers, [&](int i) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
    auto r = sample(policy, g.cond, opts, rng);
    g.images[i] = std::move(r.image);
    g.trajectories[i] = std::move(r.trajectory);
  });
  try {
    parallel_for(G, cfg.workers, [&](int i) {
      g.scores[i] = score(judge, prompt.references, prompt.instruction, g.images[i], cfg.weights);
    });
  } catch (const JudgeUnavailable& e) {
    g.failed = true;
    g.failure = e.what();
  } catch (const MalformedResponse& e) {
    g.failed = true;
    g.failure = std::string(e.what()) + "; body: " + e.body();
  }
  if (g.failed) return g;
  for (const auto& s : g.scores) g.rewards.push_back(s.total);
  g.advantages = advantages(g.rewards, cfg.advantage_floor);
  for (const auto& tr : g.trajectories) g.old_logpdfs.push_back(tr.step_logpdfs);
  return g;
}

std::vector<std::vector<double>> policy_ratios(const GroupRollout& group, const PolicyView& policy,
                                               const RlConfig& cfg) {
  std::vector<std::vector<double>> out(group.trajectories.size());
  for (const auto& s : collect_terms(group, cfg)) {
    const Mat v = forward(policy, pack(group.cond, *s.x), s.t, group.cond.instruction);
    out[s.member].push_back(ratio(logpdf_value(s, v), s.old_logpdf));
  }
  return out;
}

LossResult msgrpo_loss(const GroupRollout& group, const PolicyView& policy, Trainable trainable,
                       const PolicyView& reference, const RlConfig& cfg, bool with_grad) {
  if (group.failed) throw InvalidArgument("cannot compute a loss for a failed group");
  if (group.advantages.size() != group.trajectories.size() || group.old_logpdfs.size() != group.trajectories.size())
    throw InvalidArgument("group rollout is incomplete");
  for (const auto& tr : group.trajectories)
    if (tr.mode != SampleMode::Stochastic) throw InvalidArgument("msgrpo needs stochastic trajectories");

  std::vector<StepTerm> terms;
  for (const auto& s : collect_terms(group, cfg))
    if (cfg.beta > 0.0 || s.advantage != 0.0) terms.push_back(s);

  const ModelConfig& mc = policy.base->config();
  struct TermOut {
    double loss = 0.0, r = 1.0, kl = 0.0;
    std::vector<Mat> grads;
  };
  std::vector<TermOut> outs(terms.size());
  parallel_for(static_cast<int>(terms.size()), cfg.workers, [&](int k) {
    const StepTerm& s = terms[k];
    const PackedSequence packed = pack(group.cond, *s.x);
    Mat v_ref;
    if (cfg.beta > 0.0) v_ref = forward(reference, packed, s.t, group.cond.instruction);
    TermOut& o = outs[k];
    const LossFn fn = [&](ad::Tape& tape, const BoundModel& m) {
      ad::Var v = forward(mc, m, packed, s.t, group.cond.instruction);
      const double var = s.sigma * s.sigma * s.dt;
      ad::Var res = ad::sub(tape.constant(residual_base(s)), ad::scale(v, velocity_gain(s)));
      Mat c(1, 1);
      c(0, 0) = logpdf_constant(s, v.value().size());
      ad::Var lp = ad::add(ad::scale(ad::sum_square(res), -1.0 / (2.0 * var)), tape.constant(c));
      o.r = ratio(lp.scalar(), s.old_logpdf);
      ad::Var obj = surrogate_node(lp, s.old_logpdf, s.advantage, cfg.clip_eps);
      if (cfg.beta > 0.0) {
        const double coef = s.sigma * (1.0 - s.t) / (2.0 * std::max(s.t, cfg.time_eps)) + 1.0 / s.sigma;
        ad::Var kl = ad::scale(ad::mean_square(ad::sub(v, tape.constant(v_ref))), 0.5 * s.dt * coef * coef);
        o.kl = kl.scalar();
        obj = ad::sub(obj, ad::scale(kl, cfg.beta));
      }
      return ad::scale(obj, -s.weight);
    };
    if (with_grad) {
      GradResult gr = grad(policy, trainable, fn);
      o.loss = gr.loss;
      o.grads = std::move(gr.grads);
    } else {
      ad::Tape tape;
      o.loss = fn(tape, bind(tape, policy, Trainable::None)).scalar();
    }
  });

  LossResult res;
  res.terms = terms.size();
  std::size_t clipped = 0;
  for (auto& o : outs) {
    res.loss += o.loss;
    res.mean_kl += o.kl;
    clipped += std::abs(o.r - 1.0) > cfg.clip_eps;
    if (with_grad) {
      if (res.grads.empty())
        res.grads = std::move(o.grads);
      else
        for (std::size_t i = 0; i < res.grads.size(); ++i) res.grads[i] += o.grads[i];
    }
  }
  if (!terms.empty()) {
    res.mean_kl /= double(terms.size());
    res.clip_fraction = double(clipped) / double(terms.size());
  }
  if (!std::isfinite(res.loss)) throw NonFiniteError("msgrpo loss is non-finite");
  return res;
}

std::string to_json_line(const RlMetrics& m) {
  nlohmann::ordered_json j;
  j["step"] = m.step;
  j["phase"] = m.phase;
  j["mean_reward"] = m.mean_reward;
  j["reward_std"] = m.reward_std;
  j["clip_fraction"] = m.clip_fraction;
  j["mean_kl"] = m.mean_kl;
  j["loss"] = m.skipped ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(m.loss);
  if (m.skipped) j["skipped"] = true;
  j["wall_ms"] = m.wall_ms;
  return j.dump();
}

RlResult train_rl(const RlConfig& cfg, const std::vector<std::vector<TrainingSample>>& prompts,
                  const ModelParams& sft_params, Judge& judge, const std::function<void(const RlMetrics&)>& on_step) {
  cfg.validate();
  if (prompts.size() != cfg.phases.size())
    throw InvalidArgument("expected one prompt set per RL phase (" + std::to_string(cfg.phases.size()) + "), got " +
                          std::to_string(prompts.size()));
  for (std::size_t p = 0; p < prompts.size(); ++p)
    if (cfg.phases[p].steps > 0 && prompts[p].empty())
      throw InvalidArgument("prompt set for RL phase " + cfg.phases[p].name + " is empty");
  if (sft_params.config().channels != 3 * cfg.patch_pixels * cfg.patch_pixels)
    throw InvalidArgument("model channel count does not match patch size");

  RlResult result;
  ModelParams full = sft_params;  // trained directly when full_params is set
  result.adapter = init_adapter(sft_params, cfg.adapter_rank, cfg.adapter_alpha, derive_seed(cfg.seed, 0xada9));
  std::vector<Mat*> slots;
  if (cfg.full_params) {
    for (auto& a : full.arrays()) slots.push_back(&a);
  } else {
    for (auto& f : result.adapter.factors) {
      slots.push_back(&f.down);
      slots.push_back(&f.up);
    }
  }
  std::vector<Mat> shapes;
  for (const Mat* m : slots) shapes.push_back(*m);
  AdamW opt(cfg.adam, shapes);
  const PolicyView reference(sft_params);
  const auto policy = [&]() {
    return cfg.full_params ? PolicyView(full) : PolicyView(sft_params, result.adapter);
  };
  const Trainable trainable = cfg.full_params ? Trainable::Base : Trainable::Adapter;

  std::ofstream metrics_out;
  std::unique_ptr<RewardLog> reward_log;
  if (!cfg.out_dir.empty()) {
    std::filesystem::create_directories(cfg.out_dir);
    metrics_out.open(std::filesystem::path(cfg.out_dir) / "metrics.jsonl", std::ios::trunc);
    if (!metrics_out) throw IoError("cannot open metrics file in " + cfg.out_dir);
    const auto log_path = std::filesystem::path(cfg.out_dir) / "rewards.jsonl";
    std::filesystem::remove(log_path);
    reward_log = std::make_unique<RewardLog>(log_path.string());
  }
  const auto merged = [&]() { return cfg.full_params ? full : merge_adapter(sft_params, result.adapter); };
  const auto save = [&](std::int64_t step) {
    if (cfg.out_dir.empty()) return;
    const auto path = (std::filesystem::path(cfg.out_dir) / ("rl_ckpt_" + std::to_string(step) + ".bin")).string();
    if (!result.checkpoints.empty() && result.checkpoints.back() == path) return;
    save_checkpoint(path, merged(), step);
    result.checkpoints.push_back(path);
  };

  std::int64_t step = 0;
  for (std::size_t p = 0; p < cfg.phases.size(); ++p) {
    const RlPhase& phase = cfg.phases[p];
    for (std::int64_t k = 0; k < phase.steps; ++k, ++step) {
      const auto t0 = std::chrono::steady_clock::now();
      Rng rng(derive_seed(cfg.seed, 0x5e1ec7, static_cast<std::uint64_t>(step)));
      std::vector<GroupRollout> groups;
      for (int j = 0; j < cfg.prompts_per_step; ++j) {
        const auto& prompt = prompts[p][rng() % prompts[p].size()];
        auto g = rollout_group(policy(), prompt, cfg, judge,
                               derive_seed(cfg.seed, static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(j) + 1));
        if (g.failed) {
          std::cerr << "rl step " << step << ": group for prompt " << g.prompt_id << " skipped: " << g.failure << "\n";
          continue;
        }
        for (int i = 0; i < cfg.group_size && reward_log; ++i)
          reward_log->append(RewardRecord{cfg.run_id, step, g.prompt_id, i, g.scores[i], g.advantages[i], judge.kind(),
                                          utc_timestamp()});
        groups.push_back(std::move(g));
      }

      RlMetrics m;
      m.step = step;
      m.phase = phase.name;
      std::vector<double> all_rewards;
      for (const auto& g : groups) all_rewards.insert(all_rewards.end(), g.rewards.begin(), g.rewards.end());
      if (!all_rewards.empty()) {
        m.mean_reward = std::accumulate(all_rewards.begin(), all_rewards.end(), 0.0) / double(all_rewards.size());
        m.reward_std = population_std(all_rewards);
      }
      m.skipped = groups.empty();
      for (int epoch = 0; epoch < cfg.reuse && !groups.empty(); ++epoch) {
        double loss = 0.0, kl = 0.0, clip = 0.0;
        std::size_t terms = 0;
        std::vector<Mat> grads;
        try {
          for (const auto& g : groups) {
            LossResult lr = msgrpo_loss(g, policy(), trainable, reference, cfg);
            loss += lr.loss / double(groups.size());
            kl += lr.mean_kl * double(lr.terms);
            clip += lr.clip_fraction * double(lr.terms);
            terms += lr.terms;
            if (lr.grads.empty()) continue;
            if (grads.empty()) {
              grads = std::move(lr.grads);
              for (auto& gm : grads) gm /= double(groups.size());
            } else {
              for (std::size_t i = 0; i < grads.size(); ++i) grads[i] += lr.grads[i] / double(groups.size());
            }
          }
        } catch (const NonFiniteError& e) {
          std::cerr << "rl step " << step << ": update skipped: " << e.what() << "\n";
          m.skipped = true;
          break;
        }
        if (epoch == 0) {
          m.loss = loss;
          m.mean_kl = terms ? kl / double(terms) : 0.0;
          m.clip_fraction = terms ? clip / double(terms) : 0.0;
        }
        if (grads.empty()) continue;
        clip_global_norm(grads, cfg.grad_clip);
        opt.step(slots, grads, cfg.lr);
      }
      m.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      result.metrics.push_back(m);
      if (metrics_out.is_open()) metrics_out << to_json_line(m) << '\n' << std::flush;
      if (on_step) on_step(m);
      if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) save(step + 1);
    }
  }
  result.params = merged();
  save(step);
  return result;
}

}  // namespace uniref
