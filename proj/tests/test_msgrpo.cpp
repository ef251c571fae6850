#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "uniref/msgrpo.hpp"
#include "uniref/taskgen.hpp"

using namespace uniref;

namespace {

ModelParams small_model(std::uint64_t seed) {
  ModelConfig c;
  c.layers = 1;
  c.width = 32;
  c.heads = 2;
  auto p = init_params(c, seed);
  Rng rng(seed);
  for (auto& a : p.arrays()) a += 0.05 * normal_matrix(rng, a.rows(), a.cols());
  return p;
}

RlConfig small_rl() {
  RlConfig c;
  c.group_size = 4;
  c.steps = 5;
  return c;
}

// Programmatic scores passed through an affine map.
class AffineJudge : public Judge {
 public:
  AffineJudge(double scale, double shift) : scale_(scale), shift_(shift) {}
  RewardBreakdown judge(const std::vector<RasterImage>& refs, const Instruction& ins, const RasterImage& c) override {
    auto b = inner_.judge(refs, ins, c);
    b.integration = b.integration * scale_ + shift_;
    b.consistency = b.consistency * scale_ + shift_;
    b.quality = b.quality * scale_ + shift_;
    return b;
  }
  std::string kind() const override { return "affine"; }

 private:
  ProgrammaticJudge inner_;
  double scale_, shift_;
};

// Reward decided by a pixel statistic so groups are never degenerate.
class BrightnessJudge : public Judge {
 public:
  RewardBreakdown judge(const std::vector<RasterImage>&, const Instruction&, const RasterImage& c) override {
    double s = 0;
    for (auto v : c.pixels()) s += v;
    const double score = 10.0 * s / (255.0 * double(c.pixels().size()));
    return {score, score, score, 0.0, ""};
  }
  std::string kind() const override { return "brightness"; }
};

class DownJudge : public Judge {
 public:
  RewardBreakdown judge(const std::vector<RasterImage>&, const Instruction&, const RasterImage&) override {
    throw JudgeUnavailable("judge offline");
  }
  std::string kind() const override { return "down"; }
};

}  // namespace

TEST_CASE("advantages") {
  const auto a = advantages({1, 2, 3});
  CHECK(a[0] == doctest::Approx(-1.2247448713915890).epsilon(1e-12));
  CHECK(a[1] == doctest::Approx(0.0));
  CHECK(a[2] == doctest::Approx(1.2247448713915890).epsilon(1e-12));
  CHECK(advantages({4, 4, 4, 4}) == std::vector<double>(4, 0.0));
  CHECK_THROWS_AS(advantages({1}), InvalidArgument);

  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> r(2 + trial % 15);
    for (auto& x : r) x = 10 * uniform01(rng);
    const auto adv = advantages(r);
    const double mean = std::accumulate(adv.begin(), adv.end(), 0.0) / adv.size();
    double var = 0;
    for (double x : adv) var += (x - mean) * (x - mean);
    CHECK(std::abs(mean) < 1e-6);
    CHECK(std::abs(std::sqrt(var / adv.size()) - 1.0) < 1e-6);
    std::vector<double> shifted;
    for (double x : r) shifted.push_back(3 * x + 10);
    const auto adv2 = advantages(shifted);
    for (std::size_t i = 0; i < adv.size(); ++i) CHECK(adv2[i] == doctest::Approx(adv[i]).epsilon(1e-9));
  }
}

TEST_CASE("ratio") {
  CHECK(ratio(-3.0, -3.0) == 1.0);
  CHECK(ratio(std::log(2.0), 0.0) == doctest::Approx(2.0).epsilon(1e-15));
  Rng rng(2);
  for (int i = 0; i < 100; ++i) {
    const double a = 5 * standard_normal(rng), b = 5 * standard_normal(rng);
    CHECK(std::abs(ratio(a, b) * ratio(b, a) - 1.0) < 1e-12);
  }
  CHECK(ratio(1000.0, 0.0) == doctest::Approx(1e6));
  CHECK(ratio(-1000.0, 0.0) == doctest::Approx(1e-6));
}

TEST_CASE("surrogate hand cases and clip gradient") {
  CHECK(surrogate(1.0, 1.0, 0.2) == 1.0);
  CHECK(surrogate(1.5, 1.0, 0.2) == doctest::Approx(1.2).epsilon(1e-15));
  CHECK(surrogate(0.5, -1.0, 0.2) == doctest::Approx(-0.8).epsilon(1e-15));
  CHECK_THROWS_AS(surrogate(1.0, 1.0, 0.0), InvalidArgument);
  CHECK_THROWS_AS(surrogate(1.0, 1.0, 1.0), InvalidArgument);
  const double h = 1e-6;
  for (auto [r, A] : {std::pair{1.5, 1.0}, {0.5, -1.0}, {1.3, 2.0}, {0.6, -0.5}}) {
    const double fd = (surrogate(r + h, A, 0.2) - surrogate(r - h, A, 0.2)) / (2 * h);
    CHECK(std::abs(fd) < 1e-9);
  }
  for (auto [r, A] : {std::pair{1.05, 1.0}, {0.5, 1.0}, {1.5, -1.0}}) {
    const double fd = (surrogate(r + h, A, 0.2) - surrogate(r - h, A, 0.2)) / (2 * h);
    CHECK(fd == doctest::Approx(A).epsilon(1e-6));
  }
}

TEST_CASE("closed-form KL") {
  CHECK(kl_closed_form(Mat::Zero(2, 2), Mat::Zero(2, 2), 0.5, 0.04, 1.0) == 0.0);
  CHECK(kl_closed_form(Mat::Ones(1, 1), Mat::Zero(1, 1), 0.5, 0.04, 1.0) == doctest::Approx(0.045).epsilon(1e-14));
  CHECK_THROWS_AS(kl_closed_form(Mat::Ones(1, 1), Mat::Zero(1, 1), 0.5, 0.04, 0.0), InvalidArgument);
  Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    const double t = uniform01(rng), dt = 0.01 + 0.1 * uniform01(rng), sigma = 0.05 + 2 * uniform01(rng);
    const Mat x = normal_matrix(rng, 3, 5), a = normal_matrix(rng, 3, 5), b = normal_matrix(rng, 3, 5);
    const double closed = kl_closed_form(a, b, t, dt, sigma);
    const double gauss = gaussian_mean_kl(step_mean(x, a, t, dt, sigma), step_mean(x, b, t, dt, sigma), sigma, dt);
    CHECK(std::abs(closed - gauss) <= 1e-12 * std::max(1.0, std::abs(gauss)));
  }
}

TEST_CASE("rollout determinism, on-policy ratios and zero loss at rollout params") {
  const auto p = small_model(5);
  const auto prompt = generate_dataset(11, 1)[0].sample;
  auto cfg = small_rl();
  ProgrammaticJudge judge;
  const auto g1 = rollout_group(p, prompt, cfg, judge, 42);
  const auto g2 = rollout_group(p, prompt, cfg, judge, 42);
  REQUIRE_FALSE(g1.failed);
  CHECK(g1.trajectories.size() == 4);
  for (int i = 0; i < 4; ++i) {
    CHECK(g1.images[i] == g2.images[i]);
    CHECK(g1.rewards[i] == g2.rewards[i]);
    CHECK(g1.old_logpdfs[i].size() == 4);
  }
  for (const auto& rs : policy_ratios(g1, p, cfg))
    for (double r : rs) CHECK(std::abs(r - 1.0) < 1e-9);

  const auto ad = zero_adapter(p, 4, 4.0);
  const auto loss = msgrpo_loss(g1, PolicyView(p, ad), Trainable::Adapter, p, cfg);
  CHECK(std::abs(loss.loss) < 1e-12);
  CHECK(loss.clip_fraction == 0.0);

  cfg.beta = 0.5;
  const auto with_kl = msgrpo_loss(g1, PolicyView(p, ad), Trainable::Adapter, p, cfg);
  CHECK(with_kl.mean_kl == 0.0);
  CHECK(std::abs(with_kl.loss) < 1e-12);
}

TEST_CASE("degenerate groups contribute nothing and reward affine maps leave the loss unchanged") {
  const auto p = small_model(6);
  const auto prompt = generate_dataset(12, 1)[0].sample;
  auto cfg = small_rl();
  cfg.weights = {1, 1, 1};
  AffineJudge base(1.0, 0.0), doubled(2.0, 0.0);
  auto ad = init_adapter(p, 4, 4.0, 3);
  Rng rng(7);
  for (auto& f : ad.factors) f.up = 0.05 * normal_matrix(rng, f.up.rows(), f.up.cols());
  const PolicyView view(p, ad);
  auto ga = rollout_group(p, prompt, cfg, base, 9);
  auto gb = rollout_group(p, prompt, cfg, doubled, 9);
  for (std::size_t i = 0; i < ga.advantages.size(); ++i)
    CHECK(ga.advantages[i] == doctest::Approx(gb.advantages[i]).epsilon(1e-9));
  const auto la = msgrpo_loss(ga, view, Trainable::Adapter, p, cfg, false);
  const auto lb = msgrpo_loss(gb, view, Trainable::Adapter, p, cfg, false);
  CHECK(la.loss == doctest::Approx(lb.loss).epsilon(1e-9));

  auto flat = ga;
  flat.rewards.assign(flat.rewards.size(), 5.0);
  flat.advantages = advantages(flat.rewards);
  const auto lf = msgrpo_loss(flat, view, Trainable::Adapter, p, cfg);
  CHECK(lf.loss == 0.0);
  CHECK(lf.terms == 0);
}

TEST_CASE("msgrpo loss gradient matches finite differences on adapter factors") {
  const auto p = small_model(8);
  const auto prompt = generate_dataset(13, 1)[0].sample;
  auto cfg = small_rl();
  cfg.beta = 0.3;
  BrightnessJudge judge;
  auto ad = init_adapter(p, 2, 2.0, 4);
  Rng rng(9);
  for (auto& f : ad.factors) f.up = 0.02 * normal_matrix(rng, f.up.rows(), f.up.cols());
  const auto g = rollout_group(PolicyView(p, ad), prompt, cfg, judge, 10);
  REQUIRE_FALSE(g.failed);
  // Evaluate at slightly moved parameters so ratios differ from 1 but stay unclipped.
  for (auto& f : ad.factors) f.up += 1e-3 * normal_matrix(rng, f.up.rows(), f.up.cols());
  const auto res = msgrpo_loss(g, PolicyView(p, ad), Trainable::Adapter, p, cfg);
  REQUIRE(res.grads.size() == 2 * ad.factors.size());
  const double h = 1e-5;
  for (int trial = 0; trial < 6; ++trial) {
    const int fi = uniform_int(rng, 0, static_cast<int>(ad.factors.size()) - 1);
    const bool up = trial % 2 == 1;
    Mat& m = up ? ad.factors[fi].up : ad.factors[fi].down;
    const int k = uniform_int(rng, 0, static_cast<int>(m.size()) - 1);
    const double keep = m.data()[k];
    m.data()[k] = keep + h;
    const double lp = msgrpo_loss(g, PolicyView(p, ad), Trainable::Adapter, p, cfg, false).loss;
    m.data()[k] = keep - h;
    const double lm = msgrpo_loss(g, PolicyView(p, ad), Trainable::Adapter, p, cfg, false).loss;
    m.data()[k] = keep;
    const double fd = (lp - lm) / (2 * h);
    const double an = res.grads[2 * fi + (up ? 1 : 0)].data()[k];
    CHECK(std::abs(fd - an) <= 1e-4 * std::max({std::abs(fd), std::abs(an), 1e-6}));
  }
}

TEST_CASE("failed judge marks the group failed") {
  const auto p = small_model(10);
  DownJudge judge;
  const auto g = rollout_group(p, generate_dataset(14, 1)[0].sample, small_rl(), judge, 1);
  CHECK(g.failed);
  CHECK(g.failure.find("offline") != std::string::npos);
  CHECK_THROWS_AS(msgrpo_loss(g, p, Trainable::Base, p, small_rl()), InvalidArgument);
}

TEST_CASE("RlConfig defaults and validation") {
  RlConfig c;
  CHECK(c.group_size == 16);
  CHECK(c.steps == 25);
  CHECK(c.noise_level == 1.5);
  CHECK(c.beta == 0.0);
  CHECK(c.clip_eps == 0.2);
  CHECK(c.adapter_rank == 4);
  REQUIRE(c.phases.size() == 2);
  CHECK(c.phases[0].kind == TaskKind::Compose);
  CHECK(c.phases[1].kind == TaskKind::Edit);
  c.group_size = 1;
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
  c = RlConfig{};
  c.beta = -1;
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
}

TEST_CASE("train_rl: zero steps keep the SFT params, metrics are per step and ordered") {
  const auto p = small_model(11);
  const auto data = training_samples(generate_dataset(15, 6));
  std::vector<TrainingSample> compose, edit;
  for (const auto& s : data) (s.kind == TaskKind::Compose ? compose : edit).push_back(s);
  REQUIRE(!compose.empty());
  REQUIRE(!edit.empty());
  ProgrammaticJudge judge;

  auto cfg = small_rl();
  cfg.phases = {{"composition", TaskKind::Compose, 0}, {"editing", TaskKind::Edit, 0}};
  const auto zero = train_rl(cfg, {compose, edit}, p, judge);
  CHECK(zero.params.content_hash() == p.content_hash());
  CHECK(zero.metrics.empty());

  const auto dir = std::filesystem::temp_directory_path() / "uniref_test_rl";
  std::filesystem::remove_all(dir);
  cfg.phases = {{"composition", TaskKind::Compose, 2}, {"editing", TaskKind::Edit, 1}};
  cfg.prompts_per_step = 1;
  cfg.checkpoint_every = 3;
  cfg.out_dir = dir.string();
  const auto r = train_rl(cfg, {compose, edit}, p, judge);
  REQUIRE(r.metrics.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) CHECK(r.metrics[i].step == static_cast<std::int64_t>(i));
  CHECK(r.metrics[0].phase == "composition");
  CHECK(r.metrics[2].phase == "editing");
  CHECK(r.checkpoints.size() == 1);
  std::ifstream rewards(dir / "rewards.jsonl");
  int n = 0;
  for (std::string line; std::getline(rewards, line); ++n) CHECK(nlohmann::json::parse(line).contains("judge_kind"));
  CHECK(n == 3 * cfg.group_size);
  CHECK_THROWS_AS(train_rl(cfg, {compose}, p, judge), InvalidArgument);
}
