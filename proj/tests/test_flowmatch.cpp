#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include <json.hpp>

#include "uniref/flowmatch.hpp"
#include "uniref/taskgen.hpp"

using namespace uniref;

namespace {

ModelConfig tiny() {
  ModelConfig c;
  c.layers = 1;
  c.width = 32;
  c.heads = 2;
  return c;
}

SftConfig quick_config(std::int64_t steps) {
  SftConfig s;
  s.steps = steps;
  s.batch_size = 4;
  s.warmup_steps = 5;
  s.peak_lr = 3e-3;
  s.schedule = BudgetSchedule({{0, 1024}});
  s.checkpoint_every = 0;
  return s;
}

}  // namespace

TEST_CASE("sample_timestep stays inside (0, 1) with logit mean near location") {
  Rng rng(1);
  double sum = 0.0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const double t = sample_timestep(rng, 0.0, 1.0);
    REQUIRE(t > 0.0);
    REQUIRE(t < 1.0);
    sum += std::log(t / (1.0 - t));
  }
  CHECK(std::abs(sum / n) < 3.0 / std::sqrt(double(n)));
  Rng r2(2);
  CHECK(sample_timestep(r2, 0.0, 1e-9) == doctest::Approx(0.5).epsilon(1e-6));
  CHECK_THROWS_AS(sample_timestep(r2, 0.0, 0.0), InvalidArgument);
}

TEST_CASE("interpolation endpoints and midpoint") {
  Rng rng(3);
  const Mat x0 = normal_matrix(rng, 4, 5), x1 = normal_matrix(rng, 4, 5);
  CHECK(interpolate(x0, x1, 1.0) == x0);
  CHECK(interpolate(x0, x1, 0.0) == x1);
  CHECK(interpolate(Mat::Zero(3, 3), Mat::Constant(3, 3, 2.0), 0.5) == Mat::Constant(3, 3, 1.0));
  CHECK_THROWS_AS(interpolate(x0, Mat::Zero(2, 2), 0.5), InvalidArgument);

  Latent a(2, 2, 3), b(2, 2, 3);
  for (auto& v : a.values) v = standard_normal(rng);
  for (auto& v : b.values) v = standard_normal(rng);
  CHECK(interpolate(a, b, 1.0).values == a.values);
  CHECK(interpolate(a, b, 0.0).values == b.values);
}

TEST_CASE("velocity target identities") {
  Rng rng(4);
  const Mat x0 = normal_matrix(rng, 6, 3), x1 = normal_matrix(rng, 6, 3);
  CHECK(velocity_target(x0, x0).isZero());
  CHECK(velocity_target(Mat::Ones(2, 2), Mat::Zero(2, 2)) == Mat::Ones(2, 2));
  for (double t : {0.1, 0.37, 0.9}) {
    const Mat back = interpolate(x0, x1, t) + (1.0 - t) * velocity_target(x0, x1);
    CHECK((back - x0).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("sft_loss hand values") {
  Rng rng(5);
  const Mat x0 = normal_matrix(rng, 3, 4), x1 = normal_matrix(rng, 3, 4);
  CHECK(sft_loss(x0 - x1, x0, x1) == 0.0);
  CHECK(sft_loss(Mat::Zero(2, 2), Mat::Ones(2, 2), Mat::Zero(2, 2)) == 1.0);
  CHECK(sft_loss((x0 - x1).array() + 2.0, x0, x1) == doctest::Approx(4.0).epsilon(1e-12));
  Mat bad = x0;
  bad(0, 0) = NAN;
  CHECK_THROWS_AS(sft_loss(bad, x0, x1), NonFiniteError);
}

TEST_CASE("train_sft overfits a single sample") {
  const auto data = training_samples(generate_dataset(3, 1));
  ModelConfig c = tiny();
  c.width = 64;
  c.heads = 4;
  auto cfg = quick_config(200);
  cfg.batch_size = 8;
  cfg.peak_lr = 1e-2;
  cfg.warmup_steps = 10;
  const auto r = train_sft(cfg, data, init_params(c, 1));
  REQUIRE(r.metrics.size() == 200);
  auto window = [&](std::size_t from) {
    double s = 0;
    for (std::size_t i = from; i < from + 20; ++i) s += r.metrics[i].loss;
    return s / 20;
  };
  CHECK(window(180) < 0.1 * window(0));
}

TEST_CASE("train_sft records budget changes at thresholds, decays lr, and is deterministic") {
  const auto data = training_samples(generate_dataset(4, 6));
  auto cfg = quick_config(12);
  cfg.batch_size = 2;
  cfg.warmup_steps = 2;
  cfg.schedule = BudgetSchedule({{0, 256}, {4, 576}, {8, 1024}});
  const auto a = train_sft(cfg, data, init_params(tiny(), 2));
  for (const auto& m : a.metrics) CHECK(m.budget == cfg.schedule.budget_at(m.step));
  CHECK(a.metrics[3].budget == 256);
  CHECK(a.metrics[4].budget == 576);
  CHECK(a.metrics[8].budget == 1024);
  CHECK(a.metrics.back().lr <= a.metrics[2].lr);

  const auto b = train_sft(cfg, data, init_params(tiny(), 2));
  CHECK(a.params.content_hash() == b.params.content_hash());
  for (std::size_t i = 0; i < a.metrics.size(); ++i) CHECK(a.metrics[i].loss == b.metrics[i].loss);

  cfg.workers = 2;
  const auto c = train_sft(cfg, data, init_params(tiny(), 2));
  CHECK(a.params.content_hash() == c.params.content_hash());
}

TEST_CASE("train_sft writes metrics and checkpoints") {
  const auto dir = std::filesystem::temp_directory_path() / "uniref_test_sft";
  std::filesystem::remove_all(dir);
  auto cfg = quick_config(4);
  cfg.batch_size = 1;
  cfg.checkpoint_every = 2;
  cfg.out_dir = dir.string();
  const auto r = train_sft(cfg, training_samples(generate_dataset(5, 2)), init_params(tiny(), 3));
  CHECK(r.checkpoints.size() == 2);
  CHECK(std::filesystem::exists(dir / "ckpt_2.bin"));
  CHECK(std::filesystem::exists(dir / "ckpt_4.bin"));
  std::ifstream in(dir / "metrics.jsonl");
  int lines = 0;
  for (std::string line; std::getline(in, line); ++lines) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.at("step").get<int>() == lines);
    for (const char* k : {"loss", "lr", "budget", "wall_ms"}) CHECK(j.contains(k));
  }
  CHECK(lines == 4);
}

TEST_CASE("train_sft aborts on a non-finite loss naming the last checkpoint") {
  auto p = init_params(tiny(), 4);
  p.get("out.b")(0, 0) = INFINITY;
  try {
    train_sft(quick_config(2), training_samples(generate_dataset(6, 1)), p);
    FAIL("expected NonFiniteError");
  } catch (const NonFiniteError& e) {
    CHECK(std::string(e.what()).find("last good checkpoint") != std::string::npos);
  }
  CHECK_THROWS_AS(train_sft(quick_config(2), {}, init_params(tiny(), 4)), InvalidArgument);
}

TEST_CASE("mixed edit and composition batches train through one path") {
  const auto gen = generate_dataset(7, 8);
  std::set<int> ks;
  for (const auto& g : gen) ks.insert(g.sample.num_references());
  CHECK(ks.size() >= 2);
  auto cfg = quick_config(3);
  cfg.batch_size = 8;
  const auto r = train_sft(cfg, training_samples(gen), init_params(tiny(), 5));
  for (const auto& m : r.metrics) CHECK(std::isfinite(m.loss));
}
