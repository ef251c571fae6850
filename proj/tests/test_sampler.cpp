#include <doctest.h>

#include <cmath>

#include "uniref/sampler.hpp"
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

Mat scalar(double v) { return Mat::Constant(1, 1, v); }

}  // namespace

TEST_CASE("sigma schedule") {
  CHECK(sigma_at(0.0, 1.5) == 0.0);
  CHECK(sigma_at(1.0, 1.5) == 0.0);
  CHECK(sigma_at(0.5, 1.5) == doctest::Approx(0.75).epsilon(1e-15));
  for (double t : {0.1, 0.5, 0.9}) CHECK(sigma_at(t, 0.0) == 0.0);
}

TEST_CASE("drift hand values") {
  CHECK(drift(scalar(0), scalar(1), 0.5, 1.0)(0, 0) == 1.5);
  Rng rng(1);
  const Mat x = normal_matrix(rng, 3, 3), v = normal_matrix(rng, 3, 3);
  CHECK(drift(x, v, 0.3, 0.0) == v);
  CHECK(drift(x, v, 0.0, 0.5).allFinite());
}

TEST_CASE("sde_step hand values") {
  CHECK(std::abs(sde_step(scalar(0), scalar(1), 0.5, 0.04, 1.0, scalar(0))(0, 0) - 0.06) < 1e-12);
  CHECK(std::abs(sde_step(scalar(0), scalar(1), 0.5, 0.04, 1.0, scalar(1))(0, 0) - 0.26) < 1e-12);
  Rng rng(2);
  const Mat x = normal_matrix(rng, 2, 2), v = normal_matrix(rng, 2, 2);
  CHECK(sde_step(x, v, 0.4, 0.1, 0.0, Mat::Zero(2, 2)) == Mat(x + v * 0.1));
}

TEST_CASE("transition logpdf values") {
  const double mode = transition_logpdf(scalar(0.06), scalar(0), scalar(1), 0.5, 0.04, 5.0);
  // sigma^2 dt = 1 with sigma = 5, dt = 0.04; the mean is 0 + (1 + 25/1 * 0.5) * 0.04.
  const double mean = step_mean(scalar(0), scalar(1), 0.5, 0.04, 5.0)(0, 0);
  const double at_mean = transition_logpdf(scalar(mean), scalar(0), scalar(1), 0.5, 0.04, 5.0);
  CHECK(at_mean == doctest::Approx(-0.9189385332046727).epsilon(1e-12));
  CHECK(transition_logpdf(scalar(mean + 1.0), scalar(0), scalar(1), 0.5, 0.04, 5.0) ==
        doctest::Approx(at_mean - 0.5).epsilon(1e-12));
  CHECK(mode < at_mean);
  CHECK_THROWS_AS(transition_logpdf(scalar(0), scalar(0), scalar(1), 0.5, 0.04, 0.0), InvalidArgument);

  // Quadrature of the density over a wide grid.
  const double sd = 0.3 * std::sqrt(0.05);
  const double m = step_mean(scalar(0.2), scalar(-0.4), 0.6, 0.05, 0.3)(0, 0);
  double integral = 0.0;
  const double h = sd / 200.0;
  for (double y = m - 10 * sd; y <= m + 10 * sd; y += h)
    integral += std::exp(transition_logpdf(scalar(y), scalar(0.2), scalar(-0.4), 0.6, 0.05, 0.3)) * h;
  CHECK(std::abs(integral - 1.0) < 1e-3);
}

TEST_CASE("kernel consistency with recorded noise") {
  Rng rng(3);
  const Mat x = normal_matrix(rng, 4, 6), v = normal_matrix(rng, 4, 6), n = normal_matrix(rng, 4, 6);
  const double t = 0.44, dt = 0.04, sigma = sigma_at(t, 1.5);
  const Mat next = sde_step(x, v, t, dt, sigma, n);
  const double d = double(n.size());
  const double analytic = -0.5 * n.squaredNorm() - 0.5 * d * std::log(2 * M_PI * sigma * sigma * dt);
  CHECK(std::abs(transition_logpdf(next, x, v, t, dt, sigma) - analytic) < 1e-12 * std::abs(analytic) + 1e-12);
}

TEST_CASE("sampling: collapse, bookkeeping, determinism") {
  const auto p = small_model(4);
  const auto s = generate_dataset(9, 1)[0].sample;
  SampleOptions det;
  det.steps = 6;
  SampleOptions sto = det;
  sto.mode = SampleMode::Stochastic;
  sto.noise_level = 0.0;
  Rng r1(5), r2(5);
  const auto a = sample(p, s.references, s.instruction, det, r1);
  const auto b = sample(p, s.references, s.instruction, sto, r2);
  CHECK(a.image == b.image);
  CHECK(a.trajectory.states.back() == b.trajectory.states.back());
  CHECK(a.trajectory.step_logpdfs.empty());
  for (const auto& n : a.trajectory.noises) CHECK(n.isZero());

  sto.noise_level = 1.5;
  Rng r3(6), r4(6);
  const auto c = sample(p, s.references, s.instruction, sto, r3);
  const auto d = sample(p, s.references, s.instruction, sto, r4);
  CHECK(c.image == d.image);
  CHECK(c.trajectory.states.size() == c.trajectory.times.size() + 1);
  CHECK(c.trajectory.times.front() == 0.0);
  CHECK(c.trajectory.dt() == doctest::Approx(1.0 / 6));
  CHECK(c.trajectory.step_logpdfs.size() == c.trajectory.stochastic_steps.size());
  CHECK(c.trajectory.stochastic_steps.size() == 5);  // t = 0 carries no noise
  for (double lp : c.trajectory.step_logpdfs) CHECK(std::isfinite(lp));
  CHECK(c.image.height() == 32);
}

TEST_CASE("default sampler settings") {
  SampleOptions o;
  CHECK(o.steps == 25);
  CHECK(o.noise_level == 1.5);
  CHECK(kDefaultTimeEps == 1e-4);
  o.steps = 0;
  CHECK_THROWS_AS(o.validate(), InvalidArgument);
}
