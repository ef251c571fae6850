#include <doctest.h>

#include <cmath>

#include "uniref/optim.hpp"

using namespace uniref;

TEST_CASE("cosine schedule warms up then decays") {
  CHECK(cosine_lr(0, 100, 10, 1.0) < cosine_lr(5, 100, 10, 1.0));
  CHECK(cosine_lr(10, 100, 10, 1.0) == doctest::Approx(1.0));
  CHECK(cosine_lr(55, 100, 10, 1.0) == doctest::Approx(0.5));
  CHECK(cosine_lr(99, 100, 10, 1.0) <= cosine_lr(10, 100, 10, 1.0));
  CHECK(cosine_lr(100, 100, 10, 1.0) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("global norm clipping") {
  std::vector<Mat> g{Mat::Constant(1, 1, 3.0), Mat::Constant(1, 1, 4.0)};
  CHECK(clip_global_norm(g, 1.0) == doctest::Approx(5.0));
  CHECK(g[0](0, 0) == doctest::Approx(0.6));
  CHECK(g[1](0, 0) == doctest::Approx(0.8));
  std::vector<Mat> small{Mat::Constant(1, 1, 0.1)};
  clip_global_norm(small, 1.0);
  CHECK(small[0](0, 0) == 0.1);
}

TEST_CASE("first Adam step moves each coordinate by lr against the gradient sign") {
  Mat w = Mat::Zero(1, 3);
  AdamW opt({0.9, 0.95, 1e-8, 0.0}, {w});
  opt.step({&w}, {(Mat(1, 3) << 2.0, -0.5, 0.0).finished()}, 0.1);
  CHECK(w(0, 0) == doctest::Approx(-0.1).epsilon(1e-6));
  CHECK(w(0, 1) == doctest::Approx(0.1).epsilon(1e-6));
  CHECK(w(0, 2) == 0.0);
  CHECK(opt.steps_taken() == 1);
}

TEST_CASE("AdamW minimizes a quadratic and decays weights") {
  Mat w = Mat::Constant(1, 1, 5.0);
  AdamW opt({0.9, 0.95, 1e-8, 0.0}, {w});
  for (int i = 0; i < 2000; ++i) opt.step({&w}, {2.0 * w}, 0.05);
  CHECK(std::abs(w(0, 0)) < 0.05);

  Mat d = Mat::Constant(1, 1, 1.0);
  AdamW decay({0.9, 0.95, 1e-8, 0.5}, {d});
  decay.step({&d}, {Mat::Zero(1, 1)}, 0.1);
  CHECK(d(0, 0) == doctest::Approx(0.95));
}
