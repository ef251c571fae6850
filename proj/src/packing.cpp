#include "uniref/packing.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace uniref {
namespace {

std::vector<ImageSize> scaled_sizes(const std::vector<ImageSize>& sizes, double s, int multiple) {
  std::vector<ImageSize> out;
  out.reserve(sizes.size());
  for (const auto& sz : sizes) {
    const auto fit = [&](int side) {
      const auto cells = static_cast<int>(std::floor(side * s / multiple));
      return std::max(cells, 1) * multiple;
    };
    out.push_back({fit(sz.height), fit(sz.width)});
  }
  return out;
}

std::int64_t total_pixels(const std::vector<ImageSize>& sizes) {
  std::int64_t total = 0;
  for (const auto& sz : sizes) total += std::int64_t(sz.height) * sz.width;
  return total;
}

}  // namespace

std::vector<ImageSize> allocate_budget(const std::vector<ImageSize>& sizes, std::int64_t budget, int multiple) {
  if (multiple < 1) throw InvalidArgument("multiple must be positive");
  if (sizes.empty()) return {};
  for (const auto& sz : sizes)
    if (sz.height < 1 || sz.width < 1) throw InvalidArgument("image sizes must be positive");
  const std::int64_t floor_cost = std::int64_t(sizes.size()) * multiple * multiple;
  if (budget < floor_cost)
    throw InvalidArgument("pixel budget " + std::to_string(budget) + " cannot grant " +
                          std::to_string(sizes.size()) + " images one " + std::to_string(multiple) + "x" +
                          std::to_string(multiple) + " cell each");

  const double s0 = std::sqrt(double(budget) / double(total_pixels(sizes)));
  auto out = scaled_sizes(sizes, s0, multiple);
  if (total_pixels(out) <= budget) return out;

  // The one-cell minimum pushed the total over budget; shrink the shared factor.
  double lo = 0.0, hi = s0;
  for (int it = 0; it < 100; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (total_pixels(scaled_sizes(sizes, mid, multiple)) <= budget)
      lo = mid;
    else
      hi = mid;
  }
  return scaled_sizes(sizes, lo, multiple);
}

BudgetSchedule::BudgetSchedule(std::vector<Stage> stages) : stages_(std::move(stages)) {
  if (stages_.empty()) throw InvalidArgument("budget schedule needs at least one stage");
  for (std::size_t i = 0; i < stages_.size(); ++i) {
    if (stages_[i].budget < 1) throw InvalidArgument("stage budgets must be positive");
    if (stages_[i].step_threshold < 0) throw InvalidArgument("stage thresholds must be non-negative");
    if (i > 0 && stages_[i].budget <= stages_[i - 1].budget)
      throw InvalidArgument("stage budgets must be strictly increasing");
    if (i > 0 && stages_[i].step_threshold <= stages_[i - 1].step_threshold)
      throw InvalidArgument("stage thresholds must be strictly increasing");
  }
}

BudgetSchedule BudgetSchedule::desk_default() {
  return BudgetSchedule({{0, 64 * 64}, {10000, 96 * 96}, {20000, 128 * 128}});
}

std::int64_t BudgetSchedule::budget_at(std::int64_t step) const {
  std::int64_t budget = stages_.front().budget;
  for (const auto& st : stages_)
    if (st.step_threshold <= step) budget = st.budget;
  return budget;
}

TokenGrid patchify(const Latent& latent) {
  TokenGrid g;
  g.rows = latent.rows;
  g.cols = latent.cols;
  const int n = latent.rows * latent.cols;
  g.tokens.resize(n, latent.channels);
  g.positions.reserve(n);
  for (int i = 0; i < n; ++i) {
    g.positions.push_back({i / latent.cols, i % latent.cols});
    for (int ch = 0; ch < latent.channels; ++ch) g.tokens(i, ch) = latent.values[std::size_t(i) * latent.channels + ch];
  }
  return g;
}

Latent unpatchify(const Mat& tokens, const std::vector<GridPos>& positions, int rows, int cols) {
  if (rows < 0 || cols < 0) throw InvalidArgument("grid shape must be non-negative");
  const auto n = static_cast<std::size_t>(rows) * cols;
  if (positions.size() != static_cast<std::size_t>(tokens.rows()))
    throw InvalidArgument("token and position counts differ");
  if (positions.size() != n)
    throw InvalidArgument("expected " + std::to_string(n) + " positions, got " + std::to_string(positions.size()));
  Latent z(rows, cols, static_cast<int>(tokens.cols()));
  std::vector<bool> seen(n, false);
  for (std::size_t i = 0; i < positions.size(); ++i) {
    const auto [r, c] = positions[i];
    if (r < 0 || r >= rows || c < 0 || c >= cols)
      throw InvalidArgument("position (" + std::to_string(r) + "," + std::to_string(c) + ") outside grid");
    const auto cell = static_cast<std::size_t>(r) * cols + c;
    if (seen[cell])
      throw InvalidArgument("duplicate position (" + std::to_string(r) + "," + std::to_string(c) + ")");
    seen[cell] = true;
    for (int ch = 0; ch < z.channels; ++ch) z.at(r, c, ch) = tokens(static_cast<Eigen::Index>(i), ch);
  }
  // With n positions, no duplicates, all in range, every cell is covered.
  return z;
}

PackedSequence assemble(const TokenGrid& target, const std::vector<TokenGrid>& references) {
  const auto channels = target.tokens.cols();
  Eigen::Index total = target.tokens.rows();
  for (std::size_t k = 0; k < references.size(); ++k) {
    if (references[k].tokens.cols() != channels)
      throw InvalidArgument("reference " + std::to_string(k + 1) + " has " +
                            std::to_string(references[k].tokens.cols()) + " channels, target has " +
                            std::to_string(channels));
    total += references[k].tokens.rows();
  }

  PackedSequence seq;
  seq.tokens.resize(total, channels);
  seq.positions.reserve(total);
  seq.segments.reserve(total);
  seq.target_len = static_cast<int>(target.tokens.rows());

  Eigen::Index row = 0;
  const auto append = [&](const TokenGrid& g, int segment) {
    if (g.tokens.rows() > 0) seq.tokens.middleRows(row, g.tokens.rows()) = g.tokens;
    row += g.tokens.rows();
    seq.positions.insert(seq.positions.end(), g.positions.begin(), g.positions.end());
    seq.segments.insert(seq.segments.end(), g.tokens.rows(), segment);
    seq.grids.push_back({g.rows, g.cols});
  };
  append(target, 0);
  for (std::size_t k = 0; k < references.size(); ++k) append(references[k], static_cast<int>(k) + 1);
  return seq;
}

Mat slice_target(const Mat& output, int target_len) {
  if (target_len < 0 || output.rows() < target_len)
    throw InvalidArgument("output has " + std::to_string(output.rows()) + " rows, fewer than target length " +
                          std::to_string(target_len));
  return output.topRows(target_len);
}

std::vector<TokenGrid> prepare_references(const std::vector<RasterImage>& references, std::int64_t budget,
                                          int patch_pixels) {
  std::vector<ImageSize> sizes;
  for (const auto& img : references) sizes.push_back({img.height(), img.width()});
  const auto alloc = allocate_budget(sizes, budget, patch_pixels);
  std::vector<TokenGrid> grids;
  grids.reserve(references.size());
  for (std::size_t k = 0; k < references.size(); ++k)
    grids.push_back(patchify(encode(resize_bilinear(references[k], alloc[k].height, alloc[k].width), patch_pixels)));
  return grids;
}

}  // namespace uniref
