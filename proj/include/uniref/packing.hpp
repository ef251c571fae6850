#pragma once

#include <cstdint>
#include <vector>

#include "uniref/common.hpp"
#include "uniref/rasters.hpp"

namespace uniref {

struct ImageSize {
  int height = 0;
  int width = 0;
  friend bool operator==(const ImageSize&, const ImageSize&) = default;
};

/// Scale every image by one shared factor so the summed pixel count fits `budget`, then floor each
/// side to a multiple of `multiple` (never below one cell). The factor may exceed 1.
std::vector<ImageSize> allocate_budget(const std::vector<ImageSize>& sizes, std::int64_t budget, int multiple);

/// Progressive pixel-budget curriculum: (first training step, total reference pixels) stages.
class BudgetSchedule {
 public:
  struct Stage {
    std::int64_t step_threshold = 0;
    std::int64_t budget = 0;
  };

  explicit BudgetSchedule(std::vector<Stage> stages);

  /// 64^2, 96^2, 128^2 at steps 0, 10k, 20k.
  static BudgetSchedule desk_default();

  std::int64_t budget_at(std::int64_t step) const;
  const std::vector<Stage>& stages() const { return stages_; }

 private:
  std::vector<Stage> stages_;
};

struct GridPos {
  int row = 0;
  int col = 0;
  friend bool operator==(const GridPos&, const GridPos&) = default;
};

/// Tokens of one latent grid with their cell coordinates.
struct TokenGrid {
  Mat tokens;  // (rows*cols) x channels
  std::vector<GridPos> positions;
  int rows = 0;
  int cols = 0;
};

TokenGrid patchify(const Latent& latent);
Latent unpatchify(const Mat& tokens, const std::vector<GridPos>& positions, int rows, int cols);

/// Unified sequence [target; ref_1; ...; ref_K] with per-token cell positions and segment ids.
struct PackedSequence {
  Mat tokens;
  std::vector<GridPos> positions;
  std::vector<int> segments;  // 0 = target, k = reference k
  int target_len = 0;
  std::vector<ImageSize> grids;  // (rows, cols) per segment, in segment order

  int size() const { return static_cast<int>(segments.size()); }
  int num_references() const { return static_cast<int>(grids.size()) - 1; }
};

PackedSequence assemble(const TokenGrid& target, const std::vector<TokenGrid>& references);

/// First `target_len` rows of a transformer output.
Mat slice_target(const Mat& output, int target_len);

/// Resize each reference to its budget allocation, encode, and patchify.
std::vector<TokenGrid> prepare_references(const std::vector<RasterImage>& references, std::int64_t budget,
                                          int patch_pixels);

}  // namespace uniref
