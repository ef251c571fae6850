#pragma once

#include <cstdint>
#include <vector>

#include "uniref/instruction.hpp"
#include "uniref/packing.hpp"
#include "uniref/rasters.hpp"

namespace uniref {

/// Everything the velocity model sees besides the noisy target: encoded reference grids, the
/// instruction, and the target latent grid shape.
struct Conditioning {
  std::vector<TokenGrid> references;
  Instruction instruction;
  int target_rows = 0;
  int target_cols = 0;
};

Conditioning make_conditioning(const std::vector<RasterImage>& references, const Instruction& instruction,
                               std::int64_t budget, int patch_pixels, int target_height, int target_width);

/// Row-major target grid for `tokens` followed by the reference grids.
PackedSequence pack(const Conditioning& cond, const Mat& target_tokens);

/// Target image <-> target token matrix.
Mat image_tokens(const RasterImage& image, int patch_pixels);
RasterImage tokens_image(const Mat& tokens, int rows, int cols, int patch_pixels);

}  // namespace uniref
