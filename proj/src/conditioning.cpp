#include "uniref/conditioning.hpp"

namespace uniref {

Conditioning make_conditioning(const std::vector<RasterImage>& references, const Instruction& instruction,
                               std::int64_t budget, int patch_pixels, int target_height, int target_width) {
  if (target_height % patch_pixels != 0 || target_width % patch_pixels != 0 || target_height < patch_pixels ||
      target_width < patch_pixels)
    throw InvalidArgument("target size must be a positive multiple of the patch size");
  if (instruction.max_ref_index() > static_cast<int>(references.size()))
    throw InvalidArgument("instruction references image " + std::to_string(instruction.max_ref_index()) +
                          " but only " + std::to_string(references.size()) + " were supplied");
  Conditioning c;
  c.references = prepare_references(references, budget, patch_pixels);
  c.instruction = instruction;
  c.target_rows = target_height / patch_pixels;
  c.target_cols = target_width / patch_pixels;
  return c;
}

PackedSequence pack(const Conditioning& cond, const Mat& target_tokens) {
  if (target_tokens.rows() != cond.target_rows * cond.target_cols)
    throw InvalidArgument("target token count does not match the target grid");
  TokenGrid target;
  target.rows = cond.target_rows;
  target.cols = cond.target_cols;
  target.tokens = target_tokens;
  target.positions.reserve(static_cast<std::size_t>(target_tokens.rows()));
  for (int i = 0; i < target.rows * target.cols; ++i) target.positions.push_back({i / target.cols, i % target.cols});
  return assemble(target, cond.references);
}

Mat image_tokens(const RasterImage& image, int patch_pixels) { return patchify(encode(image, patch_pixels)).tokens; }

RasterImage tokens_image(const Mat& tokens, int rows, int cols, int patch_pixels) {
  if (tokens.rows() != rows * cols) throw InvalidArgument("token count does not match grid");
  Latent z(rows, cols, static_cast<int>(tokens.cols()));
  for (Eigen::Index i = 0; i < tokens.size(); ++i) z.values[static_cast<std::size_t>(i)] = tokens.data()[i];
  return decode(z, patch_pixels);
}

}  // namespace uniref
