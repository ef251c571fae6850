#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "uniref/rasters.hpp"

namespace uniref {

/// 2x2 layout cells of the composition canvas.
enum class Cell { TopLeft = 0, TopRight = 1, BottomLeft = 2, BottomRight = 3 };
inline constexpr int kNumCells = 4;

enum class Action { Place, Recolor, Move, Remove };

/// Fixed eight-color palette; index order matches the COLOR_* tokens.
inline constexpr int kPaletteSize = 8;
const std::array<Rgb, kPaletteSize>& palette();
std::string_view palette_name(int index);
/// Canonical background of every synthetic scene.
inline constexpr Rgb kBackground{30, 30, 30};

/// One structured instruction step.
///   Place:   element of reference `ref_index` goes to `cell`.
///   Recolor: element in `cell` of reference 1 takes palette color `color`.
///   Move:    element in `from_cell` of reference 1 moves to `cell`.
///   Remove:  element in `cell` of reference 1 is erased.
struct Directive {
  Action action = Action::Place;
  int ref_index = 1;
  Cell cell = Cell::TopLeft;
  std::optional<Cell> from_cell;
  std::optional<int> color;
  friend bool operator==(const Directive&, const Directive&) = default;
};

/// Symbolic instruction vocabulary (32 ids). Every directive encodes to exactly three tokens.
namespace vocab {
inline constexpr int kPad = 0;
inline constexpr int kPlace = 1;
inline constexpr int kRecolor = 2;
inline constexpr int kMove = 3;
inline constexpr int kRemove = 4;
inline constexpr int kRefBase = 5;  // REF_1 .. REF_8
inline constexpr int kMaxRefs = 8;
inline constexpr int kCellBase = 13;  // CELL_TL, CELL_TR, CELL_BL, CELL_BR
inline constexpr int kColorBase = 17;  // COLOR_<name> x 8
inline constexpr int kSize = 32;
inline constexpr int kTokensPerDirective = 3;

std::string token_name(int id);
std::optional<int> token_id(std::string_view name);
std::vector<std::string> names();
}  // namespace vocab

struct Instruction {
  std::vector<int> tokens;
  std::vector<Directive> directives;

  /// Largest ref_index used by any directive (0 when empty).
  int max_ref_index() const;
  std::string text() const;
  friend bool operator==(const Instruction&, const Instruction&) = default;
};

std::vector<int> encode_directives(const std::vector<Directive>& directives);
/// Inverse of encode_directives; throws InvalidArgument on malformed token streams.
std::vector<Directive> decode_directives(const std::vector<int>& tokens);
Instruction make_instruction(std::vector<Directive> directives);
Instruction instruction_from_tokens(std::vector<int> tokens);
/// Parse whitespace-separated token names, e.g. "PLACE REF_1 CELL_TL". PAD may be omitted.
Instruction parse_instruction(std::string_view text);

std::string_view cell_name(Cell c);
std::string_view action_name(Action a);
std::optional<Cell> cell_from_name(std::string_view s);
std::optional<Action> action_from_name(std::string_view s);

}  // namespace uniref
