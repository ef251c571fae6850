#include "uniref/instruction.hpp"

#include <algorithm>
#include <sstream>

namespace uniref {
namespace {

constexpr std::array<std::string_view, kPaletteSize> kPaletteNames = {"RED",     "GREEN", "BLUE",  "YELLOW",
                                                                     "MAGENTA", "CYAN",  "WHITE", "GRAY"};
constexpr std::array<std::string_view, kNumCells> kCellNames = {"TL", "TR", "BL", "BR"};
constexpr std::array<std::string_view, 4> kActionNames = {"PLACE", "RECOLOR", "MOVE", "REMOVE"};

int cell_token(Cell c) { return vocab::kCellBase + static_cast<int>(c); }

Cell token_cell(int id) {
  if (id < vocab::kCellBase || id >= vocab::kCellBase + kNumCells)
    throw InvalidArgument("expected a CELL token, got " + vocab::token_name(id));
  return static_cast<Cell>(id - vocab::kCellBase);
}

}  // namespace

const std::array<Rgb, kPaletteSize>& palette() {
  static const std::array<Rgb, kPaletteSize> p = {{{225, 30, 30},
                                                   {30, 225, 30},
                                                   {30, 30, 225},
                                                   {225, 225, 30},
                                                   {225, 30, 225},
                                                   {30, 225, 225},
                                                   {225, 225, 225},
                                                   {128, 128, 128}}};
  return p;
}

std::string_view palette_name(int index) { return kPaletteNames.at(static_cast<std::size_t>(index)); }

std::string_view cell_name(Cell c) { return kCellNames[static_cast<std::size_t>(c)]; }
std::string_view action_name(Action a) { return kActionNames[static_cast<std::size_t>(a)]; }

std::optional<Cell> cell_from_name(std::string_view s) {
  for (int i = 0; i < kNumCells; ++i)
    if (kCellNames[i] == s) return static_cast<Cell>(i);
  return std::nullopt;
}

std::optional<Action> action_from_name(std::string_view s) {
  for (int i = 0; i < 4; ++i)
    if (kActionNames[i] == s) return static_cast<Action>(i);
  return std::nullopt;
}

namespace vocab {

std::string token_name(int id) {
  if (id == kPad) return "PAD";
  if (id >= kPlace && id <= kRemove) return std::string(kActionNames[id - kPlace]);
  if (id >= kRefBase && id < kRefBase + kMaxRefs) return "REF_" + std::to_string(id - kRefBase + 1);
  if (id >= kCellBase && id < kCellBase + kNumCells) return "CELL_" + std::string(kCellNames[id - kCellBase]);
  if (id >= kColorBase && id < kColorBase + kPaletteSize) return "COLOR_" + std::string(kPaletteNames[id - kColorBase]);
  if (id >= 0 && id < kSize) return "RESERVED_" + std::to_string(id);
  throw InvalidArgument("token id " + std::to_string(id) + " outside vocabulary");
}

std::optional<int> token_id(std::string_view name) {
  for (int id = 0; id < kSize; ++id)
    if (token_name(id) == name) return id;
  return std::nullopt;
}

std::vector<std::string> names() {
  std::vector<std::string> out;
  for (int id = 0; id < kSize; ++id) out.push_back(token_name(id));
  return out;
}

}  // namespace vocab

int Instruction::max_ref_index() const {
  int m = 0;
  for (const auto& d : directives) m = std::max(m, d.ref_index);
  return m;
}

std::string Instruction::text() const {
  std::ostringstream os;
  bool first = true;
  for (int id : tokens) {
    if (id == vocab::kPad) continue;
    if (!first) os << ' ';
    os << vocab::token_name(id);
    first = false;
  }
  return os.str();
}

std::vector<int> encode_directives(const std::vector<Directive>& directives) {
  std::vector<int> t;
  for (const auto& d : directives) {
    switch (d.action) {
      case Action::Place:
        if (d.ref_index < 1 || d.ref_index > vocab::kMaxRefs)
          throw InvalidArgument("PLACE reference index " + std::to_string(d.ref_index) + " out of range");
        t.insert(t.end(), {vocab::kPlace, vocab::kRefBase + d.ref_index - 1, cell_token(d.cell)});
        break;
      case Action::Recolor:
        if (!d.color || *d.color < 0 || *d.color >= kPaletteSize)
          throw InvalidArgument("RECOLOR needs a palette color");
        t.insert(t.end(), {vocab::kRecolor, cell_token(d.cell), vocab::kColorBase + *d.color});
        break;
      case Action::Move:
        if (!d.from_cell) throw InvalidArgument("MOVE needs a source cell");
        t.insert(t.end(), {vocab::kMove, cell_token(*d.from_cell), cell_token(d.cell)});
        break;
      case Action::Remove:
        t.insert(t.end(), {vocab::kRemove, cell_token(d.cell), vocab::kPad});
        break;
    }
  }
  return t;
}

std::vector<Directive> decode_directives(const std::vector<int>& tokens) {
  if (tokens.size() % vocab::kTokensPerDirective != 0)
    throw InvalidArgument("instruction length " + std::to_string(tokens.size()) + " is not a multiple of 3");
  std::vector<Directive> out;
  for (std::size_t i = 0; i < tokens.size(); i += 3) {
    const int a = tokens[i], b = tokens[i + 1], c = tokens[i + 2];
    Directive d;
    switch (a) {
      case vocab::kPlace:
        if (b < vocab::kRefBase || b >= vocab::kRefBase + vocab::kMaxRefs)
          throw InvalidArgument("PLACE expects a REF token, got " + vocab::token_name(b));
        d.action = Action::Place;
        d.ref_index = b - vocab::kRefBase + 1;
        d.cell = token_cell(c);
        break;
      case vocab::kRecolor:
        if (c < vocab::kColorBase || c >= vocab::kColorBase + kPaletteSize)
          throw InvalidArgument("RECOLOR expects a COLOR token, got " + vocab::token_name(c));
        d.action = Action::Recolor;
        d.cell = token_cell(b);
        d.color = c - vocab::kColorBase;
        break;
      case vocab::kMove:
        d.action = Action::Move;
        d.from_cell = token_cell(b);
        d.cell = token_cell(c);
        break;
      case vocab::kRemove:
        if (c != vocab::kPad) throw InvalidArgument("REMOVE takes a single CELL argument");
        d.action = Action::Remove;
        d.cell = token_cell(b);
        break;
      default:
        throw InvalidArgument("expected an action token, got " + vocab::token_name(a));
    }
    out.push_back(d);
  }
  return out;
}

Instruction make_instruction(std::vector<Directive> directives) {
  Instruction ins;
  ins.tokens = encode_directives(directives);
  ins.directives = std::move(directives);
  return ins;
}

Instruction instruction_from_tokens(std::vector<int> tokens) {
  Instruction ins;
  ins.directives = decode_directives(tokens);
  ins.tokens = std::move(tokens);
  return ins;
}

Instruction parse_instruction(std::string_view text) {
  std::istringstream is{std::string(text)};
  std::vector<int> ids;
  std::string word;
  while (is >> word) {
    const auto id = vocab::token_id(word);
    if (!id) throw InvalidArgument("unknown instruction token '" + word + "'");
    ids.push_back(*id);
    if (*id == vocab::kRemove) {
      std::string cell;
      if (!(is >> cell)) throw InvalidArgument("REMOVE is missing its cell");
      const auto cid = vocab::token_id(cell);
      if (!cid) throw InvalidArgument("unknown instruction token '" + cell + "'");
      ids.push_back(*cid);
      // PAD is implicit after REMOVE; accept an explicit one too.
      const auto pos = is.tellg();
      std::string maybe_pad;
      if (is >> maybe_pad && maybe_pad != "PAD") {
        is.clear();
        is.seekg(pos);
      }
      ids.push_back(vocab::kPad);
    }
  }
  return instruction_from_tokens(std::move(ids));
}

}  // namespace uniref
