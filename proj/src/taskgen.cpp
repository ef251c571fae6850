#include "uniref/taskgen.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <iomanip>
#include <sstream>

#include <json.hpp>

namespace uniref {
namespace {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

constexpr std::array<std::string_view, 3> kShapeNames{"square", "disc", "triangle"};

// Doubled-coordinate inside test for the pixel centered at (2r+1, 2c+1).
bool inside(const Element& e, int r, int c, int cr, int cc) {
  const long y = 2L * r + 1 - 2L * cr;
  const long x = 2L * c + 1 - 2L * cc;
  const long s = e.size;
  if (y < -s || y >= s || x < -s || x >= s) return false;
  switch (e.shape) {
    case Shape::Square:
      return true;
    case Shape::Disc:
      return x * x + y * y <= s * s;
    case Shape::Triangle: {
      // Apex (-s, 0), base corners (s, -s) and (s, s), counter-clockwise in (y, x).
      const auto edge = [&](long ay, long ax, long by, long bx) { return (by - ay) * (x - ax) - (bx - ax) * (y - ay); };
      const long e1 = edge(-s, 0, s, -s), e2 = edge(s, -s, s, s), e3 = edge(s, s, -s, 0);
      return (e1 <= 0 && e2 <= 0 && e3 <= 0) || (e1 >= 0 && e2 >= 0 && e3 >= 0);
    }
  }
  return false;
}

std::pair<int, int> cell_center(Cell cell, int canvas) {
  const int half = canvas / 2, i = static_cast<int>(cell);
  return {(i / 2) * half + half / 2, (i % 2) * half + half / 2};
}

int pick_size(Rng& rng, const TaskGenConfig& c) { return 2 * uniform_int(rng, (c.min_size + 1) / 2, c.max_size / 2); }

Element random_element(Rng& rng, const TaskGenConfig& c) {
  Element e;
  e.shape = static_cast<Shape>(uniform_int(rng, 0, 2));
  e.size = pick_size(rng, c);
  e.color = uniform_int(rng, 0, kPaletteSize - 1);
  return e;
}

std::vector<Cell> shuffled_cells(Rng& rng) {
  std::vector<Cell> cells{Cell::TopLeft, Cell::TopRight, Cell::BottomLeft, Cell::BottomRight};
  for (int i = kNumCells - 1; i > 0; --i) std::swap(cells[i], cells[uniform_int(rng, 0, i)]);
  return cells;
}

// Apply edit directives to a cell -> element layout.
std::array<std::optional<Element>, kNumCells> apply_edits(const SceneSpec& spec) {
  std::array<std::optional<Element>, kNumCells> cells;
  for (const auto& p : spec.elements) cells[static_cast<int>(p.cell)] = p.element;
  for (const auto& d : spec.directives) {
    const int dst = static_cast<int>(d.cell);
    switch (d.action) {
      case Action::Recolor:
        if (cells[dst]) cells[dst]->color = *d.color;
        break;
      case Action::Move:
        cells[dst] = cells[static_cast<int>(*d.from_cell)];
        cells[static_cast<int>(*d.from_cell)].reset();
        break;
      case Action::Remove:
        cells[dst].reset();
        break;
      case Action::Place:
        break;
    }
  }
  return cells;
}

ordered_json spec_to_json(const SceneSpec& s) {
  ordered_json j;
  j["kind"] = s.kind == TaskKind::Edit ? "edit" : "compose";
  j["canvas"] = s.canvas;
  j["background"] = {s.background.r, s.background.g, s.background.b};
  j["elements"] = ordered_json::array();
  for (const auto& p : s.elements)
    j["elements"].push_back({{"shape", shape_name(p.element.shape)},
                             {"size", p.element.size},
                             {"color", palette_name(p.element.color)},
                             {"ref", p.ref_index},
                             {"cell", cell_name(p.cell)}});
  return j;
}

int palette_index(std::string_view name) {
  for (int i = 0; i < kPaletteSize; ++i)
    if (palette_name(i) == name) return i;
  throw InvalidArgument("unknown palette color " + std::string(name));
}

SceneSpec spec_from_json(const nlohmann::json& j, const Instruction& ins) {
  SceneSpec s;
  const auto kind = j.at("kind").get<std::string>();
  if (kind != "edit" && kind != "compose") throw InvalidArgument("unknown sample kind " + kind);
  s.kind = kind == "edit" ? TaskKind::Edit : TaskKind::Compose;
  s.canvas = j.at("canvas").get<int>();
  const auto bg = j.at("background").get<std::vector<int>>();
  if (bg.size() != 3) throw InvalidArgument("background must have three channels");
  s.background = Rgb{static_cast<std::uint8_t>(bg[0]), static_cast<std::uint8_t>(bg[1]), static_cast<std::uint8_t>(bg[2])};
  for (const auto& e : j.at("elements")) {
    SceneSpec::Placed p;
    const auto shape = shape_from_name(e.at("shape").get<std::string>());
    if (!shape) throw InvalidArgument("unknown shape " + e.at("shape").get<std::string>());
    p.element = Element{*shape, e.at("size").get<int>(), palette_index(e.at("color").get<std::string>())};
    p.ref_index = e.at("ref").get<int>();
    const auto cell = cell_from_name(e.at("cell").get<std::string>());
    if (!cell) throw InvalidArgument("unknown cell " + e.at("cell").get<std::string>());
    p.cell = *cell;
    s.elements.push_back(p);
  }
  s.directives = ins.directives;
  return s;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw IoError("cannot write " + p.string());
}

const char* kDatasetReadme =
    "# Synthetic multi-reference dataset\n\n"
    "Each record in manifest.json is one training sample: reference images, an instruction as\n"
    "token ids, a structured scene spec, and the target image. Images live in images/ as 8-bit RGB PNG.\n\n"
    "The generator mirrors a four-step data factory:\n\n"
    "- collection: random shapes, sizes, and palette colors are drawn per element;\n"
    "- synthesis: references and targets are rasterized exactly (no anti-aliasing);\n"
    "- filtration: samples with cell collisions, ambiguous colors, or degenerate elements are rejected;\n"
    "- annotation: the instruction is emitted as PLACE/RECOLOR/MOVE/REMOVE token triples.\n\n"
    "Compositions show one centered element per reference; the target places each element in its\n"
    "assigned cell of a 2x2 grid. Edits show one scene; the target applies a single edit.\n";

}  // namespace

std::string_view shape_name(Shape s) { return kShapeNames[static_cast<std::size_t>(s)]; }

std::optional<Shape> shape_from_name(std::string_view name) {
  for (std::size_t i = 0; i < kShapeNames.size(); ++i)
    if (kShapeNames[i] == name) return static_cast<Shape>(i);
  return std::nullopt;
}

void draw_element(RasterImage& canvas, const Element& e, int cr, int cc) {
  if (e.size <= 0 || e.size % 2 != 0) throw InvalidArgument("element size must be positive and even");
  if (e.color < 0 || e.color >= kPaletteSize) throw InvalidArgument("element color outside the palette");
  const int h = e.size / 2;
  const Rgb color = palette()[e.color];
  for (int r = cr - h; r < cr + h; ++r)
    for (int c = cc - h; c < cc + h; ++c)
      if (r >= 0 && r < canvas.height() && c >= 0 && c < canvas.width() && inside(e, r, c, cr, cc))
        canvas.set(r, c, color);
}

int element_pixel_count(const Element& e) {
  int n = 0;
  const int h = e.size / 2;
  for (int r = -h; r < h; ++r)
    for (int c = -h; c < h; ++c) n += inside(e, r, c, 0, 0);
  return n;
}

TrainingSample render(const SceneSpec& spec, const std::string& id) {
  TrainingSample s;
  s.id = id;
  s.kind = spec.kind;
  s.instruction = make_instruction(spec.directives);
  s.target = RasterImage(spec.canvas, spec.canvas, spec.background);
  if (spec.kind == TaskKind::Compose) {
    std::vector<SceneSpec::Placed> by_ref = spec.elements;
    std::sort(by_ref.begin(), by_ref.end(), [](const auto& a, const auto& b) { return a.ref_index < b.ref_index; });
    for (const auto& p : by_ref) {
      RasterImage ref(spec.canvas, spec.canvas, spec.background);
      draw_element(ref, p.element, spec.canvas / 2, spec.canvas / 2);
      s.references.push_back(std::move(ref));
      const auto [r, c] = cell_center(p.cell, spec.canvas);
      draw_element(s.target, p.element, r, c);
    }
  } else {
    RasterImage ref(spec.canvas, spec.canvas, spec.background);
    for (const auto& p : spec.elements) {
      const auto [r, c] = cell_center(p.cell, spec.canvas);
      draw_element(ref, p.element, r, c);
    }
    s.references.push_back(std::move(ref));
    const auto cells = apply_edits(spec);
    for (int i = 0; i < kNumCells; ++i)
      if (cells[i]) {
        const auto [r, c] = cell_center(static_cast<Cell>(i), spec.canvas);
        draw_element(s.target, *cells[i], r, c);
      }
  }
  return s;
}

GeneratedSample gen_composition_sample(Rng& rng, std::pair<int, int> k_range, const TaskGenConfig& config) {
  if (k_range.first < 1 || k_range.second > kNumCells || k_range.first > k_range.second)
    throw InvalidArgument("composition K range must lie within [1, 4]");
  SceneSpec spec;
  spec.kind = TaskKind::Compose;
  spec.canvas = config.canvas;
  const int k = uniform_int(rng, k_range.first, k_range.second);
  const auto cells = shuffled_cells(rng);
  for (int i = 0; i < k; ++i) {
    SceneSpec::Placed p{random_element(rng, config), i + 1, cells[i]};
    spec.elements.push_back(p);
    spec.directives.push_back(Directive{Action::Place, i + 1, cells[i], std::nullopt, std::nullopt});
  }
  return {render(spec, ""), spec};
}

GeneratedSample gen_edit_sample(Rng& rng, const TaskGenConfig& config) {
  SceneSpec spec;
  spec.kind = TaskKind::Edit;
  spec.canvas = config.canvas;
  const int n = uniform_int(rng, 2, 3);
  const auto cells = shuffled_cells(rng);
  for (int i = 0; i < n; ++i) spec.elements.push_back({random_element(rng, config), 1, cells[i]});
  const Cell subject = cells[uniform_int(rng, 0, n - 1)];
  Directive d;
  d.cell = subject;
  switch (uniform_int(rng, 0, 2)) {
    case 0: {
      d.action = Action::Recolor;
      int current = 0;
      for (const auto& p : spec.elements)
        if (p.cell == subject) current = p.element.color;
      int c = uniform_int(rng, 0, kPaletteSize - 2);
      if (c >= current) ++c;
      d.color = c;
      break;
    }
    case 1:
      d.action = Action::Move;
      d.from_cell = subject;
      d.cell = cells[uniform_int(rng, n, kNumCells - 1)];
      break;
    default:
      d.action = Action::Remove;
      break;
  }
  spec.directives.push_back(d);
  return {render(spec, ""), spec};
}

FilterResult filter_sample(const SceneSpec& spec, const JudgeThresholds& thresholds) {
  const int cell = spec.canvas / 2;
  std::set<int> occupied;
  for (const auto& p : spec.elements) {
    if (!occupied.insert(static_cast<int>(p.cell)).second) return {false, "cell collision"};
    if (element_pixel_count(p.element) <= 4) return {false, "degenerate element"};
    if (p.element.size > cell - 2) return {false, "element exceeds its cell"};
  }
  std::vector<int> colors;
  for (const auto& p : spec.elements) colors.push_back(p.element.color);
  if (spec.kind == TaskKind::Edit) {
    for (const auto& d : spec.directives) {
      if (d.action == Action::Place) return {false, "PLACE directive in an edit sample"};
      const int src = static_cast<int>(d.action == Action::Move ? *d.from_cell : d.cell);
      if (!occupied.count(src)) return {false, "edit targets an empty cell"};
      if (d.action == Action::Move) {
        if (occupied.count(static_cast<int>(d.cell))) return {false, "cell collision"};
        occupied.erase(src);
        occupied.insert(static_cast<int>(d.cell));
      }
      if (d.action == Action::Remove) occupied.erase(src);
      if (d.action == Action::Recolor) colors.push_back(*d.color);
    }
  } else {
    std::set<int> refs;
    for (const auto& p : spec.elements) refs.insert(p.ref_index);
    if (refs.size() != spec.elements.size() || (!refs.empty() && (*refs.begin() != 1 || *refs.rbegin() != int(refs.size()))))
      return {false, "reference indices are not contiguous from 1"};
  }
  for (std::size_t i = 0; i < colors.size(); ++i) {
    if (std::sqrt(double(rgb_dist2(palette()[colors[i]], spec.background))) < 2.0 * thresholds.color)
      return {false, "color ambiguity"};
    for (std::size_t j = i + 1; j < colors.size(); ++j)
      if (std::sqrt(double(rgb_dist2(palette()[colors[i]], palette()[colors[j]]))) < 2.0 * thresholds.color)
        return {false, "color ambiguity"};
  }
  return {true, ""};
}

std::vector<GeneratedSample> generate_dataset(std::uint64_t seed, int count, const TaskGenConfig& config) {
  if (count < 0) throw InvalidArgument("sample count must be non-negative");
  std::vector<GeneratedSample> out;
  for (int i = 0; i < count; ++i) {
    for (std::uint64_t attempt = 0;; ++attempt) {
      Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i), attempt));
      const bool edit = uniform01(rng) < config.edit_fraction;
      auto g = edit ? gen_edit_sample(rng, config) : gen_composition_sample(rng, config.k_range, config);
      if (!filter_sample(g.spec, config.thresholds).accepted) continue;
      std::ostringstream id;
      id << (edit ? "e" : "c") << std::setw(6) << std::setfill('0') << i;
      g.sample.id = id.str();
      out.push_back(std::move(g));
      break;
    }
  }
  return out;
}

std::vector<GeneratedSample> generate_kind(std::uint64_t seed, int count, TaskKind kind, const TaskGenConfig& config) {
  TaskGenConfig c = config;
  c.edit_fraction = kind == TaskKind::Edit ? 1.0 : 0.0;
  return generate_dataset(seed, count, c);
}

DatasetManifest write_dataset(const std::vector<GeneratedSample>& samples, const std::string& directory,
                              int patch_pixels) {
  const fs::path dir(directory);
  fs::create_directories(dir / "images");
  DatasetManifest m;
  m.patch_pixels = patch_pixels;
  m.vocabulary = vocab::names();
  ordered_json records = ordered_json::array();
  std::set<std::string> seen;
  for (const auto& g : samples) {
    const auto& s = g.sample;
    if (s.id.empty()) throw InvalidArgument("sample without an id");
    if (!seen.insert(s.id).second) throw InvalidArgument("duplicate sample id " + s.id);
    ordered_json r;
    r["id"] = s.id;
    r["kind"] = s.kind == TaskKind::Edit ? "edit" : "compose";
    r["references"] = ordered_json::array();
    for (std::size_t k = 0; k < s.references.size(); ++k) {
      const std::string name = s.id + "_ref" + std::to_string(k + 1) + ".png";
      write_png(s.references[k], (dir / "images" / name).string());
      r["references"].push_back(name);
    }
    r["instruction"] = s.instruction.tokens;
    r["instruction_text"] = s.instruction.text();
    r["spec"] = spec_to_json(g.spec);
    const std::string target = s.id + "_target.png";
    write_png(s.target, (dir / "images" / target).string());
    r["target"] = target;
    records.push_back(std::move(r));
    m.ids.push_back(s.id);
  }
  write_text(dir / "README.md", kDatasetReadme);
  ordered_json j;
  j["version"] = m.version;
  j["patch_pixels"] = m.patch_pixels;
  j["vocabulary"] = m.vocabulary;
  j["records"] = std::move(records);
  write_text(dir / "manifest.json", j.dump(1) + "\n");
  return m;
}

std::vector<GeneratedSample> read_dataset(const std::string& directory) {
  const fs::path dir(directory);
  const fs::path manifest = dir / "manifest.json";
  std::ifstream in(manifest);
  if (!in) throw IoError("dataset manifest not found: " + manifest.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("manifest " + manifest.string() + " is not valid JSON: " + e.what());
  }
  try {
    const int version = j.at("version").get<int>();
    if (version != kDatasetVersion)
      throw InvalidArgument("dataset version " + std::to_string(version) + " is not supported (expected " +
                            std::to_string(kDatasetVersion) + ")");
    if (j.at("vocabulary").get<std::vector<std::string>>() != vocab::names())
      throw InvalidArgument("dataset vocabulary differs from this build's vocabulary");
    std::vector<GeneratedSample> out;
    std::set<std::string> seen;
    const auto load = [&](const std::string& name) {
      const fs::path p = dir / "images" / name;
      if (!fs::exists(p)) throw IoError("manifest references missing file " + p.string());
      return read_png(p.string());
    };
    for (const auto& r : j.at("records")) {
      GeneratedSample g;
      auto& s = g.sample;
      s.id = r.at("id").get<std::string>();
      if (!seen.insert(s.id).second) throw InvalidArgument("duplicate sample id " + s.id + " in manifest");
      s.instruction = instruction_from_tokens(r.at("instruction").get<std::vector<int>>());
      g.spec = spec_from_json(r.at("spec"), s.instruction);
      s.kind = g.spec.kind;
      for (const auto& name : r.at("references")) s.references.push_back(load(name.get<std::string>()));
      s.target = load(r.at("target").get<std::string>());
      out.push_back(std::move(g));
    }
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument("malformed manifest " + manifest.string() + ": " + e.what());
  }
}

std::vector<TrainingSample> training_samples(const std::vector<GeneratedSample>& samples) {
  std::vector<TrainingSample> out;
  out.reserve(samples.size());
  for (const auto& g : samples) out.push_back(g.sample);
  return out;
}

}  // namespace uniref
