#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include <json.hpp>

#include "uniref/rewards.hpp"
#include "uniref/taskgen.hpp"

using namespace uniref;
namespace fs = std::filesystem;

namespace {

std::pair<int, int> cell_origin(Cell c) { return {(static_cast<int>(c) / 2) * 16, (static_cast<int>(c) % 2) * 16}; }

bool cell_is_background(const RasterImage& img, Cell c) {
  const auto [r0, c0] = cell_origin(c);
  for (int r = r0; r < r0 + 16; ++r)
    for (int col = c0; col < c0 + 16; ++col)
      if (!(img.at(r, col) == kBackground)) return false;
  return true;
}

std::set<std::pair<int, int>> pixels_of(const RasterImage& img, Rgb color) {
  std::set<std::pair<int, int>> out;
  for (int r = 0; r < img.height(); ++r)
    for (int c = 0; c < img.width(); ++c)
      if (img.at(r, c) == color) out.insert({r, c});
  return out;
}

fs::path fresh_dir(const std::string& name) {
  const auto d = fs::temp_directory_path() / name;
  fs::remove_all(d);
  return d;
}

}  // namespace

TEST_CASE("single red square composition") {
  SceneSpec spec;
  spec.elements = {{{Shape::Square, 8, 0}, 1, Cell::BottomLeft}};
  spec.directives = {{Action::Place, 1, Cell::BottomLeft, {}, {}}};
  REQUIRE(filter_sample(spec).accepted);
  const auto s = render(spec, "c");
  REQUIRE(s.references.size() == 1);
  CHECK(pixels_of(s.references[0], palette()[0]).size() == 64);
  const auto red = pixels_of(s.target, palette()[0]);
  CHECK(red.size() == 64);
  for (auto [r, c] : red) {
    CHECK(r >= 16);
    CHECK(c < 16);
  }
  for (Cell c : {Cell::TopLeft, Cell::TopRight, Cell::BottomRight}) CHECK(cell_is_background(s.target, c));
}

TEST_CASE("four-reference composition scores perfectly") {
  SceneSpec spec;
  const Cell cells[] = {Cell::TopLeft, Cell::TopRight, Cell::BottomLeft, Cell::BottomRight};
  for (int i = 0; i < 4; ++i) {
    spec.elements.push_back({{static_cast<Shape>(i % 3), 10, i * 2}, i + 1, cells[i]});
    spec.directives.push_back({Action::Place, i + 1, cells[i], {}, {}});
  }
  REQUIRE(filter_sample(spec).accepted);
  const auto s = render(spec, "c4");
  ProgrammaticJudge judge;
  const auto b = judge.judge(s.references, s.instruction, s.target);
  CHECK(b.integration == 10.0);
  CHECK(b.consistency == 10.0);
  CHECK(b.quality == 10.0);

  Rng r1(99), r2(99);
  const auto a = gen_composition_sample(r1, {4, 4});
  const auto c = gen_composition_sample(r2, {4, 4});
  CHECK(a.sample == c.sample);
  CHECK(a.spec == c.spec);
  CHECK(a.sample.num_references() == 4);
}

TEST_CASE("edit operations") {
  SceneSpec base;
  base.kind = TaskKind::Edit;
  base.elements = {{{Shape::Square, 8, 0}, 1, Cell::TopLeft}, {{Shape::Disc, 10, 1}, 1, Cell::TopRight}};

  auto recolor = base;
  recolor.directives = {{Action::Recolor, 1, Cell::TopLeft, {}, 2}};
  const auto rs = render(recolor, "r");
  CHECK(pixels_of(rs.target, palette()[2]) == pixels_of(rs.references[0], palette()[0]));
  CHECK(pixels_of(rs.target, palette()[0]).empty());
  CHECK(pixels_of(rs.target, palette()[1]) == pixels_of(rs.references[0], palette()[1]));

  auto remove = base;
  remove.directives = {{Action::Remove, 1, Cell::TopRight, {}, {}}};
  CHECK(cell_is_background(render(remove, "x").target, Cell::TopRight));

  auto move = base;
  move.directives = {{Action::Move, 1, Cell::BottomRight, Cell::TopLeft, {}}};
  const auto ms = render(move, "m");
  CHECK(cell_is_background(ms.target, Cell::TopLeft));
  std::set<std::pair<int, int>> shifted;
  for (auto [r, c] : pixels_of(ms.references[0], palette()[0])) shifted.insert({r + 16, c + 16});
  CHECK(pixels_of(ms.target, palette()[0]) == shifted);
}

TEST_CASE("filter rules") {
  SceneSpec ok;
  ok.elements = {{{Shape::Square, 8, 0}, 1, Cell::TopLeft}, {{Shape::Disc, 8, 2}, 2, Cell::TopRight}};
  ok.directives = {{Action::Place, 1, Cell::TopLeft, {}, {}}, {Action::Place, 2, Cell::TopRight, {}, {}}};
  CHECK(filter_sample(ok).accepted);

  auto collide = ok;
  collide.elements[1].cell = Cell::TopLeft;
  collide.directives[1].cell = Cell::TopLeft;
  CHECK(filter_sample(collide).reason == "cell collision");

  auto same_color = ok;
  same_color.elements[1].element.color = 0;
  CHECK(filter_sample(same_color).reason == "color ambiguity");

  auto tiny = ok;
  tiny.elements[0].element = {Shape::Triangle, 2, 0};
  CHECK(filter_sample(tiny).reason == "degenerate element");
}

TEST_CASE("generated datasets: determinism, vocabulary closure and judge consistency") {
  const auto a = generate_dataset(17, 300);
  const auto b = generate_dataset(17, 300);
  REQUIRE(a.size() == 300);
  ProgrammaticJudge judge;
  std::set<std::string> ids;
  int edits = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto& s = a[i].sample;
    CHECK(s == b[i].sample);
    CHECK(filter_sample(a[i].spec).accepted);
    ids.insert(s.id);
    edits += s.kind == TaskKind::Edit;
    for (int t : s.instruction.tokens) CHECK((t >= 0 && t < vocab::kSize));
    CHECK(decode_directives(encode_directives(s.instruction.directives)) == s.instruction.directives);
    CHECK(s.instruction.max_ref_index() <= s.num_references());
    const auto sc = judge.judge(s.references, s.instruction, s.target);
    CHECK(sc.integration == 10.0);
    CHECK(sc.consistency == 10.0);
    CHECK(sc.quality == 10.0);
  }
  CHECK(ids.size() == 300);
  CHECK(edits > 100);
  CHECK(edits < 200);
  CHECK(generate_dataset(18, 5)[0].sample != a[0].sample);
}

TEST_CASE("dataset write/read round trip and validation") {
  const auto dir = fresh_dir("uniref_test_dataset");
  const auto data = generate_dataset(21, 100);
  const auto manifest = write_dataset(data, dir.string());
  CHECK(manifest.ids.size() == 100);
  CHECK(fs::exists(dir / "README.md"));
  const auto back = read_dataset(dir.string());
  REQUIRE(back.size() == 100);
  for (std::size_t i = 0; i < 100; ++i) {
    CHECK(back[i].sample == data[i].sample);
    CHECK(back[i].spec == data[i].spec);
  }

  const auto empty = fresh_dir("uniref_test_dataset_empty");
  write_dataset({}, empty.string());
  CHECK(read_dataset(empty.string()).empty());

  const std::string victim = data[3].sample.id + "_target.png";
  fs::remove(dir / "images" / victim);
  try {
    read_dataset(dir.string());
    FAIL("expected rejection");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find(victim) != std::string::npos);
  }

  const auto dup = fresh_dir("uniref_test_dataset_dup");
  write_dataset({data[0], data[1]}, dup.string());
  auto j = nlohmann::json::parse(std::ifstream(dup / "manifest.json"));
  j["records"][1]["id"] = j["records"][0]["id"];
  std::ofstream(dup / "manifest.json") << j.dump();
  CHECK_THROWS(read_dataset(dup.string()));
  j["version"] = 99;
  std::ofstream(dup / "manifest.json") << j.dump();
  CHECK_THROWS(read_dataset(dup.string()));
}
