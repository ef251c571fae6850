#include "uniref/rewards.hpp"

#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <map>
#include <set>

#include <json.hpp>

namespace uniref {
namespace {

using Pixel = std::pair<int, int>;

std::pair<int, int> cell_origin(Cell c, const SceneGeometry& g) {
  const int i = static_cast<int>(c);
  return {(i / 2) * g.cell, (i % 2) * g.cell};
}

void check_canvas(const RasterImage& img, const SceneGeometry& g, const char* what) {
  if (img.height() != g.canvas || img.width() != g.canvas)
    throw InvalidArgument(std::string(what) + " is " + std::to_string(img.height()) + "x" +
                          std::to_string(img.width()) + ", expected " + std::to_string(g.canvas) + "x" +
                          std::to_string(g.canvas));
}

// Non-background pixels of a rectangle, shifted by (dr, dc), with their most frequent color.
ExpectedElement extract(const RasterImage& img, int r0, int c0, int size, int dr, int dc) {
  ExpectedElement e;
  std::map<std::tuple<int, int, int>, int> counts;
  for (int r = r0; r < r0 + size; ++r)
    for (int c = c0; c < c0 + size; ++c) {
      const Rgb p = img.at(r, c);
      if (p == kBackground) continue;
      e.pixels.emplace_back(r + dr, c + dc);
      ++counts[{p.r, p.g, p.b}];
    }
  int best = -1;
  for (const auto& [k, n] : counts)
    if (n > best) {
      best = n;
      e.color = Rgb{static_cast<std::uint8_t>(std::get<0>(k)), static_cast<std::uint8_t>(std::get<1>(k)),
                    static_cast<std::uint8_t>(std::get<2>(k))};
    }
  return e;
}

double dist(Rgb a, Rgb b) { return std::sqrt(double(rgb_dist2(a, b))); }

// Candidate pixels inside the element's cell that are within the color threshold.
std::vector<Pixel> matches(const RasterImage& cand, Cell cell, Rgb color, double tau, const SceneGeometry& g) {
  const auto [r0, c0] = cell_origin(cell, g);
  std::vector<Pixel> out;
  for (int r = r0; r < r0 + g.cell; ++r)
    for (int c = c0; c < c0 + g.cell; ++c)
      if (dist(cand.at(r, c), color) <= tau) out.emplace_back(r, c);
  return out;
}

bool present(std::size_t matched, std::size_t expected, double area) {
  const double need = std::max(1.0, std::ceil(area * double(expected)));
  return double(matched) >= need;
}

}  // namespace

void RewardWeights::validate() const {
  if (!(integration >= 0.0) || !(consistency >= 0.0) || !(quality >= 0.0))
    throw InvalidArgument("reward weights must be non-negative");
  if (!(integration + consistency + quality > 0.0)) throw InvalidArgument("reward weights must not all be zero");
}

double total_reward(const RewardBreakdown& s, const RewardWeights& w) {
  w.validate();
  return (w.integration * s.integration + w.consistency * s.consistency + w.quality * s.quality) /
         (w.integration + w.consistency + w.quality);
}

ExpectedScene expected_scene(const std::vector<RasterImage>& refs, const Instruction& instruction,
                             const SceneGeometry& g) {
  for (const auto& r : refs) check_canvas(r, g, "reference");
  if (instruction.max_ref_index() > static_cast<int>(refs.size()))
    throw InvalidArgument("instruction names reference " + std::to_string(instruction.max_ref_index()) + " but " +
                          std::to_string(refs.size()) + " were supplied");

  bool edits = false;
  for (const auto& d : instruction.directives) edits = edits || d.action != Action::Place;
  if (edits && refs.empty()) throw InvalidArgument("edit directives need a reference scene");

  // Scene state per cell; edit tasks start from the first reference's layout.
  std::array<std::optional<ExpectedElement>, kNumCells> scene;
  if (edits)
    for (int c = 0; c < kNumCells; ++c) {
      const auto [r0, c0] = cell_origin(static_cast<Cell>(c), g);
      auto e = extract(refs[0], r0, c0, g.cell, 0, 0);
      e.cell = static_cast<Cell>(c);
      if (!e.pixels.empty()) scene[c] = std::move(e);
    }

  ExpectedScene out;
  std::vector<std::optional<Cell>> produced;
  for (const auto& d : instruction.directives) {
    const int dst = static_cast<int>(d.cell);
    std::optional<ExpectedElement> removed;
    switch (d.action) {
      case Action::Place: {
        const int off = (g.canvas - g.cell) / 2;
        const auto [r0, c0] = cell_origin(d.cell, g);
        auto e = extract(refs[d.ref_index - 1], off, off, g.cell, r0 - off, c0 - off);
        e.cell = d.cell;
        scene[dst] = std::move(e);
        produced.push_back(d.cell);
        break;
      }
      case Action::Recolor:
        if (!scene[dst]) scene[dst] = ExpectedElement{d.cell, {}, {}};
        scene[dst]->color = palette()[*d.color];
        produced.push_back(d.cell);
        break;
      case Action::Move: {
        const int src = static_cast<int>(*d.from_cell);
        ExpectedElement e = scene[src].value_or(ExpectedElement{});
        const auto [sr, sc] = cell_origin(*d.from_cell, g);
        const auto [tr, tc] = cell_origin(d.cell, g);
        for (auto& p : e.pixels) p = {p.first - sr + tr, p.second - sc + tc};
        e.cell = d.cell;
        scene[src].reset();
        scene[dst] = std::move(e);
        produced.push_back(d.cell);
        break;
      }
      case Action::Remove:
        removed = scene[dst].value_or(ExpectedElement{d.cell, {}, {}});
        scene[dst].reset();
        produced.push_back(std::nullopt);
        break;
    }
    out.removed.push_back(std::move(removed));
  }
  // Map each directive to the final element occupying its cell.
  std::array<int, kNumCells> index{-1, -1, -1, -1};
  for (int c = 0; c < kNumCells; ++c)
    if (scene[c]) {
      index[c] = static_cast<int>(out.elements.size());
      out.elements.push_back(*scene[c]);
    }
  for (const auto& p : produced)
    out.directive_elements.push_back(p && index[static_cast<int>(*p)] >= 0
                                         ? std::optional<int>(index[static_cast<int>(*p)])
                                         : std::nullopt);
  return out;
}

RewardBreakdown ProgrammaticJudge::judge(const std::vector<RasterImage>& refs, const Instruction& instruction,
                                         const RasterImage& cand) {
  check_canvas(cand, geometry_, "candidate");
  const ExpectedScene scene = expected_scene(refs, instruction, geometry_);
  const auto& g = geometry_;
  const double tau = thresholds_.color;

  std::vector<std::vector<Pixel>> matched;
  std::vector<bool> detected;
  for (const auto& e : scene.elements) {
    matched.push_back(matches(cand, e.cell, e.color, tau, g));
    detected.push_back(present(matched.back().size(), e.pixels.size(), thresholds_.area));
  }

  RewardBreakdown out;
  const std::size_t n_dir = instruction.directives.size();
  std::size_t hits = 0;
  for (std::size_t i = 0; i < n_dir; ++i) {
    if (const auto& rm = scene.removed[i]) {
      const auto m = matches(cand, rm->cell, rm->color, tau, g);
      hits += rm->pixels.empty() || !present(m.size(), rm->pixels.size(), thresholds_.area);
    } else if (const auto idx = scene.directive_elements[i]) {
      hits += detected[*idx];
    }
  }
  out.integration = n_dir == 0 ? 10.0 : 10.0 * double(hits) / double(n_dir);

  if (scene.elements.empty()) {
    out.consistency = 10.0;
  } else {
    double err = 0.0;
    for (std::size_t i = 0; i < scene.elements.size(); ++i) {
      if (!detected[i]) {
        err += 1.0;
        continue;
      }
      const auto& e = scene.elements[i];
      const std::set<Pixel> mask(e.pixels.begin(), e.pixels.end());
      std::size_t inter = 0;
      double color_err = 0.0;
      for (const auto& p : matched[i]) {
        inter += mask.count(p);
        color_err += dist(cand.at(p.first, p.second), e.color) / tau;
      }
      color_err /= double(matched[i].size());
      const double iou = double(inter) / double(mask.size() + matched[i].size() - inter);
      err += 0.5 * (color_err + (1.0 - iou));
    }
    out.consistency = 10.0 * (1.0 - err / double(scene.elements.size()));
  }

  std::vector<char> covered(std::size_t(g.canvas) * g.canvas, 0);
  for (const auto& e : scene.elements)
    for (const auto& [r, c] : e.pixels)
      if (r >= 0 && r < g.canvas && c >= 0 && c < g.canvas) covered[std::size_t(r) * g.canvas + c] = 1;
  double dev = 0.0;
  std::size_t count = 0;
  const double norm = 255.0 * std::sqrt(3.0);
  for (int r = 0; r < g.canvas; ++r)
    for (int c = 0; c < g.canvas; ++c)
      if (!covered[std::size_t(r) * g.canvas + c]) {
        dev += dist(cand.at(r, c), kBackground) / norm;
        ++count;
      }
  out.quality = count == 0 ? 10.0 : 10.0 * (1.0 - dev / double(count));
  return out;
}

double ProgrammaticJudge::recall(const std::vector<RasterImage>& refs, const Instruction& instruction,
                                 const RasterImage& cand) const {
  ProgrammaticJudge copy(*this);
  return copy.judge(refs, instruction, cand).integration / 10.0;
}

RewardBreakdown score(Judge& judge, const std::vector<RasterImage>& refs, const Instruction& instruction,
                      const RasterImage& candidate, const RewardWeights& weights) {
  RewardBreakdown b = judge.judge(refs, instruction, candidate);
  b.total = total_reward(b, weights);
  return b;
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t tt = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&tt, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string to_json_line(const RewardRecord& r) {
  nlohmann::ordered_json j;
  j["run_id"] = r.run_id;
  j["step"] = r.step;
  j["prompt_id"] = r.prompt_id;
  j["group_index"] = r.group_index;
  j["scores"] = {{"integration", r.scores.integration},
                 {"consistency", r.scores.consistency},
                 {"quality", r.scores.quality}};
  if (!r.scores.rationale.empty()) j["scores"]["rationale"] = r.scores.rationale;
  j["total"] = r.scores.total;
  j["advantage"] = r.advantage ? nlohmann::ordered_json(*r.advantage) : nlohmann::ordered_json(nullptr);
  j["judge_kind"] = r.judge_kind;
  j["timestamp"] = r.timestamp;
  return j.dump();
}

RewardRecord reward_record_from_json(const std::string& line) {
  try {
    const auto j = nlohmann::json::parse(line);
    RewardRecord r;
    r.run_id = j.at("run_id").get<std::string>();
    r.step = j.at("step").get<std::int64_t>();
    r.prompt_id = j.at("prompt_id").get<std::string>();
    r.group_index = j.at("group_index").get<int>();
    const auto& s = j.at("scores");
    r.scores.integration = s.at("integration").get<double>();
    r.scores.consistency = s.at("consistency").get<double>();
    r.scores.quality = s.at("quality").get<double>();
    r.scores.rationale = s.value("rationale", std::string());
    r.scores.total = j.at("total").get<double>();
    if (!j.at("advantage").is_null()) r.advantage = j.at("advantage").get<double>();
    r.judge_kind = j.at("judge_kind").get<std::string>();
    r.timestamp = j.at("timestamp").get<std::string>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("malformed reward record: ") + e.what());
  }
}

RewardLog::RewardLog(const std::string& path) : path_(path) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  out_.open(path, std::ios::app);
  if (!out_) throw IoError("cannot open reward log " + path);
}

void RewardLog::append(const RewardRecord& record) {
  const std::string line = to_json_line(record) + '\n';
  std::lock_guard lock(mu_);
  out_ << line << std::flush;
  if (!out_) throw IoError("failed to append to reward log " + path_);
}

}  // namespace uniref
