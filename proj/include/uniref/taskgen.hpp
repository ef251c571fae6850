#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "uniref/flowmatch.hpp"
#include "uniref/instruction.hpp"
#include "uniref/rasters.hpp"
#include "uniref/rewards.hpp"

namespace uniref {

enum class Shape { Square, Disc, Triangle };
std::string_view shape_name(Shape s);
std::optional<Shape> shape_from_name(std::string_view name);

/// A shape of even pixel size drawn centered at a pixel-corner point.
struct Element {
  Shape shape = Shape::Square;
  int size = 8;   // bounding box side, even
  int color = 0;  // palette index
  friend bool operator==(const Element&, const Element&) = default;
};

/// Rasterize `e` centered on the pixel corner (center_row, center_col).
void draw_element(RasterImage& canvas, const Element& e, int center_row, int center_col);
int element_pixel_count(const Element& e);

/// Structured description of a generated sample, stored in the manifest.
struct SceneSpec {
  struct Placed {
    Element element;
    int ref_index = 0;  // 1-based source reference (compositions)
    Cell cell = Cell::TopLeft;
    friend bool operator==(const Placed&, const Placed&) = default;
  };
  TaskKind kind = TaskKind::Compose;
  int canvas = 32;
  Rgb background = kBackground;
  std::vector<Placed> elements;  // composition elements, or the edit's source scene
  std::vector<Directive> directives;
  friend bool operator==(const SceneSpec&, const SceneSpec&) = default;
};

struct GeneratedSample {
  TrainingSample sample;
  SceneSpec spec;
};

struct TaskGenConfig {
  int canvas = 32;
  int min_size = 4;
  int max_size = 14;
  std::pair<int, int> k_range{1, 3};
  double edit_fraction = 0.5;
  JudgeThresholds thresholds{};
};

/// Render the references, instruction, and target described by `spec`.
TrainingSample render(const SceneSpec& spec, const std::string& id);

GeneratedSample gen_composition_sample(Rng& rng, std::pair<int, int> k_range, const TaskGenConfig& config = {});
GeneratedSample gen_edit_sample(Rng& rng, const TaskGenConfig& config = {});

struct FilterResult {
  bool accepted = true;
  std::string reason;
};

FilterResult filter_sample(const SceneSpec& spec, const JudgeThresholds& thresholds = {});

/// Draw candidates until `count` pass the filter. Sample i uses a seed derived from (seed, i).
std::vector<GeneratedSample> generate_dataset(std::uint64_t seed, int count, const TaskGenConfig& config = {});
/// Convenience generators for a single task kind.
std::vector<GeneratedSample> generate_kind(std::uint64_t seed, int count, TaskKind kind, const TaskGenConfig& config);

inline constexpr int kDatasetVersion = 1;

struct DatasetManifest {
  int version = kDatasetVersion;
  int patch_pixels = 4;
  std::vector<std::string> vocabulary;
  std::vector<std::string> ids;
};

DatasetManifest write_dataset(const std::vector<GeneratedSample>& samples, const std::string& directory,
                              int patch_pixels = 4);
std::vector<GeneratedSample> read_dataset(const std::string& directory);

std::vector<TrainingSample> training_samples(const std::vector<GeneratedSample>& samples);

}  // namespace uniref
