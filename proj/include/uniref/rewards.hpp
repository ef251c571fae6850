#pragma once

#include <cstdint>
#include <fstream>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "uniref/instruction.hpp"
#include "uniref/rasters.hpp"

namespace uniref {

struct RewardWeights {
  double integration = 1.0;
  double consistency = 1.0;
  double quality = 1.0;

  void validate() const;
};

struct RewardBreakdown {
  double integration = 0.0;
  double consistency = 0.0;
  double quality = 0.0;
  double total = 0.0;
  std::string rationale;
};

/// Normalized weighted sum of the three scores, in [0, 10].
double total_reward(const RewardBreakdown& scores, const RewardWeights& weights);

class JudgeUnavailable : public Error {
 public:
  using Error::Error;
};

class MalformedResponse : public Error {
 public:
  MalformedResponse(const std::string& what, std::string body) : Error(what), body_(std::move(body)) {}
  const std::string& body() const { return body_; }

 private:
  std::string body_;
};

/// Scores a candidate image against its references and instruction. `total` is left for the
/// caller to fill from its weights.
class Judge {
 public:
  virtual ~Judge() = default;
  virtual RewardBreakdown judge(const std::vector<RasterImage>& references, const Instruction& instruction,
                                const RasterImage& candidate) = 0;
  virtual std::string kind() const = 0;
};

/// Canvas geometry shared by the synthetic data and the programmatic judge.
struct SceneGeometry {
  int canvas = 32;
  int cell = 16;
};

struct JudgeThresholds {
  double color = 60.0;  // Euclidean RGB distance
  double area = 0.25;   // fraction of the element's pixel count
};

/// One element the candidate is expected to contain: a pixel mask in canvas coordinates and a color.
struct ExpectedElement {
  Cell cell = Cell::TopLeft;
  Rgb color{};
  std::vector<std::pair<int, int>> pixels;  // (row, col)
};

struct ExpectedScene {
  std::vector<ExpectedElement> elements;
  /// Per directive: the element index it must produce, or nullopt for removals.
  std::vector<std::optional<int>> directive_elements;
  /// Per directive: color and cell that must be absent (removals only).
  std::vector<std::optional<ExpectedElement>> removed;
};

/// Derive the expected scene from the references and directives.
ExpectedScene expected_scene(const std::vector<RasterImage>& references, const Instruction& instruction,
                             const SceneGeometry& geometry = {});

/// Exact scorer for synthetic tasks.
class ProgrammaticJudge : public Judge {
 public:
  explicit ProgrammaticJudge(JudgeThresholds thresholds = {}, SceneGeometry geometry = {})
      : thresholds_(thresholds), geometry_(geometry) {}

  RewardBreakdown judge(const std::vector<RasterImage>& references, const Instruction& instruction,
                        const RasterImage& candidate) override;
  std::string kind() const override { return "programmatic"; }

  /// Fraction of directives whose element is detected (removals: absent) in the candidate.
  double recall(const std::vector<RasterImage>& references, const Instruction& instruction,
                const RasterImage& candidate) const;

 private:
  JudgeThresholds thresholds_;
  SceneGeometry geometry_;
};

/// Convenience: judge and fill in the weighted total.
RewardBreakdown score(Judge& judge, const std::vector<RasterImage>& references, const Instruction& instruction,
                      const RasterImage& candidate, const RewardWeights& weights);

struct RewardRecord {
  std::string run_id;
  std::int64_t step = 0;
  std::string prompt_id;
  int group_index = 0;
  RewardBreakdown scores;
  std::optional<double> advantage;
  std::string judge_kind;
  std::string timestamp;  // ISO-8601 UTC
};

std::string to_json_line(const RewardRecord& record);
RewardRecord reward_record_from_json(const std::string& line);
std::string utc_timestamp();

/// Append-only JSON-lines log; appends from concurrent threads are serialized.
class RewardLog {
 public:
  explicit RewardLog(const std::string& path);
  void append(const RewardRecord& record);
  const std::string& path() const { return path_; }

 private:
  std::string path_;
  std::ofstream out_;
  std::mutex mu_;
};

}  // namespace uniref
