#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "uniref/backbone.hpp"
#include "uniref/flowmatch.hpp"
#include "uniref/rewards.hpp"
#include "uniref/sampler.hpp"

namespace uniref {

struct EvalRow {
  std::string id;
  TaskKind kind = TaskKind::Compose;
  int num_references = 0;
  double mse = 0.0;     // pixel MSE on [0, 1] intensities
  double recall = 0.0;  // fraction of directives realized
  RewardBreakdown scores;
  std::string error;    // non-empty when the sample failed
};

struct EvalAggregate {
  std::size_t count = 0;
  double mean_reward = 0.0;
  double recall = 0.0;
  double mse = 0.0;
  friend bool operator==(const EvalAggregate&, const EvalAggregate&) = default;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  EvalAggregate overall;
  std::map<int, EvalAggregate> by_k;
  std::map<std::string, EvalAggregate> by_kind;
  std::size_t failures = 0;
};

struct EvalOptions {
  SampleOptions sampling{};  // deterministic by default
  std::uint64_t seed = 0;
  int workers = 1;
  RewardWeights weights{};
  JudgeThresholds thresholds{};
};

std::string kind_name(TaskKind k);

double pixel_mse(const RasterImage& a, const RasterImage& b);

/// Sample every prompt with `policy` and score it. Without a policy the ground-truth targets are
/// scored instead (oracle ceiling).
EvalReport evaluate(const std::optional<PolicyView>& policy, const std::vector<TrainingSample>& dataset, Judge& judge,
                    const EvalOptions& options);

/// Aggregates recomputed from successful rows.
void aggregate(EvalReport& report);

std::string report_json(const EvalReport& report);
std::string report_table(const EvalReport& report);
/// Writes report.json and report.txt into `directory`.
void write_report(const EvalReport& report, const std::string& directory);

}  // namespace uniref
