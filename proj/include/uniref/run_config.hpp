#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "uniref/backbone.hpp"
#include "uniref/evaluate.hpp"
#include "uniref/flowmatch.hpp"
#include "uniref/msgrpo.hpp"
#include "uniref/remote_judge.hpp"
#include "uniref/taskgen.hpp"

namespace uniref {

/// Raised when a configuration document does not match the schema.
class ConfigError : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};

/// The default document. Its shape is the schema: every leaf key and its JSON type.
nlohmann::json default_config();
/// JSON Schema (draft 2020-12) describing default_config().
nlohmann::json config_schema();

/// Recursively overlay `patch` onto `base`. Unknown keys and type mismatches raise ConfigError
/// naming the dotted path.
void merge_config(nlohmann::json& base, const nlohmann::json& patch, const std::string& prefix = "");
/// Apply one `a.b.c=value` override. The value is parsed as JSON when possible, else taken as a string.
void apply_override(nlohmann::json& config, const std::string& assignment);
/// Dotted paths of every leaf key.
std::vector<std::string> config_leaf_paths();

/// Fully resolved run configuration.
struct RunConfig {
  nlohmann::json doc;

  std::uint64_t seed() const;
  std::string out_dir() const;
  int workers() const;
  std::string data_path(const std::string& key) const;

  ModelConfig model() const;
  SftConfig sft() const;
  RlConfig rl() const;
  TaskGenConfig gen() const;
  RewardWeights weights() const;
  JudgeThresholds thresholds() const;
  RemoteJudgeConfig remote_judge() const;
  SampleOptions sample() const;
  EvalOptions eval() const;

  /// Raise ConfigError unless every named key holds a non-empty string.
  void require(const std::vector<std::string>& dotted_paths) const;
};

/// defaults <- file (if non-empty) <- overrides, validated.
RunConfig load_run_config(const std::string& file, const std::vector<std::string>& overrides);

/// Write the resolved document as `config.json` in `directory`.
void write_resolved_config(const RunConfig& config, const std::string& directory);

}  // namespace uniref
