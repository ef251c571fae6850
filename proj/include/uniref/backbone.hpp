#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "uniref/autodiff.hpp"
#include "uniref/common.hpp"
#include "uniref/instruction.hpp"
#include "uniref/packing.hpp"

namespace uniref {

struct ModelConfig {
  int layers = 4;
  int width = 64;
  int heads = 4;
  int vocab = vocab::kSize;
  int channels = 48;  // 3 * patch_pixels^2
  int ff_mult = 4;
  int max_segments = 1 + vocab::kMaxRefs;
  int max_instruction = vocab::kTokensPerDirective * vocab::kMaxRefs;
  double rope_base = 16.0;
  int rope_heads = 2;  // heads using 2D rotary encoding; the rest attend by content alone

  void validate() const;
  int head_dim() const { return width / heads; }
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Named weight arrays of the joint-attention velocity transformer. Array order is fixed by
/// the config; see param_names().
class ModelParams {
 public:
  ModelParams() = default;
  ModelParams(ModelConfig config, std::vector<Mat> arrays);

  const ModelConfig& config() const { return config_; }
  const std::vector<std::string>& names() const { return names_; }
  const std::vector<Mat>& arrays() const { return arrays_; }
  std::vector<Mat>& arrays() { return arrays_; }
  std::size_t size() const { return arrays_.size(); }

  int index_of(const std::string& name) const;
  const Mat& get(const std::string& name) const { return arrays_[index_of(name)]; }
  Mat& get(const std::string& name) { return arrays_[index_of(name)]; }

  std::size_t parameter_count() const;
  /// FNV-1a over the float32 little-endian image of every array, in order.
  std::uint64_t content_hash() const;

 private:
  ModelConfig config_;
  std::vector<std::string> names_;
  std::vector<Mat> arrays_;
};

std::vector<std::string> param_names(const ModelConfig& config);
std::vector<std::pair<int, int>> param_shapes(const ModelConfig& config);
std::uint64_t hash_float32(std::span<const Mat> arrays);

/// Scaled-normal init (std 0.02), zero biases, unit norm gains, zero output head.
ModelParams init_params(const ModelConfig& config, std::uint64_t seed);

/// Low-rank additive corrections W + scale * down * up on attention and feed-forward projections.
struct AdapterParams {
  struct Factor {
    int array_index = -1;
    Mat down;  // in x rank
    Mat up;    // rank x out
  };
  int rank = 0;
  double scale = 0.0;  // alpha / rank
  std::vector<Factor> factors;
};

/// Names of arrays that adapters attach to (q/k/v/o and both feed-forward projections).
bool is_adapter_target(const std::string& name);
/// `down` drawn with std 1/sqrt(in), `up` zero, so the initial correction vanishes.
AdapterParams init_adapter(const ModelParams& params, int rank, double alpha, std::uint64_t seed);
AdapterParams zero_adapter(const ModelParams& params, int rank, double alpha);

/// Base weights with an optional adapter applied on the fly.
struct PolicyView {
  const ModelParams* base = nullptr;
  const AdapterParams* adapter = nullptr;

  PolicyView(const ModelParams& p) : base(&p) {}  // NOLINT(google-explicit-constructor)
  PolicyView(const ModelParams& p, const AdapterParams& a) : base(&p), adapter(&a) {}
};

PolicyView apply_adapter(const ModelParams& params, const AdapterParams& adapter);
ModelParams merge_adapter(const ModelParams& params, const AdapterParams& adapter);

/// 2D rotary encoding of one head vector: first half rotated by row angles, second by column
/// angles, frequency base^(-i/(dim/4)) for pair i.
void rope_rotate(std::span<double> vec, double row, double col, double base);

/// Which arrays become gradient leaves when binding a view onto a tape.
enum class Trainable { None, Base, Adapter };

struct BoundModel {
  std::vector<ad::Var> arrays;     // effective weights, one per ModelParams array
  std::vector<ad::Var> trainable;  // base arrays or adapter (down, up) pairs, in order
};

BoundModel bind(ad::Tape& tape, const PolicyView& view, Trainable trainable);

/// Velocity for the first target_len tokens of the packed sequence.
ad::Var forward(const ModelConfig& config, const BoundModel& model, const PackedSequence& packed, double t,
                const Instruction& instruction);
Mat forward(const PolicyView& view, const PackedSequence& packed, double t, const Instruction& instruction);

using LossFn = std::function<ad::Var(ad::Tape&, const BoundModel&)>;

struct GradResult {
  double loss = 0.0;
  std::vector<Mat> grads;  // mirrors the trainable set
};

/// Evaluate `loss_fn` on a fresh tape and return exact reverse-mode gradients.
GradResult grad(const PolicyView& view, Trainable trainable, const LossFn& loss_fn);
GradResult grad(const ModelParams& params, const LossFn& loss_fn);

}  // namespace uniref
