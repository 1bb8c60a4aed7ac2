#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "adlab/autodiff.hpp"
#include "adlab/tensor.hpp"

namespace adlab {

/// Multilayer perceptron parameters. weights[i] is [d_{i+1} x d_i], biases[i] has d_{i+1} entries.
struct ModelParams {
  std::vector<std::size_t> layer_sizes;
  std::vector<Tensor> weights;
  std::vector<Tensor> biases;

  std::size_t layers() const noexcept { return weights.size(); }
  std::size_t input_dim() const noexcept { return layer_sizes.front(); }
  std::size_t classes() const noexcept { return layer_sizes.back(); }
  std::size_t parameter_count() const noexcept;

  /// Throws ContractError when shapes do not chain or entries are non-finite.
  void validate() const;

  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

/// Scaled-uniform init: W ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero.
ModelParams init_mlp(std::span<const std::size_t> layer_sizes, std::uint64_t seed);
ModelParams zero_mlp(std::span<const std::size_t> layer_sizes);

/// Parameters bound to a tape as leaves.
struct BoundParams {
  std::vector<Var> weights;
  std::vector<Var> biases;
};

BoundParams bind(Tape& tape, const ModelParams& model, bool requires_grad);

/// affine -> ReLU repeated; the last affine layer yields logits.
Var forward(const BoundParams& params, Var x);
Tensor forward(const ModelParams& model, const Tensor& x);

/// Gradients of a bound model collected into a ModelParams-shaped container.
ModelParams gradients(const BoundParams& params, const ModelParams& like);

enum class EmulationMode { AsTrained, Sharpened, Interpolated };

struct TeacherEmulation {
  EmulationMode mode = EmulationMode::AsTrained;
  double temperature = 1.0;
  double alpha = 0.0;

  void validate() const;
};

std::string to_string(EmulationMode mode);
EmulationMode emulation_mode_from_string(const std::string& name);

/// Probability-space teacher transform:
/// sharpened -> softmax(log p / T); interpolated -> (1 - alpha) p + alpha e_y.
ProbBatch emulate_teacher(const ProbBatch& probs, std::span<const int> labels, const TeacherEmulation& emu);

/// Frozen teacher with an emulation transform and call counters.
///
/// Emulated logits are z (as-trained), log_softmax(z) / T (sharpened) or
/// log((1 - alpha) softmax(z) + alpha e_y) (interpolated); their softmax is
/// emulate_teacher applied to softmax(z).
class Teacher {
 public:
  struct Counters {
    std::size_t forward = 0;
    std::size_t backward = 0;
  };

  explicit Teacher(ModelParams params, TeacherEmulation emulation = {});
  Teacher(const Teacher& other);
  Teacher& operator=(const Teacher& other);

  const ModelParams& params() const noexcept { return params_; }
  const TeacherEmulation& emulation() const noexcept { return emulation_; }
  std::size_t classes() const noexcept { return params_.classes(); }

  /// Records emulated logits on the tape. Counts one forward pass, and one
  /// backward pass whenever a gradient later flows back through the output.
  Var logits(Tape& tape, Var x, std::span<const int> labels) const;
  Tensor logits(const Tensor& x, std::span<const int> labels) const;
  ProbBatch probs(const Tensor& x, std::span<const int> labels) const;

  Counters counters() const noexcept;
  void reset_counters() const noexcept;

 private:
  ModelParams params_;
  TeacherEmulation emulation_;
  mutable std::atomic<std::size_t> forward_calls_{0};
  mutable std::atomic<std::size_t> backward_calls_{0};
};

struct SwaState {
  ModelParams averaged;  // meaningless while count == 0
  std::size_t count = 0;
};

SwaState swa_update(const SwaState& state, const ModelParams& snapshot);

// Checkpoint layout (little-endian, no padding):
//   "ADLB" | u32 version (1) | u32 L | u32 sizes[L+1] | per layer: f64 W (row-major), f64 b
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string encode_checkpoint(const ModelParams& model);
ModelParams decode_checkpoint(std::span<const std::uint8_t> bytes);
std::size_t checkpoint_size(const ModelParams& model);
void save_checkpoint(const ModelParams& model, const std::filesystem::path& path);
ModelParams load_checkpoint(const std::filesystem::path& path);

}  // namespace adlab
