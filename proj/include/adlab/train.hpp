#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "adlab/attacks.hpp"
#include "adlab/data.hpp"
#include "adlab/losses.hpp"
#include "adlab/models.hpp"

namespace adlab {

struct TrainConfig {
  std::size_t epochs = 60;
  std::size_t batch_size = 64;
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::vector<std::size_t> lr_decay_epochs{30, 45};
  double lr_decay_factor = 10.0;
  /// SWA snapshots are absorbed at the end of every epoch e >= swa_start_epoch (0-based).
  std::size_t swa_start_epoch = 28;
  AttackConfig eval_attack;
  AttackConfig train_attack;
  DistillSpec distill;
  std::uint64_t seed = 0;
  /// TAS audit period in epochs; 0 disables it.
  std::size_t tas_every = 10;
  /// Training samples used for per-epoch train metrics; 0 means all.
  std::size_t eval_train_limit = 0;

  void validate() const;
};

/// Evaluation convention: zero init, 20 steps, step epsilon/4, CE objective.
AttackConfig eval_attack_for(double epsilon, double box_lo, double box_hi);
/// Training convention: Gaussian init 0.001, 10 steps, step epsilon/4.
AttackConfig train_attack_for(double epsilon, double box_lo, double box_hi);

struct MetricsRow {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double clean_train_acc = 0.0;
  double clean_test_acc = 0.0;
  double robust_train_acc = 0.0;
  double robust_test_acc = 0.0;
  double mean_weight = 0.0;
  std::optional<double> tas_ratio;

  friend bool operator==(const MetricsRow&, const MetricsRow&) = default;
};

struct MetricsRecord {
  std::vector<MetricsRow> rows;

  std::vector<double> robust_test_curve() const;
  friend bool operator==(const MetricsRecord&, const MetricsRecord&) = default;
};

double lr_at(const TrainConfig& config, std::size_t epoch);

/// v <- momentum v + grad + weight_decay param; param <- param - lr v.
void sgd_step(ModelParams& params, const ModelParams& grads, ModelParams& velocity, double lr, double momentum,
              double weight_decay);

struct TrainResult {
  ModelParams final_student;
  ModelParams swa_student;
  SwaState swa;
  MetricsRecord metrics;
};

/// Full training loop for every supported method. `teacher` may be null for
/// pgd-at and trades.
TrainResult train(const Teacher* teacher, const ModelParams& initial_student, const Dataset& train_data,
                  const Dataset& test_data, const TrainConfig& config);

struct EvalResult {
  double clean_acc = 0.0;
  double fgsm_acc = 0.0;
  double pgd_acc = 0.0;
};

/// Accuracies in percent; predictions are argmax with ties to the lowest index.
EvalResult evaluate(const ModelParams& model, const Dataset& data, const AttackConfig& eval_attack,
                    std::size_t batch_size = 256);

double clean_accuracy(const ModelParams& model, const Dataset& data, std::size_t batch_size = 256);
double pgd_accuracy(const ModelParams& model, const Dataset& data, const AttackConfig& eval_attack,
                    std::size_t batch_size = 256);

/// Robust accuracy at each epsilon in increasing order. A sample counts as
/// robust at a radius only if it survives that radius' own attack and every
/// perturbation found at smaller radii, so the curve is non-increasing.
std::vector<double> pgd_accuracy_sweep(const ModelParams& model, const Dataset& data, const AttackConfig& eval_attack,
                                       std::span<const double> epsilons);

}  // namespace adlab
