#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "adlab/data.hpp"
#include "adlab/models.hpp"
#include "adlab/train.hpp"

namespace adlab {

/// exp(mean_j log p_j) renormalized onto the simplex (logs clamped at the floor).
std::vector<double> geometric_mean_simplex(std::span<const std::vector<double>> preds);

struct PointDecomposition {
  double noise = 0.0;     // H(y)
  double bias = 0.0;      // KL(y || y_bar)
  double variance = 0.0;  // mean_j KL(y_bar || y_hat_j)
  double risk = 0.0;      // mean_j CE(y, y_hat_j)
  double residual() const noexcept { return risk - (noise + bias + variance); }
};

PointDecomposition decompose_point(std::span<const double> y, std::span<const std::vector<double>> preds);

struct SplitPlan {
  std::size_t splits = 2;
  std::size_t repetitions = 2;
  std::uint64_t seed = 0;
  /// Every split reuses split 0's data and seed; a degenerate control.
  bool force_identical = false;

  void validate() const;
};

struct VarianceReport {
  double noise = 0.0;
  double bias = 0.0;
  double variance = 0.0;
  double risk = 0.0;
  std::size_t splits = 0;
  std::size_t repetitions = 0;
  std::vector<double> per_repetition_variance;
  /// Mean robust overfitting over every split student.
  double mean_robust_overfitting = 0.0;
  std::vector<double> split_robust_overfitting;
  /// Remainder indices left out of the splits, per repetition.
  std::vector<std::vector<std::size_t>> dropped_indices;
  /// [repetition][test point]
  std::vector<std::vector<PointDecomposition>> per_point;

  double max_abs_residual() const noexcept;
};

/// Adversarial-variance estimate: per repetition, disjoint random splits each
/// distil one student; every student is attacked at every test point with
/// CE-based PGD (eval_attack) and the predictions are decomposed against the
/// one-hot ground truth.
VarianceReport estimate_avar(const Dataset& train_data, const Dataset& test_points, const Teacher* teacher,
                             std::span<const std::size_t> student_layers, const TrainConfig& train_cfg, const SplitPlan& plan);

}  // namespace adlab
