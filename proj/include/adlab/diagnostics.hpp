#pragma once

#include <span>
#include <vector>

#include "adlab/attacks.hpp"
#include "adlab/data.hpp"
#include "adlab/models.hpp"

namespace adlab {

struct TasReport {
  std::vector<double> per_sample_score;
  std::vector<bool> is_tas;
  double ratio = 0.0;
  /// Teacher entropy on the student-crafted input, per sample.
  std::vector<double> teacher_adv_entropy;
  /// Entropy lower bound check per sample.
  std::vector<bool> lemma2_holds;
};

/// KL(p || f_T(x)) - KL(p || f_T(x + d_T)), with p = f_T(x + d_S). Samples
/// scoring >= 0 are transferable.
std::vector<double> tas_score(const ProbBatch& p_on_student_adv, const ProbBatch& teacher_clean,
                              const ProbBatch& teacher_adv);

/// Crafts d_S on the student (per student_cfg.inner_loss) and d_T on the
/// teacher (CE-based PGD), then scores every sample of `data`.
TasReport tas_ratio(const ModelParams& student, const Teacher& teacher, const Dataset& data,
                    const AttackConfig& student_cfg, const AttackConfig& teacher_cfg, std::size_t batch_size = 256);

/// Best minus last robust accuracy.
double robust_overfitting(std::span<const double> robust_acc_by_epoch);

/// score >= H(p) + log(min_i q_i) - 1e-9 per sample, with q clamped at the probability floor.
std::vector<bool> lemma2_check(const ProbBatch& p_on_student_adv, const ProbBatch& teacher_adv,
                               std::span<const double> tas_scores);

struct EntropyHistogram {
  std::vector<double> bin_edges;
  std::vector<std::size_t> counts;
  std::vector<double> density;
};

/// Equal-width bins over [0, max_entropy]; right-open except the last bin.
EntropyHistogram entropy_histogram(std::span<const double> entropies, double max_entropy, std::size_t bins = 50);

}  // namespace adlab
