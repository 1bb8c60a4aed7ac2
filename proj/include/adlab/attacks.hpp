#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "adlab/models.hpp"
#include "adlab/tensor.hpp"

namespace adlab {

/// Objective maximized by the inner loop.
enum class InnerLoss {
  CeStudent,       // CE(y, f_S(x+d))
  KlStudentClean,  // KL(f_S(x) || f_S(x+d))
  KlTeacherClean,  // KL(f_T(x) || f_S(x+d))
  KlTeacherAdv,    // KL(f_T(x+d) || f_S(x+d)), teacher re-evaluated every step
  FastFirstOrder,  // KL(softmax(l_T + correction) || f_S(x+d)), see fast_inner_max
};

std::string to_string(InnerLoss loss);
InnerLoss inner_loss_from_string(const std::string& name);

struct AttackConfig {
  double epsilon = 0.0;
  double step_size = 0.0;
  std::size_t steps = 0;
  double init_scale = 0.001;
  InnerLoss inner_loss = InnerLoss::CeStudent;
  double box_lo = 0.0;
  double box_hi = 1.0;
  std::uint64_t seed = 0;
  /// Correction weight used when pgd() dispatches to the fast first-order attack.
  double lambda_in = 1.0;

  void validate() const;
};

struct PerturbedBatch {
  Tensor x_adv;
  Tensor delta;
  std::vector<double> loss_trace;
};

/// Elementwise clamp to [-epsilon, epsilon].
Tensor project_linf(Tensor delta, double epsilon);

/// sign with sign(0) == 0.
inline double sign_of(double v) noexcept { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

PerturbedBatch fgsm(const ModelParams& model, const Tensor& x, std::span<const int> labels, const AttackConfig& cfg);

/// Signed-gradient ascent with L-inf projection and box clamping. `teacher`
/// may be null unless the inner loss references the teacher.
PerturbedBatch pgd(const ModelParams& student, const Teacher* teacher, const Tensor& x, std::span<const int> labels,
                   const AttackConfig& cfg);

/// CE-based PGD against the (emulated) teacher itself.
PerturbedBatch pgd_teacher_ce(const Teacher& teacher, const Tensor& x, std::span<const int> labels,
                              const AttackConfig& cfg);

struct TeacherLinearization {
  Tensor logits;         // teacher logits at x, [B x C]
  Tensor trueclass_grad; // d logit_y / dx per row, [B x d]
};

/// One teacher forward and one teacher backward for the whole batch.
TeacherLinearization linearize_teacher(const Teacher& teacher, const Tensor& x, std::span<const int> labels);

/// Inner maximization against first-order corrected teacher logits: only the
/// true-class logit moves, by lambda_in * <grad, delta>. The teacher itself
/// is never evaluated here.
PerturbedBatch fast_inner_max(const ModelParams& student, const Tensor& teacher_clean_logits,
                              const Tensor& teacher_trueclass_grad, const Tensor& x, std::span<const int> labels,
                              const AttackConfig& cfg, double lambda_in);

PerturbedBatch fast_inner_max(const ModelParams& student, const Teacher& teacher, const Tensor& x,
                              std::span<const int> labels, const AttackConfig& cfg, double lambda_in);

/// Corrected teacher logits for a given perturbation (value only).
Tensor corrected_teacher_logits(const Tensor& teacher_clean_logits, const Tensor& teacher_trueclass_grad,
                                const Tensor& delta, std::span<const int> labels, double lambda_in);

}  // namespace adlab
