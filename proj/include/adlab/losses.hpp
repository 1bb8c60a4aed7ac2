#pragma once

#include <span>
#include <string>
#include <vector>

#include "adlab/attacks.hpp"
#include "adlab/autodiff.hpp"
#include "adlab/models.hpp"

namespace adlab {

enum class Method { PgdAt, Trades, Ard, Rslad, Adaad, Igdm, Saad, SaadC };
enum class Weighting { Entropy, Unit };

std::string to_string(Method method);
Method method_from_string(const std::string& name);
std::string to_string(Weighting weighting);
Weighting weighting_from_string(const std::string& name);

/// Outer objective and its hyperparameters.
struct DistillSpec {
  Method method = Method::Saad;
  double alpha_igdm = 1.0;
  double beta = 0.2;
  double trades_lambda = 6.0;
  Weighting weighting = Weighting::Entropy;
  double lambda_in = 1.0;

  void validate() const;
  bool uses_teacher() const noexcept;
  bool uses_clean_student() const noexcept;
  /// Inner maximization paired with the method (ARD/RSLAD/AdaAD/IGDM/TRADES conventions).
  InnerLoss default_inner_loss() const noexcept;
};

/// Raw entropy weights w in [0, log C] and w_tilde = w / log C.
struct WeightVector {
  std::vector<double> w;
  std::vector<double> w_tilde;
};

WeightVector entropy_weights(const ProbBatch& teacher_adv_probs);
WeightVector unit_weights(std::size_t n);

/// Emulated teacher logits on clean and perturbed inputs.
struct TeacherTargets {
  Tensor clean_logits;
  Tensor adv_logits;
};

TeacherTargets teacher_targets(const Teacher& teacher, const Tensor& x, const Tensor& x_adv,
                               std::span<const int> labels);

/// Student logits on a tape. `clean` is only required by methods that use f_S(x).
struct StudentOutputs {
  Var adv;
  Var clean;
};

/// Per-sample base loss [B x 1]. For igdm, saad and saad-c this is
/// KL(f_T(x+d) || f_S(x+d)) + alpha * KL(softmax(zT(x+d) - zT(x)) || softmax(zS(x+d) - zS(x))).
Var base_ad_loss_rows(Tape& tape, const StudentOutputs& student, const TeacherTargets* teacher,
                      std::span<const int> labels, const DistillSpec& spec);

/// Scalar training objective for the method; writes the weights it used when `weights_out` is set.
Var outer_loss(Tape& tape, const StudentOutputs& student, const TeacherTargets* teacher, std::span<const int> labels,
               const DistillSpec& spec, WeightVector* weights_out = nullptr);

// Value-level forms.

std::vector<double> base_ad_loss(const ModelParams& student, const Teacher& teacher, const Tensor& x,
                                 const Tensor& x_adv, std::span<const int> labels, const DistillSpec& spec);

/// (1/N) sum w_i * base_i with raw weights.
double saad_loss(std::span<const double> per_sample_base, const WeightVector& weights);

/// saad_loss + beta * (1/N) sum (1 - w_tilde_i) * clean_kl_i.
double saadc_loss(std::span<const double> per_sample_base, const WeightVector& weights,
                  std::span<const double> clean_kl, double beta);

/// Batch mean of CE(y, f(x)) + lambda * KL(f(x) || f(x_adv)).
double trades_loss(const ModelParams& student, const Tensor& x, const Tensor& x_adv, std::span<const int> labels,
                   double lambda);

}  // namespace adlab
