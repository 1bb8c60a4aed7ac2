#include "adlab/losses.hpp"

#include <cmath>

#include "adlab/errors.hpp"

namespace adlab {

namespace {

constexpr Method kAllMethods[] = {Method::PgdAt, Method::Trades, Method::Ard,  Method::Rslad,
                                  Method::Adaad, Method::Igdm,   Method::Saad, Method::SaadC};

bool uses_gradient_matching(Method m) { return m == Method::Igdm || m == Method::Saad || m == Method::SaadC; }

const TeacherTargets& need_teacher(const TeacherTargets* t, Method m) {
  if (t == nullptr) throw ConfigError("method " + to_string(m) + " needs teacher outputs");
  return *t;
}

Var need_clean(const StudentOutputs& s, Method m) {
  if (!s.clean.valid()) throw ContractError("method " + to_string(m) + " needs student logits on clean inputs");
  return s.clean;
}

}  // namespace

std::string to_string(Method method) {
  switch (method) {
    case Method::PgdAt:
      return "pgd-at";
    case Method::Trades:
      return "trades";
    case Method::Ard:
      return "ard";
    case Method::Rslad:
      return "rslad";
    case Method::Adaad:
      return "adaad";
    case Method::Igdm:
      return "igdm";
    case Method::Saad:
      return "saad";
    case Method::SaadC:
      return "saad-c";
  }
  return "?";
}

Method method_from_string(const std::string& name) {
  for (auto m : kAllMethods) {
    if (to_string(m) == name) return m;
  }
  throw ConfigError("unknown distillation method '" + name + "'");
}

std::string to_string(Weighting weighting) { return weighting == Weighting::Entropy ? "entropy" : "unit"; }

Weighting weighting_from_string(const std::string& name) {
  if (name == "entropy") return Weighting::Entropy;
  if (name == "unit") return Weighting::Unit;
  throw ConfigError("unknown weighting '" + name + "'");
}

void DistillSpec::validate() const {
  if (!(alpha_igdm >= 0.0)) throw ConfigError("alpha_igdm must be >= 0");
  if (!(beta >= 0.0)) throw ConfigError("beta must be >= 0");
  if (!(trades_lambda > 0.0)) throw ConfigError("trades_lambda must be > 0");
  if (!std::isfinite(lambda_in)) throw ConfigError("lambda_in must be finite");
}

bool DistillSpec::uses_teacher() const noexcept { return method != Method::PgdAt && method != Method::Trades; }

bool DistillSpec::uses_clean_student() const noexcept {
  return method == Method::Trades || uses_gradient_matching(method);
}

InnerLoss DistillSpec::default_inner_loss() const noexcept {
  switch (method) {
    case Method::PgdAt:
    case Method::Ard:
      return InnerLoss::CeStudent;
    case Method::Trades:
      return InnerLoss::KlStudentClean;
    case Method::Rslad:
      return InnerLoss::KlTeacherClean;
    case Method::Adaad:
    case Method::Igdm:
      return InnerLoss::KlTeacherAdv;
    case Method::Saad:
    case Method::SaadC:
      return InnerLoss::FastFirstOrder;
  }
  return InnerLoss::CeStudent;
}

WeightVector entropy_weights(const ProbBatch& teacher_adv_probs) {
  WeightVector out;
  out.w = entropy(teacher_adv_probs);
  const double max_entropy = std::log(static_cast<double>(teacher_adv_probs.cols()));
  out.w_tilde.reserve(out.w.size());
  for (double w : out.w) out.w_tilde.push_back(max_entropy > 0.0 ? w / max_entropy : 0.0);
  return out;
}

WeightVector unit_weights(std::size_t n) { return {std::vector<double>(n, 1.0), std::vector<double>(n, 1.0)}; }

TeacherTargets teacher_targets(const Teacher& teacher, const Tensor& x, const Tensor& x_adv,
                               std::span<const int> labels) {
  return {teacher.logits(x, labels), teacher.logits(x_adv, labels)};
}

Var base_ad_loss_rows(Tape& tape, const StudentOutputs& student, const TeacherTargets* teacher,
                      std::span<const int> labels, const DistillSpec& spec) {
  const std::size_t classes = student.adv.value().cols();
  switch (spec.method) {
    case Method::PgdAt:
      return cross_entropy_rows(tape.constant(one_hot(labels, classes).values()), student.adv);
    case Method::Trades: {
      Var clean = need_clean(student, spec.method);
      Var ce = cross_entropy_rows(tape.constant(one_hot(labels, classes).values()), clean);
      return add(ce, scale(kl_rows(softmax(clean), student.adv), spec.trades_lambda));
    }
    case Method::Ard:
    case Method::Rslad: {
      const auto& t = need_teacher(teacher, spec.method);
      return kl_rows(tape.constant(softmax(t.clean_logits).values()), student.adv);
    }
    case Method::Adaad:
    case Method::Igdm:
    case Method::Saad:
    case Method::SaadC: {
      const auto& t = need_teacher(teacher, spec.method);
      Var robust = kl_rows(tape.constant(softmax(t.adv_logits).values()), student.adv);
      if (!uses_gradient_matching(spec.method)) return robust;
      Tensor teacher_diff = t.adv_logits;
      for (std::size_t i = 0; i < teacher_diff.size(); ++i) teacher_diff[i] -= t.clean_logits[i];
      Var matching = kl_rows(tape.constant(softmax(teacher_diff).values()), sub(student.adv, need_clean(student, spec.method)));
      return add(robust, scale(matching, spec.alpha_igdm));
    }
  }
  throw ConfigError("unknown method");
}

Var outer_loss(Tape& tape, const StudentOutputs& student, const TeacherTargets* teacher, std::span<const int> labels,
               const DistillSpec& spec, WeightVector* weights_out) {
  Var base = base_ad_loss_rows(tape, student, teacher, labels, spec);
  const std::size_t n = base.value().size();
  if (spec.method != Method::Saad && spec.method != Method::SaadC) {
    if (weights_out != nullptr) *weights_out = unit_weights(n);
    return mean(base);
  }
  const auto& t = need_teacher(teacher, spec.method);
  const WeightVector weights =
      spec.weighting == Weighting::Entropy ? entropy_weights(softmax(t.adv_logits)) : unit_weights(n);
  if (weights_out != nullptr) *weights_out = weights;
  Var loss = weighted_mean(base, weights.w);
  // beta == 0 records nothing, so saad-c replays saad's arithmetic exactly.
  if (spec.method == Method::SaadC && spec.beta != 0.0) {
    std::vector<double> inverse(n);
    for (std::size_t i = 0; i < n; ++i) inverse[i] = 1.0 - weights.w_tilde[i];
    Var clean_kl = kl_rows(tape.constant(softmax(t.clean_logits).values()), need_clean(student, spec.method));
    loss = add(loss, scale(weighted_mean(clean_kl, inverse), spec.beta));
  }
  return loss;
}

std::vector<double> base_ad_loss(const ModelParams& student, const Teacher& teacher, const Tensor& x,
                                 const Tensor& x_adv, std::span<const int> labels, const DistillSpec& spec) {
  spec.validate();
  Tape tape;
  const BoundParams sp = bind(tape, student, false);
  StudentOutputs so{forward(sp, tape.constant(x_adv)), {}};
  if (spec.uses_clean_student()) so.clean = forward(sp, tape.constant(x));
  TeacherTargets targets;
  if (spec.uses_teacher()) targets = teacher_targets(teacher, x, x_adv, labels);
  const Var rows = base_ad_loss_rows(tape, so, spec.uses_teacher() ? &targets : nullptr, labels, spec);
  return rows.value().storage();
}

double saad_loss(std::span<const double> per_sample_base, const WeightVector& weights) {
  if (per_sample_base.size() != weights.w.size()) {
    throw ContractError("saad_loss: " + std::to_string(per_sample_base.size()) + " losses but " +
                        std::to_string(weights.w.size()) + " weights");
  }
  if (per_sample_base.empty()) throw ContractError("saad_loss: empty batch");
  double acc = 0.0;
  for (std::size_t i = 0; i < per_sample_base.size(); ++i) acc += weights.w[i] * per_sample_base[i];
  return acc / static_cast<double>(per_sample_base.size());
}

double saadc_loss(std::span<const double> per_sample_base, const WeightVector& weights,
                  std::span<const double> clean_kl, double beta) {
  const double robust = saad_loss(per_sample_base, weights);
  if (clean_kl.size() != per_sample_base.size() || weights.w_tilde.size() != per_sample_base.size()) {
    throw ContractError("saadc_loss: length mismatch between losses, weights and clean KL");
  }
  if (!(beta >= 0.0)) throw ContractError("saadc_loss: beta must be >= 0");
  double acc = 0.0;
  for (std::size_t i = 0; i < clean_kl.size(); ++i) acc += (1.0 - weights.w_tilde[i]) * clean_kl[i];
  return robust + beta * (acc / static_cast<double>(clean_kl.size()));
}

double trades_loss(const ModelParams& student, const Tensor& x, const Tensor& x_adv, std::span<const int> labels,
                   double lambda) {
  Tape tape;
  const BoundParams sp = bind(tape, student, false);
  const StudentOutputs so{forward(sp, tape.constant(x_adv)), forward(sp, tape.constant(x))};
  DistillSpec spec;
  spec.method = Method::Trades;
  spec.trades_lambda = lambda;
  if (!(lambda >= 0.0)) throw ContractError("trades_loss: lambda must be >= 0");
  return mean(base_ad_loss_rows(tape, so, nullptr, labels, spec)).value()[0];
}

}  // namespace adlab
