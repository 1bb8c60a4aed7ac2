#include "adlab/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include "adlab/autodiff.hpp"
#include "adlab/errors.hpp"
#include "adlab/rng.hpp"

namespace adlab {

std::string to_string(InnerLoss loss) {
  switch (loss) {
    case InnerLoss::CeStudent:
      return "ce-student";
    case InnerLoss::KlStudentClean:
      return "kl-student-clean";
    case InnerLoss::KlTeacherClean:
      return "kl-teacher-clean";
    case InnerLoss::KlTeacherAdv:
      return "kl-teacher-adv";
    case InnerLoss::FastFirstOrder:
      return "fast-first-order";
  }
  return "?";
}

InnerLoss inner_loss_from_string(const std::string& name) {
  for (auto l : {InnerLoss::CeStudent, InnerLoss::KlStudentClean, InnerLoss::KlTeacherClean, InnerLoss::KlTeacherAdv,
                 InnerLoss::FastFirstOrder}) {
    if (to_string(l) == name) return l;
  }
  throw ConfigError("unknown inner loss '" + name + "'");
}

void AttackConfig::validate() const {
  if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) throw ConfigError("attack epsilon must be >= 0");
  if (steps > 0 && !(step_size > 0.0)) throw ConfigError("attack step size must be > 0 when steps > 0");
  if (!(init_scale >= 0.0)) throw ConfigError("attack init scale must be >= 0");
  if (!(box_lo < box_hi)) throw ConfigError("attack input box needs lo < hi");
}

Tensor project_linf(Tensor delta, double epsilon) {
  for (double& v : delta.storage()) v = std::clamp(v, -epsilon, epsilon);
  return delta;
}

namespace {

// Clamps x + delta into the box and rewrites delta to match.
void clamp_to_box(const Tensor& x, Tensor& delta, Tensor& x_adv, const AttackConfig& cfg) {
  x_adv = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    x_adv[i] = std::clamp(x[i] + delta[i], cfg.box_lo, cfg.box_hi);
    delta[i] = x_adv[i] - x[i];
  }
}

// Builds the per-row objective [B x 1] at input `xin`; `delta` is the leaf being optimized.
using Objective = std::function<Var(Tape&, Var xin, Var delta)>;

PerturbedBatch ascend(std::size_t input_dim, const Tensor& x, const AttackConfig& cfg, const Objective& objective) {
  cfg.validate();
  if (x.cols() != input_dim) {
    throw DimensionError("attack: input width " + std::to_string(x.cols()) + " but model expects " +
                         std::to_string(input_dim));
  }
  PerturbedBatch out;
  out.delta = Tensor(x.shape(), 0.0);
  if (cfg.init_scale > 0.0) {
    Rng rng(cfg.seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (double& v : out.delta.storage()) v = cfg.init_scale * normal(rng);
  }
  out.delta = project_linf(std::move(out.delta), cfg.epsilon);
  clamp_to_box(x, out.delta, out.x_adv, cfg);
  out.loss_trace.reserve(cfg.steps);

  const double rows = static_cast<double>(x.rows());
  for (std::size_t k = 0; k < cfg.steps; ++k) {
    Tape tape;
    Var d = tape.leaf(out.delta, true);
    Var xin = add(tape.constant(x), d);
    Var total = sum(objective(tape, xin, d));
    tape.backward(total);
    out.loss_trace.push_back(total.value()[0] / rows);

    const Tensor& g = d.grad();
    for (std::size_t i = 0; i < out.delta.size(); ++i) out.delta[i] += cfg.step_size * sign_of(g[i]);
    out.delta = project_linf(std::move(out.delta), cfg.epsilon);
    clamp_to_box(x, out.delta, out.x_adv, cfg);
  }
  return out;
}

Tensor label_mask(std::span<const int> labels, std::size_t classes) { return one_hot(labels, classes).values(); }

}  // namespace

PerturbedBatch fgsm(const ModelParams& model, const Tensor& x, std::span<const int> labels, const AttackConfig& cfg) {
  AttackConfig one = cfg;
  one.steps = 1;
  one.step_size = cfg.epsilon > 0.0 ? cfg.epsilon : 1.0;
  one.init_scale = 0.0;
  one.inner_loss = InnerLoss::CeStudent;
  const Tensor y = label_mask(labels, model.classes());
  return ascend(model.input_dim(), x, one, [&](Tape& tape, Var xin, Var) {
    const BoundParams sp = bind(tape, model, false);
    return cross_entropy_rows(tape.constant(y), forward(sp, xin));
  });
}

PerturbedBatch pgd(const ModelParams& student, const Teacher* teacher, const Tensor& x, std::span<const int> labels,
                   const AttackConfig& cfg) {
  if (labels.size() != x.rows()) throw DimensionError("pgd: one label per input row required");
  switch (cfg.inner_loss) {
    case InnerLoss::CeStudent: {
      const Tensor y = label_mask(labels, student.classes());
      return ascend(student.input_dim(), x, cfg, [&](Tape& tape, Var xin, Var) {
        const BoundParams sp = bind(tape, student, false);
        return cross_entropy_rows(tape.constant(y), forward(sp, xin));
      });
    }
    case InnerLoss::KlStudentClean: {
      const Tensor clean = softmax(forward(student, x)).values();
      return ascend(student.input_dim(), x, cfg, [&](Tape& tape, Var xin, Var) {
        const BoundParams sp = bind(tape, student, false);
        return kl_rows(tape.constant(clean), forward(sp, xin));
      });
    }
    case InnerLoss::KlTeacherClean: {
      if (teacher == nullptr) throw ConfigError("pgd: inner loss kl-teacher-clean needs a teacher");
      const Tensor target = softmax(teacher->logits(x, labels)).values();
      return ascend(student.input_dim(), x, cfg, [&](Tape& tape, Var xin, Var) {
        const BoundParams sp = bind(tape, student, false);
        return kl_rows(tape.constant(target), forward(sp, xin));
      });
    }
    case InnerLoss::KlTeacherAdv: {
      if (teacher == nullptr) throw ConfigError("pgd: inner loss kl-teacher-adv needs a teacher");
      return ascend(student.input_dim(), x, cfg, [&](Tape& tape, Var xin, Var) {
        const BoundParams sp = bind(tape, student, false);
        return kl_rows(softmax(teacher->logits(tape, xin, labels)), forward(sp, xin));
      });
    }
    case InnerLoss::FastFirstOrder:
      if (teacher == nullptr) throw ConfigError("pgd: inner loss fast-first-order needs a teacher");
      return fast_inner_max(student, *teacher, x, labels, cfg, cfg.lambda_in);
  }
  throw ConfigError("pgd: unknown inner loss");
}

PerturbedBatch pgd_teacher_ce(const Teacher& teacher, const Tensor& x, std::span<const int> labels,
                              const AttackConfig& cfg) {
  if (labels.size() != x.rows()) throw DimensionError("pgd_teacher_ce: one label per input row required");
  const Tensor y = label_mask(labels, teacher.classes());
  return ascend(teacher.params().input_dim(), x, cfg, [&](Tape& tape, Var xin, Var) {
    return cross_entropy_rows(tape.constant(y), teacher.logits(tape, xin, labels));
  });
}

TeacherLinearization linearize_teacher(const Teacher& teacher, const Tensor& x, std::span<const int> labels) {
  Tape tape;
  Var xin = tape.leaf(x, true);
  Var z = teacher.logits(tape, xin, labels);
  Var picked = sum(mul(z, tape.constant(label_mask(labels, teacher.classes()))));
  tape.backward(picked);
  return {z.value(), xin.grad()};
}

Tensor corrected_teacher_logits(const Tensor& teacher_clean_logits, const Tensor& teacher_trueclass_grad,
                                const Tensor& delta, std::span<const int> labels, double lambda_in) {
  if (!teacher_trueclass_grad.same_shape(delta)) throw ContractError("corrected logits: gradient/delta shape mismatch");
  Tape tape;
  Var eye = tape.constant(label_mask(labels, teacher_clean_logits.cols()));
  Var shift = scale(row_dot(tape.constant(teacher_trueclass_grad), tape.constant(delta)), lambda_in);
  return add(tape.constant(teacher_clean_logits), mul_col(eye, shift)).value();
}

PerturbedBatch fast_inner_max(const ModelParams& student, const Tensor& teacher_clean_logits,
                              const Tensor& teacher_trueclass_grad, const Tensor& x, std::span<const int> labels,
                              const AttackConfig& cfg, double lambda_in) {
  if (!teacher_trueclass_grad.same_shape(x)) {
    throw ContractError("fast_inner_max: teacher gradient shape does not match the input batch");
  }
  if (teacher_clean_logits.rows() != x.rows() || teacher_clean_logits.cols() != student.classes()) {
    throw ContractError("fast_inner_max: teacher logits shape does not match batch x classes");
  }
  if (labels.size() != x.rows()) throw DimensionError("fast_inner_max: one label per input row required");
  const Tensor eye = label_mask(labels, student.classes());
  return ascend(student.input_dim(), x, cfg, [&](Tape& tape, Var xin, Var d) {
    const BoundParams sp = bind(tape, student, false);
    Var shift = scale(row_dot(tape.constant(teacher_trueclass_grad), d), lambda_in);
    Var corrected = add(tape.constant(teacher_clean_logits), mul_col(tape.constant(eye), shift));
    return kl_rows(softmax(corrected), forward(sp, xin));
  });
}

PerturbedBatch fast_inner_max(const ModelParams& student, const Teacher& teacher, const Tensor& x,
                              std::span<const int> labels, const AttackConfig& cfg, double lambda_in) {
  const TeacherLinearization lin = linearize_teacher(teacher, x, labels);
  return fast_inner_max(student, lin.logits, lin.trueclass_grad, x, labels, cfg, lambda_in);
}

}  // namespace adlab
