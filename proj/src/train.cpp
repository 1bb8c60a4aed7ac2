#include "adlab/train.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "adlab/diagnostics.hpp"
#include "adlab/errors.hpp"
#include "adlab/rng.hpp"

namespace adlab {

void TrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be > 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0,1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
  if (!(lr_decay_factor > 0.0)) throw ConfigError("lr_decay_factor must be > 0");
  for (std::size_t i = 0; i < lr_decay_epochs.size(); ++i) {
    if (i > 0 && lr_decay_epochs[i] <= lr_decay_epochs[i - 1]) {
      throw ConfigError("lr_decay_epochs must be strictly increasing");
    }
    if (epochs > 0 && lr_decay_epochs[i] >= epochs) throw ConfigError("lr_decay_epochs must be < epochs");
  }
  if (swa_start_epoch > epochs) throw ConfigError("swa_start_epoch must be <= epochs");
  eval_attack.validate();
  train_attack.validate();
  distill.validate();
}

AttackConfig eval_attack_for(double epsilon, double box_lo, double box_hi) {
  AttackConfig c;
  c.epsilon = epsilon;
  c.step_size = epsilon > 0.0 ? epsilon / 4.0 : 1.0;
  c.steps = 20;
  c.init_scale = 0.0;
  c.inner_loss = InnerLoss::CeStudent;
  c.box_lo = box_lo;
  c.box_hi = box_hi;
  return c;
}

AttackConfig train_attack_for(double epsilon, double box_lo, double box_hi) {
  AttackConfig c = eval_attack_for(epsilon, box_lo, box_hi);
  c.steps = 10;
  c.init_scale = 0.001;
  return c;
}

std::vector<double> MetricsRecord::robust_test_curve() const {
  std::vector<double> out;
  out.reserve(rows.size());
  for (const auto& r : rows) out.push_back(r.robust_test_acc);
  return out;
}

double lr_at(const TrainConfig& config, std::size_t epoch) {
  if (epoch >= config.epochs) {
    throw ContractError("lr_at: epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(config.epochs) + ")");
  }
  double lr = config.lr;
  for (auto e : config.lr_decay_epochs) {
    if (e <= epoch) lr /= config.lr_decay_factor;
  }
  return lr;
}

void sgd_step(ModelParams& params, const ModelParams& grads, ModelParams& velocity, double lr, double momentum,
              double weight_decay) {
  if (grads.layers() != params.layers() || velocity.layers() != params.layers()) {
    throw ContractError("sgd_step: parameter, gradient and velocity layouts differ");
  }
  auto update = [&](Tensor& p, const Tensor& g, Tensor& v) {
    if (!p.same_shape(g) || !p.same_shape(v)) throw ContractError("sgd_step: shape mismatch");
    if (!g.all_finite()) throw RunError("sgd_step: non-finite gradient");
    for (std::size_t i = 0; i < p.size(); ++i) {
      v[i] = momentum * v[i] + g[i] + weight_decay * p[i];
      p[i] -= lr * v[i];
    }
  };
  for (std::size_t l = 0; l < params.layers(); ++l) {
    update(params.weights[l], grads.weights[l], velocity.weights[l]);
    update(params.biases[l], grads.biases[l], velocity.biases[l]);
  }
}

namespace {

std::vector<std::size_t> range(std::size_t begin, std::size_t end) {
  std::vector<std::size_t> idx(end - begin);
  std::iota(idx.begin(), idx.end(), begin);
  return idx;
}

std::size_t count_correct(const Tensor& logits, std::span<const int> labels) {
  std::size_t hits = 0;
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (static_cast<int>(argmax(logits.row(r))) == labels[r]) ++hits;
  }
  return hits;
}

double percent(std::size_t hits, std::size_t n) {
  return n == 0 ? 0.0 : 100.0 * static_cast<double>(hits) / static_cast<double>(n);
}

struct BatchOutcome {
  double loss = 0.0;
  double mean_weight = 1.0;
  ModelParams grads;
};

BatchOutcome batch_step(const Teacher* teacher, const ModelParams& student, const Dataset& batch,
                        const TrainConfig& cfg, std::uint64_t attack_seed) {
  const DistillSpec& spec = cfg.distill;
  AttackConfig acfg = cfg.train_attack;
  acfg.seed = attack_seed;
  acfg.inner_loss = spec.default_inner_loss();
  acfg.lambda_in = spec.lambda_in;

  TeacherTargets targets;
  Tensor x_adv;
  if (acfg.inner_loss == InnerLoss::FastFirstOrder) {
    const TeacherLinearization lin = linearize_teacher(*teacher, batch.x, batch.labels);
    x_adv = fast_inner_max(student, lin.logits, lin.trueclass_grad, batch.x, batch.labels, acfg, spec.lambda_in).x_adv;
    targets.clean_logits = lin.logits;
    targets.adv_logits = teacher->logits(x_adv, batch.labels);
  } else {
    x_adv = pgd(student, teacher, batch.x, batch.labels, acfg).x_adv;
    if (spec.uses_teacher()) targets = teacher_targets(*teacher, batch.x, x_adv, batch.labels);
  }

  Tape tape;
  const BoundParams sp = bind(tape, student, true);
  StudentOutputs so{forward(sp, tape.constant(x_adv)), {}};
  if (spec.uses_clean_student()) so.clean = forward(sp, tape.constant(batch.x));
  WeightVector weights;
  Var loss = outer_loss(tape, so, spec.uses_teacher() ? &targets : nullptr, batch.labels, spec, &weights);

  BatchOutcome out;
  out.loss = loss.value()[0];
  out.mean_weight = weights.w.empty()
                        ? 1.0
                        : std::accumulate(weights.w.begin(), weights.w.end(), 0.0) / static_cast<double>(weights.w.size());
  if (!std::isfinite(out.loss)) return out;
  tape.backward(loss);
  out.grads = gradients(sp, student);
  return out;
}

}  // namespace

double clean_accuracy(const ModelParams& model, const Dataset& data, std::size_t batch_size) {
  if (batch_size == 0) throw ContractError("clean_accuracy: batch size must be positive");
  std::size_t hits = 0;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const auto idx = range(start, std::min(data.size(), start + batch_size));
    const Dataset b = data.subset(idx);
    hits += count_correct(forward(model, b.x), b.labels);
  }
  return percent(hits, data.size());
}

double pgd_accuracy(const ModelParams& model, const Dataset& data, const AttackConfig& eval_attack,
                    std::size_t batch_size) {
  if (batch_size == 0) throw ContractError("pgd_accuracy: batch size must be positive");
  AttackConfig cfg = eval_attack;
  cfg.inner_loss = InnerLoss::CeStudent;
  std::size_t hits = 0;
  std::uint64_t b = 0;
  for (std::size_t start = 0; start < data.size(); start += batch_size, ++b) {
    const auto idx = range(start, std::min(data.size(), start + batch_size));
    const Dataset batch = data.subset(idx);
    cfg.seed = derive_seed(eval_attack.seed, {b});
    const PerturbedBatch adv = pgd(model, nullptr, batch.x, batch.labels, cfg);
    hits += count_correct(forward(model, adv.x_adv), batch.labels);
  }
  return percent(hits, data.size());
}

EvalResult evaluate(const ModelParams& model, const Dataset& data, const AttackConfig& eval_attack,
                    std::size_t batch_size) {
  if (batch_size == 0) throw ContractError("evaluate: batch size must be positive");
  EvalResult out;
  out.clean_acc = clean_accuracy(model, data, batch_size);
  std::size_t fgsm_hits = 0;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const auto idx = range(start, std::min(data.size(), start + batch_size));
    const Dataset batch = data.subset(idx);
    const PerturbedBatch adv = fgsm(model, batch.x, batch.labels, eval_attack);
    fgsm_hits += count_correct(forward(model, adv.x_adv), batch.labels);
  }
  out.fgsm_acc = percent(fgsm_hits, data.size());
  out.pgd_acc = pgd_accuracy(model, data, eval_attack, batch_size);
  return out;
}

std::vector<double> pgd_accuracy_sweep(const ModelParams& model, const Dataset& data, const AttackConfig& eval_attack,
                                       std::span<const double> epsilons) {
  for (std::size_t i = 0; i < epsilons.size(); ++i) {
    if (!(epsilons[i] >= 0.0)) throw ConfigError("sweep radii must be >= 0");
    if (i > 0 && epsilons[i] < epsilons[i - 1]) throw ConfigError("sweep radii must be non-decreasing");
  }
  const std::size_t n = data.size();
  std::vector<bool> alive(n);
  const Tensor clean = forward(model, data.x);
  for (std::size_t r = 0; r < n; ++r) alive[r] = static_cast<int>(argmax(clean.row(r))) == data.labels[r];

  std::vector<double> out;
  std::vector<Tensor> pool;  // perturbed inputs found at smaller radii; each lies inside every later ball
  for (std::size_t i = 0; i < epsilons.size(); ++i) {
    AttackConfig cfg = eval_attack;
    cfg.inner_loss = InnerLoss::CeStudent;
    cfg.epsilon = epsilons[i];
    if (eval_attack.epsilon > 0.0) cfg.step_size = eval_attack.step_size * epsilons[i] / eval_attack.epsilon;
    if (!(cfg.step_size > 0.0)) cfg.step_size = 1.0;
    cfg.seed = derive_seed(eval_attack.seed, {i});
    pool.push_back(pgd(model, nullptr, data.x, data.labels, cfg).x_adv);
    const Tensor logits = forward(model, pool.back());
    for (std::size_t r = 0; r < n; ++r) {
      if (static_cast<int>(argmax(logits.row(r))) != data.labels[r]) alive[r] = false;
    }
    out.push_back(percent(static_cast<std::size_t>(std::count(alive.begin(), alive.end(), true)), n));
  }
  return out;
}

TrainResult train(const Teacher* teacher, const ModelParams& initial_student, const Dataset& train_data,
                  const Dataset& test_data, const TrainConfig& config) {
  config.validate();
  initial_student.validate();
  if (config.distill.uses_teacher() && teacher == nullptr) {
    throw ConfigError("method " + to_string(config.distill.method) + " needs a teacher");
  }
  if (train_data.dims() != initial_student.input_dim() && train_data.size() > 0) {
    throw DimensionError("train: dataset width does not match the student input");
  }

  TrainResult result;
  result.final_student = initial_student;
  if (config.epochs == 0 || train_data.size() == 0) {
    result.swa_student = initial_student;
    return result;
  }

  ModelParams& student = result.final_student;
  ModelParams velocity = initial_student;
  for (auto& w : velocity.weights) std::fill(w.storage().begin(), w.storage().end(), 0.0);
  for (auto& b : velocity.biases) std::fill(b.storage().begin(), b.storage().end(), 0.0);

  const std::size_t n = train_data.size();
  const std::size_t train_eval_n = config.eval_train_limit == 0 ? n : std::min(n, config.eval_train_limit);
  const Dataset train_eval = train_data.subset(range(0, train_eval_n));

  std::vector<std::size_t> order(n);
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = lr_at(config, epoch);
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(derive_seed(config.seed, {0xe90cu, epoch}));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double loss_sum = 0.0, weight_sum = 0.0;
    std::size_t finite_batches = 0, batches = 0;
    for (std::size_t start = 0; start < n; start += config.batch_size, ++batches) {
      const std::span<const std::size_t> idx(order.data() + start, std::min(n, start + config.batch_size) - start);
      const Dataset batch = train_data.subset(idx);
      BatchOutcome step;
      try {
        step = batch_step(teacher, student, batch, config, derive_seed(config.seed, {epoch, batches}));
      } catch (const NumericError&) {
        step.loss = std::numeric_limits<double>::quiet_NaN();
      }
      weight_sum += step.mean_weight;
      if (!std::isfinite(step.loss)) continue;
      try {
        sgd_step(student, step.grads, velocity, lr, config.momentum, config.weight_decay);
      } catch (const RunError& e) {
        throw RunError("training diverged at epoch " + std::to_string(epoch) + ": " + e.what());
      }
      loss_sum += step.loss;
      ++finite_batches;
    }
    if (finite_batches == 0) {
      throw RunError("training diverged at epoch " + std::to_string(epoch) + ": every batch loss was non-finite");
    }
    const auto finite = [](const Tensor& t) { return t.all_finite(); };
    if (!std::all_of(student.weights.begin(), student.weights.end(), finite) ||
        !std::all_of(student.biases.begin(), student.biases.end(), finite)) {
      throw RunError("training diverged at epoch " + std::to_string(epoch) + ": parameters are no longer finite");
    }

    AttackConfig eval_cfg = config.eval_attack;
    eval_cfg.seed = derive_seed(config.seed, {0xe7a1u, epoch});
    MetricsRow row;
    row.epoch = epoch;
    row.lr = lr;
    row.train_loss = loss_sum / static_cast<double>(finite_batches);
    try {
      row.clean_train_acc = clean_accuracy(student, train_eval);
      row.clean_test_acc = clean_accuracy(student, test_data);
      row.robust_train_acc = pgd_accuracy(student, train_eval, eval_cfg);
      row.robust_test_acc = pgd_accuracy(student, test_data, eval_cfg);
    } catch (const NumericError& e) {
      throw RunError("training diverged at epoch " + std::to_string(epoch) + ": " + e.what());
    }
    row.mean_weight = weight_sum / static_cast<double>(batches);
    if (teacher != nullptr && config.tas_every > 0 && (epoch + 1) % config.tas_every == 0) {
      AttackConfig s_cfg = config.train_attack;
      s_cfg.inner_loss = config.distill.default_inner_loss();
      s_cfg.lambda_in = config.distill.lambda_in;
      s_cfg.seed = derive_seed(config.seed, {0x7a5u, epoch});
      AttackConfig t_cfg = config.eval_attack;
      t_cfg.seed = derive_seed(config.seed, {0x7a6u, epoch});
      row.tas_ratio = tas_ratio(student, *teacher, train_eval, s_cfg, t_cfg).ratio;
    }
    result.metrics.rows.push_back(row);

    if (epoch >= config.swa_start_epoch) result.swa = swa_update(result.swa, student);
  }
  result.swa_student = result.swa.count > 0 ? result.swa.averaged : student;
  return result;
}

}  // namespace adlab
