#include "adlab/variance.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "adlab/diagnostics.hpp"
#include "adlab/errors.hpp"
#include "adlab/parallel.hpp"
#include "adlab/rng.hpp"

namespace adlab {

namespace {

// Mean clamped log-probability per class and log Z of its exponentials.
struct LogMean {
  std::vector<double> mean_log;
  double log_z = 0.0;
};

LogMean log_mean(std::span<const std::vector<double>> preds) {
  if (preds.empty()) throw ContractError("geometric mean needs at least one prediction");
  const std::size_t c = preds.front().size();
  LogMean out;
  out.mean_log.assign(c, 0.0);
  for (const auto& p : preds) {
    if (p.size() != c) throw DimensionError("predictions disagree on class count");
    for (std::size_t i = 0; i < c; ++i) out.mean_log[i] += clamped_log(p[i]);
  }
  // Identical predictions are their own geometric mean; keep Z at exactly 1.
  const bool identical =
      std::all_of(preds.begin(), preds.end(), [&](const std::vector<double>& p) { return p == preds.front(); });
  if (identical) {
    for (std::size_t i = 0; i < c; ++i) out.mean_log[i] = clamped_log(preds.front()[i]);
    return out;
  }
  const double inv = 1.0 / static_cast<double>(preds.size());
  for (double& m : out.mean_log) m *= inv;
  const double top = *std::max_element(out.mean_log.begin(), out.mean_log.end());
  double s = 0.0;
  for (double m : out.mean_log) s += std::exp(m - top);
  out.log_z = top + std::log(s);
  return out;
}

}  // namespace

std::vector<double> geometric_mean_simplex(std::span<const std::vector<double>> preds) {
  const LogMean lm = log_mean(preds);
  std::vector<double> out(lm.mean_log.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(lm.mean_log[i] - lm.log_z);
  return out;
}

PointDecomposition decompose_point(std::span<const double> y, std::span<const std::vector<double>> preds) {
  const LogMean lm = log_mean(preds);
  if (y.size() != lm.mean_log.size()) throw DimensionError("target and predictions disagree on class count");
  PointDecomposition d;
  double cross = 0.0;  // -sum y * mean_j log y_hat_j
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double ly = clamped_log(y[i]);
    d.noise -= y[i] * ly;
    d.bias += y[i] * (ly - (lm.mean_log[i] - lm.log_z));
    cross -= y[i] * lm.mean_log[i];
  }
  // mean_j KL(y_bar || y_hat_j) collapses to -log Z.
  d.variance = -lm.log_z;
  d.risk = cross;
  d.noise = std::max(d.noise, 0.0);
  d.bias = std::max(d.bias, 0.0);
  d.variance = std::max(d.variance, 0.0);
  return d;
}

void SplitPlan::validate() const {
  if (splits == 0) throw ConfigError("avar splits must be >= 1");
  if (repetitions == 0) throw ConfigError("avar repetitions must be >= 1");
}

double VarianceReport::max_abs_residual() const noexcept {
  double worst = 0.0;
  for (const auto& rep : per_point) {
    for (const auto& p : rep) worst = std::max(worst, std::abs(p.residual()));
  }
  return worst;
}

VarianceReport estimate_avar(const Dataset& train_data, const Dataset& test_points, const Teacher* teacher,
                             std::span<const std::size_t> student_layers, const TrainConfig& train_cfg,
                             const SplitPlan& plan) {
  plan.validate();
  train_cfg.validate();
  const std::size_t n = train_data.size();
  const std::size_t per_split = n / plan.splits;
  if (per_split == 0) throw ConfigError("avar: fewer training samples than splits");
  if (test_points.size() == 0) throw ConfigError("avar: no test points");

  VarianceReport report;
  report.splits = plan.splits;
  report.repetitions = plan.repetitions;
  const std::size_t jobs = plan.splits * plan.repetitions;
  std::vector<Dataset> split_data(jobs);
  std::vector<std::uint64_t> split_seed(jobs);
  for (std::size_t k = 0; k < plan.repetitions; ++k) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(plan.seed, {0xa7a5u, k}));
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::size_t> dropped(order.begin() + static_cast<std::ptrdiff_t>(per_split * plan.splits), order.end());
    std::sort(dropped.begin(), dropped.end());
    report.dropped_indices.push_back(std::move(dropped));
    for (std::size_t j = 0; j < plan.splits; ++j) {
      const std::size_t src = plan.force_identical ? 0 : j;
      const std::span<const std::size_t> idx(order.data() + src * per_split, per_split);
      split_data[k * plan.splits + j] = train_data.subset(idx);
      split_seed[k * plan.splits + j] = derive_seed(plan.seed, {k, src});
    }
  }

  // Adversarial predictions per job on every test point.
  std::vector<Tensor> adv_probs(jobs);
  std::vector<double> ro(jobs);
  parallel_for(jobs, [&](std::size_t job) {
    const std::size_t k = job / plan.splits, j = job % plan.splits;
    TrainConfig cfg = train_cfg;
    cfg.seed = split_seed[job];
    try {
      const ModelParams init = init_mlp(student_layers, split_seed[job]);
      const TrainResult tr = train(teacher, init, split_data[job], test_points, cfg);
      const auto curve = tr.metrics.robust_test_curve();
      ro[job] = curve.empty() ? 0.0 : robust_overfitting(curve);
      AttackConfig atk = cfg.eval_attack;
      atk.inner_loss = InnerLoss::CeStudent;
      atk.seed = derive_seed(split_seed[job], {0xe7a1u});
      const PerturbedBatch adv = pgd(tr.final_student, nullptr, test_points.x, test_points.labels, atk);
      adv_probs[job] = softmax(forward(tr.final_student, adv.x_adv)).values();
    } catch (const RunError& e) {
      throw RunError("avar: repetition " + std::to_string(k) + " split " + std::to_string(j) + " failed: " + e.what());
    }
  });

  const ProbBatch targets = one_hot(test_points.labels, test_points.classes);
  const std::size_t m = test_points.size();
  double noise = 0.0, bias = 0.0, risk = 0.0;
  for (std::size_t k = 0; k < plan.repetitions; ++k) {
    std::vector<PointDecomposition> points(m);
    double rep_var = 0.0;
    std::vector<std::vector<double>> preds(plan.splits);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < plan.splits; ++j) {
        const auto row = adv_probs[k * plan.splits + j].row(i);
        preds[j].assign(row.begin(), row.end());
      }
      points[i] = decompose_point(targets.row(i), preds);
      noise += points[i].noise;
      bias += points[i].bias;
      risk += points[i].risk;
      rep_var += points[i].variance;
    }
    report.per_repetition_variance.push_back(rep_var / static_cast<double>(m));
    report.per_point.push_back(std::move(points));
  }
  const double total = static_cast<double>(m * plan.repetitions);
  report.noise = noise / total;
  report.bias = bias / total;
  report.risk = risk / total;
  report.variance = std::accumulate(report.per_repetition_variance.begin(), report.per_repetition_variance.end(), 0.0) /
                    static_cast<double>(plan.repetitions);
  report.split_robust_overfitting = ro;
  report.mean_robust_overfitting = std::accumulate(ro.begin(), ro.end(), 0.0) / static_cast<double>(jobs);
  return report;
}

}  // namespace adlab
