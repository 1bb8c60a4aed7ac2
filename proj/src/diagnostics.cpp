#include "adlab/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "adlab/errors.hpp"
#include "adlab/rng.hpp"

namespace adlab {

std::vector<double> tas_score(const ProbBatch& p_on_student_adv, const ProbBatch& teacher_clean,
                              const ProbBatch& teacher_adv) {
  const auto& p = p_on_student_adv;
  if (p.rows() != teacher_clean.rows() || p.rows() != teacher_adv.rows() || p.cols() != teacher_clean.cols() ||
      p.cols() != teacher_adv.cols()) {
    throw ContractError("tas_score: batches are not aligned");
  }
  std::vector<double> out(p.rows());
  for (std::size_t r = 0; r < p.rows(); ++r) {
    out[r] = kl_row(p.row(r), teacher_clean.row(r)) - kl_row(p.row(r), teacher_adv.row(r));
  }
  return out;
}

std::vector<bool> lemma2_check(const ProbBatch& p_on_student_adv, const ProbBatch& teacher_adv,
                               std::span<const double> tas_scores) {
  if (p_on_student_adv.rows() != teacher_adv.rows() || tas_scores.size() != teacher_adv.rows()) {
    throw ContractError("lemma2_check: batches are not aligned");
  }
  std::vector<bool> out(tas_scores.size());
  for (std::size_t r = 0; r < tas_scores.size(); ++r) {
    const auto q = teacher_adv.row(r);
    const double m = std::max(*std::min_element(q.begin(), q.end()), kProbFloor);
    const double bound = entropy_row(p_on_student_adv.row(r)) + std::log(m);
    out[r] = tas_scores[r] >= bound - 1e-9;
  }
  return out;
}

TasReport tas_ratio(const ModelParams& student, const Teacher& teacher, const Dataset& data,
                    const AttackConfig& student_cfg, const AttackConfig& teacher_cfg, std::size_t batch_size) {
  if (student_cfg.epsilon != teacher_cfg.epsilon) {
    throw ConfigError("tas_ratio: student and teacher attacks must share epsilon");
  }
  if (batch_size == 0) throw ConfigError("tas_ratio: batch size must be positive");
  TasReport report;
  const std::size_t n = data.size();
  std::vector<std::size_t> idx;
  for (std::size_t start = 0, b = 0; start < n; start += batch_size, ++b) {
    const std::size_t end = std::min(n, start + batch_size);
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const Dataset batch = data.subset(idx);
    AttackConfig s_cfg = student_cfg;
    AttackConfig t_cfg = teacher_cfg;
    s_cfg.seed = derive_seed(student_cfg.seed, {b});
    t_cfg.seed = derive_seed(teacher_cfg.seed, {b});
    const PerturbedBatch ds = pgd(student, &teacher, batch.x, batch.labels, s_cfg);
    const PerturbedBatch dt = pgd_teacher_ce(teacher, batch.x, batch.labels, t_cfg);
    const ProbBatch p = teacher.probs(ds.x_adv, batch.labels);
    const ProbBatch clean = teacher.probs(batch.x, batch.labels);
    const ProbBatch q = teacher.probs(dt.x_adv, batch.labels);
    const auto scores = tas_score(p, clean, q);
    const auto bound = lemma2_check(p, q, scores);
    const auto ent = entropy(p);
    for (std::size_t r = 0; r < scores.size(); ++r) {
      report.per_sample_score.push_back(scores[r]);
      report.is_tas.push_back(scores[r] >= 0.0);
      report.lemma2_holds.push_back(bound[r]);
      report.teacher_adv_entropy.push_back(ent[r]);
    }
  }
  const auto hits = std::count(report.is_tas.begin(), report.is_tas.end(), true);
  report.ratio = n == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(n);
  return report;
}

double robust_overfitting(std::span<const double> robust_acc_by_epoch) {
  if (robust_acc_by_epoch.empty()) throw ContractError("robust_overfitting: empty accuracy curve");
  return *std::max_element(robust_acc_by_epoch.begin(), robust_acc_by_epoch.end()) - robust_acc_by_epoch.back();
}

EntropyHistogram entropy_histogram(std::span<const double> entropies, double max_entropy, std::size_t bins) {
  if (bins == 0) throw ContractError("entropy_histogram: need at least one bin");
  if (!(max_entropy > 0.0)) throw ContractError("entropy_histogram: max entropy must be positive");
  EntropyHistogram h;
  const double width = max_entropy / static_cast<double>(bins);
  h.bin_edges.resize(bins + 1);
  for (std::size_t i = 0; i <= bins; ++i) h.bin_edges[i] = width * static_cast<double>(i);
  h.bin_edges.back() = max_entropy;
  h.counts.assign(bins, 0);
  for (double e : entropies) {
    auto bin = static_cast<std::size_t>(std::floor(std::clamp(e, 0.0, max_entropy) / width));
    // Floating division can land one bin off the edge table; settle against the edges.
    bin = std::min(bin, bins - 1);
    while (bin > 0 && e < h.bin_edges[bin]) --bin;
    while (bin + 1 < bins && e >= h.bin_edges[bin + 1]) ++bin;
    ++h.counts[bin];
  }
  h.density.assign(bins, 0.0);
  if (!entropies.empty()) {
    const double n = static_cast<double>(entropies.size());
    for (std::size_t i = 0; i < bins; ++i) {
      h.density[i] = static_cast<double>(h.counts[i]) / (n * (h.bin_edges[i + 1] - h.bin_edges[i]));
    }
  }
  return h;
}

}  // namespace adlab
