#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <array>

#include "adlab/data.hpp"
#include "adlab/errors.hpp"
#include "adlab/variance.hpp"
#include "support.hpp"

using namespace adlab;
using testsupport::random_simplex;

namespace {

std::vector<double> row_of(const Tensor& t, std::size_t r) {
  const auto s = t.row(r);
  return {s.begin(), s.end()};
}

double direct_kl(const std::vector<double>& p, const std::vector<double>& q) {
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p[i] > 0.0) s += p[i] * std::log(p[i] / q[i]);
  return s;
}

TrainConfig tiny_train(std::size_t epochs) {
  TrainConfig c;
  c.epochs = epochs;
  c.batch_size = 16;
  c.lr = 0.05;
  c.lr_decay_epochs = {};
  c.swa_start_epoch = epochs;
  c.eval_attack = eval_attack_for(0.05, 0.0, 1.0);
  c.train_attack = train_attack_for(0.05, 0.0, 1.0);
  c.train_attack.steps = 3;
  c.eval_attack.steps = 5;
  c.distill.method = Method::PgdAt;
  c.tas_every = 0;
  return c;
}

DataSplit tiny_data(std::size_t per_class) {
  DatasetSpec spec;
  spec.classes = 3;
  spec.samples_per_class = per_class;
  spec.seed = 21;
  return split_dataset(gen_dataset(spec), 0.75, 5);
}

}  // namespace

TEST_CASE("geometric mean on the simplex") {
  Rng rng(1);
  const auto p = row_of(random_simplex(1, 5, rng, 1e-4), 0);
  const std::vector<std::vector<double>> same{p, p, p};
  const auto g = geometric_mean_simplex(same);
  for (std::size_t i = 0; i < 5; ++i) CHECK(std::abs(g[i] - p[i]) < 1e-15);

  const std::vector<std::vector<double>> sym{{0.8, 0.2}, {0.2, 0.8}};
  const auto half = geometric_mean_simplex(sym);
  CHECK(half[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(half[1] == doctest::Approx(0.5).epsilon(1e-15));

  for (int t = 0; t < 200; ++t) {
    const Tensor rows = random_simplex(3, 6, rng, 1e-4);
    std::vector<std::vector<double>> preds{row_of(rows, 0), row_of(rows, 1), row_of(rows, 2)};
    std::vector<double> ref(6);
    double z = 0.0;
    for (std::size_t i = 0; i < 6; ++i) z += (ref[i] = std::cbrt(preds[0][i] * preds[1][i] * preds[2][i]));
    const auto got = geometric_mean_simplex(preds);
    for (std::size_t i = 0; i < 6; ++i) CHECK(std::abs(got[i] - ref[i] / z) < 1e-12);
    std::reverse(preds.begin(), preds.end());
    std::swap(preds[0], preds[1]);
    const auto perm = geometric_mean_simplex(preds);
    for (std::size_t i = 0; i < 6; ++i) CHECK(std::abs(perm[i] - got[i]) < 1e-15);
  }
  CHECK_THROWS_AS(geometric_mean_simplex(std::vector<std::vector<double>>{}), ContractError);
}

TEST_CASE("point decomposition examples") {
  Rng rng(2);
  const auto y = row_of(random_simplex(1, 4, rng, 1e-3), 0);
  const auto p = row_of(random_simplex(1, 4, rng, 1e-3), 0);
  const std::vector<std::vector<double>> one{p};
  const PointDecomposition d = decompose_point(y, one);
  CHECK(d.variance == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(std::abs(d.risk - (d.noise + d.bias)) < 1e-12);

  const std::vector<double> hot{0, 0, 1, 0};
  CHECK(decompose_point(hot, one).noise == 0.0);
  CHECK_THROWS_AS(decompose_point(hot, std::vector<std::vector<double>>{}), ContractError);
}

TEST_CASE("decomposition against direct oracles") {
  Rng rng(3);
  for (int t = 0; t < 10000; ++t) {
    const std::size_t n = std::array<std::size_t, 3>{1, 2, 5}[t % 3];
    const Tensor ys = random_simplex(1, 5, rng, 1e-6);
    const auto y = t % 2 == 0 ? row_of(ys, 0) : row_of(one_hot(std::vector<int>{t % 5}, 5).values(), 0);
    const Tensor ps = random_simplex(n, 5, rng, 1e-6);
    std::vector<std::vector<double>> preds;
    for (std::size_t j = 0; j < n; ++j) preds.push_back(row_of(ps, j));
    const PointDecomposition d = decompose_point(y, preds);
    const auto bar = geometric_mean_simplex(preds);
    double noise = 0.0, ce = 0.0, var = 0.0;
    for (std::size_t i = 0; i < 5; ++i)
      if (y[i] > 0.0) noise -= y[i] * std::log(y[i]);
    for (const auto& p : preds) {
      for (std::size_t i = 0; i < 5; ++i) ce -= y[i] * std::log(p[i]) / static_cast<double>(n);
      var += direct_kl(bar, p) / static_cast<double>(n);
    }
    CHECK(std::abs(d.noise - noise) < 1e-10);
    CHECK(std::abs(d.bias - direct_kl(y, bar)) < 1e-10);
    CHECK(std::abs(d.variance - var) < 1e-10);
    CHECK(std::abs(d.risk - ce) < 1e-10);
    CHECK(std::abs(ce - (d.noise + d.bias + d.variance)) < 1e-8);
    CHECK(d.noise >= 0.0);
    CHECK(d.bias >= 0.0);
    CHECK(d.variance >= 0.0);
  }
}

TEST_CASE("split plan validation") {
  CHECK_THROWS_AS((SplitPlan{0, 2, 1, false}.validate()), ConfigError);
  CHECK_THROWS_AS((SplitPlan{2, 0, 1, false}.validate()), ConfigError);
  CHECK_NOTHROW(SplitPlan{}.validate());
}

TEST_CASE("adversarial variance estimator") {
  const DataSplit data = tiny_data(21);
  const std::vector<std::size_t> layers{2, 8, 3};
  const TrainConfig cfg = tiny_train(3);

  const VarianceReport single = estimate_avar(data.train, data.test, nullptr, layers, cfg, {1, 2, 4, false});
  CHECK(single.variance == 0.0);
  for (const auto& rep : single.per_point)
    for (const auto& p : rep) CHECK(p.variance == 0.0);

  const VarianceReport dup = estimate_avar(data.train, data.test, nullptr, layers, cfg, {2, 1, 4, true});
  CHECK(dup.variance == 0.0);

  const SplitPlan plan{2, 2, 9, false};
  const VarianceReport r = estimate_avar(data.train, data.test, nullptr, layers, cfg, plan);
  CHECK(r.splits == 2);
  CHECK(r.repetitions == 2);
  CHECK(r.per_repetition_variance.size() == 2);
  CHECK(r.variance == (r.per_repetition_variance[0] + r.per_repetition_variance[1]) / 2.0);
  CHECK(r.variance > 0.0);
  CHECK(r.max_abs_residual() < 1e-8);
  CHECK(r.noise >= 0.0);
  CHECK(r.bias >= 0.0);
  CHECK(r.per_point.size() == 2);
  CHECK(r.per_point[0].size() == data.test.size());
  CHECK(r.split_robust_overfitting.size() == 4);

  // 47 training samples over 2 splits leave one out per repetition.
  REQUIRE(data.train.size() % 2 == 1);
  REQUIRE(r.dropped_indices.size() == 2);
  for (const auto& d : r.dropped_indices) {
    CHECK(d.size() == 1);
    CHECK(d[0] < data.train.size());
  }

  const VarianceReport again = estimate_avar(data.train, data.test, nullptr, layers, cfg, plan);
  CHECK(again.variance == r.variance);
  CHECK(again.risk == r.risk);

  CHECK_THROWS_AS(estimate_avar(data.train, data.test, nullptr, layers, cfg, {1000, 1, 1, false}), ConfigError);
}
