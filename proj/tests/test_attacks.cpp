#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "adlab/attacks.hpp"
#include "adlab/errors.hpp"
#include "support.hpp"

using namespace adlab;
using testsupport::random_labels;
using testsupport::random_mlp;
using testsupport::random_tensor;

namespace {

AttackConfig base_cfg(double eps, std::size_t steps, InnerLoss loss = InnerLoss::CeStudent) {
  AttackConfig c;
  c.epsilon = eps;
  c.step_size = eps / 4.0;
  c.steps = steps;
  c.inner_loss = loss;
  c.seed = 99;
  return c;
}

void check_invariants(const PerturbedBatch& b, const Tensor& x, const AttackConfig& c) {
  for (std::size_t i = 0; i < x.size(); ++i) {
    CHECK(std::abs(b.delta[i]) <= c.epsilon + 1e-12);
    CHECK(b.x_adv[i] >= c.box_lo);
    CHECK(b.x_adv[i] <= c.box_hi);
    CHECK(b.x_adv[i] == std::clamp(x[i] + b.delta[i], c.box_lo, c.box_hi));
  }
}

// Linear two-class model with logits W x; the CE input gradient for label y
// is (W_other - W_y) * p_other.
ModelParams linear_model(const std::vector<double>& w0, const std::vector<double>& w1) {
  ModelParams m = zero_mlp(std::vector<std::size_t>{w0.size(), 2});
  for (std::size_t i = 0; i < w0.size(); ++i) {
    m.weights[0](0, i) = w0[i];
    m.weights[0](1, i) = w1[i];
  }
  return m;
}

}  // namespace

TEST_CASE("project_linf") {
  const Tensor inside({3}, std::vector<double>{0.1, -0.2, 0.0});
  CHECK(project_linf(inside, 0.5) == inside);
  const double eps = 0.3;
  const Tensor out = project_linf(Tensor({2}, std::vector<double>{2 * eps, -3 * eps}), eps);
  CHECK(out.storage() == std::vector<double>{eps, -eps});
  Rng rng(1);
  for (int t = 0; t < 50; ++t) {
    const Tensor d = random_tensor(3, 4, rng, -2, 2);
    const Tensor once = project_linf(d, 0.7);
    CHECK(project_linf(once, 0.7) == once);
  }
}

TEST_CASE("fgsm examples") {
  Rng rng(2);
  const ModelParams m = random_mlp({3, 5, 4}, rng);
  const Tensor x = random_tensor(6, 3, rng, 0.2, 0.8);
  const auto y = random_labels(6, 4, rng);
  const AttackConfig zero = base_cfg(0.0, 1);
  CHECK(fgsm(m, x, y, zero).x_adv == x);

  const AttackConfig c = base_cfg(0.1, 1);
  check_invariants(fgsm(m, x, y, c), x, c);

  // Linear binary model, box wide enough to never bind.
  const std::vector<double> w0{0.5, -1.0, 2.0}, w1{-0.25, 0.75, 1.5};
  const ModelParams lin = linear_model(w0, w1);
  AttackConfig wide = base_cfg(0.05, 1);
  wide.box_lo = -10;
  wide.box_hi = 10;
  const std::vector<int> label{0, 1};
  const Tensor xs = Tensor::from_rows({{0.1, 0.2, 0.3}, {-0.4, 0.5, 0.6}});
  const PerturbedBatch b = fgsm(lin, xs, label, wide);
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t i = 0; i < 3; ++i) {
      const double dir = label[r] == 0 ? w1[i] - w0[i] : w0[i] - w1[i];
      CHECK(std::abs(b.delta(r, i) - wide.epsilon * sign_of(dir)) < 1e-15);
    }
}

TEST_CASE("pgd degenerate and closed-form cases") {
  Rng rng(3);
  const ModelParams m = random_mlp({2, 6, 3}, rng);
  const Tensor x = random_tensor(5, 2, rng, 0.1, 0.9);
  const auto y = random_labels(5, 3, rng);
  AttackConfig none = base_cfg(0.1, 0);
  none.init_scale = 0.0;
  const PerturbedBatch b = pgd(m, nullptr, x, y, none);
  CHECK(b.x_adv == x);
  CHECK(b.loss_trace.empty());

  // 1-D linear model: one large step lands on epsilon * sign(w_other - w_y).
  const ModelParams lin = linear_model({0.3}, {-1.2});
  AttackConfig big = base_cfg(0.05, 1);
  big.step_size = 1.0;
  big.init_scale = 0.0;
  const Tensor x1 = Tensor::from_rows({{0.5}, {0.5}});
  const std::vector<int> y1{0, 1};
  const PerturbedBatch one = pgd(lin, nullptr, x1, y1, big);
  CHECK(std::abs(one.delta(0, 0) - big.epsilon * sign_of(-1.2 - 0.3)) < 1e-15);
  CHECK(std::abs(one.delta(1, 0) - big.epsilon * sign_of(0.3 + 1.2)) < 1e-15);
}

TEST_CASE("pgd loss trace is non-decreasing on a linear binary surrogate") {
  Rng rng(4);
  for (int t = 0; t < 20; ++t) {
    std::vector<double> w0(3), w1(3);
    std::uniform_real_distribution<double> u(-2, 2);
    for (auto& v : w0) v = u(rng);
    for (auto& v : w1) v = u(rng);
    const ModelParams lin = linear_model(w0, w1);
    const Tensor x = random_tensor(4, 3, rng, -0.5, 0.5);
    const auto y = random_labels(4, 2, rng);
    AttackConfig c = base_cfg(0.2, 8);
    c.box_lo = -5;
    c.box_hi = 5;
    c.init_scale = 0.0;
    const PerturbedBatch b = pgd(lin, nullptr, x, y, c);
    for (std::size_t k = 1; k < b.loss_trace.size(); ++k) CHECK(b.loss_trace[k] >= b.loss_trace[k - 1] - 1e-15);
  }
}

TEST_CASE("pgd needs a teacher for teacher losses") {
  Rng rng(5);
  const ModelParams m = random_mlp({2, 3}, rng);
  const Tensor x = random_tensor(2, 2, rng, 0, 1);
  const std::vector<int> y{0, 1};
  for (auto loss : {InnerLoss::KlTeacherClean, InnerLoss::KlTeacherAdv, InnerLoss::FastFirstOrder}) {
    CHECK_THROWS_AS(pgd(m, nullptr, x, y, base_cfg(0.1, 2, loss)), ConfigError);
  }
  CHECK_THROWS_AS(inner_loss_from_string("nope"), ConfigError);
  CHECK(inner_loss_from_string(to_string(InnerLoss::KlTeacherAdv)) == InnerLoss::KlTeacherAdv);
}

TEST_CASE("every inner loss respects the ball and the box, deterministically") {
  Rng rng(6);
  const ModelParams student = random_mlp({3, 5, 4}, rng);
  const Teacher teacher(random_mlp({3, 8, 4}, rng));
  for (int t = 0; t < 30; ++t) {
    const Tensor x = random_tensor(4, 3, rng, 0, 1);
    const auto y = random_labels(4, 4, rng);
    for (auto loss : {InnerLoss::CeStudent, InnerLoss::KlStudentClean, InnerLoss::KlTeacherClean,
                      InnerLoss::KlTeacherAdv, InnerLoss::FastFirstOrder}) {
      AttackConfig c = base_cfg(0.05 + 0.1 * (t % 3), static_cast<std::size_t>(t % 5), loss);
      c.step_size = 0.07;
      c.init_scale = 0.01 * (t % 2);
      const PerturbedBatch a = pgd(student, &teacher, x, y, c);
      check_invariants(a, x, c);
      const PerturbedBatch b = pgd(student, &teacher, x, y, c);
      CHECK(a.delta == b.delta);
    }
  }
}

TEST_CASE("fast inner max matches a linear teacher exactly") {
  Rng rng(7);
  // A single-layer teacher is affine, so its first-order correction is exact.
  const Teacher teacher(random_mlp({3, 4}, rng));
  const Tensor x = random_tensor(5, 3, rng, 0.2, 0.8);
  const auto y = random_labels(5, 4, rng);
  const TeacherLinearization lin = linearize_teacher(teacher, x, y);
  for (int t = 0; t < 20; ++t) {
    const Tensor d = project_linf(random_tensor(5, 3, rng, -0.1, 0.1), 0.1);
    Tensor xd = x;
    for (std::size_t i = 0; i < x.size(); ++i) xd[i] += d[i];
    const Tensor corrected = corrected_teacher_logits(lin.logits, lin.trueclass_grad, d, y, 1.0);
    const Tensor truth = teacher.logits(xd, y);
    for (std::size_t r = 0; r < 5; ++r) {
      const auto c = static_cast<std::size_t>(y[r]);
      CHECK(std::abs(corrected(r, c) - truth(r, c)) < 1e-10);
    }
  }
}

TEST_CASE("fast inner max with zero correction replays kl-teacher-clean") {
  Rng rng(8);
  const ModelParams student = random_mlp({3, 6, 4}, rng);
  const Teacher teacher(random_mlp({3, 8, 4}, rng));
  const Tensor x = random_tensor(6, 3, rng, 0, 1);
  const auto y = random_labels(6, 4, rng);
  AttackConfig c = base_cfg(0.1, 10, InnerLoss::KlTeacherClean);
  const PerturbedBatch ref = pgd(student, &teacher, x, y, c);
  const PerturbedBatch fast = fast_inner_max(student, teacher, x, y, c, 0.0);
  CHECK(fast.delta == ref.delta);
  CHECK(fast.loss_trace == ref.loss_trace);
}

TEST_CASE("teacher call counts per batch") {
  Rng rng(9);
  const ModelParams student = random_mlp({2, 4, 3}, rng);
  const Teacher teacher(random_mlp({2, 6, 3}, rng));
  const Tensor x = random_tensor(4, 2, rng, 0, 1);
  const std::vector<int> y{0, 1, 2, 0};
  AttackConfig c = base_cfg(0.1, 7, InnerLoss::FastFirstOrder);
  teacher.reset_counters();
  fast_inner_max(student, teacher, x, y, c, 1.0);
  CHECK(teacher.counters().forward == 1);
  CHECK(teacher.counters().backward == 1);
  teacher.reset_counters();
  c.inner_loss = InnerLoss::KlTeacherAdv;
  pgd(student, &teacher, x, y, c);
  CHECK(teacher.counters().forward == 7);
  CHECK(teacher.counters().backward == 7);
}

TEST_CASE("fast inner max shape errors") {
  Rng rng(10);
  const ModelParams student = random_mlp({3, 4}, rng);
  const Tensor x = random_tensor(2, 3, rng, 0, 1);
  const std::vector<int> y{0, 1};
  const AttackConfig c = base_cfg(0.1, 2, InnerLoss::FastFirstOrder);
  CHECK_THROWS_AS(fast_inner_max(student, Tensor::matrix(2, 4), Tensor::matrix(2, 2), x, y, c, 1.0), ContractError);
  CHECK_THROWS_AS(fast_inner_max(student, Tensor::matrix(3, 4), Tensor::matrix(2, 3), x, y, c, 1.0), ContractError);
}
