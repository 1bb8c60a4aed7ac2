#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <string>

#include "adlab/data.hpp"
#include "adlab/errors.hpp"
#include "adlab/io.hpp"
#include "adlab/train.hpp"
#include "support.hpp"

using namespace adlab;
using testsupport::random_mlp;

namespace {

TrainConfig small_config(std::size_t epochs, Method method, double eps) {
  TrainConfig c;
  c.epochs = epochs;
  c.batch_size = 16;
  c.lr = 0.05;
  c.lr_decay_epochs = {};
  c.swa_start_epoch = epochs;
  c.eval_attack = eval_attack_for(eps, 0.0, 1.0);
  c.eval_attack.steps = 5;
  c.train_attack = train_attack_for(eps, 0.0, 1.0);
  c.train_attack.steps = 3;
  c.distill.method = method;
  c.tas_every = 0;
  c.seed = 17;
  return c;
}

DataSplit blobs(std::size_t per_class, std::uint64_t seed) {
  DatasetSpec spec;
  spec.classes = 3;
  spec.samples_per_class = per_class;
  spec.class_margin = 0.15;
  spec.spread = 0.06;
  spec.seed = seed;
  return split_dataset(gen_dataset(spec), 0.75, seed);
}

ModelParams scalar_model(double w) {
  ModelParams m = zero_mlp(std::vector<std::size_t>{1, 1});
  m.weights[0][0] = w;
  return m;
}

}  // namespace

TEST_CASE("learning rate schedule") {
  TrainConfig c;
  c.epochs = 200;
  c.lr = 0.1;
  c.lr_decay_epochs = {100, 150};
  c.lr_decay_factor = 10;
  CHECK(lr_at(c, 0) == 0.1);
  CHECK(lr_at(c, 99) == 0.1);
  CHECK(lr_at(c, 100) == doctest::Approx(0.01).epsilon(1e-15));
  CHECK(lr_at(c, 150) == doctest::Approx(0.001).epsilon(1e-15));
  CHECK_THROWS_AS(lr_at(c, 200), ContractError);
  c.lr_decay_epochs = {};
  for (std::size_t e = 0; e < 200; e += 37) CHECK(lr_at(c, e) == 0.1);
  c.lr_decay_epochs = {0};
  CHECK(lr_at(c, 0) == doctest::Approx(0.01).epsilon(1e-15));
}

TEST_CASE("config validation") {
  TrainConfig c = small_config(5, Method::PgdAt, 0.1);
  CHECK_NOTHROW(c.validate());
  c.lr_decay_epochs = {3, 2};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.lr_decay_epochs = {5};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_config(5, Method::PgdAt, 0.1);
  c.swa_start_epoch = 6;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_config(5, Method::PgdAt, 0.1);
  c.momentum = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("sgd step") {
  ModelParams p = scalar_model(2.0);
  ModelParams v = scalar_model(0.0);
  ModelParams g = scalar_model(0.5);
  sgd_step(p, g, v, 0.1, 0.0, 0.0);
  CHECK(p.weights[0][0] == doctest::Approx(1.95).epsilon(1e-15));

  ModelParams still = scalar_model(2.0), vel = scalar_model(0.0);
  sgd_step(still, scalar_model(0.0), vel, 0.1, 0.9, 0.0);
  CHECK(still.weights[0][0] == 2.0);

  // f(w) = a w^2 / 2, so grad = a w; two steps against the scalar recurrence.
  const double a = 3.0, lr = 0.05, mom = 0.9, wd = 0.01;
  ModelParams q = scalar_model(1.5), qv = scalar_model(0.0);
  double w = 1.5, vel_ref = 0.0;
  for (int k = 0; k < 2; ++k) {
    sgd_step(q, scalar_model(a * q.weights[0][0]), qv, lr, mom, wd);
    vel_ref = mom * vel_ref + a * w + wd * w;
    w -= lr * vel_ref;
  }
  CHECK(std::abs(q.weights[0][0] - w) < 1e-12);
  CHECK(std::abs(qv.weights[0][0] - vel_ref) < 1e-12);

  ModelParams bad = scalar_model(NAN);
  CHECK_THROWS_AS(sgd_step(q, bad, qv, lr, mom, wd), RunError);
  CHECK_THROWS_AS(sgd_step(q, zero_mlp(std::vector<std::size_t>{2, 1}), qv, lr, mom, wd), ContractError);
}

TEST_CASE("zero epochs return the initial student") {
  const DataSplit d = blobs(10, 1);
  const ModelParams init = init_mlp(std::vector<std::size_t>{2, 8, 3}, 5);
  TrainConfig c = small_config(0, Method::PgdAt, 0.1);
  c.swa_start_epoch = 0;
  const TrainResult r = train(nullptr, init, d.train, d.test, c);
  CHECK(r.final_student == init);
  CHECK(r.swa_student == init);
  CHECK(r.metrics.rows.empty());
}

TEST_CASE("standard training separates separable data") {
  const DataSplit d = blobs(30, 2);
  const ModelParams init = init_mlp(std::vector<std::size_t>{2, 16, 3}, 9);
  TrainConfig c = small_config(50, Method::PgdAt, 0.0);
  c.train_attack.step_size = 0.0;
  c.train_attack.steps = 0;
  c.eval_attack.steps = 0;
  c.eval_attack.step_size = 0.0;
  c.lr = 0.1;
  const TrainResult r = train(nullptr, init, d.train, d.test, c);
  REQUIRE(r.metrics.rows.size() == 50);
  CHECK(r.metrics.rows.back().clean_train_acc == 100.0);
  for (const auto& row : r.metrics.rows) CHECK(row.robust_test_acc == row.clean_test_acc);
}

TEST_CASE("training is deterministic for every method") {
  const DataSplit d = blobs(12, 3);
  Rng rng(4);
  const Teacher teacher(random_mlp({2, 12, 3}, rng));
  const ModelParams init = init_mlp(std::vector<std::size_t>{2, 8, 3}, 6);
  for (auto m : {Method::PgdAt, Method::Trades, Method::Ard, Method::Rslad, Method::Adaad, Method::Igdm, Method::Saad,
                 Method::SaadC}) {
    TrainConfig c = small_config(3, m, 0.05);
    c.tas_every = 2;
    const TrainResult a = train(&teacher, init, d.train, d.test, c);
    const TrainResult b = train(&teacher, init, d.train, d.test, c);
    CHECK_MESSAGE(encode_checkpoint(a.final_student) == encode_checkpoint(b.final_student), to_string(m));
    CHECK(a.metrics == b.metrics);
    CHECK(a.metrics.rows.size() == 3);
    CHECK(a.metrics.rows[1].tas_ratio.has_value());
    CHECK(!a.metrics.rows[0].tas_ratio.has_value());
    for (const auto& row : a.metrics.rows) {
      CHECK(row.clean_test_acc >= 0.0);
      CHECK(row.clean_test_acc <= 100.0);
      CHECK(std::isfinite(row.train_loss));
    }
  }
  CHECK_THROWS_AS(train(nullptr, init, d.train, d.test, small_config(1, Method::Saad, 0.05)), ConfigError);
}

TEST_CASE("saad-c with beta zero reproduces saad bit for bit") {
  const DataSplit d = blobs(12, 5);
  Rng rng(6);
  const Teacher teacher(random_mlp({2, 12, 3}, rng), {EmulationMode::Sharpened, 0.5, 0.0});
  const ModelParams init = init_mlp(std::vector<std::size_t>{2, 8, 3}, 7);
  TrainConfig saad = small_config(4, Method::Saad, 0.05);
  TrainConfig c = saad;
  c.distill.method = Method::SaadC;
  c.distill.beta = 0.0;
  const TrainResult a = train(&teacher, init, d.train, d.test, saad);
  const TrainResult b = train(&teacher, init, d.train, d.test, c);
  CHECK(encode_checkpoint(a.final_student) == encode_checkpoint(b.final_student));
  CHECK(a.metrics == b.metrics);
  c.distill.beta = 0.5;
  const TrainResult other = train(&teacher, init, d.train, d.test, c);
  CHECK(encode_checkpoint(other.final_student) != encode_checkpoint(a.final_student));
}

TEST_CASE("swa student is the mean of the post-start snapshots") {
  const DataSplit d = blobs(10, 8);
  const ModelParams init = init_mlp(std::vector<std::size_t>{2, 6, 3}, 3);
  TrainConfig c = small_config(6, Method::PgdAt, 0.05);
  c.swa_start_epoch = 3;
  const TrainResult full = train(nullptr, init, d.train, d.test, c);
  CHECK(full.swa.count == 3);
  // Without decays, a shorter run is a prefix of the longer one.
  SwaState ref;
  for (std::size_t e = 4; e <= 6; ++e) {
    TrainConfig part = c;
    part.epochs = e;
    const TrainResult pr = train(nullptr, init, d.train, d.test, part);
    ref = swa_update(ref, pr.final_student);
  }
  for (std::size_t l = 0; l < init.layers(); ++l)
    for (std::size_t i = 0; i < init.weights[l].size(); ++i)
      CHECK(std::abs(full.swa_student.weights[l][i] - ref.averaged.weights[l][i]) < 1e-12);
}

TEST_CASE("divergence raises a run error naming the epoch") {
  const DataSplit d = blobs(10, 9);
  const ModelParams init = init_mlp(std::vector<std::size_t>{2, 6, 3}, 3);
  TrainConfig c = small_config(3, Method::PgdAt, 0.05);
  c.lr = 1e300;
  c.momentum = 0.0;
  try {
    train(nullptr, init, d.train, d.test, c);
    FAIL("expected divergence");
  } catch (const RunError& e) {
    CHECK(std::string(e.what()).find("epoch") != std::string::npos);
  }
}

TEST_CASE("evaluation") {
  // Class 0 iff 2x - 1 > 0.
  ModelParams m = zero_mlp(std::vector<std::size_t>{1, 2});
  m.weights[0][0] = 1.0;
  m.weights[0][1] = -1.0;
  m.biases[0][0] = -0.5;
  m.biases[0][1] = 0.5;
  Dataset d;
  d.classes = 2;
  d.x = Tensor::from_rows({{0.6}, {0.8}});
  d.labels = {0, 0};
  const AttackConfig zero = eval_attack_for(0.0, 0.0, 1.0);
  const EvalResult clean = evaluate(m, d, zero);
  CHECK(clean.clean_acc == 100.0);
  CHECK(clean.pgd_acc == 100.0);
  const EvalResult r = evaluate(m, d, eval_attack_for(0.2, 0.0, 1.0));
  CHECK(r.clean_acc == 100.0);
  CHECK(r.fgsm_acc == 50.0);
  CHECK(r.pgd_acc == 50.0);

  // Ties go to the lowest class index.
  const ModelParams flat = zero_mlp(std::vector<std::size_t>{1, 2});
  Dataset tie = d;
  tie.labels = {0, 1};
  CHECK(clean_accuracy(flat, tie) == 50.0);
}

TEST_CASE("robust accuracy is non-increasing over nested radii") {
  const DataSplit d = blobs(20, 10);
  Rng rng(11);
  for (int t = 0; t < 5; ++t) {
    const ModelParams m = random_mlp({2, 10, 3}, rng);
    const AttackConfig base = eval_attack_for(0.1, 0.0, 1.0);
    const std::vector<double> eps{0.0, 0.05, 0.1};
    const auto acc = pgd_accuracy_sweep(m, d.test, base, eps);
    CHECK(acc[0] == clean_accuracy(m, d.test));
    CHECK(acc[1] <= acc[0]);
    CHECK(acc[2] <= acc[1]);
  }
  CHECK_THROWS_AS(pgd_accuracy_sweep(random_mlp({2, 3}, rng), d.test, eval_attack_for(0.1, 0, 1),
                                     std::vector<double>{0.1, 0.05}),
                  ConfigError);
}
