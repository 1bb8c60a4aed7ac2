#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "adlab/errors.hpp"
#include "adlab/experiment.hpp"
#include "adlab/io.hpp"

using namespace adlab;
namespace fs = std::filesystem;

namespace {

fs::path root() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / "adlab_test_cli";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

const char* kSmall = R"({
  "seed": 5,
  "dataset": {"classes": 3, "samples_per_class": 30},
  "attack": {"train_steps": 3, "eval_steps": 5},
  "teacher": {"hidden": [16], "train": {"epochs": 4}},
  "student": {"hidden": [8]},
  "train": {"epochs": 4, "batch_size": 16, "tas_every": 2},
  "avar": {"splits": 2, "repetitions": 2},
  "tas": {"bins": 10},
  "sweep": {"parameter": "beta", "values": [0, 0.5]}
})";

fs::path write_config(const std::string& name, const std::string& text) {
  const fs::path p = root() / name;
  write_file_atomic(p, text);
  return p;
}

int cli(std::vector<std::string> args) {
  args.insert(args.begin(), "adlab");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file()) out[e.path().filename().string()] = read_file_text(e.path());
  return out;
}

Table read_table(const fs::path& p) { return parse_structured(read_file_text(p)); }

double num(const Cell& c) {
  if (const auto* d = std::get_if<double>(&c)) return *d;
  if (const auto* i = std::get_if<std::int64_t>(&c)) return static_cast<double>(*i);
  FAIL("not a number");
  return 0.0;
}

}  // namespace

TEST_CASE("usage and config errors map to exit codes") {
  const auto cfg = write_config("small.json", kSmall);
  CHECK(cli({}) == 2);
  CHECK(cli({"bogus", "--config", cfg.string()}) == 2);
  CHECK(cli({"train"}) == 2);
  CHECK(cli({"train", "--config", cfg.string(), "--seed", "notanumber"}) == 2);
  CHECK(cli({"train", "--config", (root() / "missing.json").string()}) == 3);
  CHECK(cli({"train", "--config", write_config("typo.json", R"({"train": {"epoch": 3}})").string()}) == 3);
  CHECK(cli({"train", "--config", write_config("top.json", R"({"trian": {}})").string()}) == 3);
  CHECK(cli({"train", "--config", write_config("broken.json", "{\"seed\": ").string()}) == 3);
  CHECK(cli({"train", "--config", write_config("method.json", R"({"train": {"method": "mart"}})").string()}) == 3);
  CHECK(cli({"train", "--config", cfg.string(), "--format", "xml"}) == 3);

  const fs::path locked = root() / "locked";
  fs::create_directories(locked);
  write_file_atomic(locked / ".adlab.lock", "");
  CHECK(cli({"gen-data", "--config", cfg.string(), "--out", locked.string()}) == 4);
  CHECK(!fs::exists(locked / "dataset.csv"));
}

TEST_CASE("config parsing") {
  const ExperimentConfig c = parse_experiment_config("{}");
  CHECK(c.dataset.samples_per_class == 500);
  CHECK(c.epsilon_absolute() == doctest::Approx(0.25 * 0.1).epsilon(1e-15));
  CHECK(c.train.epochs == 60);
  CHECK(c.train.lr_decay_epochs == std::vector<std::size_t>{30, 45});
  CHECK(c.train.swa_start_epoch == 28);
  CHECK(c.train.distill.method == Method::Saad);
  const ExperimentConfig o = parse_experiment_config(kSmall, {}, 77);
  CHECK(o.seed == 77);
  CHECK(o.train.epochs == 4);
  CHECK(parse_experiment_config(kSmall).canonical == parse_experiment_config(kSmall).canonical);
  CHECK_THROWS_AS(parse_experiment_config(R"({"teacher": {"emulation": {"mode": "hot"}}})"), ConfigError);
  CHECK_THROWS_AS(parse_experiment_config(R"({"teacher": {"train": {"method": "saad"}}})"), ConfigError);
  CHECK_THROWS_AS(parse_experiment_config(R"({"sweep": {"parameter": "gamma"}})"), ConfigError);
  CHECK_THROWS_AS(parse_experiment_config(R"({"dataset": {"class_margin": 0}})"), ConfigError);
  CHECK_THROWS_AS(parse_experiment_config("[1, 2]"), ConfigError);
}

TEST_CASE("metrics tables") {
  MetricsRecord empty;
  const std::string header = to_csv(metrics_table(empty));
  CHECK(header ==
        "epoch,lr,train_loss,clean_train_acc,clean_test_acc,robust_train_acc,robust_test_acc,mean_weight,tas_ratio\n");

  MetricsRecord rec;
  for (std::size_t e = 0; e < 3; ++e) {
    MetricsRow r;
    r.epoch = e;
    r.lr = 0.1 / 3.0;
    r.train_loss = std::nextafter(1.0, 2.0) * static_cast<double>(e + 1);
    r.clean_test_acc = 100.0 / 3.0;
    r.mean_weight = 1e-300;
    if (e == 1) r.tas_ratio = 2.0 / 7.0;
    rec.rows.push_back(r);
  }
  const std::string csv = to_csv(metrics_table(rec));
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);
  CHECK(metrics_from_table(parse_structured(to_structured(metrics_table(rec)))) == rec);
  const auto plot = nlohmann::json::parse(plot_data(rec));
  CHECK(plot.at("series").is_array());

  const fs::path bad = root() / "no_such_dir" / "m.csv";
  CHECK_THROWS_AS(export_metrics(rec, OutputFormat::Csv, bad), IoError);
}

TEST_CASE("train then evaluate agree; tas and avar outputs are consistent") {
  const auto cfg = write_config("small.json", kSmall);
  const fs::path out = root() / "run";
  REQUIRE(cli({"train", "--config", cfg.string(), "--out", out.string(), "--format", "structured"}) == 0);
  const Table metrics = read_table(out / "metrics.json");
  CHECK(metrics.rows.size() == 4);
  const Table trained_eval = read_table(out / "evaluation.json");
  const auto& last = metrics.rows.back();
  CHECK(num(trained_eval.rows[0][1]) == num(last[4]));
  CHECK(num(trained_eval.rows[0][3]) == num(last[6]));
  CHECK(fs::exists(out / "manifest.json"));
  CHECK(!fs::exists(out / ".adlab.lock"));

  const fs::path ev = root() / "eval";
  const std::string ckpt = (out / "student.ckpt").string();
  const auto ecfg = write_config("eval.json", std::string(kSmall).insert(1, "\"evaluate\": {\"checkpoint\": \"" + ckpt + "\"},"));
  REQUIRE(cli({"evaluate", "--config", ecfg.string(), "--out", ev.string(), "--format", "structured"}) == 0);
  const Table evaluated = read_table(ev / "evaluation.json");
  for (std::size_t c = 1; c < 4; ++c) CHECK(num(evaluated.rows[0][c]) == num(trained_eval.rows[0][c]));
  const Table sweep = read_table(ev / "robustness_sweep.json");
  REQUIRE(sweep.rows.size() == 3);
  CHECK(num(sweep.rows[1][2]) <= num(sweep.rows[0][2]));
  CHECK(num(sweep.rows[2][2]) <= num(sweep.rows[1][2]));

  const fs::path tas = root() / "tas";
  REQUIRE(cli({"tas", "--config", cfg.string(), "--out", tas.string(), "--format", "structured"}) == 0);
  const Table scores = read_table(tas / "tas_scores.json");
  const Table summary = read_table(tas / "tas_summary.json");
  std::size_t hits = 0;
  for (const auto& row : scores.rows) hits += num(row[1]) >= 0.0 ? 1 : 0;
  CHECK(num(summary.rows[0][2]) == static_cast<double>(hits) / static_cast<double>(scores.rows.size()));
  CHECK(num(summary.rows[0][3]) == 0.0);

  const fs::path avar = root() / "avar";
  REQUIRE(cli({"avar", "--config", cfg.string(), "--out", avar.string(), "--format", "structured"}) == 0);
  const Table points = read_table(avar / "avar_points.json");
  CHECK(!points.rows.empty());
  for (const auto& row : points.rows) CHECK(std::abs(num(row[6])) < 1e-8);
}

TEST_CASE("beta sweep at zero matches plain saad training") {
  const auto cfg = write_config("small.json", kSmall);
  const fs::path sweep = root() / "sweep";
  const fs::path plain = root() / "plain";
  REQUIRE(cli({"sweep", "--config", cfg.string(), "--out", sweep.string()}) == 0);
  REQUIRE(cli({"train", "--config", cfg.string(), "--out", plain.string()}) == 0);
  CHECK(read_file_text(sweep / "metrics_beta_0.csv") == read_file_text(plain / "metrics.csv"));
  CHECK(read_file_text(sweep / "metrics_beta_0.5.csv") != read_file_text(plain / "metrics.csv"));
}

TEST_CASE("every subcommand reproduces its outputs byte for byte") {
  const auto cfg = write_config("small.json", kSmall);
  std::string alpha_cfg = kSmall;
  const std::string beta_grid = R"("beta", "values": [0, 0.5])";
  alpha_cfg.replace(alpha_cfg.find(beta_grid), beta_grid.size(), R"("alpha", "values": [0, 1])");
  const auto acfg = write_config("alpha.json", alpha_cfg);
  for (const auto& [sub, file] : std::vector<std::pair<std::string, fs::path>>{{"gen-data", cfg},
                                                                               {"train", cfg},
                                                                               {"tas", cfg},
                                                                               {"avar", cfg},
                                                                               {"sweep", cfg},
                                                                               {"sweep", acfg}}) {
    const fs::path out = root() / ("det_" + sub + "_" + file.stem().string());
    REQUIRE(cli({sub, "--config", file.string(), "--out", out.string()}) == 0);
    const auto first = snapshot(out);
    fs::remove_all(out);
    REQUIRE(cli({sub, "--config", file.string(), "--out", out.string()}) == 0);
    CHECK_MESSAGE(snapshot(out) == first, sub);
    CHECK(first.count("manifest.json") == 1);
  }
  const fs::path ev = root() / "det_train_small";
  REQUIRE(cli({"evaluate", "--config", cfg.string(), "--out", ev.string()}) == 0);
  const auto once = read_file_text(ev / "evaluation.csv");
  REQUIRE(cli({"evaluate", "--config", cfg.string(), "--out", ev.string()}) == 0);
  CHECK(read_file_text(ev / "evaluation.csv") == once);
}
