#include "adlab/experiment.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <set>

#include <CLI11.hpp>
#include <json.hpp>

#include "adlab/errors.hpp"
#include "adlab/io.hpp"
#include "adlab/rng.hpp"

namespace adlab {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr const char* kVersion = "0.1.0";

// Seed tags for the independent streams derived from the top-level seed.
enum SeedTag : std::uint64_t {
  kDataSeed = 1,
  kTeacherInit = 2,
  kTeacherTrain = 3,
  kStudentInit = 4,
  kStudentTrain = 5,
  kAvarSeed = 6,
  kSplitSeed = 7,
};

std::string fmt_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// ---------------------------------------------------------------- config

void expect_object(const json& j, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected a section (object)");
}

void expect_keys(const json& j, const std::string& where, std::initializer_list<std::string_view> allowed) {
  expect_object(j, where);
  for (const auto& [key, _] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      std::string list;
      for (auto a : allowed) list += (list.empty() ? "" : ", ") + std::string(a);
      throw ConfigError("unknown key '" + (where.empty() ? key : where + "." + key) + "' (allowed: " + list + ")");
    }
  }
}

std::string path_of(const std::string& where, const char* key) { return where.empty() ? key : where + "." + key; }

void read(const json& j, const std::string& where, const char* key, double& out) {
  if (!j.contains(key)) return;
  const auto& v = j.at(key);
  if (!v.is_number()) throw ConfigError(path_of(where, key) + ": expected a number");
  out = v.get<double>();
  if (!std::isfinite(out)) throw ConfigError(path_of(where, key) + ": must be finite");
}

void read(const json& j, const std::string& where, const char* key, std::size_t& out) {
  if (!j.contains(key)) return;
  const auto& v = j.at(key);
  if (!v.is_number_unsigned()) throw ConfigError(path_of(where, key) + ": expected a non-negative integer");
  out = v.get<std::size_t>();
}

void read(const json& j, const std::string& where, const char* key, std::uint64_t& out, bool& present) {
  present = j.contains(key);
  if (!present) return;
  const auto& v = j.at(key);
  if (!v.is_number_unsigned()) throw ConfigError(path_of(where, key) + ": expected a non-negative integer");
  out = v.get<std::uint64_t>();
}

void read(const json& j, const std::string& where, const char* key, std::string& out) {
  if (!j.contains(key)) return;
  const auto& v = j.at(key);
  if (!v.is_string()) throw ConfigError(path_of(where, key) + ": expected a string");
  out = v.get<std::string>();
}

void read(const json& j, const std::string& where, const char* key, bool& out) {
  if (!j.contains(key)) return;
  const auto& v = j.at(key);
  if (!v.is_boolean()) throw ConfigError(path_of(where, key) + ": expected true or false");
  out = v.get<bool>();
}

void read(const json& j, const std::string& where, const char* key, std::vector<std::size_t>& out) {
  if (!j.contains(key)) return;
  const auto& v = j.at(key);
  if (!v.is_array()) throw ConfigError(path_of(where, key) + ": expected a list of non-negative integers");
  out.clear();
  for (const auto& e : v) {
    if (!e.is_number_unsigned()) throw ConfigError(path_of(where, key) + ": expected a list of non-negative integers");
    out.push_back(e.get<std::size_t>());
  }
}

void read(const json& j, const std::string& where, const char* key, std::vector<double>& out) {
  if (!j.contains(key)) return;
  const auto& v = j.at(key);
  if (!v.is_array()) throw ConfigError(path_of(where, key) + ": expected a list of numbers");
  out.clear();
  for (const auto& e : v) {
    if (!e.is_number()) throw ConfigError(path_of(where, key) + ": expected a list of numbers");
    out.push_back(e.get<double>());
  }
}

void read(const json& j, const std::string& where, const char* key, fs::path& out, const fs::path& base) {
  std::string s;
  read(j, where, key, s);
  if (s.empty()) return;
  fs::path p(s);
  out = p.is_absolute() || base.empty() ? p : base / p;
}

const json& section(const json& root, const char* key) {
  static const json empty = json::object();
  return root.contains(key) ? root.at(key) : empty;
}

std::vector<std::size_t> default_decay(std::size_t epochs) {
  std::vector<std::size_t> out;
  for (double f : {0.5, 0.75}) {
    const auto e = static_cast<std::size_t>(std::llround(f * static_cast<double>(epochs)));
    if (e > 0 && e < epochs && (out.empty() || e > out.back())) out.push_back(e);
  }
  return out;
}

void read_train(const json& j, const std::string& where, TrainConfig& t) {
  expect_keys(j, where,
              {"epochs", "batch_size", "lr", "momentum", "weight_decay", "lr_decay_epochs", "lr_decay_factor",
               "swa_start_epoch", "tas_every", "eval_train_limit", "method", "alpha_igdm", "beta", "trades_lambda",
               "weighting", "lambda_in"});
  read(j, where, "epochs", t.epochs);
  read(j, where, "batch_size", t.batch_size);
  read(j, where, "lr", t.lr);
  read(j, where, "momentum", t.momentum);
  read(j, where, "weight_decay", t.weight_decay);
  t.lr_decay_epochs = default_decay(t.epochs);
  read(j, where, "lr_decay_epochs", t.lr_decay_epochs);
  read(j, where, "lr_decay_factor", t.lr_decay_factor);
  t.swa_start_epoch = static_cast<std::size_t>(std::floor(0.475 * static_cast<double>(t.epochs)));
  read(j, where, "swa_start_epoch", t.swa_start_epoch);
  read(j, where, "tas_every", t.tas_every);
  read(j, where, "eval_train_limit", t.eval_train_limit);
  std::string method = to_string(t.distill.method);
  read(j, where, "method", method);
  t.distill.method = method_from_string(method);
  read(j, where, "alpha_igdm", t.distill.alpha_igdm);
  read(j, where, "beta", t.distill.beta);
  read(j, where, "trades_lambda", t.distill.trades_lambda);
  std::string weighting = to_string(t.distill.weighting);
  read(j, where, "weighting", weighting);
  t.distill.weighting = weighting_from_string(weighting);
  read(j, where, "lambda_in", t.distill.lambda_in);
}

json train_json(const TrainConfig& t) {
  return {{"epochs", t.epochs},
          {"batch_size", t.batch_size},
          {"lr", t.lr},
          {"momentum", t.momentum},
          {"weight_decay", t.weight_decay},
          {"lr_decay_epochs", t.lr_decay_epochs},
          {"lr_decay_factor", t.lr_decay_factor},
          {"swa_start_epoch", t.swa_start_epoch},
          {"tas_every", t.tas_every},
          {"eval_train_limit", t.eval_train_limit},
          {"method", to_string(t.distill.method)},
          {"alpha_igdm", t.distill.alpha_igdm},
          {"beta", t.distill.beta},
          {"trades_lambda", t.distill.trades_lambda},
          {"weighting", to_string(t.distill.weighting)},
          {"lambda_in", t.distill.lambda_in},
          {"seed", t.seed}};
}

json attack_json(const AttackConfig& a) {
  return {{"epsilon", a.epsilon},     {"step_size", a.step_size}, {"steps", a.steps},
          {"init_scale", a.init_scale}, {"box", {a.box_lo, a.box_hi}}};
}

json canonical_json(const ExperimentConfig& c) {
  const auto& d = c.dataset;
  json j;
  j["seed"] = c.seed;
  j["dataset"] = {{"kind", to_string(d.kind)},
                  {"dims", d.dims},
                  {"classes", d.classes},
                  {"samples_per_class", d.samples_per_class},
                  {"class_margin", d.class_margin},
                  {"spread", d.spread},
                  {"images", d.images_path.string()},
                  {"labels", d.labels_path.string()},
                  {"normalize_to", {d.normalize_lo, d.normalize_hi}},
                  {"seed", d.seed},
                  {"train_fraction", d.train_fraction}};
  j["attack"] = {{"epsilon", c.epsilon},
                 {"epsilon_absolute", c.epsilon_absolute()},
                 {"train", attack_json(c.train.train_attack)},
                 {"eval", attack_json(c.train.eval_attack)}};
  j["teacher"] = {{"hidden", c.teacher.hidden},
                  {"checkpoint", c.teacher.checkpoint.string()},
                  {"emulation",
                   {{"mode", to_string(c.teacher.emulation.mode)},
                    {"temperature", c.teacher.emulation.temperature},
                    {"alpha", c.teacher.emulation.alpha}}},
                  {"train", train_json(c.teacher.train)}};
  j["student"] = {{"hidden", c.student_hidden}};
  j["train"] = train_json(c.train);
  j["avar"] = {{"splits", c.avar.splits},
               {"repetitions", c.avar.repetitions},
               {"force_identical", c.avar.force_identical},
               {"seed", c.avar.seed}};
  j["tas"] = {{"bins", c.tas_bins}, {"student_checkpoint", c.tas_student_checkpoint.string()}};
  j["evaluate"] = {{"checkpoint", c.evaluate_checkpoint.string()}, {"sweep", c.evaluate_sweep}};
  j["sweep"] = {{"parameter", c.sweep.parameter}, {"values", c.sweep.values}};
  j["outputs"] = {{"format", c.format == OutputFormat::Csv ? "csv" : "structured"}};
  return j;
}

}  // namespace

OutputFormat output_format_from_string(const std::string& name) {
  if (name == "csv") return OutputFormat::Csv;
  if (name == "structured" || name == "json") return OutputFormat::Structured;
  throw ConfigError("unknown output format '" + name + "' (use csv or structured)");
}

std::string extension(OutputFormat format) { return format == OutputFormat::Csv ? ".csv" : ".json"; }

double ExperimentConfig::epsilon_absolute() const {
  return dataset.kind == DatasetKind::IdxImage ? epsilon : epsilon * dataset.class_margin;
}

ExperimentConfig parse_experiment_config(const std::string& text, const fs::path& base_dir,
                                         std::optional<std::uint64_t> seed_override) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid structured text: ") + e.what());
  }
  expect_keys(root, "",
              {"seed", "dataset", "attack", "teacher", "student", "train", "avar", "tas", "evaluate", "sweep",
               "outputs"});
  ExperimentConfig c;
  bool present = false;
  read(root, "", "seed", c.seed, present);
  if (seed_override) c.seed = *seed_override;

  // dataset
  {
    const json& j = section(root, "dataset");
    const std::string w = "dataset";
    expect_keys(j, w,
                {"kind", "dims", "classes", "samples_per_class", "class_margin", "spread", "images", "labels",
                 "normalize_to", "seed", "train_fraction"});
    auto& d = c.dataset;
    d.samples_per_class = 500;
    std::string kind = to_string(d.kind);
    read(j, w, "kind", kind);
    d.kind = dataset_kind_from_string(kind);
    read(j, w, "dims", d.dims);
    read(j, w, "classes", d.classes);
    read(j, w, "samples_per_class", d.samples_per_class);
    read(j, w, "class_margin", d.class_margin);
    read(j, w, "spread", d.spread);
    read(j, w, "images", d.images_path, base_dir);
    read(j, w, "labels", d.labels_path, base_dir);
    std::vector<double> box{d.normalize_lo, d.normalize_hi};
    read(j, w, "normalize_to", box);
    if (box.size() != 2) throw ConfigError("dataset.normalize_to: expected [lo, hi]");
    d.normalize_lo = box[0];
    d.normalize_hi = box[1];
    d.seed = derive_seed(c.seed, {kDataSeed});
    read(j, w, "seed", d.seed, present);
    read(j, w, "train_fraction", d.train_fraction);
    d.validate();
  }

  // attack
  {
    const json& j = section(root, "attack");
    const std::string w = "attack";
    expect_keys(j, w, {"epsilon", "step_size", "train_steps", "eval_steps", "init_scale"});
    if (c.dataset.kind == DatasetKind::IdxImage) c.epsilon = 8.0 / 255.0 * (c.dataset.normalize_hi - c.dataset.normalize_lo);
    read(j, w, "epsilon", c.epsilon);
    if (j.contains("step_size")) {
      double s = 0.0;
      read(j, w, "step_size", s);
      c.step_size = s;
    }
    read(j, w, "train_steps", c.train_steps);
    read(j, w, "eval_steps", c.eval_steps);
    read(j, w, "init_scale", c.init_scale);
    if (!(c.epsilon >= 0.0)) throw ConfigError("attack.epsilon must be >= 0");
  }
  const double eps = c.epsilon_absolute();
  const double unit = c.dataset.kind == DatasetKind::IdxImage ? 1.0 : c.dataset.class_margin;
  const double step = c.step_size ? *c.step_size * unit : (eps > 0.0 ? eps / 4.0 : 1.0);
  AttackConfig train_attack = train_attack_for(eps, c.dataset.normalize_lo, c.dataset.normalize_hi);
  train_attack.step_size = step;
  train_attack.steps = c.train_steps;
  train_attack.init_scale = c.init_scale;
  AttackConfig eval_attack = eval_attack_for(eps, c.dataset.normalize_lo, c.dataset.normalize_hi);
  eval_attack.step_size = step;
  eval_attack.steps = c.eval_steps;

  // teacher
  {
    const json& j = section(root, "teacher");
    const std::string w = "teacher";
    expect_keys(j, w, {"hidden", "checkpoint", "emulation", "train"});
    read(j, w, "hidden", c.teacher.hidden);
    read(j, w, "checkpoint", c.teacher.checkpoint, base_dir);
    const json& e = section(j, "emulation");
    expect_keys(e, "teacher.emulation", {"mode", "temperature", "alpha"});
    std::string mode = to_string(c.teacher.emulation.mode);
    read(e, "teacher.emulation", "mode", mode);
    c.teacher.emulation.mode = emulation_mode_from_string(mode);
    read(e, "teacher.emulation", "temperature", c.teacher.emulation.temperature);
    read(e, "teacher.emulation", "alpha", c.teacher.emulation.alpha);
    c.teacher.emulation.validate();
    c.teacher.train.distill.method = Method::PgdAt;
    c.teacher.train.tas_every = 0;
    read_train(section(j, "train"), "teacher.train", c.teacher.train);
    if (c.teacher.train.distill.uses_teacher()) {
      throw ConfigError("teacher.train.method must be pgd-at or trades (a teacher has no teacher)");
    }
    c.teacher.train.seed = derive_seed(c.seed, {kTeacherTrain});
    c.teacher.train.train_attack = train_attack;
    c.teacher.train.eval_attack = eval_attack;
    c.teacher.train.validate();
  }

  {
    const json& j = section(root, "student");
    expect_keys(j, "student", {"hidden"});
    read(j, "student", "hidden", c.student_hidden);
  }
  for (auto h : c.teacher.hidden) {
    if (h == 0) throw ConfigError("teacher.hidden: widths must be positive");
  }
  for (auto h : c.student_hidden) {
    if (h == 0) throw ConfigError("student.hidden: widths must be positive");
  }

  read_train(section(root, "train"), "train", c.train);
  c.train.seed = derive_seed(c.seed, {kStudentTrain});
  c.train.train_attack = train_attack;
  c.train.eval_attack = eval_attack;
  c.train.validate();

  {
    const json& j = section(root, "avar");
    expect_keys(j, "avar", {"splits", "repetitions", "force_identical"});
    read(j, "avar", "splits", c.avar.splits);
    read(j, "avar", "repetitions", c.avar.repetitions);
    read(j, "avar", "force_identical", c.avar.force_identical);
    c.avar.seed = derive_seed(c.seed, {kAvarSeed});
    c.avar.validate();
  }
  {
    const json& j = section(root, "tas");
    expect_keys(j, "tas", {"bins", "student_checkpoint"});
    read(j, "tas", "bins", c.tas_bins);
    read(j, "tas", "student_checkpoint", c.tas_student_checkpoint, base_dir);
    if (c.tas_bins == 0) throw ConfigError("tas.bins must be >= 1");
  }
  {
    const json& j = section(root, "evaluate");
    expect_keys(j, "evaluate", {"checkpoint", "sweep"});
    read(j, "evaluate", "checkpoint", c.evaluate_checkpoint, base_dir);
    read(j, "evaluate", "sweep", c.evaluate_sweep);
    for (std::size_t i = 0; i < c.evaluate_sweep.size(); ++i) {
      if (!(c.evaluate_sweep[i] >= 0.0) || (i > 0 && c.evaluate_sweep[i] < c.evaluate_sweep[i - 1])) {
        throw ConfigError("evaluate.sweep: fractions must be >= 0 and non-decreasing");
      }
    }
  }
  {
    const json& j = section(root, "sweep");
    expect_keys(j, "sweep", {"parameter", "values"});
    read(j, "sweep", "parameter", c.sweep.parameter);
    read(j, "sweep", "values", c.sweep.values);
    if (c.sweep.parameter != "beta" && c.sweep.parameter != "alpha") {
      throw ConfigError("sweep.parameter must be 'beta' or 'alpha'");
    }
    for (double v : c.sweep.values) {
      if (!(v >= 0.0) || (c.sweep.parameter == "alpha" && v > 1.0)) {
        throw ConfigError("sweep.values out of range for " + c.sweep.parameter);
      }
    }
  }
  {
    const json& j = section(root, "outputs");
    expect_keys(j, "outputs", {"dir", "format"});
    read(j, "outputs", "dir", c.out_dir, base_dir);
    std::string format = "csv";
    read(j, "outputs", "format", format);
    c.format = output_format_from_string(format);
  }
  c.canonical = canonical_json(c).dump(2);
  return c;
}

ExperimentConfig load_experiment_config(const fs::path& path, std::optional<std::uint64_t> seed_override) {
  std::string text;
  try {
    text = read_file_text(path);
  } catch (const IoError& e) {
    throw ConfigError(std::string("cannot read config: ") + e.what());
  }
  return parse_experiment_config(text, path.parent_path(), seed_override);
}

std::string config_reference() {
  return R"(Config file: a structured-text (JSON) object with the sections below. Every key
is optional; unknown keys are errors.

  seed                      base seed; every other stream is derived from it (u64, 0)
  dataset.kind              gaussian-mixture | concentric | idx-image (gaussian-mixture)
  dataset.dims              feature dimension, synthetic kinds (2)
  dataset.classes           class count, synthetic kinds (4)
  dataset.samples_per_class synthetic samples per class (500)
  dataset.class_margin      minimum cross-class distance, synthetic kinds (0.1)
  dataset.spread            cluster std or ring thickness, synthetic kinds (0.12)
  dataset.images            IDX image file (idx-image)
  dataset.labels            IDX label file (idx-image)
  dataset.normalize_to      [lo, hi] feature range and attack box ([0, 1])
  dataset.seed              overrides the derived data seed
  dataset.train_fraction    train share of the shuffled split (0.8)
  attack.epsilon            L-inf budget; fraction of class_margin for synthetic data,
                            absolute for IDX data (0.25; IDX: 8/255 of the box width)
  attack.step_size          per-step size, same units as epsilon (epsilon/4)
  attack.train_steps        training attack iterations (10)
  attack.eval_steps         evaluation PGD iterations (20)
  attack.init_scale         training attack Gaussian init std (0.001)
  teacher.hidden            teacher hidden widths ([128, 128])
  teacher.checkpoint        load this teacher instead of training one
  teacher.emulation.mode    as-trained | temperature-sharpened | label-interpolated
  teacher.emulation.temperature  sharpening temperature (1)
  teacher.emulation.alpha   one-hot interpolation weight in [0, 1] (0)
  teacher.train.*           training keys below; method pgd-at or trades (pgd-at)
  student.hidden            student hidden widths ([32])
  train.epochs              (60)
  train.batch_size          (64)
  train.lr                  initial learning rate (0.1)
  train.momentum            (0.9)
  train.weight_decay        (0.0005)
  train.lr_decay_epochs     epochs where lr is divided (half and three quarters of epochs)
  train.lr_decay_factor     (10)
  train.swa_start_epoch     first epoch absorbed into SWA (floor(0.475 * epochs))
  train.tas_every           TAS audit period in epochs, 0 = off (10)
  train.eval_train_limit    train samples used for per-epoch metrics, 0 = all (0)
  train.method              pgd-at | trades | ard | rslad | adaad | igdm | saad | saad-c (saad)
  train.alpha_igdm          gradient-matching weight (1)
  train.beta                saad-c clean-term weight (0.2)
  train.trades_lambda       (6)
  train.weighting           entropy | unit (entropy)
  train.lambda_in           fast inner max correction weight (1)
  avar.splits               disjoint splits per repetition (2)
  avar.repetitions          (2)
  avar.force_identical      every split reuses split 0's data and seed (false)
  tas.bins                  entropy histogram bins (50)
  tas.student_checkpoint    audit this student instead of training one
  evaluate.checkpoint       model to evaluate (<out>/student.ckpt)
  evaluate.sweep            fractions of epsilon for the robustness curve ([0, 0.5, 1])
  sweep.parameter           beta (saad-c training) | alpha (teacher interpolation, avar)
  sweep.values              grid ([0, 0.2, 0.5])
  outputs.dir               output directory (adlab-out)
  outputs.format            csv | structured (csv)
)";
}

// ---------------------------------------------------------------- tables

std::string to_csv(const Table& table) {
  std::string out;
  for (std::size_t i = 0; i < table.columns.size(); ++i) out += (i ? "," : "") + table.columns[i];
  out += '\n';
  for (const auto& row : table.rows) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) out += ',';
      std::visit(
          [&](const auto& v) {
            using T = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<T, double>) {
              out += fmt_double(v);
            } else if constexpr (std::is_same_v<T, std::int64_t>) {
              out += std::to_string(v);
            } else if constexpr (std::is_same_v<T, std::string>) {
              out += v;
            }
          },
          row[i]);
    }
    out += '\n';
  }
  return out;
}

std::string to_structured(const Table& table) {
  json rows = json::array();
  for (const auto& row : table.rows) {
    json obj = json::object();
    for (std::size_t i = 0; i < row.size() && i < table.columns.size(); ++i) {
      std::visit(
          [&](const auto& v) {
            using T = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<T, std::monostate>) {
              obj[table.columns[i]] = nullptr;
            } else {
              obj[table.columns[i]] = v;
            }
          },
          row[i]);
    }
    rows.push_back(std::move(obj));
  }
  json j = {{"columns", table.columns}, {"rows", std::move(rows)}};
  return j.dump(2) + "\n";
}

Table parse_structured(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("structured table: ") + e.what(), e.byte);
  }
  if (!j.is_object() || !j.contains("columns") || !j.contains("rows")) {
    throw FormatError("structured table needs 'columns' and 'rows'", 0);
  }
  Table t;
  t.columns = j.at("columns").get<std::vector<std::string>>();
  for (const auto& r : j.at("rows")) {
    std::vector<Cell> row;
    for (const auto& c : t.columns) {
      if (!r.contains(c) || r.at(c).is_null()) {
        row.emplace_back(std::monostate{});
      } else if (r.at(c).is_number_integer()) {
        row.emplace_back(r.at(c).get<std::int64_t>());
      } else if (r.at(c).is_number()) {
        row.emplace_back(r.at(c).get<double>());
      } else if (r.at(c).is_string()) {
        row.emplace_back(r.at(c).get<std::string>());
      } else if (r.at(c).is_boolean()) {
        row.emplace_back(static_cast<std::int64_t>(r.at(c).get<bool>()));
      } else {
        throw FormatError("structured table: unsupported cell in column '" + c + "'", 0);
      }
    }
    t.rows.push_back(std::move(row));
  }
  return t;
}

std::string render(const Table& table, OutputFormat format) {
  return format == OutputFormat::Csv ? to_csv(table) : to_structured(table);
}

namespace {

const std::vector<std::string> kMetricColumns{"epoch",          "lr",
                                              "train_loss",     "clean_train_acc",
                                              "clean_test_acc", "robust_train_acc",
                                              "robust_test_acc", "mean_weight",
                                              "tas_ratio"};

double as_double(const Cell& c) {
  if (const auto* d = std::get_if<double>(&c)) return *d;
  if (const auto* i = std::get_if<std::int64_t>(&c)) return static_cast<double>(*i);
  throw FormatError("expected a numeric cell", 0);
}

}  // namespace

Table metrics_table(const MetricsRecord& record) {
  Table t;
  t.columns = kMetricColumns;
  for (const auto& r : record.rows) {
    t.rows.push_back({static_cast<std::int64_t>(r.epoch), r.lr, r.train_loss, r.clean_train_acc, r.clean_test_acc,
                      r.robust_train_acc, r.robust_test_acc, r.mean_weight,
                      r.tas_ratio ? Cell{*r.tas_ratio} : Cell{std::monostate{}}});
  }
  return t;
}

MetricsRecord metrics_from_table(const Table& table) {
  if (table.columns != kMetricColumns) throw FormatError("metrics table has unexpected columns", 0);
  MetricsRecord rec;
  for (const auto& row : table.rows) {
    if (row.size() != kMetricColumns.size()) throw FormatError("metrics row has the wrong width", 0);
    MetricsRow r;
    r.epoch = static_cast<std::size_t>(as_double(row[0]));
    r.lr = as_double(row[1]);
    r.train_loss = as_double(row[2]);
    r.clean_train_acc = as_double(row[3]);
    r.clean_test_acc = as_double(row[4]);
    r.robust_train_acc = as_double(row[5]);
    r.robust_test_acc = as_double(row[6]);
    r.mean_weight = as_double(row[7]);
    if (!std::holds_alternative<std::monostate>(row[8])) r.tas_ratio = as_double(row[8]);
    rec.rows.push_back(r);
  }
  return rec;
}

std::string plot_data(const MetricsRecord& record) {
  json series = json::array();
  for (std::size_t c = 1; c < kMetricColumns.size(); ++c) {
    json xs = json::array(), ys = json::array();
    for (const auto& r : record.rows) {
      const double vals[] = {0.0,
                             r.lr,
                             r.train_loss,
                             r.clean_train_acc,
                             r.clean_test_acc,
                             r.robust_train_acc,
                             r.robust_test_acc,
                             r.mean_weight,
                             r.tas_ratio.value_or(0.0)};
      if (c == 8 && !r.tas_ratio) continue;
      xs.push_back(r.epoch);
      ys.push_back(vals[c]);
    }
    series.push_back({{"name", kMetricColumns[c]}, {"x", std::move(xs)}, {"y", std::move(ys)}});
  }
  json j = {{"x_label", "epoch"}, {"series", std::move(series)}};
  return j.dump(2) + "\n";
}

void export_metrics(const MetricsRecord& record, OutputFormat format, const fs::path& path) {
  write_file_atomic(path, render(metrics_table(record), format));
}

Table tas_table(const TasReport& report) {
  Table t;
  t.columns = {"index", "score", "is_tas", "teacher_adv_entropy", "lemma2_holds"};
  for (std::size_t i = 0; i < report.per_sample_score.size(); ++i) {
    t.rows.push_back({static_cast<std::int64_t>(i), report.per_sample_score[i],
                      static_cast<std::int64_t>(report.is_tas[i]), report.teacher_adv_entropy[i],
                      static_cast<std::int64_t>(report.lemma2_holds[i])});
  }
  return t;
}

Table histogram_table(const EntropyHistogram& hist) {
  Table t;
  t.columns = {"bin_lo", "bin_hi", "count", "density"};
  for (std::size_t i = 0; i < hist.counts.size(); ++i) {
    t.rows.push_back({hist.bin_edges[i], hist.bin_edges[i + 1], static_cast<std::int64_t>(hist.counts[i]),
                      hist.density[i]});
  }
  return t;
}

Table variance_summary_table(const VarianceReport& report) {
  Table t;
  t.columns = {"noise", "bias", "variance", "risk", "splits", "repetitions", "mean_robust_overfitting",
               "max_abs_residual"};
  t.rows.push_back({report.noise, report.bias, report.variance, report.risk,
                    static_cast<std::int64_t>(report.splits), static_cast<std::int64_t>(report.repetitions),
                    report.mean_robust_overfitting, report.max_abs_residual()});
  return t;
}

Table variance_points_table(const VarianceReport& report) {
  Table t;
  t.columns = {"repetition", "point", "noise", "bias", "variance", "risk", "residual"};
  for (std::size_t k = 0; k < report.per_point.size(); ++k) {
    for (std::size_t i = 0; i < report.per_point[k].size(); ++i) {
      const auto& p = report.per_point[k][i];
      t.rows.push_back({static_cast<std::int64_t>(k), static_cast<std::int64_t>(i), p.noise, p.bias, p.variance,
                        p.risk, p.residual()});
    }
  }
  return t;
}

// ---------------------------------------------------------------- runs

namespace {

class DirLock {
 public:
  explicit DirLock(const fs::path& dir) : path_(dir / ".adlab.lock") {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    if (f == nullptr) throw RunError("output directory is locked by another run (" + path_.string() + ")");
    std::fclose(f);
  }
  ~DirLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  fs::path path_;
};

struct Run {
  const ExperimentConfig& cfg;
  std::string subcommand;
  std::set<std::string> artifacts;

  void write(const std::string& name, std::string_view bytes) {
    write_file_atomic(cfg.out_dir / name, bytes);
    artifacts.insert(name);
  }
  void write_table(const std::string& stem, const Table& t) { write(stem + extension(cfg.format), render(t, cfg.format)); }
  void save_model(const std::string& name, const ModelParams& m) {
    save_checkpoint(m, cfg.out_dir / name);
    artifacts.insert(name);
  }

  void write_manifest() {
    json m = {{"tool", "adlab"},
              {"version", kVersion},
              {"checkpoint_format", kCheckpointVersion},
              {"subcommand", subcommand},
              {"seed", cfg.seed},
              {"format", cfg.format == OutputFormat::Csv ? "csv" : "structured"},
              {"config_hash", hex64(fnv1a64(cfg.canonical))},
              {"epsilon_absolute", cfg.epsilon_absolute()},
              {"config", json::parse(cfg.canonical)},
              {"artifacts", std::vector<std::string>(artifacts.begin(), artifacts.end())}};
    write_file_atomic(cfg.out_dir / "manifest.json", m.dump(2) + "\n");
  }
};

void log(const std::string& line) { std::cerr << "[adlab] " << line << '\n'; }

DataSplit load_data(const ExperimentConfig& cfg) {
  const Dataset all = gen_dataset(cfg.dataset);
  return split_dataset(all, cfg.dataset.train_fraction, derive_seed(cfg.dataset.seed, {kSplitSeed}));
}

std::vector<std::size_t> layers(const Dataset& d, const std::vector<std::size_t>& hidden) {
  std::vector<std::size_t> out{d.dims()};
  out.insert(out.end(), hidden.begin(), hidden.end());
  out.push_back(d.classes);
  return out;
}

ModelParams obtain_teacher_params(Run& run, const DataSplit& data) {
  const auto& cfg = run.cfg;
  const auto sizes = layers(data.train, cfg.teacher.hidden);
  if (!cfg.teacher.checkpoint.empty()) {
    ModelParams p = load_checkpoint(cfg.teacher.checkpoint);
    if (p.input_dim() != sizes.front() || p.classes() != sizes.back()) {
      throw ConfigError("teacher checkpoint " + cfg.teacher.checkpoint.string() + " does not match the dataset shape");
    }
    return p;
  }
  log("training teacher " + std::to_string(sizes.size() - 1) + "-layer MLP with " +
      to_string(cfg.teacher.train.distill.method));
  const ModelParams init = init_mlp(sizes, derive_seed(cfg.seed, {kTeacherInit}));
  const TrainResult tr = train(nullptr, init, data.train, data.test, cfg.teacher.train);
  run.save_model("teacher.ckpt", tr.final_student);
  run.write_table("teacher_metrics", metrics_table(tr.metrics));
  return tr.final_student;
}

bool needs_teacher(const TrainConfig& t) { return t.distill.uses_teacher() || t.tas_every > 0; }

TrainResult train_student(const ExperimentConfig& cfg, const Teacher* teacher, const DataSplit& data,
                          const TrainConfig& tcfg) {
  const ModelParams init = init_mlp(layers(data.train, cfg.student_hidden), derive_seed(cfg.seed, {kStudentInit}));
  log("training student with " + to_string(tcfg.distill.method));
  return train(teacher, init, data.train, data.test, tcfg);
}

AttackConfig final_eval_attack(const TrainConfig& t) {
  AttackConfig a = t.eval_attack;
  a.seed = derive_seed(t.seed, {0xe7a1u, t.epochs == 0 ? 0 : t.epochs - 1});
  return a;
}

Table evaluation_table(const std::vector<std::pair<std::string, EvalResult>>& rows) {
  Table t;
  t.columns = {"model", "clean_acc", "fgsm_acc", "pgd_acc"};
  for (const auto& [name, r] : rows) t.rows.push_back({name, r.clean_acc, r.fgsm_acc, r.pgd_acc});
  return t;
}

std::string value_tag(double v) { return fmt_double(v); }

void cmd_gen_data(Run& run) {
  const Dataset all = gen_dataset(run.cfg.dataset);
  const DataSplit split = split_dataset(all, run.cfg.dataset.train_fraction, derive_seed(run.cfg.dataset.seed, {kSplitSeed}));
  run.write("dataset.csv", encode_dataset_csv(all));
  run.write("train.csv", encode_dataset_csv(split.train));
  run.write("test.csv", encode_dataset_csv(split.test));
  log("generated " + std::to_string(all.size()) + " samples (" + std::to_string(split.train.size()) + " train, " +
      std::to_string(split.test.size()) + " test)");
}

void cmd_train(Run& run) {
  const auto& cfg = run.cfg;
  const DataSplit data = load_data(cfg);
  std::optional<Teacher> teacher;
  if (needs_teacher(cfg.train)) teacher.emplace(obtain_teacher_params(run, data), cfg.teacher.emulation);
  const TrainResult tr = train_student(cfg, teacher ? &*teacher : nullptr, data, cfg.train);
  run.save_model("student.ckpt", tr.final_student);
  run.save_model("student_swa.ckpt", tr.swa_student);
  run.write_table("metrics", metrics_table(tr.metrics));
  run.write("plot_data.json", plot_data(tr.metrics));
  const AttackConfig atk = final_eval_attack(cfg.train);
  run.write_table("evaluation", evaluation_table({{"final", evaluate(tr.final_student, data.test, atk)},
                                                  {"swa", evaluate(tr.swa_student, data.test, atk)}}));
}

void cmd_evaluate(Run& run) {
  const auto& cfg = run.cfg;
  const DataSplit data = load_data(cfg);
  const fs::path ckpt = cfg.evaluate_checkpoint.empty() ? cfg.out_dir / "student.ckpt" : cfg.evaluate_checkpoint;
  const ModelParams model = load_checkpoint(ckpt);
  if (model.input_dim() != data.test.dims() || model.classes() != data.test.classes) {
    throw ConfigError("checkpoint " + ckpt.string() + " does not match the dataset shape");
  }
  const AttackConfig atk = final_eval_attack(cfg.train);
  run.write_table("evaluation", evaluation_table({{ckpt.filename().string(), evaluate(model, data.test, atk)}}));
  std::vector<double> radii;
  for (double f : cfg.evaluate_sweep) radii.push_back(f * atk.epsilon);
  const auto acc = pgd_accuracy_sweep(model, data.test, atk, radii);
  Table t;
  t.columns = {"epsilon_fraction", "epsilon", "pgd_acc"};
  for (std::size_t i = 0; i < radii.size(); ++i) t.rows.push_back({cfg.evaluate_sweep[i], radii[i], acc[i]});
  run.write_table("robustness_sweep", t);
}

void cmd_tas(Run& run) {
  const auto& cfg = run.cfg;
  const DataSplit data = load_data(cfg);
  const Teacher teacher(obtain_teacher_params(run, data), cfg.teacher.emulation);
  ModelParams student;
  if (!cfg.tas_student_checkpoint.empty()) {
    student = load_checkpoint(cfg.tas_student_checkpoint);
  } else {
    student = train_student(cfg, &teacher, data, cfg.train).final_student;
    run.save_model("student.ckpt", student);
  }
  AttackConfig s_cfg = cfg.train.train_attack;
  s_cfg.inner_loss = cfg.train.distill.default_inner_loss();
  s_cfg.lambda_in = cfg.train.distill.lambda_in;
  s_cfg.seed = derive_seed(cfg.train.seed, {0x7a5u});
  AttackConfig t_cfg = cfg.train.eval_attack;
  t_cfg.seed = derive_seed(cfg.train.seed, {0x7a6u});
  const TasReport report = tas_ratio(student, teacher, data.train, s_cfg, t_cfg);
  run.write_table("tas_scores", tas_table(report));
  Table summary;
  summary.columns = {"samples", "tas_count", "ratio", "lemma2_violations", "mean_teacher_adv_entropy"};
  const auto n = static_cast<std::int64_t>(report.is_tas.size());
  const auto hits = static_cast<std::int64_t>(std::count(report.is_tas.begin(), report.is_tas.end(), true));
  const auto viol = static_cast<std::int64_t>(std::count(report.lemma2_holds.begin(), report.lemma2_holds.end(), false));
  double ent = 0.0;
  for (double e : report.teacher_adv_entropy) ent += e;
  summary.rows.push_back({n, hits, report.ratio, viol, n ? ent / static_cast<double>(n) : 0.0});
  run.write_table("tas_summary", summary);
  const double max_entropy = std::log(static_cast<double>(teacher.classes()));
  run.write_table("entropy_histogram", histogram_table(entropy_histogram(report.teacher_adv_entropy, max_entropy, cfg.tas_bins)));
  log("TAS ratio " + fmt_double(report.ratio));
}

VarianceReport run_avar(const ExperimentConfig& cfg, const Teacher* teacher, const DataSplit& data) {
  return estimate_avar(data.train, data.test, teacher, layers(data.train, cfg.student_hidden), cfg.train, cfg.avar);
}

Table avar_splits_table(const VarianceReport& r) {
  Table t;
  t.columns = {"repetition", "split", "robust_overfitting"};
  for (std::size_t i = 0; i < r.split_robust_overfitting.size(); ++i) {
    t.rows.push_back({static_cast<std::int64_t>(i / r.splits), static_cast<std::int64_t>(i % r.splits),
                      r.split_robust_overfitting[i]});
  }
  return t;
}

void cmd_avar(Run& run) {
  const auto& cfg = run.cfg;
  const DataSplit data = load_data(cfg);
  std::optional<Teacher> teacher;
  if (needs_teacher(cfg.train)) teacher.emplace(obtain_teacher_params(run, data), cfg.teacher.emulation);
  const VarianceReport r = run_avar(cfg, teacher ? &*teacher : nullptr, data);
  run.write_table("avar_summary", variance_summary_table(r));
  run.write_table("avar_points", variance_points_table(r));
  run.write_table("avar_splits", avar_splits_table(r));
  Table dropped;
  dropped.columns = {"repetition", "index"};
  for (std::size_t k = 0; k < r.dropped_indices.size(); ++k) {
    for (auto i : r.dropped_indices[k]) dropped.rows.push_back({static_cast<std::int64_t>(k), static_cast<std::int64_t>(i)});
  }
  run.write_table("avar_dropped", dropped);
  log("AVar " + fmt_double(r.variance) + ", max identity residual " + fmt_double(r.max_abs_residual()));
}

void cmd_sweep(Run& run) {
  const auto& cfg = run.cfg;
  const DataSplit data = load_data(cfg);
  if (cfg.train.epochs == 0) throw ConfigError("sweep needs train.epochs >= 1");
  Table t;
  if (cfg.sweep.parameter == "beta") {
    const Teacher teacher(obtain_teacher_params(run, data), cfg.teacher.emulation);
    t.columns = {"beta", "clean_test_acc", "robust_test_acc", "best_robust_test_acc", "robust_overfitting"};
    for (double beta : cfg.sweep.values) {
      TrainConfig tc = cfg.train;
      tc.distill.method = Method::SaadC;
      tc.distill.beta = beta;
      const TrainResult tr = train_student(cfg, &teacher, data, tc);
      run.write_table("metrics_beta_" + value_tag(beta), metrics_table(tr.metrics));
      const auto curve = tr.metrics.robust_test_curve();
      const auto& last = tr.metrics.rows.back();
      t.rows.push_back({beta, last.clean_test_acc, last.robust_test_acc,
                        *std::max_element(curve.begin(), curve.end()), robust_overfitting(curve)});
    }
  } else {
    const ModelParams tp = obtain_teacher_params(run, data);
    t.columns = {"alpha", "noise", "bias", "variance", "risk", "mean_robust_overfitting"};
    for (double alpha : cfg.sweep.values) {
      TeacherEmulation emu;
      emu.mode = EmulationMode::Interpolated;
      emu.alpha = alpha;
      const Teacher teacher(tp, emu);
      const VarianceReport r = run_avar(cfg, &teacher, data);
      run.write_table("avar_points_alpha_" + value_tag(alpha), variance_points_table(r));
      t.rows.push_back({alpha, r.noise, r.bias, r.variance, r.risk, r.mean_robust_overfitting});
    }
  }
  run.write_table("sweep", t);
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"adlab: desk-scale adversarial distillation laboratory"};
  app.footer("\n" + config_reference() + "\nEnvironment: ADLAB_THREADS caps worker threads.\n" +
             "Exit codes: 0 ok, 2 usage, 3 config, 4 runtime.");
  app.require_subcommand(1);

  std::string config_path, out_dir, format;
  std::optional<std::uint64_t> seed;
  const std::vector<std::pair<std::string, std::string>> commands{
      {"train", "train a student with the configured method"},
      {"evaluate", "clean, FGSM and PGD accuracy of a checkpoint"},
      {"tas", "transferable-sample audit of a student against the teacher"},
      {"avar", "adversarial bias/variance decomposition over data splits"},
      {"sweep", "grid over beta (saad-c) or alpha (teacher interpolation)"},
      {"gen-data", "generate or load the dataset and write it as CSV"}};
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_path, "experiment config file")->required();
    sub->add_option("--out", out_dir, "output directory (overrides outputs.dir)");
    sub->add_option("--seed", seed, "base seed (overrides seed)");
    sub->add_option("--format", format, "csv or structured (overrides outputs.format)");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  const std::string subcommand = app.get_subcommands().front()->get_name();

  ExperimentConfig cfg;
  try {
    cfg = load_experiment_config(config_path, seed);
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    if (!format.empty()) cfg.format = output_format_from_string(format);
    if (!format.empty()) cfg.canonical = canonical_json(cfg).dump(2);
  } catch (const ConfigError& e) {
    std::cerr << "adlab: config error: " << e.what() << '\n';
    return 3;
  }

  try {
    log(subcommand + ": epsilon " + fmt_double(cfg.epsilon_absolute()) + " (absolute), seed " +
        std::to_string(cfg.seed));
    DirLock lock(cfg.out_dir);
    Run run{cfg, subcommand, {}};
    if (subcommand == "train") {
      cmd_train(run);
    } else if (subcommand == "evaluate") {
      cmd_evaluate(run);
    } else if (subcommand == "tas") {
      cmd_tas(run);
    } else if (subcommand == "avar") {
      cmd_avar(run);
    } else if (subcommand == "sweep") {
      cmd_sweep(run);
    } else {
      cmd_gen_data(run);
    }
    run.write_manifest();
  } catch (const ConfigError& e) {
    std::cerr << "adlab: config error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "adlab: " << e.what() << '\n';
    return 4;
  }
  return 0;
}

}  // namespace adlab
