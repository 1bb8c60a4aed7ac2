#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "adlab/data.hpp"
#include "adlab/diagnostics.hpp"
#include "adlab/models.hpp"
#include "adlab/train.hpp"
#include "adlab/variance.hpp"

namespace adlab {

enum class OutputFormat { Csv, Structured };

OutputFormat output_format_from_string(const std::string& name);
std::string extension(OutputFormat format);

struct TeacherSetup {
  std::vector<std::size_t> hidden{128, 128};
  /// Load instead of training when set.
  std::filesystem::path checkpoint;
  TrainConfig train;
  TeacherEmulation emulation;
};

struct SweepSetup {
  /// "beta" trains saad-c per value; "alpha" runs the variance estimator per interpolation coefficient.
  std::string parameter = "beta";
  std::vector<double> values{0.0, 0.2, 0.5};
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  DatasetSpec dataset;
  /// Budget as written in the config: a fraction of class_margin for
  /// synthetic data, absolute for IDX data.
  double epsilon = 0.25;
  std::optional<double> step_size;
  std::size_t train_steps = 10;
  std::size_t eval_steps = 20;
  double init_scale = 0.001;
  TeacherSetup teacher;
  std::vector<std::size_t> student_hidden{32};
  TrainConfig train;
  SplitPlan avar;
  std::size_t tas_bins = 50;
  std::filesystem::path tas_student_checkpoint;
  std::filesystem::path evaluate_checkpoint;
  /// Fractions of epsilon for the robustness curve written by `evaluate`.
  std::vector<double> evaluate_sweep{0.0, 0.5, 1.0};
  SweepSetup sweep;
  std::filesystem::path out_dir = "adlab-out";
  OutputFormat format = OutputFormat::Csv;
  /// Normalized configuration text; its hash goes into the manifest.
  std::string canonical;

  double epsilon_absolute() const;
};

/// Parses the structured config. Unknown keys, wrong types and invalid values
/// raise ConfigError. Relative paths resolve against `base_dir`.
ExperimentConfig parse_experiment_config(const std::string& text, const std::filesystem::path& base_dir = {},
                                         std::optional<std::uint64_t> seed_override = std::nullopt);
ExperimentConfig load_experiment_config(const std::filesystem::path& path,
                                        std::optional<std::uint64_t> seed_override = std::nullopt);

/// Documentation of every config key, shown by --help.
std::string config_reference();

// Tabular export. Cells are numbers, integers, text or empty.
using Cell = std::variant<std::monostate, double, std::int64_t, std::string>;

struct Table {
  std::vector<std::string> columns;
  std::vector<std::vector<Cell>> rows;
};

/// CSV: header row then one line per row; doubles in shortest round-trip form.
std::string to_csv(const Table& table);
/// {"columns": [...], "rows": [{column: value, ...}, ...]}
std::string to_structured(const Table& table);
Table parse_structured(const std::string& text);
std::string render(const Table& table, OutputFormat format);

Table metrics_table(const MetricsRecord& record);
MetricsRecord metrics_from_table(const Table& table);
/// One (x, y) series per metrics curve, keyed by column name, x = epoch.
std::string plot_data(const MetricsRecord& record);
void export_metrics(const MetricsRecord& record, OutputFormat format, const std::filesystem::path& path);

Table tas_table(const TasReport& report);
Table histogram_table(const EntropyHistogram& hist);
Table variance_summary_table(const VarianceReport& report);
Table variance_points_table(const VarianceReport& report);

/// Entry point behind the adlab executable. Returns the process exit code:
/// 0 ok, 2 usage, 3 config, 4 runtime.
int run_cli(int argc, const char* const* argv);

}  // namespace adlab
