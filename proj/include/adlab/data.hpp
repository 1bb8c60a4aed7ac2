#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "adlab/tensor.hpp"

namespace adlab {

/// Labelled feature matrix: x is [n x d], labels in [0, classes).
struct Dataset {
  Tensor x;
  std::vector<int> labels;
  std::size_t classes = 0;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t dims() const noexcept { return x.cols(); }
  Dataset subset(std::span<const std::size_t> indices) const;

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

struct DataSplit {
  Dataset train;
  Dataset test;
  std::vector<std::size_t> train_indices;
  std::vector<std::size_t> test_indices;
};

enum class DatasetKind { GaussianMixture, Concentric, IdxImage };

std::string to_string(DatasetKind kind);
DatasetKind dataset_kind_from_string(const std::string& name);

struct DatasetSpec {
  DatasetKind kind = DatasetKind::GaussianMixture;
  std::size_t dims = 2;
  std::size_t classes = 4;
  std::size_t samples_per_class = 250;
  /// Minimum distance between samples of different classes (synthetic kinds).
  double class_margin = 0.1;
  /// Per-axis std of each Gaussian cluster, or ring thickness for concentric data.
  double spread = 0.12;
  std::filesystem::path images_path;
  std::filesystem::path labels_path;
  double normalize_lo = 0.0;
  double normalize_hi = 1.0;
  std::uint64_t seed = 1;
  double train_fraction = 0.8;

  void validate() const;
};

/// Synthetic generation is deterministic per seed; IDX kinds read from disk.
Dataset gen_dataset(const DatasetSpec& spec);

/// Shuffled train/test partition with round(n * fraction) training samples.
DataSplit split_dataset(const Dataset& data, double train_fraction, std::uint64_t seed);

/// IDX reader (images magic 0x00000803, labels 0x00000801, big-endian headers).
/// Pixels are mapped from [0,255] to [lo,hi] and flattened row-major.
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels, double lo = 0.0,
                 double hi = 1.0);
Dataset decode_idx(std::span<const std::uint8_t> images, std::span<const std::uint8_t> labels, double lo, double hi);

/// "label,f0,f1,..." with a header row, values printed round-trip exact.
std::string encode_dataset_csv(const Dataset& data);

}  // namespace adlab
