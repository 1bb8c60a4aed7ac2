#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

namespace adlab {

/// Floor applied inside every logarithm of a probability.
inline constexpr double kProbFloor = 1e-12;

/// Dense row-major array of doubles. Rank-1 tensors behave as a single row
/// in the matrix accessors.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0);
  Tensor(std::vector<std::size_t> shape, std::vector<double> data);

  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows);

  const std::vector<std::size_t>& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::size_t rows() const noexcept;
  std::size_t cols() const noexcept;

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::vector<double>& storage() noexcept { return data_; }
  const std::vector<double>& storage() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<double> row(std::size_t r) { return std::span<double>(data_).subspan(r * cols(), cols()); }
  std::span<const double> row(std::size_t r) const {
    return std::span<const double>(data_).subspan(r * cols(), cols());
  }

  bool same_shape(const Tensor& other) const noexcept { return shape_ == other.shape_; }
  bool all_finite() const noexcept;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

/// Batch of probability rows (B x C). Entries are stored as given; the
/// clamp floor is applied only where a logarithm is taken.
class ProbBatch {
 public:
  ProbBatch() = default;
  /// Validates that each row lies on the simplex (sum within 1e-9).
  explicit ProbBatch(Tensor values);

  std::size_t rows() const noexcept { return values_.rows(); }
  std::size_t cols() const noexcept { return values_.cols(); }
  const Tensor& values() const noexcept { return values_; }
  std::span<const double> row(std::size_t r) const { return values_.row(r); }
  double operator()(std::size_t r, std::size_t c) const { return values_(r, c); }

  friend bool operator==(const ProbBatch&, const ProbBatch&) = default;

 private:
  Tensor values_;
};

inline double clamped_log(double p) noexcept { return std::log(p < kProbFloor ? kProbFloor : p); }

// Value-level numerics. Differentiable counterparts live in autodiff.hpp.

ProbBatch softmax(const Tensor& logits);
Tensor log_softmax(const Tensor& logits);
std::vector<double> kl_divergence(const ProbBatch& p, const ProbBatch& q);
std::vector<double> entropy(const ProbBatch& p);
std::vector<double> cross_entropy(const ProbBatch& target, const Tensor& logits);
ProbBatch one_hot(std::span<const int> labels, std::size_t classes);

double kl_row(std::span<const double> p, std::span<const double> q) noexcept;
double entropy_row(std::span<const double> p) noexcept;

/// Index of the largest entry; ties resolve to the lowest index.
std::size_t argmax(std::span<const double> row) noexcept;

}  // namespace adlab
