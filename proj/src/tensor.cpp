#include "adlab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>

#include "adlab/errors.hpp"

namespace adlab {

namespace {

std::size_t product(const std::vector<std::size_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

void check_shape(const std::vector<std::size_t>& shape) {
  if (shape.empty()) throw DimensionError("tensor shape must have at least one extent");
  for (auto e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive");
  }
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape, double fill) : shape_(std::move(shape)) {
  check_shape(shape_);
  data_.assign(product(shape_), fill);
}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  check_shape(shape_);
  if (product(shape_) != data_.size()) {
    throw DimensionError("tensor data length " + std::to_string(data_.size()) + " does not match shape product " +
                         std::to_string(product(shape_)));
  }
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, double fill) { return Tensor({rows, cols}, fill); }

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  if (rows.size() == 0) throw DimensionError("from_rows needs at least one row");
  const std::size_t cols = rows.begin()->size();
  std::vector<double> data;
  data.reserve(rows.size() * cols);
  for (const auto& r : rows) {
    if (r.size() != cols) throw DimensionError("ragged rows in from_rows");
    data.insert(data.end(), r.begin(), r.end());
  }
  return Tensor({rows.size(), cols}, std::move(data));
}

std::size_t Tensor::rows() const noexcept {
  if (shape_.size() < 2) return shape_.empty() ? 0 : 1;
  return shape_[0];
}

std::size_t Tensor::cols() const noexcept {
  if (shape_.empty()) return 0;
  if (shape_.size() == 1) return shape_[0];
  return data_.size() / shape_[0];
}

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

ProbBatch::ProbBatch(Tensor values) : values_(std::move(values)) {
  for (std::size_t r = 0; r < values_.rows(); ++r) {
    double sum = 0.0;
    for (double v : values_.row(r)) {
      if (!std::isfinite(v) || v < 0.0 || v > 1.0 + 1e-12) {
        throw NumericError("probability entry " + std::to_string(v) + " outside [0,1] in row " + std::to_string(r));
      }
      sum += v;
    }
    if (std::abs(sum - 1.0) > 1e-9) {
      throw NumericError("probability row " + std::to_string(r) + " sums to " + std::to_string(sum));
    }
  }
}

Tensor log_softmax(const Tensor& logits) {
  if (!logits.all_finite()) throw NumericError("log_softmax: non-finite logits");
  Tensor out = logits;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double s = 0.0;
    for (double v : row) s += std::exp(v - mx);
    const double lse = mx + std::log(s);
    for (double& v : row) v -= lse;
  }
  return out;
}

ProbBatch softmax(const Tensor& logits) {
  if (!logits.all_finite()) throw NumericError("softmax: non-finite logits");
  Tensor out = logits;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double s = 0.0;
    for (double& v : row) {
      v = std::exp(v - mx);
      s += v;
    }
    for (double& v : row) v /= s;
  }
  return ProbBatch(std::move(out));
}

double kl_row(std::span<const double> p, std::span<const double> q) noexcept {
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] > 0.0) acc += p[i] * (clamped_log(p[i]) - clamped_log(q[i]));
  }
  return acc > 0.0 ? acc : 0.0;
}

double entropy_row(std::span<const double> p) noexcept {
  double acc = 0.0;
  for (double v : p) {
    if (v > 0.0) acc -= v * clamped_log(v);
  }
  const double cap = std::log(static_cast<double>(p.size()));
  return std::clamp(acc, 0.0, cap);
}

std::vector<double> kl_divergence(const ProbBatch& p, const ProbBatch& q) {
  if (p.rows() != q.rows() || p.cols() != q.cols()) throw DimensionError("kl_divergence: shape mismatch");
  std::vector<double> out(p.rows());
  for (std::size_t r = 0; r < p.rows(); ++r) out[r] = kl_row(p.row(r), q.row(r));
  return out;
}

std::vector<double> entropy(const ProbBatch& p) {
  std::vector<double> out(p.rows());
  for (std::size_t r = 0; r < p.rows(); ++r) out[r] = entropy_row(p.row(r));
  return out;
}

std::vector<double> cross_entropy(const ProbBatch& target, const Tensor& logits) {
  if (target.rows() != logits.rows() || target.cols() != logits.cols()) {
    throw DimensionError("cross_entropy: shape mismatch");
  }
  const Tensor lsm = log_softmax(logits);
  std::vector<double> out(target.rows());
  for (std::size_t r = 0; r < target.rows(); ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < target.cols(); ++c) acc -= target(r, c) * lsm(r, c);
    out[r] = acc;
  }
  return out;
}

ProbBatch one_hot(std::span<const int> labels, std::size_t classes) {
  Tensor t = Tensor::matrix(labels.size(), classes);
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= classes) {
      throw ContractError("label " + std::to_string(labels[r]) + " outside [0," + std::to_string(classes) + ")");
    }
    t(r, static_cast<std::size_t>(labels[r])) = 1.0;
  }
  return ProbBatch(std::move(t));
}

std::size_t argmax(std::span<const double> row) noexcept {
  std::size_t best = 0;
  for (std::size_t i = 1; i < row.size(); ++i) {
    if (row[i] > row[best]) best = i;
  }
  return best;
}

}  // namespace adlab
