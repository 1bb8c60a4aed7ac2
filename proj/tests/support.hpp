#pragma once

// Shared helpers for the unit and acceptance suites: random draws and a
// central-difference gradient checker.

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "adlab/autodiff.hpp"
#include "adlab/models.hpp"
#include "adlab/rng.hpp"
#include "adlab/tensor.hpp"

namespace testsupport {

using adlab::BoundParams;
using adlab::ModelParams;
using adlab::Rng;
using adlab::Tape;
using adlab::Tensor;
using adlab::Var;

inline Tensor random_tensor(std::size_t rows, std::size_t cols, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t = Tensor::matrix(rows, cols);
  for (double& v : t.storage()) v = u(rng);
  return t;
}

/// Rows drawn from a flat Dirichlet, with every entry at least `min_entry`.
inline Tensor random_simplex(std::size_t rows, std::size_t cols, Rng& rng, double min_entry = 0.0) {
  std::exponential_distribution<double> e(1.0);
  Tensor t = Tensor::matrix(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (double& v : t.row(r)) s += (v = e(rng));
    const double keep = 1.0 - min_entry * static_cast<double>(cols);
    for (double& v : t.row(r)) v = min_entry + keep * v / s;
  }
  return t;
}

inline std::vector<int> random_labels(std::size_t n, std::size_t classes, Rng& rng) {
  std::uniform_int_distribution<int> d(0, static_cast<int>(classes) - 1);
  std::vector<int> out(n);
  for (int& v : out) v = d(rng);
  return out;
}

/// init_mlp weights plus non-zero biases.
inline ModelParams random_mlp(const std::vector<std::size_t>& sizes, Rng& rng) {
  ModelParams m = adlab::init_mlp(sizes, rng());
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  for (auto& b : m.biases)
    for (double& v : b.storage()) v = u(rng);
  return m;
}

/// Smallest |pre-activation| over every hidden unit and row.
inline double min_abs_preactivation(const ModelParams& m, const Tensor& x) {
  double best = INFINITY;
  Tensor h = x;
  for (std::size_t l = 0; l + 1 < m.layers(); ++l) {
    const Tensor& w = m.weights[l];
    Tensor z = Tensor::matrix(h.rows(), w.rows());
    for (std::size_t r = 0; r < h.rows(); ++r)
      for (std::size_t o = 0; o < w.rows(); ++o) {
        double acc = m.biases[l][o];
        for (std::size_t i = 0; i < w.cols(); ++i) acc += w(o, i) * h(r, i);
        z(r, o) = acc;
        best = std::min(best, std::abs(acc));
      }
    for (double& v : z.storage()) v = std::max(v, 0.0);
    h = z;
  }
  return best;
}

using ScalarFn = std::function<Var(Tape&, const std::vector<Var>&)>;

/// ||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-12) over every
/// entry of every input, with central differences of step h.
inline double fd_rel_error(const std::vector<Tensor>& inputs, const ScalarFn& f, double h = 1e-5) {
  std::vector<double> analytic;
  {
    Tape tape;
    std::vector<Var> leaves;
    for (const auto& t : inputs) leaves.push_back(tape.leaf(t, true));
    tape.backward(f(tape, leaves));
    for (const auto& l : leaves)
      for (double g : l.grad().storage()) analytic.push_back(g);
  }
  auto eval = [&](const std::vector<Tensor>& in) {
    Tape tape;
    std::vector<Var> leaves;
    for (const auto& t : in) leaves.push_back(tape.leaf(t, false));
    return f(tape, leaves).value()[0];
  };
  std::vector<double> numeric;
  std::vector<Tensor> work = inputs;
  for (std::size_t k = 0; k < work.size(); ++k) {
    for (std::size_t i = 0; i < work[k].size(); ++i) {
      const double orig = work[k][i];
      work[k][i] = orig + h;
      const double up = eval(work);
      work[k][i] = orig - h;
      const double down = eval(work);
      work[k][i] = orig;
      numeric.push_back((up - down) / (2.0 * h));
    }
  }
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), 1e-12});
}

/// Model parameters flattened as [W0, b0, W1, b1, ...].
inline std::vector<Tensor> flatten(const ModelParams& m) {
  std::vector<Tensor> out;
  for (std::size_t l = 0; l < m.layers(); ++l) {
    out.push_back(m.weights[l]);
    out.push_back(m.biases[l]);
  }
  return out;
}

inline BoundParams unflatten(const std::vector<Var>& leaves, std::size_t offset, std::size_t layers) {
  BoundParams bp;
  for (std::size_t l = 0; l < layers; ++l) {
    bp.weights.push_back(leaves[offset + 2 * l]);
    bp.biases.push_back(leaves[offset + 2 * l + 1]);
  }
  return bp;
}

}  // namespace testsupport
