#include "adlab/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "adlab/errors.hpp"

namespace adlab {

const Tensor& Var::value() const { return tape_->value(id_); }
const Tensor& Var::grad() const { return tape_->grad(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::leaf(Tensor value, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  n.is_leaf = true;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::initializer_list<Var> parents, Backprop fn) {
  Node n;
  n.value = std::move(value);
  n.is_leaf = false;
  for (const Var& p : parents) {
    if (p.tape_ != this) throw ContractError("operands recorded on different tapes");
    n.requires_grad = n.requires_grad || nodes_[p.id_].requires_grad;
  }
  if (n.requires_grad) n.backprop = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

const Tensor& Tape::grad(std::size_t id) const {
  const Node& n = nodes_[id];
  if (n.grad.size() != n.value.size()) n.grad = Tensor(n.value.shape(), 0.0);
  return n.grad;
}

Tensor& Tape::grad_mut(std::size_t id) {
  grad(id);
  return nodes_[id].grad;
}

void Tape::zero_grad() {
  for (Node& n : nodes_) {
    if (!n.grad.empty()) std::fill(n.grad.storage().begin(), n.grad.storage().end(), 0.0);
  }
}

void Tape::backward(Var loss) {
  if (loss.tape_ != this) throw ContractError("backward: loss recorded on another tape");
  if (nodes_[loss.id_].value.size() != 1) {
    throw ContractError("backward: loss must be a scalar, got " + std::to_string(nodes_[loss.id_].value.size()) +
                        " elements");
  }
  for (Node& n : nodes_) {
    if (n.grad.size() != n.value.size()) {
      n.grad = Tensor(n.value.shape(), 0.0);
    } else if (!n.is_leaf) {
      std::fill(n.grad.storage().begin(), n.grad.storage().end(), 0.0);
    }
  }
  if (!nodes_[loss.id_].requires_grad) return;
  nodes_[loss.id_].grad[0] += 1.0;
  for (std::size_t i = loss.id_ + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.backprop) n.backprop(*this, i);
  }
}

namespace {

Tape& same_tape(Var a, Var b) {
  if (&a.tape() != &b.tape()) throw ContractError("operands recorded on different tapes");
  return a.tape();
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) throw DimensionError(std::string(op) + ": shape mismatch");
}

void accumulate(Tape& t, std::size_t target, std::size_t from) {
  if (!t.requires_grad(target)) return;
  auto& dst = t.grad_mut(target).storage();
  const auto& src = t.grad(from).storage();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace

Var matmul(Var a, Var b) {
  Tape& t = same_tape(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.rank() != 2 || B.rank() != 2) throw DimensionError("matmul: operands must be matrices");
  const std::size_t n = A.rows(), k = A.cols(), m = B.cols();
  if (B.rows() != k) {
    throw DimensionError("matmul: inner extents " + std::to_string(k) + " and " + std::to_string(B.rows()) +
                         " differ");
  }
  Tensor out = Tensor::matrix(n, m);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A(i, p);
      for (std::size_t j = 0; j < m; ++j) out(i, j) += av * B(p, j);
    }
  }
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(out), {a, b}, [ia, ib, n, k, m](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    const Tensor& A = tp.value(ia);
    const Tensor& B = tp.value(ib);
    if (tp.requires_grad(ia)) {
      Tensor& ga = tp.grad_mut(ia);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < m; ++j) acc += g(i, j) * B(p, j);
          ga(i, p) += acc;
        }
    }
    if (tp.requires_grad(ib)) {
      Tensor& gb = tp.grad_mut(ib);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double av = A(i, p);
          for (std::size_t j = 0; j < m; ++j) gb(p, j) += av * g(i, j);
        }
    }
  });
}

Var linear(Var x, Var weight, Var bias) {
  Tape& t = same_tape(x, weight);
  same_tape(x, bias);
  const Tensor& X = x.value();
  const Tensor& W = weight.value();
  const Tensor& b = bias.value();
  const std::size_t n = X.rows(), in = X.cols(), out_dim = W.rows();
  if (W.cols() != in) {
    throw DimensionError("linear: input width " + std::to_string(in) + " does not match weight width " +
                         std::to_string(W.cols()));
  }
  if (b.size() != out_dim) throw DimensionError("linear: bias length does not match weight rows");
  Tensor out = Tensor::matrix(n, out_dim);
  for (std::size_t i = 0; i < n; ++i) {
    const auto xr = X.row(i);
    for (std::size_t o = 0; o < out_dim; ++o) {
      const auto wr = W.row(o);
      double acc = b[o];
      for (std::size_t p = 0; p < in; ++p) acc += xr[p] * wr[p];
      out(i, o) = acc;
    }
  }
  const std::size_t ix = x.id(), iw = weight.id(), ibias = bias.id();
  return t.record(std::move(out), {x, weight, bias}, [ix, iw, ibias, n, in, out_dim](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    const Tensor& X = tp.value(ix);
    const Tensor& W = tp.value(iw);
    if (tp.requires_grad(ix)) {
      Tensor& gx = tp.grad_mut(ix);
      for (std::size_t i = 0; i < n; ++i) {
        auto gxr = gx.row(i);
        for (std::size_t o = 0; o < out_dim; ++o) {
          const double go = g(i, o);
          if (go == 0.0) continue;
          const auto wr = W.row(o);
          for (std::size_t p = 0; p < in; ++p) gxr[p] += go * wr[p];
        }
      }
    }
    if (tp.requires_grad(iw)) {
      Tensor& gw = tp.grad_mut(iw);
      for (std::size_t i = 0; i < n; ++i) {
        const auto xr = X.row(i);
        for (std::size_t o = 0; o < out_dim; ++o) {
          const double go = g(i, o);
          if (go == 0.0) continue;
          auto gwr = gw.row(o);
          for (std::size_t p = 0; p < in; ++p) gwr[p] += go * xr[p];
        }
      }
    }
    if (tp.requires_grad(ibias)) {
      Tensor& gb = tp.grad_mut(ibias);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t o = 0; o < out_dim; ++o) gb[o] += g(i, o);
    }
  });
}

Var add(Var a, Var b) {
  Tape& t = same_tape(a, b);
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  const auto& bv = b.value().storage();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(out), {a, b}, [ia, ib](Tape& tp, std::size_t self) {
    accumulate(tp, ia, self);
    accumulate(tp, ib, self);
  });
}

Var sub(Var a, Var b) {
  Tape& t = same_tape(a, b);
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  const auto& bv = b.value().storage();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(out), {a, b}, [ia, ib](Tape& tp, std::size_t self) {
    accumulate(tp, ia, self);
    if (tp.requires_grad(ib)) {
      auto& dst = tp.grad_mut(ib).storage();
      const auto& g = tp.grad(self).storage();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  Tape& t = same_tape(a, b);
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  const auto& bv = b.value().storage();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(out), {a, b}, [ia, ib](Tape& tp, std::size_t self) {
    const auto& g = tp.grad(self).storage();
    if (tp.requires_grad(ia)) {
      auto& dst = tp.grad_mut(ia).storage();
      const auto& bv = tp.value(ib).storage();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i] * bv[i];
    }
    if (tp.requires_grad(ib)) {
      auto& dst = tp.grad_mut(ib).storage();
      const auto& av = tp.value(ia).storage();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i] * av[i];
    }
  });
}

Var scale(Var a, double factor) {
  Tensor out = a.value();
  for (double& v : out.storage()) v *= factor;
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, factor](Tape& tp, std::size_t self) {
    auto& dst = tp.grad_mut(ia).storage();
    const auto& g = tp.grad(self).storage();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += factor * g[i];
  });
}

Var relu(Var a) {
  Tensor out = a.value();
  for (double& v : out.storage()) v = v > 0.0 ? v : 0.0;
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia](Tape& tp, std::size_t self) {
    auto& dst = tp.grad_mut(ia).storage();
    const auto& g = tp.grad(self).storage();
    const auto& x = tp.value(ia).storage();
    for (std::size_t i = 0; i < dst.size(); ++i) {
      if (x[i] > 0.0) dst[i] += g[i];
    }
  });
}

Var softmax(Var logits) {
  Tensor out = adlab::softmax(logits.value()).values();
  const std::size_t ia = logits.id();
  return logits.tape().record(std::move(out), {logits}, [ia](Tape& tp, std::size_t self) {
    const Tensor& s = tp.value(self);
    const Tensor& g = tp.grad(self);
    Tensor& dst = tp.grad_mut(ia);
    for (std::size_t r = 0; r < s.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < s.cols(); ++c) dot += g(r, c) * s(r, c);
      for (std::size_t c = 0; c < s.cols(); ++c) dst(r, c) += s(r, c) * (g(r, c) - dot);
    }
  });
}

Var log_softmax(Var logits) {
  Tensor out = adlab::log_softmax(logits.value());
  const std::size_t ia = logits.id();
  return logits.tape().record(std::move(out), {logits}, [ia](Tape& tp, std::size_t self) {
    const Tensor& ls = tp.value(self);
    const Tensor& g = tp.grad(self);
    Tensor& dst = tp.grad_mut(ia);
    for (std::size_t r = 0; r < ls.rows(); ++r) {
      double gsum = 0.0;
      for (std::size_t c = 0; c < ls.cols(); ++c) gsum += g(r, c);
      for (std::size_t c = 0; c < ls.cols(); ++c) dst(r, c) += g(r, c) - std::exp(ls(r, c)) * gsum;
    }
  });
}

Var log_clamped(Var a) {
  Tensor out = a.value();
  for (double& v : out.storage()) v = clamped_log(v);
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia](Tape& tp, std::size_t self) {
    auto& dst = tp.grad_mut(ia).storage();
    const auto& g = tp.grad(self).storage();
    const auto& x = tp.value(ia).storage();
    for (std::size_t i = 0; i < dst.size(); ++i) {
      if (x[i] > kProbFloor) dst[i] += g[i] / x[i];
    }
  });
}

Var sum(Var a) {
  double acc = 0.0;
  for (double v : a.value().storage()) acc += v;
  const std::size_t ia = a.id();
  return a.tape().record(Tensor({1}, acc), {a}, [ia](Tape& tp, std::size_t self) {
    const double g = tp.grad(self)[0];
    for (double& d : tp.grad_mut(ia).storage()) d += g;
  });
}

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

Var row_sum(Var a) {
  const Tensor& A = a.value();
  Tensor out = Tensor::matrix(A.rows(), 1);
  for (std::size_t r = 0; r < A.rows(); ++r) {
    double acc = 0.0;
    for (double v : A.row(r)) acc += v;
    out[r] = acc;
  }
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    Tensor& dst = tp.grad_mut(ia);
    for (std::size_t r = 0; r < dst.rows(); ++r)
      for (double& d : dst.row(r)) d += g[r];
  });
}

Var mul_col(Var a, Var v) {
  Tape& t = same_tape(a, v);
  const Tensor& A = a.value();
  const Tensor& V = v.value();
  if (V.size() != A.rows()) throw DimensionError("mul_col: column length does not match row count");
  Tensor out = A;
  for (std::size_t r = 0; r < A.rows(); ++r)
    for (double& x : out.row(r)) x *= V[r];
  const std::size_t ia = a.id(), iv = v.id();
  return t.record(std::move(out), {a, v}, [ia, iv](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    const Tensor& A = tp.value(ia);
    const Tensor& V = tp.value(iv);
    if (tp.requires_grad(ia)) {
      Tensor& ga = tp.grad_mut(ia);
      for (std::size_t r = 0; r < A.rows(); ++r)
        for (std::size_t c = 0; c < A.cols(); ++c) ga(r, c) += g(r, c) * V[r];
    }
    if (tp.requires_grad(iv)) {
      Tensor& gv = tp.grad_mut(iv);
      for (std::size_t r = 0; r < A.rows(); ++r) {
        double acc = 0.0;
        for (std::size_t c = 0; c < A.cols(); ++c) acc += g(r, c) * A(r, c);
        gv[r] += acc;
      }
    }
  });
}

Var row_dot(Var a, Var b) {
  Tape& t = same_tape(a, b);
  require_same_shape(a.value(), b.value(), "row_dot");
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  Tensor out = Tensor::matrix(A.rows(), 1);
  for (std::size_t r = 0; r < A.rows(); ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < A.cols(); ++c) acc += A(r, c) * B(r, c);
    out[r] = acc;
  }
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(out), {a, b}, [ia, ib](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    const Tensor& A = tp.value(ia);
    const Tensor& B = tp.value(ib);
    if (tp.requires_grad(ia)) {
      Tensor& ga = tp.grad_mut(ia);
      for (std::size_t r = 0; r < A.rows(); ++r)
        for (std::size_t c = 0; c < A.cols(); ++c) ga(r, c) += g[r] * B(r, c);
    }
    if (tp.requires_grad(ib)) {
      Tensor& gb = tp.grad_mut(ib);
      for (std::size_t r = 0; r < A.rows(); ++r)
        for (std::size_t c = 0; c < A.cols(); ++c) gb(r, c) += g[r] * A(r, c);
    }
  });
}

Var kl_rows(Var p, Var logits) {
  Tape& t = same_tape(p, logits);
  require_same_shape(p.value(), logits.value(), "kl_rows");
  const Tensor& P = p.value();
  const Tensor lsm = adlab::log_softmax(logits.value());
  Tensor out = Tensor::matrix(P.rows(), 1);
  for (std::size_t r = 0; r < P.rows(); ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < P.cols(); ++c) acc += P(r, c) * (clamped_log(P(r, c)) - lsm(r, c));
    out[r] = acc;
  }
  const std::size_t ip = p.id(), iz = logits.id();
  return t.record(std::move(out), {p, logits}, [ip, iz, lsm](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    const Tensor& P = tp.value(ip);
    if (tp.requires_grad(ip)) {
      Tensor& gp = tp.grad_mut(ip);
      for (std::size_t r = 0; r < P.rows(); ++r)
        for (std::size_t c = 0; c < P.cols(); ++c) {
          const double v = P(r, c);
          gp(r, c) += g[r] * (clamped_log(v) - lsm(r, c) + (v > kProbFloor ? 1.0 : 0.0));
        }
    }
    if (tp.requires_grad(iz)) {
      Tensor& gz = tp.grad_mut(iz);
      for (std::size_t r = 0; r < P.rows(); ++r) {
        double mass = 0.0;
        for (double v : P.row(r)) mass += v;
        for (std::size_t c = 0; c < P.cols(); ++c) gz(r, c) += g[r] * (std::exp(lsm(r, c)) * mass - P(r, c));
      }
    }
  });
}

Var cross_entropy_rows(Var target, Var logits) {
  Tape& t = same_tape(target, logits);
  require_same_shape(target.value(), logits.value(), "cross_entropy_rows");
  const Tensor& T = target.value();
  const Tensor lsm = adlab::log_softmax(logits.value());
  Tensor out = Tensor::matrix(T.rows(), 1);
  for (std::size_t r = 0; r < T.rows(); ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < T.cols(); ++c) acc -= T(r, c) * lsm(r, c);
    out[r] = acc;
  }
  const std::size_t it = target.id(), iz = logits.id();
  return t.record(std::move(out), {target, logits}, [it, iz, lsm](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    const Tensor& T = tp.value(it);
    if (tp.requires_grad(it)) {
      Tensor& gt = tp.grad_mut(it);
      for (std::size_t r = 0; r < T.rows(); ++r)
        for (std::size_t c = 0; c < T.cols(); ++c) gt(r, c) -= g[r] * lsm(r, c);
    }
    if (tp.requires_grad(iz)) {
      Tensor& gz = tp.grad_mut(iz);
      for (std::size_t r = 0; r < T.rows(); ++r) {
        double mass = 0.0;
        for (double v : T.row(r)) mass += v;
        for (std::size_t c = 0; c < T.cols(); ++c) gz(r, c) += g[r] * (std::exp(lsm(r, c)) * mass - T(r, c));
      }
    }
  });
}

Var weighted_mean(Var v, std::span<const double> weights) {
  const Tensor& V = v.value();
  if (weights.size() != V.size()) {
    throw ContractError("weighted_mean: " + std::to_string(weights.size()) + " weights for " +
                        std::to_string(V.size()) + " values");
  }
  const double inv_n = 1.0 / static_cast<double>(V.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < V.size(); ++i) acc += weights[i] * V[i];
  std::vector<double> w(weights.begin(), weights.end());
  const std::size_t iv = v.id();
  return v.tape().record(Tensor({1}, acc * inv_n), {v}, [iv, w = std::move(w), inv_n](Tape& tp, std::size_t self) {
    const double g = tp.grad(self)[0];
    auto& dst = tp.grad_mut(iv).storage();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g * w[i] * inv_n;
  });
}

Var backward_hook(Var a, std::function<void()> on_backward) {
  const std::size_t ia = a.id();
  return a.tape().record(a.value(), {a}, [ia, cb = std::move(on_backward)](Tape& tp, std::size_t self) {
    cb();
    accumulate(tp, ia, self);
  });
}

}  // namespace adlab
