#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "bowfree/matrix.hpp"
#include "bowfree/rng.hpp"

namespace bowfree {

class Tape;

// Handle to a node on a tape; valid while the tape lives.
class Value {
 public:
  Value() = default;
  const Matrix& val() const;
  int rows() const { return val().rows(); }
  int cols() const { return val().cols(); }
  double scalar() const;
  int id() const { return id_; }
  Tape& tape() const { return *tape_; }

 private:
  friend class Tape;
  Value(Tape* t, int id) : tape_(t), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

// Records one forward pass as a topologically ordered list of primitive ops.
// A single reverse sweep yields gradients for every leaf. Tapes are single
// threaded; independent tapes may run on separate threads.
class Tape {
 public:
  struct Node {
    Matrix value;
    Matrix aux;                 // op-specific saved locals (e.g. soft sample)
    std::vector<int> parents;
    std::function<void(Tape&, int)> backward;  // nullptr for leaves
    bool needs_grad = false;
  };

  Value leaf(Matrix v) { return push(std::move(v), {}, nullptr, true); }
  Value constant(Matrix v) { return push(std::move(v), {}, nullptr, false); }
  Value constant_scalar(double c) { return constant(Matrix(1, 1, c)); }

  const Matrix& value_of(const Value& v) const { return nodes_[v.id_].value; }
  size_t num_nodes() const { return nodes_.size(); }

  // --- gradient driver -----------------------------------------------------

  // d(loss)/d(leaf) for each requested leaf. Loss must be a finite scalar;
  // leaves not reachable from the loss get zero gradients.
  std::vector<Matrix> grad(const Value& loss, const std::vector<Value>& leaves) {
    const Matrix& lv = nodes_[loss.id_].value;
    if (lv.rows() != 1 || lv.cols() != 1)
      throw error("grad: loss must be scalar, got " + lv.shape_str());
    if (!std::isfinite(lv(0, 0))) throw error("grad: non-finite loss value");
    grads_.assign(nodes_.size(), Matrix());
    grads_[loss.id_] = Matrix(1, 1, 1.0);
    for (int i = loss.id_; i >= 0; --i) {
      if (grads_[i].size() == 0 || !nodes_[i].backward) continue;
      nodes_[i].backward(*this, i);
    }
    std::vector<Matrix> out;
    out.reserve(leaves.size());
    for (const Value& l : leaves) {
      if (grads_[l.id_].size() == 0)
        out.push_back(Matrix(nodes_[l.id_].value.rows(), nodes_[l.id_].value.cols()));
      else
        out.push_back(grads_[l.id_]);
    }
    return out;
  }

  // --- primitives -----------------------------------------------------------

  Value add(Value a, Value b) {
    check_same_shape("add", v(a), v(b));
    Matrix r = v(a) + v(b);
    return push(std::move(r), {a.id_, b.id_}, [](Tape& t, int self) {
      const Matrix& g = t.grads_[self];
      t.accumulate(t.nodes_[self].parents[0], g);
      t.accumulate(t.nodes_[self].parents[1], g);
    });
  }

  Value sub(Value a, Value b) {
    check_same_shape("sub", v(a), v(b));
    Matrix r = v(a) - v(b);
    return push(std::move(r), {a.id_, b.id_}, [](Tape& t, int self) {
      const Matrix& g = t.grads_[self];
      t.accumulate(t.nodes_[self].parents[0], g);
      t.accumulate_scaled(t.nodes_[self].parents[1], g, -1.0);
    });
  }

  Value mul(Value a, Value b) {
    check_same_shape("mul", v(a), v(b));
    Matrix r = hadamard(v(a), v(b));
    return push(std::move(r), {a.id_, b.id_}, [](Tape& t, int self) {
      const Matrix& g = t.grads_[self];
      const auto& p = t.nodes_[self].parents;
      t.accumulate_hadamard(p[0], g, t.nodes_[p[1]].value);
      t.accumulate_hadamard(p[1], g, t.nodes_[p[0]].value);
    });
  }

  Value matmul(Value a, Value b) {
    Matrix r(v(a).rows(), v(b).cols());
    gemm(Trans::No, Trans::No, 1.0, v(a), v(b), 0.0, r);
    return push(std::move(r), {a.id_, b.id_}, [](Tape& t, int self) {
      const Matrix& g = t.grads_[self];
      const auto& p = t.nodes_[self].parents;
      if (t.wants(p[0]))
        gemm(Trans::No, Trans::Yes, 1.0, g, t.nodes_[p[1]].value, 1.0, t.grad_buf(p[0]));
      if (t.wants(p[1]))
        gemm(Trans::Yes, Trans::No, 1.0, t.nodes_[p[0]].value, g, 1.0, t.grad_buf(p[1]));
    });
  }

  Value scale(Value a, double c) {
    return push(scaled(v(a), c), {a.id_}, [c](Tape& t, int self) {
      t.accumulate_scaled(t.nodes_[self].parents[0], t.grads_[self], c);
    });
  }

  Value add_const(Value a, double c) {
    Matrix r = v(a);
    for (size_t i = 0; i < r.size(); ++i) r.data()[i] += c;
    return push(std::move(r), {a.id_}, [](Tape& t, int self) {
      t.accumulate(t.nodes_[self].parents[0], t.grads_[self]);
    });
  }

  Value exp(Value a) {
    Matrix r = v(a);
    for (size_t i = 0; i < r.size(); ++i) r.data()[i] = std::exp(r.data()[i]);
    return push(std::move(r), {a.id_}, [](Tape& t, int self) {
      t.accumulate_hadamard(t.nodes_[self].parents[0], t.grads_[self],
                            t.nodes_[self].value);
    });
  }

  Value log(Value a) {
    Matrix r = v(a);
    for (size_t i = 0; i < r.size(); ++i) r.data()[i] = std::log(r.data()[i]);
    return push(std::move(r), {a.id_}, [](Tape& t, int self) {
      int p = t.nodes_[self].parents[0];
      if (!t.wants(p)) return;
      const Matrix& g = t.grads_[self];
      const Matrix& x = t.nodes_[p].value;
      Matrix& gp = t.grad_buf(p);
      for (size_t i = 0; i < gp.size(); ++i) gp.data()[i] += g.data()[i] / x.data()[i];
    });
  }

  Value tanh(Value a) {
    Matrix r = v(a);
    for (size_t i = 0; i < r.size(); ++i) r.data()[i] = std::tanh(r.data()[i]);
    return push(std::move(r), {a.id_}, [](Tape& t, int self) {
      int p = t.nodes_[self].parents[0];
      if (!t.wants(p)) return;
      const Matrix& g = t.grads_[self];
      const Matrix& y = t.nodes_[self].value;
      Matrix& gp = t.grad_buf(p);
      for (size_t i = 0; i < gp.size(); ++i)
        gp.data()[i] += g.data()[i] * (1.0 - y.data()[i] * y.data()[i]);
    });
  }

  Value sigmoid(Value a) {
    Matrix r = v(a);
    for (size_t i = 0; i < r.size(); ++i) r.data()[i] = sigmoid_scalar(r.data()[i]);
    return push(std::move(r), {a.id_}, [](Tape& t, int self) {
      int p = t.nodes_[self].parents[0];
      if (!t.wants(p)) return;
      const Matrix& g = t.grads_[self];
      const Matrix& y = t.nodes_[self].value;
      Matrix& gp = t.grad_buf(p);
      for (size_t i = 0; i < gp.size(); ++i)
        gp.data()[i] += g.data()[i] * y.data()[i] * (1.0 - y.data()[i]);
    });
  }

  Value softplus(Value a) {
    Matrix r = v(a);
    for (size_t i = 0; i < r.size(); ++i) r.data()[i] = softplus_scalar(r.data()[i]);
    return push(std::move(r), {a.id_}, [](Tape& t, int self) {
      int p = t.nodes_[self].parents[0];
      if (!t.wants(p)) return;
      const Matrix& g = t.grads_[self];
      const Matrix& x = t.nodes_[p].value;
      Matrix& gp = t.grad_buf(p);
      for (size_t i = 0; i < gp.size(); ++i)
        gp.data()[i] += g.data()[i] * sigmoid_scalar(x.data()[i]);
    });
  }

  Value square(Value a) {
    Matrix r = v(a);
    for (size_t i = 0; i < r.size(); ++i) r.data()[i] *= r.data()[i];
    return push(std::move(r), {a.id_}, [](Tape& t, int self) {
      int p = t.nodes_[self].parents[0];
      if (!t.wants(p)) return;
      const Matrix& g = t.grads_[self];
      const Matrix& x = t.nodes_[p].value;
      Matrix& gp = t.grad_buf(p);
      for (size_t i = 0; i < gp.size(); ++i)
        gp.data()[i] += 2.0 * g.data()[i] * x.data()[i];
    });
  }

  Value sum(Value a) {
    return push(Matrix(1, 1, sum_of(v(a))), {a.id_}, [](Tape& t, int self) {
      int p = t.nodes_[self].parents[0];
      if (!t.wants(p)) return;
      const double g = t.grads_[self](0, 0);
      Matrix& gp = t.grad_buf(p);
      for (size_t i = 0; i < gp.size(); ++i) gp.data()[i] += g;
    });
  }

  Value mean(Value a) {
    const double n = static_cast<double>(v(a).size());
    return push(Matrix(1, 1, sum_of(v(a)) / n), {a.id_}, [n](Tape& t, int self) {
      int p = t.nodes_[self].parents[0];
      if (!t.wants(p)) return;
      const double g = t.grads_[self](0, 0) / n;
      Matrix& gp = t.grad_buf(p);
      for (size_t i = 0; i < gp.size(); ++i) gp.data()[i] += g;
    });
  }

  Value trace(Value a) {
    return push(Matrix(1, 1, trace_of(v(a))), {a.id_}, [](Tape& t, int self) {
      int p = t.nodes_[self].parents[0];
      if (!t.wants(p)) return;
      const double g = t.grads_[self](0, 0);
      Matrix& gp = t.grad_buf(p);
      for (int i = 0; i < gp.rows(); ++i) gp(i, i) += g;
    });
  }

  // 1xK row replicated n times
  Value broadcast_rows(Value a, int n) {
    if (v(a).rows() != 1)
      throw error("broadcast: expected single row, got " + v(a).shape_str());
    const int k = v(a).cols();
    Matrix r(n, k);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < k; ++j) r(i, j) = v(a)(0, j);
    return push(std::move(r), {a.id_}, [n, k](Tape& t, int self) {
      int p = t.nodes_[self].parents[0];
      if (!t.wants(p)) return;
      const Matrix& g = t.grads_[self];
      Matrix& gp = t.grad_buf(p);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < k; ++j) gp(0, j) += g(i, j);
    });
  }

  Value concat_cols(Value a, Value b) {
    if (v(a).rows() != v(b).rows())
      throw error("concat: row mismatch (" + v(a).shape_str() + " vs " +
                  v(b).shape_str() + ")");
    const int n = v(a).rows(), ka = v(a).cols(), kb = v(b).cols();
    Matrix r(n, ka + kb);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < ka; ++j) r(i, j) = v(a)(i, j);
      for (int j = 0; j < kb; ++j) r(i, ka + j) = v(b)(i, j);
    }
    return push(std::move(r), {a.id_, b.id_}, [n, ka, kb](Tape& t, int self) {
      const Matrix& g = t.grads_[self];
      const auto& p = t.nodes_[self].parents;
      if (t.wants(p[0])) {
        Matrix& ga = t.grad_buf(p[0]);
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < ka; ++j) ga(i, j) += g(i, j);
      }
      if (t.wants(p[1])) {
        Matrix& gb = t.grad_buf(p[1]);
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < kb; ++j) gb(i, j) += g(i, ka + j);
      }
    });
  }

  // half-open row/col ranges
  Value slice(Value a, int r0, int r1, int c0, int c1) {
    if (r0 < 0 || r1 > v(a).rows() || c0 < 0 || c1 > v(a).cols() || r0 > r1 || c0 > c1)
      throw error("slice: range out of bounds for " + v(a).shape_str());
    Matrix r(r1 - r0, c1 - c0);
    for (int i = r0; i < r1; ++i)
      for (int j = c0; j < c1; ++j) r(i - r0, j - c0) = v(a)(i, j);
    return push(std::move(r), {a.id_}, [r0, r1, c0, c1](Tape& t, int self) {
      int p = t.nodes_[self].parents[0];
      if (!t.wants(p)) return;
      const Matrix& g = t.grads_[self];
      Matrix& gp = t.grad_buf(p);
      for (int i = r0; i < r1; ++i)
        for (int j = c0; j < c1; ++j) gp(i, j) += g(i - r0, j - c0);
    });
  }

  // Column-major vectorization of an n x k matrix into (k*n) x 1: output row
  // j*n + i holds a(i, j). Used to stack per-node columns into node blocks.
  Value stack_columns(Value a) {
    const int n = v(a).rows(), k = v(a).cols();
    Matrix r(n * k, 1);
    for (int j = 0; j < k; ++j)
      for (int i = 0; i < n; ++i) r(j * n + i, 0) = v(a)(i, j);
    return push(std::move(r), {a.id_}, [n, k](Tape& t, int self) {
      int p = t.nodes_[self].parents[0];
      if (!t.wants(p)) return;
      const Matrix& g = t.grads_[self];
      Matrix& gp = t.grad_buf(p);
      for (int j = 0; j < k; ++j)
        for (int i = 0; i < n; ++i) gp(i, j) += g(j * n + i, 0);
    });
  }

  // Treats `blocks` as K stacked blocks of `block_rows` rows; output block i
  // is sum_j mix(j, i) * block_j. The masked-aggregation workhorse.
  Value block_mix(Value blocks, Value mix, int block_rows) {
    const int kin = v(mix).rows(), kout = v(mix).cols();
    const int d = v(blocks).cols();
    if (v(blocks).rows() != kin * block_rows)
      throw error("block_mix: blocks " + v(blocks).shape_str() + " vs mix " +
                  v(mix).shape_str());
    Matrix r(kout * block_rows, d);
    const Matrix& bm = v(blocks);
    const Matrix& mm = v(mix);
    for (int i = 0; i < kout; ++i)
      for (int j = 0; j < kin; ++j) {
        const double w = mm(j, i);
        if (w == 0.0) continue;
        for (int b = 0; b < block_rows; ++b)
          for (int c = 0; c < d; ++c) r(i * block_rows + b, c) += w * bm(j * block_rows + b, c);
      }
    return push(std::move(r), {blocks.id_, mix.id_},
                [kin, kout, d, block_rows](Tape& t, int self) {
      const Matrix& g = t.grads_[self];
      const auto& p = t.nodes_[self].parents;
      const Matrix& bm = t.nodes_[p[0]].value;
      const Matrix& mm = t.nodes_[p[1]].value;
      if (t.wants(p[0])) {
        Matrix& gb = t.grad_buf(p[0]);
        for (int j = 0; j < kin; ++j)
          for (int i = 0; i < kout; ++i) {
            const double w = mm(j, i);
            if (w == 0.0) continue;
            for (int b = 0; b < block_rows; ++b)
              for (int c = 0; c < d; ++c)
                gb(j * block_rows + b, c) += w * g(i * block_rows + b, c);
          }
      }
      if (t.wants(p[1])) {
        Matrix& gm = t.grad_buf(p[1]);
        for (int j = 0; j < kin; ++j)
          for (int i = 0; i < kout; ++i) {
            double s = 0.0;
            for (int b = 0; b < block_rows; ++b)
              for (int c = 0; c < d; ++c)
                s += bm(j * block_rows + b, c) * g(i * block_rows + b, c);
            gm(j, i) += s;
          }
      }
    });
  }

  struct ScatterEntry {
    int src_row;  // row in the P x 1 source
    int row, col; // destination
  };

  // Builds a rows x cols matrix with out(row, col) += src(src_row, 0) for
  // each entry. One source row may fan out to several destinations.
  Value scatter(Value src, const std::vector<ScatterEntry>& entries, int rows,
                int cols) {
    if (v(src).cols() != 1)
      throw error("scatter: source must be a column, got " + v(src).shape_str());
    Matrix r(rows, cols);
    for (const auto& e : entries) r(e.row, e.col) += v(src)(e.src_row, 0);
    auto ents = entries;
    return push(std::move(r), {src.id_}, [ents = std::move(ents)](Tape& t, int self) {
      int p = t.nodes_[self].parents[0];
      if (!t.wants(p)) return;
      const Matrix& g = t.grads_[self];
      Matrix& gp = t.grad_buf(p);
      for (const auto& e : ents) gp(e.src_row, 0) += g(e.row, e.col);
    });
  }

  enum class SampleMode { Hard, Soft };

  // Rowwise Gumbel-softmax with a hard forward pass and soft backward pass.
  // In Hard mode each output row is exactly one-hot at the argmax of
  // (logits + gumbel noise) / temperature and the backward pass uses the
  // softmax relaxation's Jacobian (straight-through). Soft mode keeps the
  // relaxed forward value; gradients are then exact, which is what the
  // finite-difference checks run against.
  Value gumbel_softmax_st(Value logits, double temperature, Rng& rng,
                          SampleMode mode = SampleMode::Hard) {
    if (temperature <= 0.0)
      throw error("gumbel_softmax_st: temperature must be positive");
    const int p = v(logits).rows(), k = v(logits).cols();
    Matrix soft(p, k);
    Matrix hard(p, k);
    for (int i = 0; i < p; ++i) {
      double m = -1e300;
      for (int j = 0; j < k; ++j) {
        soft(i, j) = (v(logits)(i, j) + rng.gumbel()) / temperature;
        m = std::max(m, soft(i, j));
      }
      double z = 0.0;
      int arg = 0;
      for (int j = 0; j < k; ++j) {
        if (soft(i, j) == m) arg = j;
        soft(i, j) = std::exp(soft(i, j) - m);
        z += soft(i, j);
      }
      for (int j = 0; j < k; ++j) soft(i, j) /= z;
      hard(i, arg) = 1.0;
    }
    Matrix fwd = (mode == SampleMode::Hard) ? hard : soft;
    Value out = push(std::move(fwd), {logits.id_},
                     [temperature, p, k](Tape& t, int self) {
      int pid = t.nodes_[self].parents[0];
      if (!t.wants(pid)) return;
      const Matrix& g = t.grads_[self];
      const Matrix& y = t.nodes_[self].aux;  // soft probabilities
      Matrix& gp = t.grad_buf(pid);
      for (int i = 0; i < p; ++i) {
        double dot = 0.0;
        for (int j = 0; j < k; ++j) dot += g(i, j) * y(i, j);
        for (int j = 0; j < k; ++j)
          gp(i, j) += y(i, j) * (g(i, j) - dot) / temperature;
      }
    });
    nodes_[out.id_].aux = std::move(soft);
    return out;
  }

  // trace(exp(A)) building block: differentiable matrix exponential via the
  // scaled Taylor series with repeated squaring, truncated when the term norm
  // falls below 1e-12.
  Value matexp(Value a) {
    if (v(a).rows() != v(a).cols())
      throw error("matexp: non-square input " + v(a).shape_str());
    const int n = v(a).rows();
    int squarings = 0;
    double nrm = max_abs(v(a)) * n;
    while (nrm > 0.5 && squarings < 40) {
      nrm /= 2.0;
      ++squarings;
    }
    Value b = scale(a, 1.0 / static_cast<double>(1ull << squarings));
    Value e = add(constant(Matrix::identity(n)), b);
    Value term = b;
    for (int k = 2; k <= 60; ++k) {
      term = scale(matmul(term, b), 1.0 / k);
      e = add(e, term);
      if (std::sqrt(frobenius_sq(v(term))) < 1e-12) break;
    }
    for (int s = 0; s < squarings; ++s) e = matmul(e, e);
    return e;
  }

  static double sigmoid_scalar(double x) {
    return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                    : std::exp(x) / (1.0 + std::exp(x));
  }
  static double softplus_scalar(double x) {
    return x > 30.0 ? x : std::log1p(std::exp(std::min(x, 30.0)));
  }

 private:
  const Matrix& v(const Value& h) const { return nodes_[h.id_].value; }

  bool wants(int id) const { return nodes_[id].needs_grad; }

  Matrix& grad_buf(int id) {
    if (grads_[id].size() == 0)
      grads_[id] = Matrix(nodes_[id].value.rows(), nodes_[id].value.cols());
    return grads_[id];
  }

  void accumulate(int id, const Matrix& g) {
    if (!wants(id)) return;
    Matrix& gp = grad_buf(id);
    for (size_t i = 0; i < gp.size(); ++i) gp.data()[i] += g.data()[i];
  }

  void accumulate_scaled(int id, const Matrix& g, double c) {
    if (!wants(id)) return;
    Matrix& gp = grad_buf(id);
    for (size_t i = 0; i < gp.size(); ++i) gp.data()[i] += c * g.data()[i];
  }

  void accumulate_hadamard(int id, const Matrix& g, const Matrix& w) {
    if (!wants(id)) return;
    Matrix& gp = grad_buf(id);
    for (size_t i = 0; i < gp.size(); ++i) gp.data()[i] += g.data()[i] * w.data()[i];
  }

  Value push(Matrix val, std::vector<int> parents,
             std::function<void(Tape&, int)> backward, bool needs_grad = false) {
    Node n;
    n.value = std::move(val);
    n.parents = std::move(parents);
    for (int p : n.parents) needs_grad = needs_grad || nodes_[p].needs_grad;
    n.needs_grad = needs_grad;
    n.backward = needs_grad ? std::move(backward) : nullptr;
    nodes_.push_back(std::move(n));
    return Value(this, static_cast<int>(nodes_.size()) - 1);
  }

  std::vector<Node> nodes_;
  std::vector<Matrix> grads_;
};

inline const Matrix& Value::val() const { return tape_->value_of(*this); }
inline double Value::scalar() const {
  const Matrix& m = val();
  if (m.rows() != 1 || m.cols() != 1)
    throw error("scalar: value has shape " + m.shape_str());
  return m(0, 0);
}

// --- Adam ------------------------------------------------------------------

// Standard Adam with bias correction; one state per parameter group.
struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long t = 0;
  std::vector<Matrix> m, v;
};

inline void adam_step(AdamState& state, std::vector<Matrix*>& params,
                      const std::vector<Matrix>& grads) {
  if (params.size() != grads.size())
    throw error("adam_step: params/grads count mismatch");
  if (state.m.empty()) {
    for (const Matrix* p : params) {
      state.m.emplace_back(p->rows(), p->cols());
      state.v.emplace_back(p->rows(), p->cols());
    }
  }
  ++state.t;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  for (size_t i = 0; i < params.size(); ++i) {
    Matrix& p = *params[i];
    const Matrix& g = grads[i];
    check_same_shape("adam_step", p, g);
    Matrix& m = state.m[i];
    Matrix& v = state.v[i];
    for (size_t j = 0; j < p.size(); ++j) {
      m.data()[j] = state.beta1 * m.data()[j] + (1.0 - state.beta1) * g.data()[j];
      v.data()[j] = state.beta2 * v.data()[j] + (1.0 - state.beta2) * g.data()[j] * g.data()[j];
      const double mhat = m.data()[j] / bc1;
      const double vhat = v.data()[j] / bc2;
      p.data()[j] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

}  // namespace bowfree
