#pragma once

#include <utility>
#include <vector>

#include "bowfree/matrix.hpp"
#include "bowfree/tape.hpp"

namespace bowfree {

// Mixed graph on D observed nodes: directed(i, j) = 1 means x_i -> x_j,
// bidirected(i, j) = 1 means x_i <-> x_j (stored symmetrically). A valid
// graph has zero diagonals, an acyclic directed part and no bow (a pair with
// both a directed and a bidirected edge).
struct AdmgGraph {
  int num_nodes = 0;
  Matrix directed;
  Matrix bidirected;

  explicit AdmgGraph(int d = 0)
      : num_nodes(d), directed(d, d), bidirected(d, d) {}
};

// Same layout with entries in [0, 1]: edge probabilities or relaxed samples.
struct SoftAdmg {
  Matrix directed;
  Matrix bidirected;
};

// Adjacency over D observed nodes followed by one latent node per unordered
// pair (i < j) in lexicographic order, M = D(D-1)/2 in total. Latent rows
// have outgoing edges only, to both members of their pair, gated by the
// bidirected matrix.
struct MagnifiedGraph {
  int observed = 0;
  int latent = 0;
  Matrix adjacency;  // (D+M) x (D+M)
};

struct PriorHyperparams {
  double lambda_s1 = 5.0;
  double lambda_s2 = 5.0;
  double rho = 1.0;
  double alpha = 0.0;
};

inline int num_pairs(int d) { return d * (d - 1) / 2; }

// Lexicographic index of the unordered pair (i, j), i < j.
inline int pair_index(int i, int j, int d) {
  if (i > j) std::swap(i, j);
  return i * (d - 1) - i * (i - 1) / 2 + (j - i - 1);
}

inline std::vector<std::pair<int, int>> all_pairs(int d) {
  std::vector<std::pair<int, int>> out;
  out.reserve(num_pairs(d));
  for (int i = 0; i < d; ++i)
    for (int j = i + 1; j < d; ++j) out.emplace_back(i, j);
  return out;
}

inline bool is_acyclic(const Matrix& directed) {
  const int d = directed.rows();
  std::vector<int> indeg(d, 0);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j)
      if (directed(i, j) != 0.0) ++indeg[j];
  std::vector<int> stack;
  for (int i = 0; i < d; ++i)
    if (indeg[i] == 0) stack.push_back(i);
  int seen = 0;
  while (!stack.empty()) {
    int i = stack.back();
    stack.pop_back();
    ++seen;
    for (int j = 0; j < d; ++j)
      if (directed(i, j) != 0.0 && --indeg[j] == 0) stack.push_back(j);
  }
  return seen == d;
}

// Topological order of the observed nodes under the directed part; throws on
// cycles.
inline std::vector<int> topological_order(const Matrix& directed) {
  const int d = directed.rows();
  std::vector<int> indeg(d, 0), order;
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j)
      if (directed(i, j) != 0.0) ++indeg[j];
  std::vector<int> stack;
  for (int i = d - 1; i >= 0; --i)
    if (indeg[i] == 0) stack.push_back(i);
  while (!stack.empty()) {
    int i = stack.back();
    stack.pop_back();
    order.push_back(i);
    for (int j = 0; j < d; ++j)
      if (directed(i, j) != 0.0 && --indeg[j] == 0) stack.push_back(j);
  }
  if (static_cast<int>(order.size()) != d)
    throw error("topological_order: directed part is cyclic");
  return order;
}

inline bool is_bow_free_admg(const AdmgGraph& g) {
  const int d = g.num_nodes;
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j)
      if (g.directed(i, j) != 0.0 && (g.bidirected(i, j) != 0.0 || g.bidirected(j, i) != 0.0))
        return false;
  return is_acyclic(g.directed);
}

// trace(exp(G_D)) - D + sum(G_D o G_B); non-negative on binary graphs with
// zero diagonal, and zero exactly on acyclic bow-free ones. Accepts soft
// adjacencies so it can act on probabilities or relaxed samples.
inline double bow_free_penalty(const SoftAdmg& g) {
  if (g.directed.rows() != g.directed.cols())
    throw error("bow_free_penalty: non-square input " + g.directed.shape_str());
  check_same_shape("bow_free_penalty", g.directed, g.bidirected);
  const int d = g.directed.rows();
  return trace_of(matrix_exp(g.directed)) - d + sum_of(hadamard(g.directed, g.bidirected));
}

inline double bow_free_penalty(const AdmgGraph& g) {
  return bow_free_penalty(SoftAdmg{g.directed, g.bidirected});
}

// Differentiable version on tape values, same series as the plain one.
inline Value bow_free_penalty(Tape& t, Value directed, Value bidirected) {
  if (directed.val().rows() != directed.val().cols())
    throw error("bow_free_penalty: non-square input " + directed.val().shape_str());
  const int d = directed.val().rows();
  Value tr = t.trace(t.matexp(directed));
  Value bows = t.sum(t.mul(directed, bidirected));
  return t.add(t.add_const(tr, -static_cast<double>(d)), bows);
}

// Unnormalized log prior of Eq.-style sparse ADMG beliefs: sparsity norms
// plus the augmented-Lagrangian penalty terms. The normalizing constant is
// dropped; it is constant in all trainable quantities.
inline double graph_log_prior(const SoftAdmg& g, const PriorHyperparams& h) {
  const double pen = bow_free_penalty(g);
  return -h.lambda_s1 * frobenius_sq(g.directed) -
         h.lambda_s2 * frobenius_sq(g.bidirected) - h.rho * pen * pen -
         h.alpha * pen;
}

// One latent per unordered pair, active (two outgoing edges) iff the pair is
// bidirected. Observed block equals the directed part.
inline MagnifiedGraph magnify(const AdmgGraph& g) {
  const int d = g.num_nodes;
  for (int i = 0; i < d; ++i) {
    if (g.directed(i, i) != 0.0 || g.bidirected(i, i) != 0.0)
      throw error("magnify: nonzero diagonal");
    for (int j = 0; j < d; ++j)
      if (g.bidirected(i, j) != g.bidirected(j, i))
        throw error("magnify: bidirected matrix not symmetric");
  }
  const int m = num_pairs(d);
  MagnifiedGraph mg;
  mg.observed = d;
  mg.latent = m;
  mg.adjacency = Matrix(d + m, d + m);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) mg.adjacency(i, j) = g.directed(i, j);
  for (int i = 0; i < d; ++i)
    for (int j = i + 1; j < d; ++j) {
      if (g.bidirected(i, j) == 0.0) continue;
      const int u = d + pair_index(i, j, d);
      mg.adjacency(u, i) = 1.0;
      mg.adjacency(u, j) = 1.0;
    }
  return mg;
}

// Directed F1 over ordered pairs, bidirected F1 over unordered pairs.
// F1 is 1 when both edge sets are empty and 0 when precision + recall is 0.
inline std::pair<double, double> f1_scores(const AdmgGraph& predicted,
                                           const AdmgGraph& truth) {
  if (predicted.num_nodes != truth.num_nodes)
    throw error("f1_scores: size mismatch (" + std::to_string(predicted.num_nodes) +
                " vs " + std::to_string(truth.num_nodes) + ")");
  const int d = truth.num_nodes;
  auto f1_from_counts = [](int tp, int pred, int pos) {
    if (pred == 0 && pos == 0) return 1.0;
    if (tp == 0) return 0.0;
    const double precision = static_cast<double>(tp) / pred;
    const double recall = static_cast<double>(tp) / pos;
    return 2.0 * precision * recall / (precision + recall);
  };
  int tp_d = 0, pred_d = 0, pos_d = 0;
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) {
      const bool p = predicted.directed(i, j) != 0.0;
      const bool q = truth.directed(i, j) != 0.0;
      tp_d += p && q;
      pred_d += p;
      pos_d += q;
    }
  int tp_b = 0, pred_b = 0, pos_b = 0;
  for (int i = 0; i < d; ++i)
    for (int j = i + 1; j < d; ++j) {
      const bool p = predicted.bidirected(i, j) != 0.0;
      const bool q = truth.bidirected(i, j) != 0.0;
      tp_b += p && q;
      pred_b += p;
      pos_b += q;
    }
  return {f1_from_counts(tp_d, pred_d, pos_d), f1_from_counts(tp_b, pred_b, pos_b)};
}

// Exhaustive test oracle. The pair state space is 4^{D(D-1)/2} x
// 2^{D(D-1)/2} before the validity filter, so D is capped at 4.
inline std::vector<AdmgGraph> enumerate_bow_free_admgs(int d) {
  if (d < 1 || d > 4) throw error("enumerate_bow_free_admgs: D must be in [1, 4]");
  const auto pairs = all_pairs(d);
  const int np = static_cast<int>(pairs.size());
  std::vector<AdmgGraph> out;
  const long dir_states = 1l << (2 * np);  // two ordered entries per pair
  const long bid_states = 1l << np;
  for (long ds = 0; ds < dir_states; ++ds) {
    AdmgGraph g(d);
    for (int p = 0; p < np; ++p) {
      g.directed(pairs[p].first, pairs[p].second) = (ds >> (2 * p)) & 1;
      g.directed(pairs[p].second, pairs[p].first) = (ds >> (2 * p + 1)) & 1;
    }
    if (!is_acyclic(g.directed)) continue;
    for (long bs = 0; bs < bid_states; ++bs) {
      AdmgGraph h = g;
      bool bow = false;
      for (int p = 0; p < np; ++p) {
        if (((bs >> p) & 1) == 0) continue;
        const int i = pairs[p].first, j = pairs[p].second;
        if (h.directed(i, j) != 0.0 || h.directed(j, i) != 0.0) {
          bow = true;
          break;
        }
        h.bidirected(i, j) = 1.0;
        h.bidirected(j, i) = 1.0;
      }
      if (!bow) out.push_back(std::move(h));
    }
  }
  return out;
}

}  // namespace bowfree
