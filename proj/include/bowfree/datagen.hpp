#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "bowfree/graph.hpp"
#include "bowfree/matrix.hpp"
#include "bowfree/rng.hpp"
#include "bowfree/scm.hpp"

namespace bowfree {

// Fixed additive mechanism on the magnified state: every edge j -> i
// contributes weights(j, i) * phi(v_j) with phi either the Gaussian bump
// exp(-v^2) or the identity. Covers the synthetic generators and the linear
// oracle SEMs used in tests.
class AdditiveSem : public StructuralModel {
 public:
  enum class Link { Bump, Identity };

  AdditiveSem(int d, Matrix weights, Link link, std::vector<double> noise_stds,
              std::vector<double> latent_stds)
      : d_(d), m_(num_pairs(d)), weights_(std::move(weights)), link_(link),
        noise_stds_(std::move(noise_stds)), latent_stds_(std::move(latent_stds)) {
    if (weights_.rows() != d_ + m_ || weights_.cols() != d_ + m_)
      throw error("AdditiveSem: weight matrix " + weights_.shape_str());
    if (static_cast<int>(noise_stds_.size()) != d_ ||
        static_cast<int>(latent_stds_.size()) != m_)
      throw error("AdditiveSem: std vector sizes");
  }

  int observed() const override { return d_; }
  int latent() const override { return m_; }
  double noise_std(int node) const override { return noise_stds_[node]; }
  double latent_std(int k) const override { return latent_stds_[k]; }
  const Matrix& weights() const { return weights_; }
  Link link() const { return link_; }

  Matrix structural_fn(const Matrix& v, const Matrix& mask) const override {
    const int k = d_ + m_;
    if (v.cols() != k || mask.rows() != k || mask.cols() != k)
      throw error("AdditiveSem: state " + v.shape_str() + " mask " + mask.shape_str());
    const int n = v.rows();
    Matrix phi(n, k);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < k; ++j)
        phi(i, j) = link_ == Link::Bump ? std::exp(-v(i, j) * v(i, j)) : v(i, j);
    Matrix f(n, k);
    for (int t = 0; t < d_; ++t)
      for (int j = 0; j < k; ++j) {
        const double w = mask(j, t) * weights_(j, t);
        if (w == 0.0) continue;
        for (int i = 0; i < n; ++i) f(i, t) += w * phi(i, j);
      }
    return f;
  }

 private:
  int d_, m_;
  Matrix weights_;
  Link link_;
  std::vector<double> noise_stds_, latent_stds_;
};

struct ErSpec {
  int d = 4;
  int e = 6;
  int m = 2;
  int n = 5000;
  uint64_t seed = 0;
};

// Default interventional query recorded with a synthetic dataset so ATE runs
// are comparable; values are in original data units.
struct AteDefaults {
  int treatment = -1;
  double a = 0.0;
  double b = 0.0;
  std::vector<int> responses;
};

struct Dataset {
  Matrix x;  // N x D
  std::optional<AdmgGraph> truth;
  std::shared_ptr<const StructuralModel> sem;  // ground-truth handle
  std::vector<double> norm_means, norm_stds;   // empty while raw
  uint64_t seed = 0;
  std::string generator = "custom";
  std::optional<ErSpec> er_spec;
  std::optional<AteDefaults> ate_defaults;

  int num_samples() const { return x.rows(); }
  int num_nodes() const { return x.cols(); }
  bool normalized() const { return !norm_means.empty(); }

  double to_original_units(int col, double v) const {
    if (!normalized()) return v;
    return v * norm_stds[col] + norm_means[col];
  }
  double to_model_units(int col, double v) const {
    if (!normalized()) return v;
    return (v - norm_means[col]) / norm_stds[col];
  }
};

inline AdmgGraph fork_collider_graph() {
  AdmgGraph g(5);
  g.bidirected(1, 2) = g.bidirected(2, 1) = 1.0;
  g.bidirected(2, 3) = g.bidirected(3, 2) = 1.0;
  g.directed(0, 3) = 1.0;
  g.directed(0, 4) = 1.0;
  return g;
}

inline std::shared_ptr<const AdditiveSem> fork_collider_sem() {
  const int d = 5, k = d + num_pairs(d);
  Matrix w(k, k);
  const double c = std::sqrt(6.0);
  const int u23 = d + pair_index(1, 2, d);  // confounds x2, x3
  const int u34 = d + pair_index(2, 3, d);  // confounds x3, x4
  w(u23, 1) = c;
  w(u23, 2) = c;
  w(u34, 2) = c;
  w(u34, 3) = c;
  w(0, 3) = c;
  w(0, 4) = c;
  std::vector<double> noise{1.0, 0.1, 0.2, 0.1, 0.1};
  std::vector<double> latents(num_pairs(d), 1.0);
  return std::make_shared<AdditiveSem>(d, std::move(w), AdditiveSem::Link::Bump,
                                       std::move(noise), std::move(latents));
}

// The five-node fork-collider benchmark: latent-confounded pairs (x2, x3)
// and (x3, x4), an observed fork x1 -> {x4, x5}.
inline Dataset gen_fork_collider(int n, uint64_t seed) {
  if (n < 1) throw error("gen_fork_collider: need at least one sample");
  Dataset ds;
  ds.generator = "fork-collider";
  ds.seed = seed;
  ds.truth = fork_collider_graph();
  ds.sem = fork_collider_sem();
  Rng rng(Rng::mix(seed, 1));
  ds.x = simulate(*ds.sem, *ds.truth, n, rng);
  // default contrast: one sample std around the treatment mean
  AteDefaults q;
  q.treatment = 3;
  q.responses = {1, 2, 4};
  double mean = 0.0, sq = 0.0;
  for (int i = 0; i < n; ++i) {
    mean += ds.x(i, 3);
    sq += ds.x(i, 3) * ds.x(i, 3);
  }
  mean /= n;
  const double sd = std::sqrt(std::max(1e-12, sq / n - mean * mean));
  q.a = mean - sd;
  q.b = mean + sd;
  ds.ate_defaults = q;
  return ds;
}

// Confounded Erdos-Renyi model. Directed part: random node permutation, each
// pair oriented from earlier to later gets an edge with probability
// e / (d(d-1)/2). Bidirected part: independent edges with probability
// m / (d(d-1)/2), skipping pairs that would create a bow. Mechanisms are
// Gaussian bumps y = w^T exp(-x^2) with weights bounded away from zero;
// exogenous noise and latents are N(0, 0.1^2). Latents are dropped from the
// emitted data.
inline Dataset gen_er_admg(const ErSpec& spec) {
  if (spec.d < 2) throw error("gen_er_admg: need at least two nodes");
  const int np = num_pairs(spec.d);
  if (spec.e < 0 || spec.e > np)
    throw error("gen_er_admg: expected directed edges " + std::to_string(spec.e) +
                " out of range for d=" + std::to_string(spec.d));
  if (spec.m < 0 || spec.m > np)
    throw error("gen_er_admg: expected confounders " + std::to_string(spec.m) +
                " out of range for d=" + std::to_string(spec.d));
  if (spec.n < 1) throw error("gen_er_admg: need at least one sample");

  Rng rng(Rng::mix(spec.seed, 2));
  const int d = spec.d;
  std::vector<int> perm(d);
  for (int i = 0; i < d; ++i) perm[i] = i;
  rng.shuffle(perm);
  std::vector<int> rank(d);
  for (int i = 0; i < d; ++i) rank[perm[i]] = i;

  AdmgGraph g(d);
  const double p_dir = static_cast<double>(spec.e) / np;
  for (auto [i, j] : all_pairs(d)) {
    if (rng.uniform() >= p_dir) continue;
    if (rank[i] < rank[j])
      g.directed(i, j) = 1.0;
    else
      g.directed(j, i) = 1.0;
  }
  const double p_bid = static_cast<double>(spec.m) / np;
  for (auto [i, j] : all_pairs(d)) {
    if (rng.uniform() >= p_bid) continue;
    if (g.directed(i, j) != 0.0 || g.directed(j, i) != 0.0) continue;  // no bows
    g.bidirected(i, j) = g.bidirected(j, i) = 1.0;
  }

  const int k = d + np;
  Matrix w(k, k);
  auto draw_weight = [&rng]() {
    const double mag = rng.uniform(0.5, 2.0);
    return rng.uniform() < 0.5 ? -mag : mag;
  };
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j)
      if (g.directed(i, j) != 0.0) w(i, j) = draw_weight();
  for (auto [i, j] : all_pairs(d)) {
    if (g.bidirected(i, j) == 0.0) continue;
    const int u = d + pair_index(i, j, d);
    w(u, i) = draw_weight();
    w(u, j) = draw_weight();
  }

  Dataset ds;
  ds.generator = "er";
  ds.seed = spec.seed;
  ds.er_spec = spec;
  ds.truth = g;
  ds.sem = std::make_shared<AdditiveSem>(
      d, std::move(w), AdditiveSem::Link::Bump, std::vector<double>(d, 0.1),
      std::vector<double>(np, 0.1));
  ds.x = simulate(*ds.sem, g, spec.n, rng);
  return ds;
}

// Per-column zero mean, unit standard deviation; stats are stored (and
// composed across repeated calls) so interventional results can be reported
// in original units.
inline Dataset normalize(Dataset ds) {
  const int n = ds.num_samples(), d = ds.num_nodes();
  if (n < 2) throw error("normalize: need at least two samples");
  std::vector<double> means(d), stds(d);
  for (int j = 0; j < d; ++j) {
    double mean = 0.0;
    for (int i = 0; i < n; ++i) mean += ds.x(i, j);
    mean /= n;
    double var = 0.0;
    for (int i = 0; i < n; ++i) {
      const double r = ds.x(i, j) - mean;
      var += r * r;
    }
    var /= n;
    if (var <= 0.0)
      throw error("normalize: column " + std::to_string(j) + " has zero variance");
    means[j] = mean;
    stds[j] = std::sqrt(var);
    for (int i = 0; i < n; ++i) ds.x(i, j) = (ds.x(i, j) - mean) / stds[j];
  }
  if (ds.normalized()) {
    for (int j = 0; j < d; ++j) {
      ds.norm_means[j] += ds.norm_stds[j] * means[j];
      ds.norm_stds[j] *= stds[j];
    }
  } else {
    ds.norm_means = means;
    ds.norm_stds = stds;
  }
  return ds;
}

inline Dataset denormalize(Dataset ds) {
  if (!ds.normalized()) return ds;
  for (int j = 0; j < ds.num_nodes(); ++j)
    for (int i = 0; i < ds.num_samples(); ++i)
      ds.x(i, j) = ds.x(i, j) * ds.norm_stds[j] + ds.norm_means[j];
  ds.norm_means.clear();
  ds.norm_stds.clear();
  return ds;
}

}  // namespace bowfree
