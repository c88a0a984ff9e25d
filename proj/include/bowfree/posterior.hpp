#pragma once

#include <cmath>
#include <vector>

#include "bowfree/graph.hpp"
#include "bowfree/matrix.hpp"
#include "bowfree/rng.hpp"
#include "bowfree/scm.hpp"
#include "bowfree/tape.hpp"

namespace bowfree {

// Factorized graph posterior over unordered observed pairs (i < j). Directed
// edges use the ENCO split into an existence logit gamma and an orientation
// logit theta:
//   P(i->j) = s(gamma) s(theta),  P(j->i) = s(gamma) s(-theta),
//   P(none) = 1 - s(gamma);
// bidirected edges are independent Bernoullis with logit beta.
struct GraphPosterior {
  int num_nodes = 0;
  Matrix gamma;  // P x 1, edge existence
  Matrix theta;  // P x 1, orientation (positive favours i->j)
  Matrix beta;   // P x 1, bidirected

  explicit GraphPosterior(int d = 0)
      : num_nodes(d), gamma(num_pairs(d), 1), theta(num_pairs(d), 1),
        beta(num_pairs(d), 1) {}

  std::vector<Matrix*> params() { return {&gamma, &theta, &beta}; }

  void saturate_to(const AdmgGraph& g, double logit = 50.0) {
    const auto pairs = all_pairs(num_nodes);
    for (int p = 0; p < static_cast<int>(pairs.size()); ++p) {
      const auto [i, j] = pairs[p];
      const bool ij = g.directed(i, j) != 0.0;
      const bool ji = g.directed(j, i) != 0.0;
      gamma(p, 0) = (ij || ji) ? logit : -logit;
      theta(p, 0) = ij ? logit : (ji ? -logit : 0.0);
      beta(p, 0) = g.bidirected(i, j) != 0.0 ? logit : -logit;
    }
  }
};

// Amortized Gaussian posterior over the pair latents: one MLP maps an
// observation to (mean, log-std) of all M latents.
struct LatentInferenceNet {
  int num_nodes = 0;
  Mlp net;

  LatentInferenceNet() = default;
  LatentInferenceNet(int d, int hidden, Rng& rng) : num_nodes(d) {
    net.init(rng, d, hidden, 2 * num_pairs(d));
  }

  std::vector<Matrix*> params() { return net.params(); }
};

// Hard mixed-graph realization plus the relaxed tensors that back its
// straight-through gradients; layout is fixed by all_pairs order.
struct GraphSample {
  AdmgGraph hard;
  Value directed;    // D x D on tape
  Value bidirected;  // D x D on tape, symmetric
  Value magnified;   // (D+M) x (D+M) mask on tape
};

inline Matrix sigmoid_mat(const Matrix& x) {
  Matrix r = x;
  for (size_t i = 0; i < r.size(); ++i) r.data()[i] = Tape::sigmoid_scalar(r.data()[i]);
  return r;
}

// Marginal edge probabilities: directed entries are the ENCO products,
// bidirected entries are symmetric sigmoids.
inline SoftAdmg graph_edge_probabilities(const GraphPosterior& q) {
  const int d = q.num_nodes;
  SoftAdmg out{Matrix(d, d), Matrix(d, d)};
  const auto pairs = all_pairs(d);
  for (int p = 0; p < static_cast<int>(pairs.size()); ++p) {
    const auto [i, j] = pairs[p];
    const double se = Tape::sigmoid_scalar(q.gamma(p, 0));
    const double so = Tape::sigmoid_scalar(q.theta(p, 0));
    out.directed(i, j) = se * so;
    out.directed(j, i) = se * (1.0 - so);
    const double sb = Tape::sigmoid_scalar(q.beta(p, 0));
    out.bidirected(i, j) = sb;
    out.bidirected(j, i) = sb;
  }
  return out;
}

// Mode graph for reporting: existence marginal thresholded at 0.5,
// orientation by the larger directed marginal, bidirected at 0.5.
inline AdmgGraph mode_graph(const GraphPosterior& q) {
  const int d = q.num_nodes;
  AdmgGraph g(d);
  const auto pairs = all_pairs(d);
  for (int p = 0; p < static_cast<int>(pairs.size()); ++p) {
    const auto [i, j] = pairs[p];
    if (Tape::sigmoid_scalar(q.gamma(p, 0)) > 0.5) {
      if (q.theta(p, 0) >= 0.0)
        g.directed(i, j) = 1.0;
      else
        g.directed(j, i) = 1.0;
    }
    if (Tape::sigmoid_scalar(q.beta(p, 0)) > 0.5)
      g.bidirected(i, j) = g.bidirected(j, i) = 1.0;
  }
  return g;
}

// Hard graph sample without tape machinery (ATE path, expected metrics).
inline AdmgGraph sample_graph_hard(const GraphPosterior& q, Rng& rng) {
  const int d = q.num_nodes;
  AdmgGraph g(d);
  const auto pairs = all_pairs(d);
  for (int p = 0; p < static_cast<int>(pairs.size()); ++p) {
    const auto [i, j] = pairs[p];
    const bool exists = rng.uniform() < Tape::sigmoid_scalar(q.gamma(p, 0));
    const bool ij = rng.uniform() < Tape::sigmoid_scalar(q.theta(p, 0));
    if (exists) {
      if (ij)
        g.directed(i, j) = 1.0;
      else
        g.directed(j, i) = 1.0;
    }
    if (rng.uniform() < Tape::sigmoid_scalar(q.beta(p, 0)))
      g.bidirected(i, j) = g.bidirected(j, i) = 1.0;
  }
  return g;
}

struct GraphPosteriorOnTape {
  int num_nodes = 0;
  Value gamma, theta, beta;

  static GraphPosteriorOnTape leaves(Tape& t, const GraphPosterior& q) {
    return {q.num_nodes, t.leaf(q.gamma), t.leaf(q.theta), t.leaf(q.beta)};
  }

  std::vector<Value> values() const { return {gamma, theta, beta}; }

  // Per pair, the 3-way directed state via two stacked straight-through
  // draws (existence, then orientation) and the bidirected state via one
  // binary draw; hard forward, relaxed backward. The hard sample is a valid
  // mixed-graph realization but not necessarily acyclic or bow-free; those
  // are enforced softly by the prior.
  GraphSample sample(Tape& t, double temperature, Rng& rng,
                     Tape::SampleMode mode = Tape::SampleMode::Hard) const {
    const int d = num_nodes;
    const int np = num_pairs(d);
    auto two_way = [&](Value logits) {
      // rows (logit, 0): first column is the "on" probability s(logit)
      Value stacked = t.concat_cols(logits, t.constant(Matrix(np, 1)));
      Value onehot = t.gumbel_softmax_st(stacked, temperature, rng, mode);
      return t.slice(onehot, 0, np, 0, 1);
    };
    Value exists = two_way(gamma);
    Value orient = two_way(theta);
    Value bid = two_way(beta);
    Value ij_bits = t.mul(exists, orient);
    Value ji_bits = t.mul(exists, t.add_const(t.scale(orient, -1.0), 1.0));

    const auto pairs = all_pairs(d);
    std::vector<Tape::ScatterEntry> ij_dir, ji_dir, bid_obs, bid_mag;
    const int m = np;
    for (int p = 0; p < np; ++p) {
      const auto [i, j] = pairs[p];
      ij_dir.push_back({p, i, j});
      ji_dir.push_back({p, j, i});
      bid_obs.push_back({p, i, j});
      bid_obs.push_back({p, j, i});
      const int u = d + p;
      bid_mag.push_back({p, u, i});
      bid_mag.push_back({p, u, j});
    }
    Value directed = t.add(t.scatter(ij_bits, ij_dir, d, d),
                           t.scatter(ji_bits, ji_dir, d, d));
    Value bidirected = t.scatter(bid, bid_obs, d, d);
    // magnified mask: observed block = directed, latent rows gated by bits
    std::vector<Tape::ScatterEntry> dir_mag_ij, dir_mag_ji;
    for (int p = 0; p < np; ++p) {
      const auto [i, j] = pairs[p];
      dir_mag_ij.push_back({p, i, j});
      dir_mag_ji.push_back({p, j, i});
    }
    Value magnified = t.add(t.add(t.scatter(ij_bits, dir_mag_ij, d + m, d + m),
                                  t.scatter(ji_bits, dir_mag_ji, d + m, d + m)),
                            t.scatter(bid, bid_mag, d + m, d + m));

    GraphSample s;
    s.directed = directed;
    s.bidirected = bidirected;
    s.magnified = magnified;
    s.hard = AdmgGraph(d);
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j) {
        s.hard.directed(i, j) = directed.val()(i, j);
        s.hard.bidirected(i, j) = bidirected.val()(i, j);
      }
    return s;
  }

  // Entropy of q(G) in nats: 3-way categorical per directed pair state plus
  // binary entropy per bidirected state, all analytic in the logits.
  Value entropy(Tape& t) const {
    // p1 = s(g)s(o), p2 = s(g)s(-o), p3 = 1 - s(g)
    // log p1 = -sp(-g) - sp(-o), log p2 = -sp(-g) - sp(o), log p3 = -sp(g)
    Value sg = t.sigmoid(gamma);
    Value so = t.sigmoid(theta);
    Value p1 = t.mul(sg, so);
    Value p2 = t.sub(sg, p1);  // s(g)(1 - s(o))
    Value p3 = t.add_const(t.scale(sg, -1.0), 1.0);
    Value lp1 = t.scale(t.add(t.softplus(t.scale(gamma, -1.0)),
                              t.softplus(t.scale(theta, -1.0))), -1.0);
    Value lp2 = t.scale(t.add(t.softplus(t.scale(gamma, -1.0)), t.softplus(theta)), -1.0);
    Value lp3 = t.scale(t.softplus(gamma), -1.0);
    Value h_dir = t.scale(t.add(t.add(t.sum(t.mul(p1, lp1)), t.sum(t.mul(p2, lp2))),
                                t.sum(t.mul(p3, lp3))), -1.0);
    Value sb = t.sigmoid(beta);
    Value lb_on = t.scale(t.softplus(t.scale(beta, -1.0)), -1.0);
    Value lb_off = t.scale(t.softplus(beta), -1.0);
    Value one_minus = t.add_const(t.scale(sb, -1.0), 1.0);
    Value h_bid = t.scale(t.add(t.sum(t.mul(sb, lb_on)), t.sum(t.mul(one_minus, lb_off))), -1.0);
    return t.add(h_dir, h_bid);
  }

  // E_q ||G_D||_F^2 = sum s(gamma); E_q ||G_B||_F^2 = 2 sum s(beta)
  // (the bidirected matrix stores each edge twice).
  Value expected_sparsity(Tape& t, double lambda_s1, double lambda_s2) const {
    Value dir = t.sum(t.sigmoid(gamma));
    Value bid = t.scale(t.sum(t.sigmoid(beta)), 2.0);
    return t.add(t.scale(dir, lambda_s1), t.scale(bid, lambda_s2));
  }
};

inline double graph_entropy(const GraphPosterior& q) {
  Tape t;
  auto qt = GraphPosteriorOnTape::leaves(t, q);
  return qt.entropy(t).scalar();
}

// Reparameterized draw from q(u | x) plus its log-density, batched:
// u = mean + std * z. Outputs are B x M.
struct LatentSample {
  Value u;
  Value log_density;  // 1 x 1, summed over batch and latents
  Value mean;         // B x M
  Value log_std;      // B x M
};

struct LatentInferenceOnTape {
  int num_nodes = 0;
  MlpOnTape net;

  static LatentInferenceOnTape leaves(Tape& t, const LatentInferenceNet& n) {
    return {n.num_nodes, MlpOnTape::leaves(t, n.net)};
  }

  std::vector<Value> values() const { return net.values(); }

  LatentSample sample(Tape& t, const Matrix& x_batch, Rng& rng) const {
    const int m = num_pairs(num_nodes);
    const int b = x_batch.rows();
    Value out = net.forward(t, t.constant(x_batch));
    Value mean = t.slice(out, 0, b, 0, m);
    Value log_std = t.slice(out, 0, b, m, 2 * m);
    Matrix z(b, m);
    rng.fill_normal(z);
    Value u = t.add(mean, t.mul(t.exp(log_std), t.constant(z)));
    // log q(u|x) at the sample: -0.5 log 2pi - log_std - 0.5 z^2 per entry
    Value zc = t.constant(z);
    Value quad = t.scale(t.sum(t.square(zc)), -0.5);
    Value ld = t.add_const(t.sub(quad, t.sum(log_std)), -0.5 * kLogTwoPi * b * m);
    return {u, ld, mean, log_std};
  }

  // Closed-form KL[q(u|x) || N(0, I)] summed over the batch:
  // sum 0.5 (mu^2 + sigma^2 - 1 - 2 log sigma).
  Value kl_to_standard_normal(Tape& t, const Matrix& x_batch) const {
    const int m = num_pairs(num_nodes);
    const int b = x_batch.rows();
    Value out = net.forward(t, t.constant(x_batch));
    Value mean = t.slice(out, 0, b, 0, m);
    Value log_std = t.slice(out, 0, b, m, 2 * m);
    Value var = t.exp(t.scale(log_std, 2.0));
    Value terms = t.sub(t.add(t.square(mean), var), t.scale(log_std, 2.0));
    return t.add_const(t.scale(t.sum(terms), 0.5), -0.5 * b * m);
  }
};

// Plain-value latent KL for reporting.
inline double kl_latent(const LatentInferenceNet& net, const Matrix& x_batch) {
  Tape t;
  auto nt = LatentInferenceOnTape::leaves(t, net);
  return nt.kl_to_standard_normal(t, x_batch).scalar();
}

}  // namespace bowfree
