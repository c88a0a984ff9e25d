#pragma once

#include <map>
#include <memory>
#include <vector>

#include "bowfree/graph.hpp"
#include "bowfree/matrix.hpp"
#include "bowfree/rng.hpp"
#include "bowfree/tape.hpp"

namespace bowfree {

constexpr double kLogTwoPi = 1.8378770664093453;

// Two-hidden-layer tanh MLP with a linear head.
struct Mlp {
  Matrix w1, b1, w2, b2, w3, b3;

  void init(Rng& rng, int in, int hidden, int out) {
    auto glorot = [&](Matrix& w, int fin, int fout) {
      w = Matrix(fin, fout);
      const double a = std::sqrt(6.0 / (fin + fout));
      rng.fill_uniform(w, -a, a);
    };
    glorot(w1, in, hidden);
    b1 = Matrix(1, hidden);
    glorot(w2, hidden, hidden);
    b2 = Matrix(1, hidden);
    glorot(w3, hidden, out);
    b3 = Matrix(1, out);
  }

  Matrix forward(const Matrix& x) const {
    Matrix h1 = matmul(x, w1);
    for (int i = 0; i < h1.rows(); ++i)
      for (int j = 0; j < h1.cols(); ++j) h1(i, j) = std::tanh(h1(i, j) + b1(0, j));
    Matrix h2 = matmul(h1, w2);
    for (int i = 0; i < h2.rows(); ++i)
      for (int j = 0; j < h2.cols(); ++j) h2(i, j) = std::tanh(h2(i, j) + b2(0, j));
    Matrix out = matmul(h2, w3);
    for (int i = 0; i < out.rows(); ++i)
      for (int j = 0; j < out.cols(); ++j) out(i, j) += b3(0, j);
    return out;
  }

  std::vector<Matrix*> params() { return {&w1, &b1, &w2, &b2, &w3, &b3}; }
  std::vector<const Matrix*> params() const { return {&w1, &b1, &w2, &b2, &w3, &b3}; }
};

struct MlpOnTape {
  Value w1, b1, w2, b2, w3, b3;

  static MlpOnTape leaves(Tape& t, const Mlp& m) {
    return {t.leaf(m.w1), t.leaf(m.b1), t.leaf(m.w2),
            t.leaf(m.b2), t.leaf(m.w3), t.leaf(m.b3)};
  }

  Value forward(Tape& t, Value x) const {
    const int n = x.rows();
    Value h1 = t.tanh(t.add(t.matmul(x, w1), t.broadcast_rows(b1, n)));
    Value h2 = t.tanh(t.add(t.matmul(h1, w2), t.broadcast_rows(b2, n)));
    return t.add(t.matmul(h2, w3), t.broadcast_rows(b3, n));
  }

  std::vector<Value> values() const { return {w1, b1, w2, b2, w3, b3}; }
};

// Structural assignment over the magnified state v = (x, u): f_i(v) for every
// node given a (possibly soft) magnified adjacency mask, plus the exogenous
// noise scales. Shared by the learned flow model and by the fixed synthetic
// mechanisms, so interventional simulation runs through one code path.
class StructuralModel {
 public:
  virtual ~StructuralModel() = default;
  virtual int observed() const = 0;
  virtual int latent() const = 0;
  // V is n x (D+M); returns f(V) with zero latent coordinates.
  virtual Matrix structural_fn(const Matrix& v, const Matrix& mask) const = 0;
  virtual double noise_std(int node) const = 0;
  virtual double latent_std(int /*k*/) const { return 1.0; }
  int total_nodes() const { return observed() + latent(); }
};

struct ScmConfig {
  int embedding_dim = 32;
  int feature_dim = 32;
  int hidden_units = 80;
};

// Node-major replication selector: rows j*n..(j+1)*n-1 pick row j of the
// replicated matrix. Constant, so it carries no gradient.
inline Matrix block_selector(int k, int n) {
  Matrix s(k * n, k);
  for (int j = 0; j < k; ++j)
    for (int i = 0; i < n; ++i) s(j * n + i, j) = 1.0;
  return s;
}

// The autoregressive-flow additive-noise model on the magnified graph:
// f_i(v) = xi1(e_i, sum_j obs mask[j,i] l(e_j, v_j))
//        + xi2(e_i, sum_j lat mask[j,i] l(e_j, v_j))
// with one shared MLP per role and a trainable per-node embedding. Observed
// nodes carry Gaussian noise with learnable log-std; latents have a fixed
// standard-normal prior.
class FlowScm : public StructuralModel {
 public:
  FlowScm(int d, const ScmConfig& cfg, Rng& rng)
      : d_(d), m_(num_pairs(d)), cfg_(cfg) {
    embeddings_ = Matrix(d_ + m_, cfg.embedding_dim);
    rng.fill_uniform(embeddings_, -0.5, 0.5);
    l_net_.init(rng, cfg.embedding_dim + 1, cfg.hidden_units, cfg.feature_dim);
    xi1_.init(rng, cfg.embedding_dim + cfg.feature_dim, cfg.hidden_units, 1);
    xi2_.init(rng, cfg.embedding_dim + cfg.feature_dim, cfg.hidden_units, 1);
    log_noise_std_ = Matrix(d_, 1);
  }

  int observed() const override { return d_; }
  int latent() const override { return m_; }
  const ScmConfig& config() const { return cfg_; }

  double noise_std(int node) const override {
    return std::exp(log_noise_std_(node, 0));
  }
  double log_noise_std(int node) const { return log_noise_std_(node, 0); }

  Matrix structural_fn(const Matrix& v, const Matrix& mask) const override {
    const int k = d_ + m_;
    if (v.cols() != k)
      throw error("structural_fn: state has " + v.shape_str() + ", want cols " +
                  std::to_string(k));
    if (mask.rows() != k || mask.cols() != k)
      throw error("structural_fn: mask shape " + mask.shape_str());
    const int n = v.rows();
    // shared per-node features, node-major blocks of n rows
    Matrix lin(k * n, cfg_.embedding_dim + 1);
    for (int j = 0; j < k; ++j)
      for (int i = 0; i < n; ++i) {
        for (int c = 0; c < cfg_.embedding_dim; ++c)
          lin(j * n + i, c) = embeddings_(j, c);
        lin(j * n + i, cfg_.embedding_dim) = v(i, j);
      }
    Matrix feats = l_net_.forward(lin);  // (k*n) x feat
    // masked aggregation into observed targets
    const int f = cfg_.feature_dim;
    Matrix s1(d_ * n, f), s2(d_ * n, f);
    for (int i = 0; i < d_; ++i) {
      for (int j = 0; j < k; ++j) {
        const double w = mask(j, i);
        if (w == 0.0) continue;
        Matrix& dst = (j < d_) ? s1 : s2;
        for (int b = 0; b < n; ++b)
          for (int c = 0; c < f; ++c) dst(i * n + b, c) += w * feats(j * n + b, c);
      }
    }
    Matrix xin1(d_ * n, cfg_.embedding_dim + f), xin2(d_ * n, cfg_.embedding_dim + f);
    for (int i = 0; i < d_; ++i)
      for (int b = 0; b < n; ++b) {
        for (int c = 0; c < cfg_.embedding_dim; ++c) {
          xin1(i * n + b, c) = embeddings_(i, c);
          xin2(i * n + b, c) = embeddings_(i, c);
        }
        for (int c = 0; c < f; ++c) {
          xin1(i * n + b, cfg_.embedding_dim + c) = s1(i * n + b, c);
          xin2(i * n + b, cfg_.embedding_dim + c) = s2(i * n + b, c);
        }
      }
    Matrix f1 = xi1_.forward(xin1);
    Matrix f2 = xi2_.forward(xin2);
    Matrix out(n, k);
    for (int i = 0; i < d_; ++i)
      for (int b = 0; b < n; ++b) out(b, i) = f1(i * n + b, 0) + f2(i * n + b, 0);
    return out;
  }

  std::vector<Matrix*> params() {
    std::vector<Matrix*> out{&embeddings_};
    for (Matrix* p : l_net_.params()) out.push_back(p);
    for (Matrix* p : xi1_.params()) out.push_back(p);
    for (Matrix* p : xi2_.params()) out.push_back(p);
    out.push_back(&log_noise_std_);
    return out;
  }

  Matrix& embeddings() { return embeddings_; }
  const Matrix& embeddings() const { return embeddings_; }
  Mlp& l_net() { return l_net_; }
  const Mlp& l_net() const { return l_net_; }
  Mlp& xi1() { return xi1_; }
  const Mlp& xi1() const { return xi1_; }
  Mlp& xi2() { return xi2_; }
  const Mlp& xi2() const { return xi2_; }
  Matrix& log_noise_std_vec() { return log_noise_std_; }
  const Matrix& log_noise_std_vec() const { return log_noise_std_; }

  void zero_structural_nets() {
    for (Mlp* net : {&l_net_, &xi1_, &xi2_})
      for (Matrix* p : net->params())
        for (size_t i = 0; i < p->size(); ++i) p->data()[i] = 0.0;
  }

 private:
  int d_, m_;
  ScmConfig cfg_;
  Matrix embeddings_;
  Mlp l_net_, xi1_, xi2_;
  Matrix log_noise_std_;
};

// Tape-side twin of FlowScm::structural_fn; the trainer differentiates
// through this. Kept in exact step-for-step correspondence with the plain
// path (tests pin the two together).
struct FlowScmOnTape {
  const FlowScm* model = nullptr;
  Value embeddings;
  MlpOnTape l_net, xi1, xi2;
  Value log_noise_std;

  static FlowScmOnTape leaves(Tape& t, const FlowScm& m) {
    FlowScmOnTape s;
    s.model = &m;
    s.embeddings = t.leaf(m.embeddings());
    s.l_net = MlpOnTape::leaves(t, m.l_net());
    s.xi1 = MlpOnTape::leaves(t, m.xi1());
    s.xi2 = MlpOnTape::leaves(t, m.xi2());
    s.log_noise_std = t.leaf(m.log_noise_std_vec());
    return s;
  }

  std::vector<Value> values() const {
    std::vector<Value> out{embeddings};
    for (Value v : l_net.values()) out.push_back(v);
    for (Value v : xi1.values()) out.push_back(v);
    for (Value v : xi2.values()) out.push_back(v);
    out.push_back(log_noise_std);
    return out;
  }

  // f over observed targets, node-major (D*B) x 1, from state V (B x (D+M))
  // and magnified mask.
  Value structural_observed(Tape& t, Value v_state, Value mask) const {
    const int d = model->observed(), k = model->total_nodes();
    const int b = v_state.rows();
    const ScmConfig& cfg = model->config();
    Value vec = t.stack_columns(v_state);                       // (k*b) x 1
    Value emb_rep = t.matmul(t.constant(block_selector(k, b)), embeddings);
    Value feats = l_net.forward(t, t.concat_cols(emb_rep, vec));
    Value feats_obs = t.slice(feats, 0, d * b, 0, cfg.feature_dim);
    Value feats_lat = t.slice(feats, d * b, k * b, 0, cfg.feature_dim);
    Value m1 = t.slice(mask, 0, d, 0, d);
    Value m2 = t.slice(mask, d, k, 0, d);
    Value s1 = t.block_mix(feats_obs, m1, b);
    Value s2 = t.block_mix(feats_lat, m2, b);
    Value emb_obs = t.slice(emb_rep, 0, d * b, 0, cfg.embedding_dim);
    Value f1 = xi1.forward(t, t.concat_cols(emb_obs, s1));
    Value f2 = xi2.forward(t, t.concat_cols(emb_obs, s2));
    return t.add(f1, f2);
  }

  // sum over the batch of log p(x^n | u^n, mask)
  Value conditional_log_likelihood(Tape& t, const Matrix& x_batch, Value u,
                                   Value mask) const {
    const int d = model->observed();
    const int b = x_batch.rows();
    Value v_state = t.concat_cols(t.constant(x_batch), u);
    Value f = structural_observed(t, v_state, mask);           // (d*b) x 1
    Value xvec = t.stack_columns(t.constant(x_batch));         // (d*b) x 1
    Value resid = t.sub(xvec, f);
    Value s_rep = t.matmul(t.constant(block_selector(d, b)), log_noise_std);
    Value quad = t.mul(t.scale(t.square(resid), 0.5), t.exp(t.scale(s_rep, -2.0)));
    Value neg = t.add(t.sum(s_rep), t.sum(quad));
    return t.add_const(t.scale(neg, -1.0), -0.5 * kLogTwoPi * d * b);
  }
};

inline double gaussian_log_density(double r, double std_dev) {
  const double z = r / std_dev;
  return -0.5 * kLogTwoPi - std::log(std_dev) - 0.5 * z * z;
}

// log N(r; 0, sigma_i^2) for observed node i.
inline double noise_log_density(const StructuralModel& m, int node, double r) {
  return gaussian_log_density(r, m.noise_std(node));
}

// Exact joint log-likelihood of one magnified sample under a binary graph:
// observed residual densities plus the latent prior; the Jacobian term is
// unity by acyclicity and omitted.
inline Matrix joint_log_likelihood_rows(const StructuralModel& m, const Matrix& x,
                                        const Matrix& u, const AdmgGraph& g) {
  const int d = m.observed(), lat = m.latent();
  if (x.cols() != d || u.cols() != lat || x.rows() != u.rows())
    throw error("joint_log_likelihood: bad shapes x=" + x.shape_str() +
                " u=" + u.shape_str());
  MagnifiedGraph mg = magnify(g);
  const int n = x.rows();
  Matrix v(n, d + lat);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) v(i, j) = x(i, j);
    for (int j = 0; j < lat; ++j) v(i, d + j) = u(i, j);
  }
  Matrix f = m.structural_fn(v, mg.adjacency);
  Matrix out(n, 1);
  for (int i = 0; i < n; ++i) {
    double ll = 0.0;
    for (int j = 0; j < d; ++j)
      ll += gaussian_log_density(x(i, j) - f(i, j), m.noise_std(j));
    for (int j = 0; j < lat; ++j)
      ll += gaussian_log_density(u(i, j), m.latent_std(j));
    if (!std::isfinite(ll))
      throw error("joint_log_likelihood: non-finite value at sample " +
                  std::to_string(i));
    out(i, 0) = ll;
  }
  return out;
}

inline double joint_log_likelihood(const StructuralModel& m, const Matrix& x,
                                   const Matrix& u, const AdmgGraph& g) {
  return sum_of(joint_log_likelihood_rows(m, x, u, g));
}

// Ancestral sampling in topological order of the magnified graph. Intervened
// variables are clamped and their structural equation skipped. All noise is
// drawn up front in a fixed order, so two runs from the same seed share
// exogenous randomness regardless of graph or interventions.
inline Matrix simulate(const StructuralModel& m, const AdmgGraph& g, int n,
                       Rng& rng, const std::map<int, double>& interventions = {}) {
  const int d = m.observed(), lat = m.latent();
  for (const auto& [node, value] : interventions) {
    if (node < 0 || node >= d)
      throw error("simulate: intervention on node " + std::to_string(node) +
                  " out of range");
    (void)value;
  }
  std::vector<int> order = topological_order(g.directed);  // throws on cycles
  MagnifiedGraph mg = magnify(g);
  Matrix v(n, d + lat);
  for (int k = 0; k < lat; ++k) {
    const double s = m.latent_std(k);
    for (int i = 0; i < n; ++i) v(i, d + k) = s * rng.normal();
  }
  Matrix eps(n, d);
  for (int j = 0; j < d; ++j) {
    const double s = m.noise_std(j);
    for (int i = 0; i < n; ++i) eps(i, j) = s * rng.normal();
  }
  for (int node : order) {
    auto it = interventions.find(node);
    if (it != interventions.end()) {
      for (int i = 0; i < n; ++i) v(i, node) = it->second;
      continue;
    }
    Matrix f = m.structural_fn(v, mg.adjacency);
    for (int i = 0; i < n; ++i) v(i, node) = f(i, node) + eps(i, node);
  }
  Matrix x(n, d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) x(i, j) = v(i, j);
  return x;
}

struct MarginalEstimate {
  double log_likelihood = 0.0;
  double std_error = 0.0;
};

// Monte Carlo marginalization of the latents from the prior:
// log p(x) = log mean_s p(x | u_s). Standard error by the delta method.
inline MarginalEstimate marginal_log_likelihood_mc(const StructuralModel& m,
                                                   const AdmgGraph& g,
                                                   const Matrix& x_row, int draws,
                                                   Rng& rng) {
  const int d = m.observed(), lat = m.latent();
  if (x_row.rows() != 1 || x_row.cols() != d)
    throw error("marginal_log_likelihood_mc: expected 1x" + std::to_string(d) +
                " observation, got " + x_row.shape_str());
  MagnifiedGraph mg = magnify(g);
  std::vector<double> logp(draws);
  const int chunk = 4096;
  for (int s0 = 0; s0 < draws; s0 += chunk) {
    const int s1 = std::min(draws, s0 + chunk);
    const int b = s1 - s0;
    Matrix v(b, d + lat);
    for (int i = 0; i < b; ++i) {
      for (int j = 0; j < d; ++j) v(i, j) = x_row(0, j);
      for (int k = 0; k < lat; ++k) v(i, d + k) = m.latent_std(k) * rng.normal();
    }
    Matrix f = m.structural_fn(v, mg.adjacency);
    for (int i = 0; i < b; ++i) {
      double ll = 0.0;
      for (int j = 0; j < d; ++j)
        ll += gaussian_log_density(x_row(0, j) - f(i, j), m.noise_std(j));
      logp[s0 + i] = ll;
    }
  }
  double mx = logp[0];
  for (double a : logp) mx = std::max(mx, a);
  double mean_w = 0.0;
  for (double a : logp) mean_w += std::exp(a - mx);
  mean_w /= draws;
  double var_w = 0.0;
  for (double a : logp) {
    const double r = std::exp(a - mx) - mean_w;
    var_w += r * r;
  }
  var_w /= (draws - 1);
  MarginalEstimate est;
  est.log_likelihood = mx + std::log(mean_w);
  est.std_error = std::sqrt(var_w / draws) / mean_w;
  return est;
}

}  // namespace bowfree
