#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "bowfree/graph.hpp"
#include "bowfree/scm.hpp"
#include "testutil.hpp"

using namespace bowfree;
using testutil::close;

namespace {

const ScmConfig kTiny{4, 4, 8};

AdmgGraph chain3() {
  AdmgGraph g(3);
  g.directed(0, 1) = 1.0;
  g.directed(1, 2) = 1.0;
  return g;
}

// Scalar-level reimplementation of the shared-MLP structural function,
// evaluated per node without any batching. Oracle for the vectorized path.
double reference_f(const FlowScm& m, const std::vector<double>& v,
                   const Matrix& mask, int target) {
  const auto& cfg = m.config();
  const int k = m.total_nodes();
  auto mlp_scalar = [&](const Mlp& net, const std::vector<double>& in) {
    std::vector<double> h1(net.w1.cols()), h2(net.w2.cols());
    for (int j = 0; j < net.w1.cols(); ++j) {
      double s = net.b1(0, j);
      for (size_t i = 0; i < in.size(); ++i) s += in[i] * net.w1(i, j);
      h1[j] = std::tanh(s);
    }
    for (int j = 0; j < net.w2.cols(); ++j) {
      double s = net.b2(0, j);
      for (size_t i = 0; i < h1.size(); ++i) s += h1[i] * net.w2(i, j);
      h2[j] = std::tanh(s);
    }
    std::vector<double> out(net.w3.cols());
    for (int j = 0; j < net.w3.cols(); ++j) {
      double s = net.b3(0, j);
      for (size_t i = 0; i < h2.size(); ++i) s += h2[i] * net.w3(i, j);
      out[j] = s;
    }
    return out;
  };
  std::vector<double> s1(cfg.feature_dim, 0.0), s2(cfg.feature_dim, 0.0);
  for (int j = 0; j < k; ++j) {
    if (mask(j, target) == 0.0) continue;
    std::vector<double> in(cfg.embedding_dim + 1);
    for (int c = 0; c < cfg.embedding_dim; ++c) in[c] = m.embeddings()(j, c);
    in[cfg.embedding_dim] = v[j];
    auto feat = mlp_scalar(m.l_net(), in);
    auto& dst = (j < m.observed()) ? s1 : s2;
    for (int c = 0; c < cfg.feature_dim; ++c) dst[c] += mask(j, target) * feat[c];
  }
  std::vector<double> in1(cfg.embedding_dim + cfg.feature_dim);
  std::vector<double> in2(cfg.embedding_dim + cfg.feature_dim);
  for (int c = 0; c < cfg.embedding_dim; ++c) {
    in1[c] = m.embeddings()(target, c);
    in2[c] = m.embeddings()(target, c);
  }
  for (int c = 0; c < cfg.feature_dim; ++c) {
    in1[cfg.embedding_dim + c] = s1[c];
    in2[cfg.embedding_dim + c] = s2[c];
  }
  return mlp_scalar(m.xi1(), in1)[0] + mlp_scalar(m.xi2(), in2)[0];
}

}  // namespace

TEST_CASE("structural function is constant on the empty graph") {
  Rng rng(1);
  FlowScm m(3, kTiny, rng);
  MagnifiedGraph mg = magnify(AdmgGraph(3));
  Matrix v1(2, 6), v2(2, 6);
  rng.fill_uniform(v1, -2.0, 2.0);
  rng.fill_uniform(v2, -2.0, 2.0);
  Matrix f1 = m.structural_fn(v1, mg.adjacency);
  Matrix f2 = m.structural_fn(v2, mg.adjacency);
  for (int j = 0; j < 3; ++j) {
    CHECK(f1(0, j) == f1(1, j));
    CHECK(f1(0, j) == f2(0, j));
  }
  for (int j = 3; j < 6; ++j) CHECK(f1(0, j) == 0.0);
}

TEST_CASE("masked-out coordinates cannot influence a node") {
  Rng rng(2);
  FlowScm m(3, kTiny, rng);
  MagnifiedGraph mg = magnify(chain3());
  Matrix v(1, 6);
  rng.fill_uniform(v, -1.0, 1.0);
  Matrix f = m.structural_fn(v, mg.adjacency);
  // node 2's only parent is node 1; perturb everything else
  for (int j : {0, 2, 3, 4, 5}) {
    Matrix vp = v;
    vp(0, j) += 0.37;
    Matrix fp = m.structural_fn(vp, mg.adjacency);
    CHECK(fp(0, 2) == f(0, 2));
  }
  Matrix vp = v;
  vp(0, 1) += 0.37;
  CHECK(m.structural_fn(vp, mg.adjacency)(0, 2) != f(0, 2));
}

TEST_CASE("structural function matches unshared per-node reimplementation") {
  Rng rng(3);
  FlowScm m(3, kTiny, rng);
  AdmgGraph g = chain3();
  g.bidirected(0, 2) = 1.0;
  g.bidirected(2, 0) = 1.0;
  MagnifiedGraph mg = magnify(g);
  Matrix v(3, 6);
  rng.fill_uniform(v, -1.5, 1.5);
  Matrix f = m.structural_fn(v, mg.adjacency);
  for (int row = 0; row < 3; ++row) {
    std::vector<double> vr(6);
    for (int j = 0; j < 6; ++j) vr[j] = v(row, j);
    for (int target = 0; target < 3; ++target) {
      INFO("row " << row << " node " << target);
      REQUIRE(close(f(row, target), reference_f(m, vr, mg.adjacency, target), 1e-12, 1e-12));
    }
  }
}

TEST_CASE("tape forward equals plain forward") {
  Rng rng(4);
  FlowScm m(4, kTiny, rng);
  AdmgGraph g(4);
  g.directed(0, 1) = 1.0;
  g.directed(1, 3) = 1.0;
  g.bidirected(1, 2) = g.bidirected(2, 1) = 1.0;
  MagnifiedGraph mg = magnify(g);
  const int b = 5, k = m.total_nodes();
  Matrix x(b, 4), u(b, k - 4);
  rng.fill_uniform(x, -1.0, 1.0);
  rng.fill_uniform(u, -1.0, 1.0);

  Tape t;
  auto st = FlowScmOnTape::leaves(t, m);
  Value ll = st.conditional_log_likelihood(t, x, t.constant(u), t.constant(mg.adjacency));

  Matrix v(b, k);
  for (int i = 0; i < b; ++i) {
    for (int j = 0; j < 4; ++j) v(i, j) = x(i, j);
    for (int j = 4; j < k; ++j) v(i, j) = u(i, j - 4);
  }
  Matrix f = m.structural_fn(v, mg.adjacency);
  double expect = 0.0;
  for (int i = 0; i < b; ++i)
    for (int j = 0; j < 4; ++j)
      expect += gaussian_log_density(x(i, j) - f(i, j), m.noise_std(j));
  REQUIRE(close(ll.scalar(), expect, 1e-11, 1e-11));
}

TEST_CASE("joint log-likelihood at the origin with zeroed nets") {
  Rng rng(5);
  FlowScm m(3, kTiny, rng);
  m.zero_structural_nets();
  const int k = m.total_nodes();
  Matrix x(1, 3), u(1, k - 3);
  const double got = joint_log_likelihood(m, x, u, AdmgGraph(3));
  REQUIRE(close(got, -0.5 * k * kLogTwoPi, 1e-12));

  // factorization: equals the sum of per-node densities on random data too
  rng.fill_uniform(x, -2.0, 2.0);
  rng.fill_uniform(u, -2.0, 2.0);
  double expect = 0.0;
  for (int j = 0; j < 3; ++j) expect += noise_log_density(m, j, x(0, j));
  for (int j = 0; j < k - 3; ++j) expect += gaussian_log_density(u(0, j), 1.0);
  REQUIRE(close(joint_log_likelihood(m, x, u, AdmgGraph(3)), expect, 1e-12));
}

TEST_CASE("shifting a root by delta costs delta^2/2 in log-likelihood") {
  Rng rng(6);
  FlowScm m(3, kTiny, rng);
  m.zero_structural_nets();
  Matrix x(1, 3), u(1, 3);
  const double base = joint_log_likelihood(m, x, u, AdmgGraph(3));
  Matrix xs = x;
  xs(0, 1) = 0.7;
  const double shifted = joint_log_likelihood(m, xs, u, AdmgGraph(3));
  REQUIRE(close(base - shifted, 0.5 * 0.7 * 0.7, 1e-12));
}

TEST_CASE("noise log-density values and quadrature") {
  Rng rng(7);
  FlowScm m(2, kTiny, rng);
  CHECK(close(noise_log_density(m, 0, 0.0), -0.918939, 1e-5, 1e-6));
  CHECK(close(noise_log_density(m, 0, 1.0), -1.418939, 1e-5, 1e-6));

  // Gauss-Legendre (20 panels x 8 nodes) over [-8s, 8s] integrates to 1
  const double nodes[4] = {0.1834346424956498, 0.5255324099163290,
                           0.7966664774136267, 0.9602898564975363};
  const double weights[4] = {0.3626837833783620, 0.3137066458778873,
                             0.2223810344533745, 0.1012285362903763};
  for (double s : {0.5, 1.0, 2.0}) {
    Matrix& ls = m.log_noise_std_vec();
    ls(0, 0) = std::log(s);
    double integral = 0.0;
    const int panels = 20;
    const double lo = -8.0 * s, hi = 8.0 * s;
    const double w = (hi - lo) / panels;
    for (int p = 0; p < panels; ++p) {
      const double mid = lo + (p + 0.5) * w;
      for (int q = 0; q < 4; ++q) {
        integral += 0.5 * w * weights[q] *
                    (std::exp(noise_log_density(m, 0, mid + 0.5 * w * nodes[q])) +
                     std::exp(noise_log_density(m, 0, mid - 0.5 * w * nodes[q])));
      }
    }
    INFO("sigma " << s);
    REQUIRE(close(integral, 1.0, 1e-6));
  }
}

TEST_CASE("simulate: noise-only model has the right column spread") {
  Rng rng(8);
  FlowScm m(3, kTiny, rng);
  m.zero_structural_nets();
  m.log_noise_std_vec()(0, 0) = std::log(0.5);
  m.log_noise_std_vec()(2, 0) = std::log(2.0);
  Rng sim_rng(42);
  Matrix x = simulate(m, AdmgGraph(3), 100000, sim_rng);
  for (int j = 0; j < 3; ++j) {
    double mean = 0.0, sq = 0.0;
    for (int i = 0; i < x.rows(); ++i) {
      mean += x(i, j);
      sq += x(i, j) * x(i, j);
    }
    mean /= x.rows();
    const double sd = std::sqrt(sq / x.rows() - mean * mean);
    INFO("column " << j);
    CHECK(std::abs(sd - m.noise_std(j)) < 0.05 * m.noise_std(j));
  }
}

TEST_CASE("simulate: interventions clamp and do not rewrite history") {
  Rng rng(9);
  FlowScm m(2, kTiny, rng);
  AdmgGraph g(2);
  g.directed(0, 1) = 1.0;

  Rng r1(7);
  Matrix base = simulate(m, g, 200, r1);
  Rng r2(7);
  Matrix intervened = simulate(m, g, 200, r2, {{1, 3.25}});
  for (int i = 0; i < 200; ++i) {
    CHECK(intervened(i, 1) == 3.25);
    CHECK(intervened(i, 0) == base(i, 0));  // upstream marginal untouched
  }

  AdmgGraph cyc(2);
  cyc.directed(0, 1) = 1.0;
  cyc.directed(1, 0) = 1.0;
  Rng r3(1);
  CHECK_THROWS_AS(simulate(m, cyc, 10, r3), error);
  Rng r4(1);
  CHECK_THROWS_AS(simulate(m, g, 10, r4, {{5, 0.0}}), error);
}

TEST_CASE("simulate then evaluate stays finite over many draws") {
  Rng rng(10);
  FlowScm m(3, kTiny, rng);
  AdmgGraph g = chain3();
  g.bidirected(0, 2) = g.bidirected(2, 0) = 1.0;
  Rng sim_rng(11);
  const int n = 100000;
  const int lat = m.latent();
  // u draws are recoverable by replaying the generator prefix
  Matrix x = simulate(m, g, n, sim_rng);
  Rng replay(11);
  Matrix u(n, lat);
  for (int k = 0; k < lat; ++k)
    for (int i = 0; i < n; ++i) u(i, k) = m.latent_std(k) * replay.normal();
  Matrix ll = joint_log_likelihood_rows(m, x, u, g);  // throws on non-finite
  CHECK(ll.rows() == n);
}

TEST_CASE("full likelihood gradient matches finite differences") {
  Rng rng(12);
  FlowScm m(3, ScmConfig{3, 3, 5}, rng);
  AdmgGraph g = chain3();
  g.bidirected(0, 2) = g.bidirected(2, 0) = 1.0;
  MagnifiedGraph mg = magnify(g);
  const int b = 4;
  Matrix x(b, 3), u(b, 3);
  rng.fill_uniform(x, -1.0, 1.0);
  rng.fill_uniform(u, -1.0, 1.0);

  auto eval = [&]() {
    Tape t;
    auto st = FlowScmOnTape::leaves(t, m);
    return st.conditional_log_likelihood(t, x, t.constant(u), t.constant(mg.adjacency))
        .scalar();
  };
  Tape t;
  auto st = FlowScmOnTape::leaves(t, m);
  Value ll = st.conditional_log_likelihood(t, x, t.constant(u), t.constant(mg.adjacency));
  auto leaves = st.values();
  auto grads = t.grad(ll, leaves);
  auto params = m.params();
  REQUIRE(params.size() == leaves.size());
  for (size_t p = 0; p < params.size(); ++p) {
    Matrix fd = testutil::fd_grad(eval, *params[p], 1e-5);
    for (int i = 0; i < fd.rows(); ++i)
      for (int j = 0; j < fd.cols(); ++j) {
        INFO("param " << p << " (" << i << "," << j << "): tape=" << grads[p](i, j)
                      << " fd=" << fd(i, j));
        REQUIRE(close(grads[p](i, j), fd(i, j), 1e-4, 1e-7));
      }
  }
}

TEST_CASE("monte-carlo marginal likelihood agrees with a linear-Gaussian closed form") {
  // x0 = e0; x1 = 0.8 x0 + u + e1; x2 = -0.6 x1 + u + e2, u latent on (1,2)
  const int d = 3;
  AdmgGraph g(d);
  g.directed(0, 1) = 1.0;
  g.directed(1, 2) = 1.0;
  g.bidirected(1, 2) = g.bidirected(2, 1) = 1.0;

  struct LinearModel : StructuralModel {
    int observed() const override { return 3; }
    int latent() const override { return 3; }
    Matrix structural_fn(const Matrix& v, const Matrix& mask) const override {
      Matrix w(6, 6);
      w(0, 1) = 0.8;
      w(1, 2) = -0.6;
      const int u12 = 3 + pair_index(1, 2, 3);
      w(u12, 1) = 1.0;
      w(u12, 2) = 1.0;
      Matrix f(v.rows(), 6);
      for (int i = 0; i < v.rows(); ++i)
        for (int t = 0; t < 3; ++t) {
          double s = 0.0;
          for (int j = 0; j < 6; ++j) s += mask(j, t) * w(j, t) * v(i, j);
          f(i, t) = s;
        }
      return f;
    }
    double noise_std(int) const override { return 0.5; }
  } model;

  // closed form: x = (I - W^T)^{-1} (B u + e)
  Matrix w(3, 3);
  w(0, 1) = 0.8;
  w(1, 2) = -0.6;
  Matrix a = Matrix::identity(3);  // I - W^T
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) a(i, j) -= w(j, i);
  Matrix inv = Matrix::identity(3);
  Matrix aa = a;
  for (int c = 0; c < 3; ++c) {
    const double p = aa(c, c);
    for (int j = 0; j < 3; ++j) {
      aa(c, j) /= p;
      inv(c, j) /= p;
    }
    for (int r = 0; r < 3; ++r) {
      if (r == c) continue;
      const double f = aa(r, c);
      for (int j = 0; j < 3; ++j) {
        aa(r, j) -= f * aa(c, j);
        inv(r, j) -= f * inv(c, j);
      }
    }
  }
  Matrix noise_cov(3, 3);
  noise_cov(0, 0) = 0.25;
  noise_cov(1, 1) = 0.25 + 1.0;  // + latent loading variance
  noise_cov(2, 2) = 0.25 + 1.0;
  noise_cov(1, 2) = noise_cov(2, 1) = 1.0;  // shared latent
  Matrix cov = matmul(matmul(inv, noise_cov), transposed(inv));

  Matrix x(1, 3);
  x(0, 0) = 0.3;
  x(0, 1) = -0.5;
  x(0, 2) = 0.9;

  Matrix ci = Matrix::identity(3);
  Matrix cc = cov;
  double logdet = 0.0;
  for (int c = 0; c < 3; ++c) {
    const double p = cc(c, c);
    logdet += std::log(p);
    for (int j = 0; j < 3; ++j) {
      cc(c, j) /= p;
      ci(c, j) /= p;
    }
    for (int r = 0; r < 3; ++r) {
      if (r == c) continue;
      const double f = cc(r, c);
      for (int j = 0; j < 3; ++j) {
        cc(r, j) -= f * cc(c, j);
        ci(r, j) -= f * ci(c, j);
      }
    }
  }
  double quad = 0.0;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) quad += x(0, i) * ci(i, j) * x(0, j);
  const double closed = -0.5 * (3.0 * kLogTwoPi + logdet + quad);

  Rng rng(13);
  MarginalEstimate est = marginal_log_likelihood_mc(model, g, x, 20000, rng);
  INFO("mc=" << est.log_likelihood << " closed=" << closed << " se=" << est.std_error);
  CHECK(std::abs(est.log_likelihood - closed) < 3.0 * est.std_error);
}
