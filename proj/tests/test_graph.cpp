#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "bowfree/graph.hpp"
#include "bowfree/rng.hpp"
#include "testutil.hpp"

using namespace bowfree;
using testutil::close;

namespace {

SoftAdmg soft(const AdmgGraph& g) { return {g.directed, g.bidirected}; }

AdmgGraph fork_collider_truth() {
  // x2<->x3, x3<->x4, x1->x4, x1->x5 (zero-based indices 1,2,3,0,4)
  AdmgGraph g(5);
  g.bidirected(1, 2) = g.bidirected(2, 1) = 1.0;
  g.bidirected(2, 3) = g.bidirected(3, 2) = 1.0;
  g.directed(0, 3) = 1.0;
  g.directed(0, 4) = 1.0;
  return g;
}

}  // namespace

TEST_CASE("bow-free penalty reference values") {
  CHECK(close(bow_free_penalty(AdmgGraph(4)), 0.0, 0.0, 1e-12));

  AdmgGraph cyc(2);
  cyc.directed(0, 1) = cyc.directed(1, 0) = 1.0;
  CHECK(close(bow_free_penalty(cyc), 2.0 * std::cosh(1.0) - 2.0, 1e-9));
  CHECK(close(bow_free_penalty(cyc), 1.086161, 1e-5));

  AdmgGraph bow(2);
  bow.directed(0, 1) = 1.0;
  bow.bidirected(0, 1) = bow.bidirected(1, 0) = 1.0;
  CHECK(close(bow_free_penalty(bow), 1.0, 1e-12));

  SoftAdmg bad{Matrix(2, 3), Matrix(2, 3)};
  CHECK_THROWS_AS(bow_free_penalty(bad), error);
}

TEST_CASE("tape penalty equals plain penalty on soft inputs") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const int d = 2 + static_cast<int>(rng.integer(3));
    Matrix gd(d, d), gb(d, d);
    rng.fill_uniform(gd, 0.0, 1.0);
    for (int i = 0; i < d; ++i)
      for (int j = i + 1; j < d; ++j) gb(i, j) = gb(j, i) = rng.uniform();
    for (int i = 0; i < d; ++i) gd(i, i) = 0.0;
    const double plain = bow_free_penalty(SoftAdmg{gd, gb});
    Tape t;
    Value pen = bow_free_penalty(t, t.leaf(gd), t.leaf(gb));
    REQUIRE(close(pen.scalar(), plain, 1e-12, 1e-12));
  }
}

TEST_CASE("graph log prior") {
  PriorHyperparams h;
  CHECK(graph_log_prior(soft(AdmgGraph(3)), h) == 0.0);

  AdmgGraph one(2);
  one.directed(0, 1) = 1.0;
  PriorHyperparams no_pen{5.0, 5.0, 0.0, 0.0};
  CHECK(close(graph_log_prior(soft(one), no_pen), -5.0, 1e-12));

  AdmgGraph cyc(2);
  cyc.directed(0, 1) = cyc.directed(1, 0) = 1.0;
  PriorHyperparams h2{5.0, 5.0, 1.0, 1.0};
  const double pen = 2.0 * std::cosh(1.0) - 2.0;
  CHECK(close(graph_log_prior(soft(cyc), h2), -10.0 - pen * pen - pen, 1e-9));
  CHECK(close(graph_log_prior(soft(cyc), h2), -12.2659, 1e-4));
}

TEST_CASE("magnify") {
  SECTION("empty graph") {
    MagnifiedGraph mg = magnify(AdmgGraph(3));
    CHECK(mg.observed == 3);
    CHECK(mg.latent == 3);
    CHECK(sum_of(mg.adjacency) == 0.0);
  }

  SECTION("fork-collider truth activates the two pair latents") {
    AdmgGraph g = fork_collider_truth();
    MagnifiedGraph mg = magnify(g);
    CHECK(mg.latent == 10);
    int active = 0;
    for (int k = 0; k < mg.latent; ++k) {
      double out = 0.0;
      for (int j = 0; j < mg.observed; ++j) out += mg.adjacency(5 + k, j);
      if (out > 0) {
        ++active;
        CHECK(out == 2.0);
      }
    }
    CHECK(active == 2);
    const int u23 = 5 + pair_index(1, 2, 5);
    const int u34 = 5 + pair_index(2, 3, 5);
    CHECK(mg.adjacency(u23, 1) == 1.0);
    CHECK(mg.adjacency(u23, 2) == 1.0);
    CHECK(mg.adjacency(u34, 2) == 1.0);
    CHECK(mg.adjacency(u34, 3) == 1.0);
  }

  SECTION("fully bidirected 3-node graph") {
    AdmgGraph g(3);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        if (i != j) g.bidirected(i, j) = 1.0;
    MagnifiedGraph mg = magnify(g);
    double latent_edges = 0.0;
    for (int k = 0; k < 3; ++k)
      for (int j = 0; j < 3; ++j) latent_edges += mg.adjacency(3 + k, j);
    CHECK(latent_edges == 6.0);
  }

  SECTION("properties: restriction is identity, latent rows have no parents") {
    Rng rng(5);
    for (int trial = 0; trial < 10; ++trial) {
      auto graphs = enumerate_bow_free_admgs(3);
      const AdmgGraph& g = graphs[rng.integer(graphs.size())];
      MagnifiedGraph mg = magnify(g);
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) CHECK(mg.adjacency(i, j) == g.directed(i, j));
      int bidirected_edges = 0, active = 0;
      for (int i = 0; i < 3; ++i)
        for (int j = i + 1; j < 3; ++j) bidirected_edges += g.bidirected(i, j) != 0.0;
      for (int k = 0; k < mg.latent; ++k) {
        double in = 0.0, out = 0.0;
        for (int a = 0; a < 6; ++a) {
          in += mg.adjacency(a, 3 + k);
          out += mg.adjacency(3 + k, a);
        }
        CHECK(in == 0.0);
        active += out > 0.0;
      }
      CHECK(active == bidirected_edges);
    }
  }

  SECTION("asymmetric bidirected input rejected") {
    AdmgGraph g(2);
    g.bidirected(0, 1) = 1.0;
    CHECK_THROWS_AS(magnify(g), error);
  }
}

TEST_CASE("is_bow_free_admg") {
  CHECK(is_bow_free_admg(AdmgGraph(3)));
  AdmgGraph cyc(2);
  cyc.directed(0, 1) = cyc.directed(1, 0) = 1.0;
  CHECK_FALSE(is_bow_free_admg(cyc));
  AdmgGraph bow(2);
  bow.directed(0, 1) = 1.0;
  bow.bidirected(0, 1) = bow.bidirected(1, 0) = 1.0;
  CHECK_FALSE(is_bow_free_admg(bow));
}

TEST_CASE("f1 scores") {
  AdmgGraph truth(4);
  truth.directed(1, 2) = 1.0;
  truth.directed(2, 3) = 1.0;
  truth.bidirected(0, 1) = truth.bidirected(1, 0) = 1.0;

  SECTION("exact prediction") {
    auto [fd, fb] = f1_scores(truth, truth);
    CHECK(fd == 1.0);
    CHECK(fb == 1.0);
  }

  SECTION("empty sets score 1, disjoint sets score 0") {
    auto [fd_empty, fb_empty] = f1_scores(AdmgGraph(4), AdmgGraph(4));
    CHECK(fd_empty == 1.0);
    CHECK(fb_empty == 1.0);
    AdmgGraph other(4);
    other.directed(3, 0) = 1.0;
    other.bidirected(2, 3) = other.bidirected(3, 2) = 1.0;
    auto [fd, fb] = f1_scores(other, truth);
    CHECK(fd == 0.0);
    CHECK(fb == 0.0);
  }

  SECTION("half right is one half") {
    AdmgGraph pred(4);
    pred.directed(1, 2) = 1.0;
    pred.directed(3, 1) = 1.0;
    auto [fd, fb] = f1_scores(pred, truth);
    CHECK(close(fd, 0.5, 1e-12));
    CHECK(fb == 0.0);
  }

  SECTION("size mismatch rejected") {
    CHECK_THROWS_AS(f1_scores(AdmgGraph(3), truth), error);
  }

  SECTION("symmetric under simultaneous relabeling") {
    Rng rng(11);
    AdmgGraph pred(4);
    pred.directed(0, 2) = 1.0;
    pred.directed(2, 3) = 1.0;
    pred.bidirected(0, 1) = pred.bidirected(1, 0) = 1.0;
    auto base = f1_scores(pred, truth);
    std::vector<int> perm{0, 1, 2, 3};
    for (int trial = 0; trial < 6; ++trial) {
      rng.shuffle(perm);
      AdmgGraph p2(4), t2(4);
      for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) {
          p2.directed(perm[i], perm[j]) = pred.directed(i, j);
          p2.bidirected(perm[i], perm[j]) = pred.bidirected(i, j);
          t2.directed(perm[i], perm[j]) = truth.directed(i, j);
          t2.bidirected(perm[i], perm[j]) = truth.bidirected(i, j);
        }
      auto relabeled = f1_scores(p2, t2);
      CHECK(relabeled.first == base.first);
      CHECK(relabeled.second == base.second);
    }
  }
}

TEST_CASE("enumerate_bow_free_admgs") {
  CHECK(enumerate_bow_free_admgs(1).size() == 1);

  auto d2 = enumerate_bow_free_admgs(2);
  CHECK(d2.size() == 4);  // empty, 0->1, 1->0, 0<->1

  auto d3 = enumerate_bow_free_admgs(3);
  for (const auto& g : d3) {
    CHECK(is_bow_free_admg(g));
    CHECK(bow_free_penalty(g) <= 1e-9);
  }

  CHECK_THROWS_AS(enumerate_bow_free_admgs(5), error);
  CHECK_THROWS_AS(enumerate_bow_free_admgs(0), error);
}

TEST_CASE("penalty is zero exactly on bow-free acyclic graphs (D<=3 exhaustive)") {
  for (int d = 1; d <= 3; ++d) {
    const auto pairs = all_pairs(d);
    const int np = static_cast<int>(pairs.size());
    long checked = 0;
    for (long ds = 0; ds < (1l << (2 * np)); ++ds)
      for (long bs = 0; bs < (1l << np); ++bs) {
        AdmgGraph g(d);
        for (int p = 0; p < np; ++p) {
          g.directed(pairs[p].first, pairs[p].second) = (ds >> (2 * p)) & 1;
          g.directed(pairs[p].second, pairs[p].first) = (ds >> (2 * p + 1)) & 1;
          if ((bs >> p) & 1)
            g.bidirected(pairs[p].first, pairs[p].second) =
                g.bidirected(pairs[p].second, pairs[p].first) = 1.0;
        }
        const double pen = bow_free_penalty(g);
        CHECK(pen >= -1e-15);
        REQUIRE((pen <= 1e-9) == is_bow_free_admg(g));
        ++checked;
      }
    INFO("D=" << d << " graphs=" << checked);
  }
}

TEST_CASE("penalty non-negative on random binary graphs with zero diagonal") {
  Rng rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    const int d = 2 + static_cast<int>(rng.integer(4));
    AdmgGraph g(d);
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j) {
        if (i == j) continue;
        g.directed(i, j) = rng.uniform() < 0.4;
      }
    for (int i = 0; i < d; ++i)
      for (int j = i + 1; j < d; ++j)
        g.bidirected(i, j) = g.bidirected(j, i) = rng.uniform() < 0.4;
    CHECK(bow_free_penalty(g) >= 0.0);
  }
}
