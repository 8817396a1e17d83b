#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <set>

#include "oracles.hpp"
#include "sfi/graph.hpp"
#include "sfi/graph_json.hpp"
#include "sfi/mat.hpp"
#include "sfi/rng.hpp"

using namespace sfi;

namespace {

Graph random_graph(SeededRng& rng, std::size_t n, double p) {
  Graph g;
  g.n = n;
  g.x = Mat(n, 1);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (rng.next_double() < p) g.edges.emplace_back(static_cast<int>(i), static_cast<int>(j));
  return g;
}

}  // namespace

TEST_CASE("normalized_adjacency hand cases") {
  Graph pair;
  pair.n = 2;
  pair.edges = {{0, 1}};
  const Mat atil = normalized_adjacency(pair);
  for (double v : atil.raw()) CHECK(v == Catch::Approx(0.5).margin(1e-15));

  Graph empty;
  empty.n = 4;
  CHECK(max_abs_diff(normalized_adjacency(empty), Mat::identity(4)) == 0.0);
}

TEST_CASE("normalized_adjacency is symmetric with spectrum in [-1, 1]") {
  SeededRng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    Graph g = random_graph(rng, 8, 0.4);
    const Mat atil = normalized_adjacency(g);
    CHECK(max_abs_diff(atil, transpose(atil)) <= 1e-12);
    const EigenDecomposition eig = jacobi_eigen(atil);
    for (double v : eig.values) {
      CHECK(v >= -1.0 - 1e-9);
      CHECK(v <= 1.0 + 1e-9);
    }
  }
}

TEST_CASE("jacobi eigendecomposition residuals and orthonormality") {
  SeededRng rng(5);
  const std::size_t n = 10;
  Mat a = uniform_mat(rng, n, n, -1.0, 1.0);
  a = scale(add(a, transpose(a)), 0.5);
  const EigenDecomposition eig = jacobi_eigen(a);

  for (std::size_t k = 0; k < n; ++k) {
    Mat v(n, 1);
    for (std::size_t i = 0; i < n; ++i) v(i, 0) = eig.vectors(i, k);
    const Mat av = matmul(a, v);
    CHECK(max_abs_diff(av, scale(v, eig.values[k])) <= 1e-8);
  }
  const Mat gram = matmul(transpose(eig.vectors), eig.vectors);
  CHECK(max_abs_diff(gram, Mat::identity(n)) <= 1e-10);

  CHECK_THROWS_AS(jacobi_eigen(uniform_mat(rng, 3, 3, -1.0, 1.0)), std::invalid_argument);
}

TEST_CASE("laplacian_pe on the two-node path") {
  Graph k2;
  k2.n = 2;
  k2.edges = {{0, 1}};
  const Mat pe = laplacian_pe(k2, 1);
  // nonzero eigenvalue 2 with eigenvector (1,-1)/sqrt(2), sign-fixed so
  // the largest-magnitude entry (the first) is positive
  CHECK(pe(0, 0) == Catch::Approx(1.0 / std::sqrt(2.0)).margin(1e-9));
  CHECK(pe(1, 0) == Catch::Approx(-1.0 / std::sqrt(2.0)).margin(1e-9));
  CHECK_THROWS_AS(laplacian_pe(k2, 2), std::domain_error);
}

TEST_CASE("laplacian_pe skips one zero eigenvalue per component") {
  Graph two_pairs;
  two_pairs.n = 4;
  two_pairs.edges = {{0, 1}, {2, 3}};
  CHECK(count_components(two_pairs) == 2);
  const Mat pe = laplacian_pe(two_pairs, 2);
  // both returned columns belong to eigenvalue 2: L v = 2 v
  Mat a = adjacency(two_pairs);
  Mat lap = Mat::identity(4);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j)
      if (a(i, j) != 0.0) lap(i, j) -= 1.0;  // degrees are all 1
  for (std::size_t k = 0; k < 2; ++k) {
    Mat v(4, 1);
    for (std::size_t i = 0; i < 4; ++i) v(i, 0) = pe(i, k);
    CHECK(max_abs_diff(matmul(lap, v), scale(v, 2.0)) <= 1e-8);
  }
}

TEST_CASE("laplacian_pe columns are orthonormal") {
  SeededRng rng(7);
  for (int trial = 0; trial < 5; ++trial) {
    Graph g = random_graph(rng, 10, 0.5);
    if (count_components(g) > 3) continue;
    const std::size_t k = 4;
    const Mat pe = laplacian_pe(g, k);
    const Mat gram = matmul(transpose(pe), pe);
    CHECK(max_abs_diff(gram, Mat::identity(k)) <= 1e-8);
  }
}

TEST_CASE("gen_sbm structure and determinism") {
  const Graph cliques = gen_sbm(3, 4, 1.0, 0.0, 3, 42);
  CHECK(cliques.n == 12);
  CHECK(count_components(cliques) == 3);
  for (std::size_t i = 0; i < 12; ++i) CHECK(cliques.labels[i] == static_cast<int>(i / 4));

  // exactly one one-hot seed node per block
  for (std::size_t b = 0; b < 3; ++b) {
    int hot = 0;
    for (std::size_t i = 0; i < 12; ++i) hot += cliques.x(i, b) == 1.0 ? 1 : 0;
    CHECK(hot == 1);
  }

  const Graph again = gen_sbm(3, 4, 1.0, 0.0, 3, 42);
  CHECK(again.edges == cliques.edges);
  CHECK(std::memcmp(again.x.data(), cliques.x.data(), sizeof(double) * again.x.size()) == 0);

  CHECK_THROWS_AS(gen_sbm(3, 4, 1.5, 0.0, 3, 1), std::domain_error);
  CHECK_THROWS_AS(gen_sbm(4, 4, 0.5, 0.5, 3, 1), std::domain_error);  // d < blocks
}

TEST_CASE("gen_sbm densities match when p_in == p_out") {
  double in_edges = 0.0, out_edges = 0.0, in_pairs = 0.0, out_pairs = 0.0;
  for (int s = 0; s < 100; ++s) {
    const Graph g = gen_sbm(2, 6, 0.3, 0.3, 2, 1000 + static_cast<std::uint64_t>(s));
    for (auto [u, v] : g.edges)
      (g.labels[static_cast<std::size_t>(u)] == g.labels[static_cast<std::size_t>(v)]
           ? in_edges
           : out_edges) += 1.0;
    in_pairs += 2 * (6 * 5 / 2);
    out_pairs += 36;
  }
  const double d_in = in_edges / in_pairs;
  const double d_out = out_edges / out_pairs;
  CHECK(std::abs(d_in - 0.3) <= 0.03);
  CHECK(std::abs(d_out - 0.3) <= 0.03);
}

TEST_CASE("gen_longrange plants the parity bit hop edges away") {
  const Graph g = gen_longrange(16, 5, 1, 9);
  CHECK(g.n == 16);
  CHECK(g.edges.size() == 16);  // a ring
  for (std::size_t i = 0; i < g.n; ++i) {
    const int bit = g.x((i + 5) % 16, 0) > 0.0 ? 1 : 0;
    CHECK(g.labels[i] == bit);
  }

  // hop = 0: the label is readable from the node's own feature
  const Graph g0 = gen_longrange(8, 0, 1, 9);
  for (std::size_t i = 0; i < g0.n; ++i)
    CHECK(g0.labels[i] == (g0.x(i, 0) > 0.0 ? 1 : 0));

  const Graph h1 = gen_longrange(16, 5, 1, 17);
  const Graph h2 = gen_longrange(16, 5, 1, 17);
  CHECK(std::memcmp(h1.x.data(), h2.x.data(), sizeof(double) * h1.x.size()) == 0);

  CHECK_THROWS_AS(gen_longrange(8, 8, 1, 1), std::domain_error);
}

TEST_CASE("gcn_step") {
  SeededRng rng(13);
  const Mat x = uniform_mat(rng, 6, 3, -1.0, 1.0);
  const Mat w = uniform_mat(rng, 3, 4, -1.0, 1.0);

  Graph g = random_graph(rng, 6, 0.5);
  const Mat atil = normalized_adjacency(g);
  CHECK(max_abs(gcn_step(atil, x, Mat(3, 4))) == 0.0);

  // empty graph: Atil = I, so this is a plain dense layer
  CHECK(max_abs_diff(gcn_step(Mat::identity(6), x, w), relu(matmul(x, w))) == 0.0);

  CHECK(max_abs_diff(gcn_step(atil, x, w), relu(matmul(matmul(atil, x), w))) == 0.0);
}

TEST_CASE("graph json round trip") {
  const Graph g = gen_sbm(2, 3, 0.8, 0.2, 2, 77);
  const Graph back = graph_from_json(graph_to_json(g));
  CHECK(back.n == g.n);
  CHECK(back.edges == g.edges);
  CHECK(back.labels == g.labels);
  CHECK(std::memcmp(back.x.data(), g.x.data(), sizeof(double) * g.x.size()) == 0);
}
