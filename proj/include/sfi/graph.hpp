#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <queue>
#include <set>
#include <stdexcept>
#include <utility>
#include <vector>

#include "sfi/mat.hpp"
#include "sfi/rng.hpp"

namespace sfi {

/// Undirected graph with dense node features. Edges are stored once per
/// unordered pair, endpoints in [0, n), no self-loops.
struct Graph {
  std::size_t n = 0;
  std::vector<std::pair<int, int>> edges;
  Mat x;                    // n x d node features
  std::vector<int> labels;  // per-node (or a single per-graph) targets
  std::vector<std::uint8_t> train_mask;
  std::vector<std::uint8_t> test_mask;

  void validate() const {
    for (auto [u, v] : edges) {
      if (u < 0 || v < 0 || static_cast<std::size_t>(u) >= n || static_cast<std::size_t>(v) >= n)
        throw std::domain_error("Graph: edge endpoint out of range");
      if (u == v) throw std::domain_error("Graph: self-loops are not stored");
    }
  }
};

inline Mat adjacency(const Graph& g) {
  Mat a(g.n, g.n);
  for (auto [u, v] : g.edges) {
    a(static_cast<std::size_t>(u), static_cast<std::size_t>(v)) = 1.0;
    a(static_cast<std::size_t>(v), static_cast<std::size_t>(u)) = 1.0;
  }
  return a;
}

/// GCN normalization D^{-1/2} (A + I) D^{-1/2} with D the degree matrix
/// of A + I. Symmetric with spectrum inside [-1, 1].
inline Mat normalized_adjacency(const Graph& g) {
  g.validate();
  Mat a = adjacency(g);
  for (std::size_t i = 0; i < g.n; ++i) a(i, i) += 1.0;
  std::vector<double> dinv(g.n);
  for (std::size_t i = 0; i < g.n; ++i) {
    double deg = 0.0;
    for (std::size_t j = 0; j < g.n; ++j) deg += a(i, j);
    dinv[i] = 1.0 / std::sqrt(deg);
  }
  Mat out(g.n, g.n);
  for (std::size_t i = 0; i < g.n; ++i)
    for (std::size_t j = 0; j < g.n; ++j) out(i, j) = a(i, j) * dinv[i] * dinv[j];
  return out;
}

struct EigenDecomposition {
  std::vector<double> values;  // unsorted, values[i] pairs with column i
  Mat vectors;                 // orthonormal columns
};

/// Cyclic Jacobi eigendecomposition for small symmetric matrices.
/// Sweeps until the off-diagonal Frobenius mass is <= off_tol.
inline EigenDecomposition jacobi_eigen(Mat a, double off_tol = 1e-12, int max_sweeps = 200) {
  const std::size_t n = a.rows();
  if (a.cols() != n) throw std::invalid_argument("jacobi_eigen: matrix must be square");
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (std::abs(a(i, j) - a(j, i)) > 1e-9)
        throw std::invalid_argument("jacobi_eigen: matrix must be symmetric");

  Mat v = Mat::identity(n);
  auto off_mass = [&]() {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (i != j) s += a(i, j) * a(i, j);
    return std::sqrt(s);
  };

  for (int sweep = 0; sweep < max_sweeps && off_mass() > off_tol; ++sweep) {
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (std::abs(apq) < 1e-300) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }

  EigenDecomposition out;
  out.values.resize(n);
  for (std::size_t i = 0; i < n; ++i) out.values[i] = a(i, i);
  out.vectors = std::move(v);
  return out;
}

/// Laplacian positional encodings: eigenvectors of the symmetric
/// normalized Laplacian L = I - D^{-1/2} A D^{-1/2} for the k smallest
/// nonzero eigenvalues (zero means |lambda| <= 1e-9, one per connected
/// component). Columns are unit-norm with a deterministic sign: the
/// largest-magnitude entry is made positive. If the spectrum runs out of
/// nonzero eigenvalues (very disconnected graphs), remaining columns are
/// zero.
inline Mat laplacian_pe(const Graph& g, std::size_t k) {
  if (k >= g.n) throw std::domain_error("laplacian_pe: requires k < n");
  g.validate();
  Mat a = adjacency(g);
  std::vector<double> dinv(g.n, 0.0);
  for (std::size_t i = 0; i < g.n; ++i) {
    double deg = 0.0;
    for (std::size_t j = 0; j < g.n; ++j) deg += a(i, j);
    dinv[i] = deg > 0.0 ? 1.0 / std::sqrt(deg) : 0.0;
  }
  Mat lap(g.n, g.n);
  for (std::size_t i = 0; i < g.n; ++i) {
    for (std::size_t j = 0; j < g.n; ++j) lap(i, j) = -a(i, j) * dinv[i] * dinv[j];
    lap(i, i) += 1.0;
  }

  EigenDecomposition eig = jacobi_eigen(std::move(lap));
  std::vector<std::size_t> order(g.n);
  for (std::size_t i = 0; i < g.n; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
    return eig.values[x] < eig.values[y];
  });

  Mat pe(g.n, k);
  std::size_t col = 0;
  for (std::size_t oi = 0; oi < g.n && col < k; ++oi) {
    const std::size_t src = order[oi];
    if (std::abs(eig.values[src]) <= 1e-9) continue;  // skip the zero eigenspace
    double norm = 0.0;
    for (std::size_t i = 0; i < g.n; ++i) norm += eig.vectors(i, src) * eig.vectors(i, src);
    norm = std::sqrt(norm);
    std::size_t arg = 0;
    double best = -1.0;
    for (std::size_t i = 0; i < g.n; ++i) {
      const double m = std::abs(eig.vectors(i, src));
      if (m > best) {
        best = m;
        arg = i;
      }
    }
    const double sign = eig.vectors(arg, src) >= 0.0 ? 1.0 : -1.0;
    for (std::size_t i = 0; i < g.n; ++i) pe(i, col) = sign * eig.vectors(i, src) / norm;
    ++col;
  }
  return pe;
}

inline int count_components(const Graph& g) {
  std::vector<std::vector<int>> adj(g.n);
  for (auto [u, v] : g.edges) {
    adj[static_cast<std::size_t>(u)].push_back(v);
    adj[static_cast<std::size_t>(v)].push_back(u);
  }
  std::vector<char> seen(g.n, 0);
  int comps = 0;
  for (std::size_t s = 0; s < g.n; ++s) {
    if (seen[s]) continue;
    ++comps;
    std::queue<int> q;
    q.push(static_cast<int>(s));
    seen[s] = 1;
    while (!q.empty()) {
      const int u = q.front();
      q.pop();
      for (int w : adj[static_cast<std::size_t>(u)]) {
        if (!seen[static_cast<std::size_t>(w)]) {
          seen[static_cast<std::size_t>(w)] = 1;
          q.push(w);
        }
      }
    }
  }
  return comps;
}

/// Stochastic-block-model graph: `blocks` groups of `per_block` nodes,
/// edge probability p_in within a block and p_out across. One randomly
/// chosen seed node per block carries a one-hot block-id feature, all
/// other nodes have zero features; labels are block ids.
inline Graph gen_sbm(std::size_t blocks, std::size_t per_block, double p_in, double p_out,
                     std::size_t d, std::uint64_t seed) {
  if (!(p_in >= 0.0 && p_in <= 1.0 && p_out >= 0.0 && p_out <= 1.0))
    throw std::domain_error("gen_sbm: probabilities must lie in [0, 1]");
  if (d < blocks) throw std::domain_error("gen_sbm: feature dim must be >= blocks");
  SeededRng rng(seed);
  Graph g;
  g.n = blocks * per_block;
  g.x = Mat(g.n, d);
  g.labels.resize(g.n);
  for (std::size_t i = 0; i < g.n; ++i) g.labels[i] = static_cast<int>(i / per_block);
  for (std::size_t i = 0; i < g.n; ++i) {
    for (std::size_t j = i + 1; j < g.n; ++j) {
      const double p = g.labels[i] == g.labels[j] ? p_in : p_out;
      if (rng.next_double() < p) g.edges.emplace_back(static_cast<int>(i), static_cast<int>(j));
    }
  }
  for (std::size_t b = 0; b < blocks; ++b) {
    const std::size_t pick = b * per_block + rng.next_below(per_block);
    g.x(pick, b) = 1.0;
  }
  return g;
}

/// Ring of n nodes carrying one random bit each (encoded +-1 in feature
/// column 0); node i's binary label is the bit planted at node
/// (i + hop) mod n, so the task is solvable only by aggregating
/// information at least `hop` edges away.
inline Graph gen_longrange(std::size_t n, std::size_t hop, std::size_t d, std::uint64_t seed) {
  if (hop >= n) throw std::domain_error("gen_longrange: requires hop < n");
  if (d < 1) throw std::domain_error("gen_longrange: feature dim must be >= 1");
  SeededRng rng(seed);
  Graph g;
  g.n = n;
  g.x = Mat(n, d);
  g.labels.resize(n);
  std::set<std::pair<int, int>> ring;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = (i + 1) % n;
    if (i == j) continue;
    ring.emplace(static_cast<int>(std::min(i, j)), static_cast<int>(std::max(i, j)));
  }
  g.edges.assign(ring.begin(), ring.end());
  std::vector<int> bits(n);
  for (std::size_t i = 0; i < n; ++i) {
    bits[i] = rng.next_double() < 0.5 ? 0 : 1;
    g.x(i, 0) = bits[i] ? 1.0 : -1.0;
  }
  for (std::size_t i = 0; i < n; ++i) g.labels[i] = bits[(i + hop) % n];
  return g;
}

/// One message-passing step relu(Atil * X * W), the local baseline.
inline Mat gcn_step(const Mat& atil, const Mat& x, const Mat& w) {
  return relu(matmul(matmul(atil, x), w));
}

}  // namespace sfi
