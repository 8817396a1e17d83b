#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "sfi/io.hpp"
#include "sfi/mat.hpp"

namespace sfi::ad {

enum class OpKind {
  input,
  matmul,
  transpose,
  add,
  sub,
  scale,
  hadamard,
  exp,
  row_softmax,
  soft_threshold,
  row_sum_outer,
  reduce_sum,
  cross_entropy,
  relu,
  smul,
  softplus,
  recip,
};

/// Handle into a Tape. Cheap to copy; only valid for the tape it came from.
struct Var {
  std::uint32_t id = UINT32_MAX;
  bool valid() const { return id != UINT32_MAX; }
};

/// Record-and-replay reverse-mode differentiation over matrix ops.
///
/// Records are appended in topological order (inputs always precede their
/// outputs), so one reverse sweep visits each node exactly once. A tape is
/// single-owner while recording; backward() is a pure function of the
/// frozen tape and is bitwise deterministic.
class Tape {
 public:
  Var constant(Mat v) { return push(OpKind::input, std::move(v), false); }
  Var param(Mat v) { return push(OpKind::input, std::move(v), true); }

  Var matmul(Var a, Var b) {
    return record2(OpKind::matmul, a, b, sfi::matmul(value(a), value(b)));
  }
  Var transpose(Var a) { return record1(OpKind::transpose, a, sfi::transpose(value(a))); }
  Var add(Var a, Var b) { return record2(OpKind::add, a, b, sfi::add(value(a), value(b))); }
  Var sub(Var a, Var b) { return record2(OpKind::sub, a, b, sfi::sub(value(a), value(b))); }
  Var scale(Var a, double c) {
    Var v = record1(OpKind::scale, a, sfi::scale(value(a), c));
    nodes_[v.id].attr = c;
    return v;
  }
  Var hadamard(Var a, Var b) {
    return record2(OpKind::hadamard, a, b, sfi::hadamard(value(a), value(b)));
  }
  Var exp(Var a) { return record1(OpKind::exp, a, exp_elems(value(a))); }
  Var relu(Var a) { return record1(OpKind::relu, a, sfi::relu(value(a))); }

  Var row_softmax(Var a, double sm_scale) {
    Var v = record1(OpKind::row_softmax, a, sfi::row_softmax(value(a), sm_scale));
    nodes_[v.id].attr = sm_scale;
    return v;
  }

  Var soft_threshold(Var y, Var tau) {
    return record2(OpKind::soft_threshold, y, tau, sfi::soft_threshold(value(y), value(tau)));
  }

  /// (Z 1 - 1) 1^T, the feasibility-defect outer product of the flow solver.
  Var row_sum_outer(Var a) {
    return record1(OpKind::row_sum_outer, a, rowsum_defect_outer(value(a)));
  }

  Var reduce_sum(Var a) {
    double s = 0.0;
    for (double v : value(a).raw()) s += v;
    return record1(OpKind::reduce_sum, a, Mat(1, 1, {s}));
  }

  /// Mean over rows of -log softmax(logits)[label]; output is 1x1.
  Var cross_entropy(Var logits, std::vector<int> labels) {
    const Mat& lg = value(logits);
    if (labels.size() != lg.rows())
      throw std::invalid_argument("cross_entropy: one label per row required");
    double loss = 0.0;
    for (std::size_t i = 0; i < lg.rows(); ++i) {
      const int y = labels[i];
      if (y < 0 || static_cast<std::size_t>(y) >= lg.cols())
        throw std::domain_error("cross_entropy: label out of range");
      double mx = lg(i, 0);
      for (std::size_t j = 1; j < lg.cols(); ++j) mx = std::max(mx, lg(i, j));
      double logsum = 0.0;
      for (std::size_t j = 0; j < lg.cols(); ++j) logsum += std::exp(lg(i, j) - mx);
      loss += std::log(logsum) + mx - lg(i, static_cast<std::size_t>(y));
    }
    loss /= static_cast<double>(lg.rows());
    Var v = record1(OpKind::cross_entropy, logits, Mat(1, 1, {loss}));
    nodes_[v.id].labels = std::move(labels);
    return v;
  }

  /// Scalar (1x1) times matrix, with gradients into both factors.
  Var smul(Var s, Var a) {
    const Mat& sv = value(s);
    if (sv.rows() != 1 || sv.cols() != 1) throw std::invalid_argument("smul: scalar must be 1x1");
    return record2(OpKind::smul, s, a, sfi::scale(value(a), sv(0, 0)));
  }

  Var softplus(Var a) {
    Mat out = value(a);
    for (double& v : out.raw())
      v = v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
    return record1(OpKind::softplus, a, std::move(out));
  }

  Var recip(Var a) {
    Mat out = value(a);
    for (double& v : out.raw()) v = 1.0 / v;
    return record1(OpKind::recip, a, std::move(out));
  }

  const Mat& value(Var v) const { return nodes_.at(v.id).value; }
  std::size_t size() const { return nodes_.size(); }
  bool trainable(Var v) const { return nodes_.at(v.id).trainable; }

  /// Reverse sweep from a scalar loss. Returns d(loss)/d(param) for every
  /// trainable input on the tape (zeros where the loss does not depend on
  /// it); adjoints of constants are never materialized.
  std::unordered_map<std::uint32_t, Mat> backward(Var loss) const {
    const Node& last = nodes_.at(loss.id);
    if (last.value.rows() != 1 || last.value.cols() != 1)
      throw std::invalid_argument("backward: loss must be a 1x1 scalar");

    std::vector<Mat> adj(nodes_.size());
    adj[loss.id] = Mat(1, 1, {1.0});

    for (std::size_t idx = loss.id + 1; idx-- > 0;) {
      const Node& nd = nodes_[idx];
      if (adj[idx].empty() || nd.op == OpKind::input) continue;
      const Mat& g = adj[idx];
      switch (nd.op) {
        case OpKind::matmul: {
          const Mat& a = nodes_[nd.a].value;
          const Mat& b = nodes_[nd.b].value;
          if (needs(nd.a)) accumulate(adj[nd.a], sfi::matmul(g, sfi::transpose(b)));
          if (needs(nd.b)) accumulate(adj[nd.b], sfi::matmul(sfi::transpose(a), g));
          break;
        }
        case OpKind::transpose:
          if (needs(nd.a)) accumulate(adj[nd.a], sfi::transpose(g));
          break;
        case OpKind::add:
          if (needs(nd.a)) accumulate(adj[nd.a], g);
          if (needs(nd.b)) accumulate(adj[nd.b], g);
          break;
        case OpKind::sub:
          if (needs(nd.a)) accumulate(adj[nd.a], g);
          if (needs(nd.b)) accumulate(adj[nd.b], sfi::scale(g, -1.0));
          break;
        case OpKind::scale:
          if (needs(nd.a)) accumulate(adj[nd.a], sfi::scale(g, nd.attr));
          break;
        case OpKind::hadamard:
          if (needs(nd.a)) accumulate(adj[nd.a], sfi::hadamard(g, nodes_[nd.b].value));
          if (needs(nd.b)) accumulate(adj[nd.b], sfi::hadamard(g, nodes_[nd.a].value));
          break;
        case OpKind::exp:
          if (needs(nd.a)) accumulate(adj[nd.a], sfi::hadamard(g, nd.value));
          break;
        case OpKind::relu: {
          if (!needs(nd.a)) break;
          Mat m = g;
          const Mat& x = nodes_[nd.a].value;
          for (std::size_t i = 0; i < m.size(); ++i)
            if (!(x.raw()[i] > 0.0)) m.raw()[i] = 0.0;
          accumulate(adj[nd.a], std::move(m));
          break;
        }
        case OpKind::row_softmax: {
          if (!needs(nd.a)) break;
          // gbar = scale * S o (G - rowsum(G o S) 1^T)
          const Mat& s = nd.value;
          Mat gs = sfi::hadamard(g, s);
          const std::vector<double> rs = row_sums(gs);
          Mat m(s.rows(), s.cols());
          for (std::size_t i = 0; i < s.rows(); ++i)
            for (std::size_t j = 0; j < s.cols(); ++j)
              m(i, j) = nd.attr * s(i, j) * (g(i, j) - rs[i]);
          accumulate(adj[nd.a], std::move(m));
          break;
        }
        case OpKind::soft_threshold: {
          const Mat& y = nodes_[nd.a].value;
          const Mat& tau = nodes_[nd.b].value;
          // d/dy = 1{|y|>tau}, d/dtau = -sign(y) 1{|y|>tau}; ties get 0.
          if (needs(nd.a)) {
            Mat m = g;
            for (std::size_t i = 0; i < m.size(); ++i)
              if (!(std::abs(y.raw()[i]) > tau.raw()[i])) m.raw()[i] = 0.0;
            accumulate(adj[nd.a], std::move(m));
          }
          if (needs(nd.b)) {
            Mat m = g;
            for (std::size_t i = 0; i < m.size(); ++i) {
              if (std::abs(y.raw()[i]) > tau.raw()[i])
                m.raw()[i] *= y.raw()[i] > 0.0 ? -1.0 : 1.0;
              else
                m.raw()[i] = 0.0;
            }
            accumulate(adj[nd.b], std::move(m));
          }
          break;
        }
        case OpKind::row_sum_outer: {
          if (!needs(nd.a)) break;
          const std::vector<double> rs = row_sums(g);
          Mat m(g.rows(), g.cols());
          for (std::size_t i = 0; i < g.rows(); ++i)
            for (std::size_t j = 0; j < g.cols(); ++j) m(i, j) = rs[i];
          accumulate(adj[nd.a], std::move(m));
          break;
        }
        case OpKind::reduce_sum: {
          if (!needs(nd.a)) break;
          const Mat& x = nodes_[nd.a].value;
          accumulate(adj[nd.a], Mat::filled(x.rows(), x.cols(), g(0, 0)));
          break;
        }
        case OpKind::cross_entropy: {
          if (!needs(nd.a)) break;
          const Mat& lg = nodes_[nd.a].value;
          Mat probs = sfi::row_softmax(lg, 1.0);
          const double c = g(0, 0) / static_cast<double>(lg.rows());
          for (std::size_t i = 0; i < lg.rows(); ++i) {
            probs(i, static_cast<std::size_t>(nd.labels[i])) -= 1.0;
            for (std::size_t j = 0; j < lg.cols(); ++j) probs(i, j) *= c;
          }
          accumulate(adj[nd.a], std::move(probs));
          break;
        }
        case OpKind::smul: {
          const double s0 = nodes_[nd.a].value(0, 0);
          const Mat& a = nodes_[nd.b].value;
          if (needs(nd.a)) accumulate(adj[nd.a], Mat(1, 1, {fro_inner(g, a)}));
          if (needs(nd.b)) accumulate(adj[nd.b], sfi::scale(g, s0));
          break;
        }
        case OpKind::softplus: {
          if (!needs(nd.a)) break;
          const Mat& x = nodes_[nd.a].value;
          Mat m = g;
          for (std::size_t i = 0; i < m.size(); ++i)
            m.raw()[i] *= 1.0 / (1.0 + std::exp(-x.raw()[i]));
          accumulate(adj[nd.a], std::move(m));
          break;
        }
        case OpKind::recip: {
          if (!needs(nd.a)) break;
          Mat m = g;
          for (std::size_t i = 0; i < m.size(); ++i)
            m.raw()[i] *= -nd.value.raw()[i] * nd.value.raw()[i];
          accumulate(adj[nd.a], std::move(m));
          break;
        }
        case OpKind::input:
          break;
      }
    }

    std::unordered_map<std::uint32_t, Mat> grads;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (!nodes_[i].trainable) continue;
      if (adj[i].empty()) adj[i] = Mat(nodes_[i].value.rows(), nodes_[i].value.cols());
      grads.emplace(static_cast<std::uint32_t>(i), std::move(adj[i]));
    }
    return grads;
  }

 private:
  struct Node {
    OpKind op;
    std::uint32_t a = UINT32_MAX;
    std::uint32_t b = UINT32_MAX;
    double attr = 0.0;
    Mat value;
    bool trainable = false;   // inputs only
    bool needs_grad = false;  // reaches a trainable input
    std::vector<int> labels;  // cross_entropy only
  };

  bool needs(std::uint32_t id) const { return nodes_[id].needs_grad; }

  static void accumulate(Mat& slot, Mat contribution) {
    if (slot.empty()) {
      slot = std::move(contribution);
    } else {
      require_same_shape(slot, contribution, "backward accumulate");
      for (std::size_t i = 0; i < slot.size(); ++i) slot.raw()[i] += contribution.raw()[i];
    }
  }

  Var push(OpKind op, Mat value, bool trainable) {
    Node nd;
    nd.op = op;
    nd.value = std::move(value);
    nd.trainable = trainable;
    nd.needs_grad = trainable;
    nodes_.push_back(std::move(nd));
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  Var record1(OpKind op, Var a, Mat value) {
    Node nd;
    nd.op = op;
    nd.a = a.id;
    nd.value = std::move(value);
    nd.needs_grad = nodes_.at(a.id).needs_grad;
    nodes_.push_back(std::move(nd));
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  Var record2(OpKind op, Var a, Var b, Mat value) {
    Node nd;
    nd.op = op;
    nd.a = a.id;
    nd.b = b.id;
    nd.value = std::move(value);
    nd.needs_grad = nodes_.at(a.id).needs_grad || nodes_.at(b.id).needs_grad;
    nodes_.push_back(std::move(nd));
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  std::vector<Node> nodes_;
};

/// Builds a scalar loss from registered parameter Vars.
using BuildFn = std::function<Var(Tape&, const std::vector<Var>&)>;

struct GradCheckReport {
  std::string op;  // label of the checked function
  double max_rel_err = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double eps = 0.0;

  std::string to_json() const {
    return std::string("{\"op\":\"") + op + "\",\"max_rel_err\":" + fmt_full(max_rel_err) +
           ",\"worst_index\":" + std::to_string(worst_index) + ",\"eps\":" + fmt_full(eps) + "}";
  }
};

namespace detail {
inline double eval_loss(const BuildFn& f, const std::vector<Mat>& params) {
  Tape t;
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (const Mat& p : params) vars.push_back(t.constant(p));
  Var loss = f(t, vars);
  const Mat& v = t.value(loss);
  if (v.rows() != 1 || v.cols() != 1) throw std::invalid_argument("gradcheck: loss must be 1x1");
  if (!std::isfinite(v(0, 0))) throw std::runtime_error("gradcheck: non-finite loss value");
  return v(0, 0);
}
}  // namespace detail

/// Central-difference check of the tape gradient of f at `params`.
/// Relative error uses denominator max(|analytic|, |numeric|, 1e-12).
/// `max_coords_per_param` == 0 checks every coordinate; otherwise an
/// evenly strided subset of that size per parameter.
inline GradCheckReport gradcheck(std::string label, const BuildFn& f,
                                 const std::vector<Mat>& params, double eps,
                                 std::size_t max_coords_per_param = 0) {
  if (!(eps >= 1e-7 && eps <= 1e-3))
    throw std::domain_error("gradcheck: eps must lie in [1e-7, 1e-3]");

  Tape t;
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (const Mat& p : params) vars.push_back(t.param(p));
  Var loss = f(t, vars);
  auto grads = t.backward(loss);

  GradCheckReport rep;
  rep.op = std::move(label);
  rep.eps = eps;
  std::vector<Mat> work = params;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    const Mat& analytic = grads.at(vars[pi].id);
    const std::size_t count = params[pi].size();
    std::size_t stride = 1;
    if (max_coords_per_param > 0 && count > max_coords_per_param)
      stride = (count + max_coords_per_param - 1) / max_coords_per_param;
    for (std::size_t ci = 0; ci < count; ci += stride) {
      const double orig = work[pi].raw()[ci];
      work[pi].raw()[ci] = orig + eps;
      const double fp = detail::eval_loss(f, work);
      work[pi].raw()[ci] = orig - eps;
      const double fm = detail::eval_loss(f, work);
      work[pi].raw()[ci] = orig;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double a = analytic.raw()[ci];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-12});
      const double rel = std::abs(a - numeric) / denom;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst_param = pi;
        rep.worst_index = ci;
      }
    }
  }
  return rep;
}

}  // namespace sfi::ad
