#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "sfi/autodiff.hpp"
#include "sfi/flow.hpp"
#include "sfi/mat.hpp"
#include "sfi/rng.hpp"

namespace sfi {

/// Per-head projections. w_q/w_k parameterize the resistances, the
/// separately trained w_fq/w_fk parameterize the frictions.
struct HeadParams {
  Mat w_q, w_k;    // d x d_k
  Mat w_fq, w_fk;  // d x d_k
  Mat w_v;         // d x d_v
  Mat w_o;         // d_v x d
};

/// One attention layer: H heads plus the adjacency/attention mixing
/// scalar. gamma_raw is unconstrained (1x1) and mapped through softplus
/// before use, so the effective gamma is positive and the (1+gamma)^{-1}
/// mixing can never hit the gamma = -1 singularity.
struct LayerParams {
  std::vector<HeadParams> heads;
  Mat gamma_raw;  // 1x1

  double gamma() const {
    const double u = gamma_raw(0, 0);
    return u > 0.0 ? u + std::log1p(std::exp(-u)) : std::log1p(std::exp(u));
  }
};

/// gamma_raw value whose softplus image is 1 (equal mixing at init).
inline double gamma_raw_for_unit_gamma() { return std::log(std::exp(1.0) - 1.0); }

enum class AttentionMode { sfi, dfi };

struct AttentionConfig {
  double lambda_star = 1.0;  // effective l1 weight is lambda_star / n
  double alpha = 0.1;
  SolverConfig solver;
};

/// Supplies the solver's initial flow matrix for (head, n). Forward
/// passes default to a seeded uniform draw; tests may inject permuted
/// inits to probe equivariance.
using ZInitFn = std::function<Mat(std::size_t head, std::size_t n)>;

inline ZInitFn seeded_zinit(std::uint64_t forward_seed, std::size_t layer_index) {
  return [forward_seed, layer_index](std::size_t head, std::size_t n) {
    SeededRng r(SeededRng::derive(forward_seed, layer_index, head));
    return uniform_mat(r, n, n, 0.0, 2.0 / static_cast<double>(n));
  };
}

namespace detail {
/// Softmax rows floored at 1e-12 and renormalized. Sharp trained logits
/// can underflow a literal softmax to exact zeros, which the flow solver
/// cannot accept (it divides by resistances); the floor is far below any
/// flow the layer can distinguish at desk scale.
inline Mat floored_row_softmax(const Mat& logits, double sm_scale) {
  Mat s = row_softmax(logits, sm_scale);
  for (std::size_t i = 0; i < s.rows(); ++i) {
    double sum = 0.0;
    for (std::size_t j = 0; j < s.cols(); ++j) {
      if (s(i, j) < 1e-12) s(i, j) = 1e-12;
      sum += s(i, j);
    }
    for (std::size_t j = 0; j < s.cols(); ++j) s(i, j) /= sum;
  }
  return s;
}
}  // namespace detail

/// Resistances R = Softmax(-(X Wq)(X Wk)^T / sqrt(d_k)): row-stochastic,
/// small where query and key align.
inline Mat resistance(const Mat& x, const HeadParams& h) {
  const Mat q = matmul(x, h.w_q);
  const Mat k = matmul(x, h.w_k);
  const double dk = static_cast<double>(h.w_q.cols());
  return detail::floored_row_softmax(matmul(q, transpose(k)), -1.0 / std::sqrt(dk));
}

/// Frictions from the second attention parameterization; same contract
/// as resistance but on w_fq/w_fk.
inline Mat friction(const Mat& x, const HeadParams& h) {
  const Mat q = matmul(x, h.w_fq);
  const Mat k = matmul(x, h.w_fk);
  const double dk = static_cast<double>(h.w_fq.cols());
  return detail::floored_row_softmax(matmul(q, transpose(k)), -1.0 / std::sqrt(dk));
}

/// Attention pattern of one head. Sparse mode solves the penalized flow
/// problem with lambda = lambda_star/n; dense mode evaluates the lambda=0
/// closed form, which is exactly the row softmax of the scaled scores.
inline Mat sfi_attention(const Mat& x, const HeadParams& h, const AttentionConfig& att,
                         AttentionMode mode, const ZInitFn& zinit, std::size_t head_index = 0) {
  const std::size_t n = x.rows();
  if (mode == AttentionMode::dfi) {
    const Mat q = matmul(x, h.w_q);
    const Mat k = matmul(x, h.w_k);
    const double dk = static_cast<double>(h.w_q.cols());
    return row_softmax(matmul(q, transpose(k)), 1.0 / std::sqrt(dk));
  }
  FlowProblem p;
  p.R = resistance(x, h);
  p.F = friction(x, h);
  p.lambda = att.lambda_star / static_cast<double>(n);
  p.alpha = att.alpha;
  return solve_from(p, att.solver, zinit(head_index, n)).Z;
}

/// Convenience overload drawing Z(0) from the given rng.
inline Mat sfi_attention(const Mat& x, const HeadParams& h, const AttentionConfig& att,
                         AttentionMode mode, SeededRng& rng) {
  ZInitFn init = [&rng](std::size_t, std::size_t n) {
    return uniform_mat(rng, n, n, 0.0, 2.0 / static_cast<double>(n));
  };
  return sfi_attention(x, h, att, mode, init);
}

/// Adjacency-enhanced forward step
///   X' = X + (1+gamma)^{-1} sum_h [Atil + gamma ATT^h] X Wv^h Wo^h.
/// `attention_out`, when given, receives each head's ATT matrix.
inline Mat layer_forward(const Mat& x, const Mat& atil, const LayerParams& lp,
                         AttentionMode mode, const AttentionConfig& att, const ZInitFn& zinit,
                         std::vector<Mat>* attention_out = nullptr) {
  if (lp.heads.empty()) throw std::invalid_argument("layer_forward: needs at least one head");
  if (atil.rows() != x.rows() || atil.cols() != x.rows())
    throw std::invalid_argument("layer_forward: Atil must be n x n");
  const double gamma = lp.gamma();
  Mat total(x.rows(), x.cols());
  for (std::size_t h = 0; h < lp.heads.size(); ++h) {
    Mat attn = sfi_attention(x, lp.heads[h], att, mode, zinit, h);
    Mat m = add(atil, scale(attn, gamma));
    Mat term = matmul(matmul(matmul(m, x), lp.heads[h].w_v), lp.heads[h].w_o);
    total = add(total, term);
    if (attention_out) attention_out->push_back(std::move(attn));
  }
  return add(x, scale(total, 1.0 / (1.0 + gamma)));
}

// ---------------------------------------------------------------------------
// Tape (training) path. The solver is unrolled for a fixed number of
// iterations; step sizes are computed from forward values and treated as
// non-differentiated constants, matching the eval solver's step policy.
// ---------------------------------------------------------------------------

struct HeadVars {
  ad::Var w_q, w_k, w_fq, w_fk, w_v, w_o;
};

struct LayerVars {
  std::vector<HeadVars> heads;
  ad::Var gamma_raw;
};

inline HeadVars register_head(ad::Tape& t, const HeadParams& h) {
  return HeadVars{t.param(h.w_q), t.param(h.w_k), t.param(h.w_fq),
                  t.param(h.w_fk), t.param(h.w_v), t.param(h.w_o)};
}

inline LayerVars register_layer(ad::Tape& t, const LayerParams& lp) {
  LayerVars lv;
  for (const HeadParams& h : lp.heads) lv.heads.push_back(register_head(t, h));
  lv.gamma_raw = t.param(lp.gamma_raw);
  return lv;
}

/// Unrolled proximal iteration on the tape: exactly cfg.unroll_k steps
/// from the supplied init.
inline ad::Var sfi_attention_tape(ad::Tape& t, ad::Var r_var, ad::Var f_var,
                                  const SolverConfig& cfg, double lambda, double alpha,
                                  const Mat& z0) {
  const std::size_t n = t.value(r_var).rows();
  const double t_safe = safe_step(alpha, n);
  const double cap = cfg.clamp_to_safe ? t_safe : 1e8;
  ad::Var z = t.constant(z0);
  Mat zprev, gprev;
  bool have_history = false;
  for (int k = 0; k < cfg.unroll_k; ++k) {
    ad::Var grad = t.add(t.hadamard(r_var, z), t.scale(t.row_sum_outer(z), alpha));
    double step = t_safe;
    if (cfg.step_policy == StepPolicy::bb && have_history)
      step = detail::bb_step_impl(sub(t.value(z), zprev), sub(t.value(grad), gprev), cap, t_safe);
    zprev = t.value(z);
    gprev = t.value(grad);
    have_history = true;
    ad::Var y = t.sub(z, t.scale(grad, step));
    z = t.soft_threshold(y, t.scale(f_var, step * lambda));
  }
  return z;
}

inline ad::Var layer_forward_tape(ad::Tape& t, ad::Var x, ad::Var atil, const LayerVars& lv,
                                  AttentionMode mode, const AttentionConfig& att,
                                  const ZInitFn& zinit) {
  const std::size_t n = t.value(x).rows();
  ad::Var gamma = t.softplus(lv.gamma_raw);
  ad::Var one = t.constant(Mat(1, 1, {1.0}));
  ad::Var mix = t.recip(t.add(gamma, one));
  ad::Var total;
  for (std::size_t h = 0; h < lv.heads.size(); ++h) {
    const HeadVars& hv = lv.heads[h];
    const double dk = static_cast<double>(t.value(hv.w_q).cols());
    ad::Var logits =
        t.matmul(t.matmul(x, hv.w_q), t.transpose(t.matmul(x, hv.w_k)));
    ad::Var attn;
    if (mode == AttentionMode::dfi) {
      attn = t.row_softmax(logits, 1.0 / std::sqrt(dk));
    } else {
      ad::Var r_var = t.row_softmax(logits, -1.0 / std::sqrt(dk));
      ad::Var f_logits =
          t.matmul(t.matmul(x, hv.w_fq), t.transpose(t.matmul(x, hv.w_fk)));
      ad::Var f_var = t.row_softmax(f_logits, -1.0 / std::sqrt(dk));
      attn = sfi_attention_tape(t, r_var, f_var, att.solver,
                                att.lambda_star / static_cast<double>(n), att.alpha,
                                zinit(h, n));
    }
    ad::Var m = t.add(atil, t.smul(gamma, attn));
    ad::Var term = t.matmul(t.matmul(t.matmul(m, x), hv.w_v), hv.w_o);
    total = total.valid() ? t.add(total, term) : term;
  }
  return t.add(x, t.smul(mix, total));
}

}  // namespace sfi
