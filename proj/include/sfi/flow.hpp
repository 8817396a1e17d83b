#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "sfi/mat.hpp"
#include "sfi/rng.hpp"

namespace sfi {

/// One attention instance: minimize over flows Z
///
///   (1/2) Tr[(R o Z) Z^T] + (alpha/2) ||Z 1 - 1||^2 + lambda ||F o Z||_{1,1}
///
/// R holds per-link resistances (row-stochastic, strictly positive),
/// F per-link frictions (nonnegative). Z[i][j] is the flow from node j
/// into sink i, so each row of Z should transport one unit in total;
/// the quadratic penalty enforces that softly with strength alpha.
struct FlowProblem {
  Mat R;
  Mat F;
  double lambda = 0.0;
  double alpha = 1.0;

  std::size_t n() const { return R.rows(); }

  void validate() const {
    if (R.rows() != R.cols()) throw std::invalid_argument("FlowProblem: R must be square");
    if (!F.same_shape(R)) throw std::invalid_argument("FlowProblem: F shape must match R");
    if (!(lambda >= 0.0) || !std::isfinite(lambda))
      throw std::domain_error("FlowProblem: lambda must be finite and >= 0");
    if (!(alpha > 0.0) || !std::isfinite(alpha))
      throw std::domain_error("FlowProblem: alpha must be finite and > 0");
    for (std::size_t i = 0; i < R.rows(); ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < R.cols(); ++j) {
        const double r = R(i, j);
        if (!(r > 0.0) || !std::isfinite(r))
          throw std::domain_error("FlowProblem: R entries must be finite and > 0");
        s += r;
        const double f = F(i, j);
        if (!(f >= 0.0) || !std::isfinite(f))
          throw std::domain_error("FlowProblem: F entries must be finite and >= 0");
      }
      if (std::abs(s - 1.0) > 1e-9)
        throw std::domain_error("FlowProblem: R row " + std::to_string(i) +
                                " sums to " + std::to_string(s) + ", expected 1");
    }
  }
};

/// Step selection inside solve():
///  - fixed:   every step uses safe_step(alpha, n).
///  - bb:      Barzilai-Borwein steps on the raw iteration, capped at the
///             safe step when clamp_to_safe is set. This is the printed
///             method; it stalls when alpha*n dominates the resistances
///             (the penalty Hessian has a row-wise rank-1 block of norm
///             alpha*n, far above the alpha*sqrt(n) the safe step assumes).
///  - precond: BB on the diagonally rescaled variables W = Z o sqrt(R)
///             (unit curvature everywhere except one known stiff
///             direction per row) plus a periodic active-set polish that
///             solves the sign-restricted quadratic exactly through its
///             two-point spectrum. Converges to machine precision on
///             stiff instances where bb cycles; accepted polish steps
///             must decrease the objective, so the route stays a descent
///             method on the same iterates.
enum class StepPolicy { bb, fixed, precond };

struct SolverConfig {
  int max_iter = 100000;
  double tol = 1e-8;          // stop when the gradient-mapping norm drops below this
  StepPolicy step_policy = StepPolicy::bb;
  int unroll_k = 20;          // fixed iteration count for the differentiable train-time path
  bool clamp_to_safe = true;  // cap bb-policy steps at safe_step(alpha, n)
  bool renormalize = false;   // divide rows of the final Z by their sums

  void validate() const {
    if (max_iter < 1) throw std::domain_error("SolverConfig: max_iter must be >= 1");
    if (!(tol > 0.0)) throw std::domain_error("SolverConfig: tol must be > 0");
    if (unroll_k < 1) throw std::domain_error("SolverConfig: unroll_k must be >= 1");
  }
};

struct FlowSolution {
  Mat Z;
  int iterations = 0;
  double feas_residual = 0.0;  // ||Z 1 - 1||_inf
  double kkt_residual = 0.0;   // gradient-mapping norm at the accepted stop
  double objective = 0.0;
  bool converged = false;
};

struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Closed-form optimal flows of the unregularized, exactly constrained
/// energy: Z[i][j] = (1/R[i][j]) / sum_k (1/R[i][k]). Rows sum to 1.
inline Mat dense_closed_form(const Mat& R) {
  Mat Z(R.rows(), R.cols());
  for (std::size_t i = 0; i < R.rows(); ++i) {
    double total = 0.0;
    for (std::size_t j = 0; j < R.cols(); ++j) {
      const double r = R(i, j);
      if (!(r > 0.0)) throw std::domain_error("dense_closed_form: resistances must be > 0");
      Z(i, j) = 1.0 / r;
      total += Z(i, j);
    }
    for (std::size_t j = 0; j < R.cols(); ++j) Z(i, j) /= total;
  }
  return Z;
}

/// Quadratic flow energy (1/2) Tr[(R o Z) Z^T].
inline double energy_dense(const Mat& R, const Mat& Z) {
  require_same_shape(R, Z, "energy_dense");
  double e = 0.0;
  for (std::size_t i = 0; i < R.size(); ++i)
    e += 0.5 * R.raw()[i] * Z.raw()[i] * Z.raw()[i];
  return e;
}

/// Full penalized objective H(Z) + G(Z).
inline double penalized_objective(const FlowProblem& p, const Mat& Z) {
  require_same_shape(p.R, Z, "penalized_objective");
  double obj = energy_dense(p.R, Z);
  for (double s : row_sums(Z)) obj += 0.5 * p.alpha * (s - 1.0) * (s - 1.0);
  double l1 = 0.0;
  for (std::size_t i = 0; i < Z.size(); ++i) l1 += p.F.raw()[i] * std::abs(Z.raw()[i]);
  return obj + p.lambda * l1;
}

/// Gradient of the smooth part: R o Z + alpha (Z 1 - 1) 1^T.
inline Mat grad_smooth(const FlowProblem& p, const Mat& Z) {
  require_same_shape(p.R, Z, "grad_smooth");
  Mat G = hadamard(p.R, Z);
  const std::vector<double> s = row_sums(Z);
  for (std::size_t i = 0; i < Z.rows(); ++i) {
    const double d = p.alpha * (s[i] - 1.0);
    for (std::size_t j = 0; j < Z.cols(); ++j) G(i, j) += d;
  }
  return G;
}

/// Step size 1/(1 + alpha*sqrt(n)), the bound the convergence analysis
/// derives from row-stochastic resistances.
inline double safe_step(double alpha, std::size_t n) {
  return 1.0 / (1.0 + alpha * std::sqrt(static_cast<double>(n)));
}

namespace detail {
/// BB2 ratio <A,B>/||B||_F^2 capped at `cap`; `fallback` covers the
/// degenerate cases (vanishing denominator or nonpositive ratio).
inline double bb_step_impl(const Mat& A, const Mat& B, double cap, double fallback) {
  require_same_shape(A, B, "bb_step");
  const double denom = fro_inner(B, B);
  if (denom < 1e-18) return fallback;
  const double t = fro_inner(A, B) / denom;
  if (!(t > 0.0)) return fallback;
  return t < cap ? t : cap;
}
}  // namespace detail

/// Barzilai-Borwein step from iterate difference A = Z(k) - Z(k-1) and
/// gradient difference B = gradH(k) - gradH(k-1), clamped into (0, t_safe].
inline double bb_step(const Mat& A, const Mat& B, double t_safe) {
  return detail::bb_step_impl(A, B, t_safe, t_safe);
}

/// One proximal step: soft-threshold the gradient step Z - t*gradH(Z)
/// with entrywise thresholds t*lambda*F. Accepts t = 0 (null step).
inline Mat prox_iterate(const FlowProblem& p, const Mat& Z, double t) {
  if (t < 0.0) throw std::domain_error("prox_iterate: step must be >= 0");
  Mat Y = sub(Z, scale(grad_smooth(p, Z), t));
  return soft_threshold(Y, scale(p.F, t * p.lambda));
}

/// Norm of the gradient mapping (Z - prox_iterate(Z, t))/t, the solver's
/// stationarity measure. Zero exactly at minimizers of the penalized
/// objective.
inline double gradient_mapping_norm(const FlowProblem& p, const Mat& Z, double t) {
  if (!(t > 0.0)) throw std::domain_error("gradient_mapping_norm: step must be > 0");
  return fro_norm(sub(Z, prox_iterate(p, Z, t))) / t;
}

inline double feasibility_residual(const Mat& Z) {
  double m = 0.0;
  for (double s : row_sums(Z)) m = std::max(m, std::abs(s - 1.0));
  return m;
}

namespace detail {

/// Working data of the preconditioned route: the substitution Z = W o S
/// with S = 1/sqrt(R) makes the quadratic term (1/2)||W||^2, so each
/// row's smooth Hessian is I + alpha * s s^T with the exactly known
/// spectrum {1, 1 + alpha*||s||^2}.
struct PrecondCtx {
  const FlowProblem* p = nullptr;
  Mat S;     // 1/sqrt(R)
  Mat tauw;  // lambda * F o S, the l1 weights in W coordinates

  explicit PrecondCtx(const FlowProblem& prob) : p(&prob) {
    const std::size_t n = prob.n();
    S = Mat(n, n);
    tauw = Mat(n, n);
    for (std::size_t i = 0; i < S.size(); ++i) {
      S.raw()[i] = 1.0 / std::sqrt(prob.R.raw()[i]);
      tauw.raw()[i] = prob.lambda * prob.F.raw()[i] * S.raw()[i];
    }
  }

  std::size_t n() const { return p->n(); }

  Mat grad(const Mat& w) const {
    const std::size_t nn = n();
    Mat g = w;
    for (std::size_t i = 0; i < nn; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < nn; ++j) dot += S(i, j) * w(i, j);
      const double c = p->alpha * (dot - 1.0);
      for (std::size_t j = 0; j < nn; ++j) g(i, j) += c * S(i, j);
    }
    return g;
  }

  Mat to_z(const Mat& w) const { return hadamard(w, S); }

  Mat sign_pattern(const Mat& w) const {
    Mat s(w.rows(), w.cols());
    for (std::size_t i = 0; i < w.size(); ++i)
      s.raw()[i] = w.raw()[i] > 0.0 ? 1.0 : (w.raw()[i] < 0.0 ? -1.0 : 0.0);
    return s;
  }

  /// Active-set guess from the multiplier estimate mu_i = -alpha*(defect):
  /// exactly the first-order conditions' support at the optimum.
  Mat dual_pattern(const Mat& w) const {
    const std::size_t nn = n();
    const std::vector<double> rs = row_sums(to_z(w));
    Mat s(nn, nn);
    for (std::size_t i = 0; i < nn; ++i) {
      const double mu = -p->alpha * (rs[i] - 1.0);
      for (std::size_t j = 0; j < nn; ++j) {
        const double lf = p->lambda * p->F(i, j);
        s(i, j) = mu > lf ? 1.0 : (mu < -lf ? -1.0 : 0.0);
      }
    }
    return s;
  }

  /// Exact minimizer of the smooth problem restricted to a fixed sign
  /// pattern. Per row the stationarity system is (I + alpha s s^T) w =
  /// -c with c the signed l1 weights, solved in closed form through the
  /// Sherman-Morrison identity: with u = <s, w>,
  ///   u = (alpha ||s||^2 - <s, c>) / (1 + alpha ||s||^2),
  ///   w = -c - alpha (u - 1) s  on the active entries.
  Mat restricted_solve(const Mat& sgn) const {
    const std::size_t nn = n();
    Mat w(nn, nn);
    for (std::size_t i = 0; i < nn; ++i) {
      double ss = 0.0, sc = 0.0;
      for (std::size_t j = 0; j < nn; ++j) {
        if (sgn(i, j) == 0.0) continue;
        ss += S(i, j) * S(i, j);
        sc += S(i, j) * tauw(i, j) * sgn(i, j);
      }
      const double u = (p->alpha * ss - sc) / (1.0 + p->alpha * ss);
      const double shift = p->alpha * (u - 1.0);
      for (std::size_t j = 0; j < nn; ++j) {
        if (sgn(i, j) == 0.0) continue;
        w(i, j) = -tauw(i, j) * sgn(i, j) - shift * S(i, j);
      }
    }
    return w;
  }

  /// Attempts both pattern candidates with sign repair; returns true and
  /// overwrites w when a candidate strictly improves the objective.
  bool polish(Mat& w) const {
    double obj_best = penalized_objective(*p, to_z(w));
    Mat best;
    bool improved = false;
    for (int cand = 0; cand < 2; ++cand) {
      Mat pat = cand == 0 ? sign_pattern(w) : dual_pattern(w);
      for (int round = 0; round < 4; ++round) {
        const Mat trial = restricted_solve(pat);
        if (!all_finite(trial)) break;
        const Mat next_pat = cand == 0 ? sign_pattern(trial) : dual_pattern(trial);
        const double obj = penalized_objective(*p, to_z(trial));
        if (obj < obj_best) {
          obj_best = obj;
          best = trial;
          improved = true;
        }
        bool settled = true;
        for (std::size_t i = 0; i < pat.size(); ++i)
          if (pat.raw()[i] != next_pat.raw()[i]) {
            settled = false;
            break;
          }
        if (settled) break;
        pat = next_pat;
      }
    }
    if (improved) w = std::move(best);
    return improved;
  }
};

}  // namespace detail

/// Proximal iteration from an explicit starting point. All policies stop
/// on the same measure: the gradient-mapping norm at the safe step, which
/// is also what kkt_residual reports. The first step of the bb policy
/// uses the safe step (no history yet).
inline FlowSolution solve_from(const FlowProblem& p, const SolverConfig& cfg, Mat Z) {
  p.validate();
  cfg.validate();
  require_same_shape(p.R, Z, "solve_from");
  const double t_safe = safe_step(p.alpha, p.n());

  FlowSolution sol;
  if (cfg.step_policy == StepPolicy::precond) {
    detail::PrecondCtx ctx(p);
    Mat W(Z.rows(), Z.cols());
    for (std::size_t i = 0; i < W.size(); ++i) W.raw()[i] = Z.raw()[i] / ctx.S.raw()[i];
    double max_t = 0.0;
    for (std::size_t i = 0; i < p.n(); ++i) {
      double t_row = 0.0;
      for (std::size_t j = 0; j < p.n(); ++j) t_row += ctx.S(i, j) * ctx.S(i, j);
      max_t = std::max(max_t, t_row);
    }
    const double t0 = 1.0 / (1.0 + p.alpha * max_t);  // transformed-space safe step
    Mat Wprev, Gprev;
    bool have_history = false;
    for (int k = 0; k < cfg.max_iter; ++k) {
      Mat G = ctx.grad(W);
      double t = t0;
      if (have_history)
        t = detail::bb_step_impl(sub(W, Wprev), sub(G, Gprev), 1e8, t0);
      Mat Wnext = soft_threshold(sub(W, scale(G, t)), scale(ctx.tauw, t));
      if (!all_finite(Wnext))
        throw DivergenceError("solve: non-finite iterate at iteration " + std::to_string(k));
      Wprev = std::move(W);
      Gprev = std::move(G);
      have_history = true;
      W = std::move(Wnext);
      if ((k == 0 || (k + 1) % 10 == 0) && ctx.polish(W)) have_history = false;
      sol.iterations = k + 1;
      Z = ctx.to_z(W);
      sol.kkt_residual = gradient_mapping_norm(p, Z, t_safe);
      if (sol.kkt_residual <= cfg.tol) {
        sol.converged = true;
        break;
      }
    }
  } else {
    const double cap = cfg.clamp_to_safe ? t_safe : 1e8;
    Mat Zprev, Gprev;
    bool have_history = false;
    for (int k = 0; k < cfg.max_iter; ++k) {
      Mat G = grad_smooth(p, Z);
      double t = t_safe;
      if (cfg.step_policy == StepPolicy::bb && have_history)
        t = detail::bb_step_impl(sub(Z, Zprev), sub(G, Gprev), cap, t_safe);
      Mat Znext = soft_threshold(sub(Z, scale(G, t)), scale(p.F, t * p.lambda));
      if (!all_finite(Znext))
        throw DivergenceError("solve: non-finite iterate at iteration " + std::to_string(k));
      Zprev = std::move(Z);
      Gprev = std::move(G);
      have_history = true;
      Z = std::move(Znext);
      sol.iterations = k + 1;
      sol.kkt_residual = gradient_mapping_norm(p, Z, t_safe);
      if (sol.kkt_residual <= cfg.tol) {
        sol.converged = true;
        break;
      }
    }
  }

  if (cfg.renormalize) {
    for (std::size_t i = 0; i < Z.rows(); ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < Z.cols(); ++j) s += Z(i, j);
      if (std::abs(s) > 1e-300)
        for (std::size_t j = 0; j < Z.cols(); ++j) Z(i, j) /= s;
    }
  }

  sol.feas_residual = feasibility_residual(Z);
  sol.objective = penalized_objective(p, Z);
  sol.Z = std::move(Z);
  return sol;
}

/// Solves from the uniform random init Z(0) ~ U[0, 2/n), whose expected
/// row sum is 1.
inline FlowSolution solve(const FlowProblem& p, const SolverConfig& cfg, SeededRng& rng) {
  const std::size_t n = p.n();
  Mat Z0 = uniform_mat(rng, n, n, 0.0, 2.0 / static_cast<double>(n));
  return solve_from(p, cfg, std::move(Z0));
}

struct RowSolution {
  std::vector<double> z;
  double mu = 0.0;
};

/// Independent oracle for the exactly constrained per-row problem
///
///   min (1/2) sum r_i z_i^2 + lambda sum f_i |z_i|  s.t.  sum z_i = 1.
///
/// The optimality conditions give z_i = Soft_{lambda f_i}(mu)/r_i with the
/// multiplier mu fixed by sum z_i = 1; g(mu) is continuous nondecreasing
/// on mu >= 0 and g(lambda*max f + max r) >= 1, so bisection always lands.
inline RowSolution dual_bisection_row(const std::vector<double>& r, const std::vector<double>& f,
                                      double lambda) {
  const std::size_t n = r.size();
  if (n == 0 || f.size() != n) throw std::invalid_argument("dual_bisection_row: bad sizes");
  if (!(lambda >= 0.0)) throw std::domain_error("dual_bisection_row: lambda must be >= 0");
  double max_r = 0.0, max_f = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!(r[i] > 0.0)) throw std::domain_error("dual_bisection_row: r entries must be > 0");
    if (!(f[i] >= 0.0)) throw std::domain_error("dual_bisection_row: f entries must be >= 0");
    max_r = std::max(max_r, r[i]);
    max_f = std::max(max_f, f[i]);
  }
  auto g = [&](double mu) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double w = mu - lambda * f[i];
      if (w > 0.0) s += w / r[i];
    }
    return s;
  };
  double lo = 0.0, hi = lambda * max_f + max_r;
  double mu = hi;
  for (int it = 0; it < 500; ++it) {
    mu = 0.5 * (lo + hi);
    const double gm = g(mu);
    if (std::abs(gm - 1.0) <= 1e-12) break;
    (gm < 1.0 ? lo : hi) = mu;
    if (hi - lo <= 1e-17 * std::max(1.0, hi)) break;
  }
  RowSolution out;
  out.mu = mu;
  out.z.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double w = mu - lambda * f[i];
    out.z[i] = w > 0.0 ? w / r[i] : 0.0;
  }
  return out;
}

struct KktReport {
  double kkt_residual = 0.0;
  std::vector<double> mu;  // per-row multiplier estimate
};

/// Worst first-order-condition violation of Z against supplied per-row
/// multipliers: active entries (|Z| > tol_active) must satisfy
/// R*Z + lambda*F*sign(Z) = mu, inactive ones |mu| <= lambda*F.
inline double kkt_residual_with_mu(const FlowProblem& p, const Mat& Z,
                                   const std::vector<double>& mu, double tol_active) {
  require_same_shape(p.R, Z, "kkt_check");
  if (mu.size() != Z.rows()) throw std::invalid_argument("kkt_check: mu size mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < Z.rows(); ++i) {
    for (std::size_t j = 0; j < Z.cols(); ++j) {
      const double z = Z(i, j);
      const double lf = p.lambda * p.F(i, j);
      double v;
      if (std::abs(z) > tol_active) {
        const double sgn = z > 0.0 ? 1.0 : -1.0;
        v = std::abs(p.R(i, j) * z + lf * sgn - mu[i]);
      } else {
        v = std::max(0.0, std::abs(mu[i]) - lf);
      }
      worst = std::max(worst, v);
    }
  }
  return worst;
}

/// KKT check for the penalized problem, with the multiplier read off the
/// feasibility defect: mu_i = -alpha*(row_sum_i - 1). The sign convention
/// makes mu the potential that drives the flows (the exactly constrained
/// problem's multiplier in the alpha -> inf limit).
inline KktReport kkt_check(const FlowProblem& p, const Mat& Z, double tol_active = 1e-8) {
  KktReport rep;
  rep.mu.resize(Z.rows());
  const std::vector<double> s = row_sums(Z);
  for (std::size_t i = 0; i < Z.rows(); ++i) rep.mu[i] = -p.alpha * (s[i] - 1.0);
  rep.kkt_residual = kkt_residual_with_mu(p, Z, rep.mu, tol_active);
  return rep;
}

}  // namespace sfi
