#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "oracles.hpp"
#include "sfi/flow.hpp"
#include "sfi/mat.hpp"
#include "sfi/rng.hpp"

using namespace sfi;

namespace {

std::vector<double> mat_row(const Mat& m, std::size_t i) {
  std::vector<double> r(m.cols());
  for (std::size_t j = 0; j < m.cols(); ++j) r[j] = m(i, j);
  return r;
}

double max_err_vs_row_oracle(const FlowProblem& p, const Mat& z) {
  double err = 0.0;
  for (std::size_t i = 0; i < p.n(); ++i) {
    const RowSolution rs = dual_bisection_row(mat_row(p.R, i), mat_row(p.F, i), p.lambda);
    for (std::size_t j = 0; j < p.n(); ++j) err = std::max(err, std::abs(rs.z[j] - z(i, j)));
  }
  return err;
}

}  // namespace

TEST_CASE("dense_closed_form hand cases") {
  const Mat uniform = dense_closed_form(Mat::filled(3, 3, 1.0 / 3.0));
  for (double v : uniform.raw()) CHECK(v == Catch::Approx(1.0 / 3.0).margin(1e-15));

  const Mat z = dense_closed_form(Mat::from_rows({{0.25, 0.75}}));
  CHECK(z(0, 0) == Catch::Approx(0.75).margin(1e-15));
  CHECK(z(0, 1) == Catch::Approx(0.25).margin(1e-15));

  CHECK_THROWS_AS(dense_closed_form(Mat::from_rows({{0.0, 1.0}})), std::domain_error);
}

TEST_CASE("dense_closed_form of Softmax(-QK/sqrt(dk)) recovers row softmax") {
  SeededRng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 2 + rng.next_below(31);
    const std::size_t dk = 1 + rng.next_below(8);
    const Mat q = uniform_mat(rng, n, dk, -1.5, 1.5);
    const Mat k = uniform_mat(rng, n, dk, -1.5, 1.5);
    const Mat logits = matmul(q, transpose(k));
    const double s = 1.0 / std::sqrt(static_cast<double>(dk));
    const Mat via_flows = dense_closed_form(row_softmax(logits, -s));
    const Mat direct = row_softmax(logits, s);
    CHECK(max_abs_diff(via_flows, direct) <= 1e-12);
  }
}

TEST_CASE("energy_dense") {
  CHECK(energy_dense(Mat::filled(2, 2, 0.5), Mat(2, 2)) == 0.0);
  CHECK(energy_dense(Mat::from_rows({{1.0}}), Mat::from_rows({{1.0}})) == 0.5);

  SeededRng rng(4);
  const Mat r = uniform_mat(rng, 6, 6, 0.01, 1.0);
  const Mat z = uniform_mat(rng, 6, 6, -1.0, 1.0);
  double ref = 0.0;
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 6; ++j) ref += 0.5 * r(i, j) * z(i, j) * z(i, j);
  CHECK(energy_dense(r, z) == Catch::Approx(ref).margin(1e-12));
}

TEST_CASE("penalized_objective term structure") {
  SeededRng rng(21);
  FlowProblem p = oracle::random_problem(rng, 5, 1.0, 0.7);

  // lambda = 0 at a row-stochastic point reduces to the dense energy
  FlowProblem p0 = p;
  p0.lambda = 0.0;
  const Mat zs = dense_closed_form(p.R);
  CHECK(penalized_objective(p0, zs) == Catch::Approx(energy_dense(p.R, zs)).margin(1e-12));

  // Z = 0 on n=2 gives (alpha/2)*||0-1||^2 = alpha
  FlowProblem p2;
  p2.R = Mat::filled(2, 2, 0.5);
  p2.F = Mat::filled(2, 2, 0.5);
  p2.lambda = 1.0;
  p2.alpha = 0.37;
  CHECK(penalized_objective(p2, Mat(2, 2)) == Catch::Approx(0.37).margin(1e-15));

  // random instance vs term-by-term recomputation
  const Mat z = uniform_mat(rng, 5, 5, -0.5, 0.8);
  double ref = 0.0;
  for (std::size_t i = 0; i < 5; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 5; ++j) {
      ref += 0.5 * p.R(i, j) * z(i, j) * z(i, j);
      ref += p.lambda * p.F(i, j) * std::abs(z(i, j));
      s += z(i, j);
    }
    ref += 0.5 * p.alpha * (s - 1.0) * (s - 1.0);
  }
  CHECK(penalized_objective(p, z) == Catch::Approx(ref).margin(1e-12));
}

TEST_CASE("grad_smooth") {
  SeededRng rng(31);
  FlowProblem p = oracle::random_problem(rng, 4, 2.0, 1.3);

  // feasible point: penalty term vanishes
  const Mat zs = dense_closed_form(p.R);
  CHECK(max_abs_diff(grad_smooth(p, zs), hadamard(p.R, zs)) <= 1e-12);

  // Z = 0: gradient is the constant -alpha
  const Mat g0 = grad_smooth(p, Mat(4, 4));
  for (double v : g0.raw()) CHECK(v == Catch::Approx(-1.3).margin(1e-15));

  // finite differences of the smooth part H
  FlowProblem psm = p;
  psm.lambda = 0.0;
  const Mat z = uniform_mat(rng, 4, 4, -0.4, 0.8);
  const Mat fd = oracle::fd_gradient(
      [&](const Mat& m) { return penalized_objective(psm, m); }, z);
  CHECK(max_abs_diff(grad_smooth(p, z), fd) <= 1e-6);
}

TEST_CASE("safe_step") {
  CHECK(safe_step(0.1, 4) == Catch::Approx(1.0 / 1.2).margin(1e-15));
  CHECK(safe_step(1e-12, 9) == Catch::Approx(1.0).margin(1e-11));
}

TEST_CASE("bb_step") {
  SeededRng rng(41);
  const Mat a = uniform_mat(rng, 3, 3, -1.0, 1.0);
  CHECK(bb_step(a, a, 2.0) == Catch::Approx(1.0).margin(1e-15));
  CHECK(bb_step(a, Mat(3, 3), 0.25) == 0.25);  // degenerate denominator

  // scalar quadratic H = r/2 z^2: gradient difference = r * dz, so the
  // BB ratio is exactly 1/r.
  const double r = 0.37;
  const Mat dz = Mat::from_rows({{0.8}});
  const Mat dg = scale(dz, r);
  CHECK(bb_step(dz, dg, 100.0) == Catch::Approx(1.0 / r).margin(1e-15));
  CHECK(bb_step(dz, dg, 1.0) == 1.0);  // clamped into (0, t_safe]
}

TEST_CASE("prox_iterate") {
  SeededRng rng(51);
  FlowProblem p = oracle::random_problem(rng, 3, 0.0, 0.9);
  const Mat z = uniform_mat(rng, 3, 3, 0.0, 1.0);

  // lambda = 0: pure gradient step
  const double t = 0.3;
  CHECK(max_abs_diff(prox_iterate(p, z, t), sub(z, scale(grad_smooth(p, z), t))) <= 1e-15);
  // t = 0 with lambda = 0: null step
  CHECK(max_abs_diff(prox_iterate(p, z, 0.0), z) == 0.0);

  // hand case: n=1, R=F=[[1]], lambda=alpha=1, t=0.5 from Z=0:
  // Y = 0 - 0.5*(0 + 1*(0-1)) = 0.5, threshold 0.5 -> 0
  FlowProblem p1;
  p1.R = Mat::from_rows({{1.0}});
  p1.F = Mat::from_rows({{1.0}});
  p1.lambda = 1.0;
  p1.alpha = 1.0;
  const Mat out = prox_iterate(p1, Mat(1, 1), 0.5);
  CHECK(out(0, 0) == 0.0);
}

TEST_CASE("solve with lambda=0 matches both closed forms") {
  SeededRng rng(61);
  for (double alpha : {0.5, 2.0, 10.0}) {
    FlowProblem p = oracle::random_problem(rng, 5, 0.0, alpha);
    SolverConfig cfg;
    cfg.step_policy = StepPolicy::precond;
    cfg.tol = 1e-11;
    SeededRng zrng(7);
    const FlowSolution sol = solve(p, cfg, zrng);
    REQUIRE(sol.converged);

    // penalized closed form z_ij = (alpha/(1+alpha*T_i))/R_ij
    CHECK(max_abs_diff(sol.Z, oracle::penalized_lambda0_closed_form(p)) <= 1e-6);

    // after row renormalization: the exact-constraint closed form
    SolverConfig cfg_r = cfg;
    cfg_r.renormalize = true;
    SeededRng zrng2(7);
    const FlowSolution sol_r = solve(p, cfg_r, zrng2);
    CHECK(max_abs_diff(sol_r.Z, dense_closed_form(p.R)) <= 1e-6);
  }
}

TEST_CASE("lambda=0 penalized closed form validated by brute-force minimization") {
  SeededRng rng(71);
  for (int trial = 0; trial < 3; ++trial) {
    FlowProblem p = oracle::random_problem(rng, 3, 0.0, 1.0 + trial);
    const Mat gd = oracle::minimize_penalized_smooth(p);
    CHECK(max_abs_diff(gd, oracle::penalized_lambda0_closed_form(p)) <= 1e-9);
  }
}

TEST_CASE("solution invariants") {
  SeededRng rng(81);
  FlowProblem p = oracle::random_problem(rng, 6, 1.0, 100.0);
  SolverConfig cfg;
  cfg.step_policy = StepPolicy::precond;
  SeededRng zrng(3);
  const FlowSolution sol = solve(p, cfg, zrng);
  REQUIRE(sol.converged);
  CHECK(sol.kkt_residual <= cfg.tol);
  CHECK(std::abs(sol.objective - penalized_objective(p, sol.Z)) <= 1e-10);
  CHECK(sol.feas_residual <= 10.0 / p.alpha);
  CHECK(sol.iterations >= 1);
}

TEST_CASE("dual_bisection_row") {
  // lambda = 0 closed form
  const RowSolution a = dual_bisection_row({1.0, 3.0}, {0.0, 0.0}, 0.0);
  CHECK(a.z[0] == Catch::Approx(0.75).margin(1e-10));
  CHECK(a.z[1] == Catch::Approx(0.25).margin(1e-10));
  CHECK(a.mu == Catch::Approx(0.75).margin(1e-10));

  // symmetric two-link row: z = (1/2, 1/2) for any lambda
  for (double lam : {0.0, 0.5, 3.0}) {
    const RowSolution s = dual_bisection_row({1.0, 1.0}, {1.0, 1.0}, lam);
    CHECK(s.z[0] == Catch::Approx(0.5).margin(1e-10));
    CHECK(s.z[1] == Catch::Approx(0.5).margin(1e-10));
  }

  // hand KKT solve: r=(1,1), f=(0.1,1), lambda=2 -> z=(1,0), mu=1.2
  const RowSolution h = dual_bisection_row({1.0, 1.0}, {0.1, 1.0}, 2.0);
  CHECK(h.z[0] == Catch::Approx(1.0).margin(1e-9));
  CHECK(h.z[1] == 0.0);
  CHECK(h.mu == Catch::Approx(1.2).margin(1e-9));

  // nonnegativity and unit sum on random rows
  SeededRng rng(91);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng.next_below(16);
    std::vector<double> r(n), f(n);
    for (std::size_t i = 0; i < n; ++i) {
      r[i] = rng.uniform(0.01, 1.0);
      f[i] = rng.uniform(0.0, 1.0);
    }
    const RowSolution s = dual_bisection_row(r, f, rng.uniform(0.0, 2.0));
    double sum = 0.0;
    for (double z : s.z) {
      CHECK(z >= 0.0);
      sum += z;
    }
    CHECK(std::abs(sum - 1.0) <= 1e-10);
  }
}

TEST_CASE("penalized solve tracks the exact-constraint oracle") {
  // row 0 is the hand-solvable case: r=(1/2,1/2), f=(0.05,0.5), lambda=2
  // gives lambda*f=(0.1,1), so mu=0.6 and z=(1,0) under the exact
  // constraint; the oracle cross-checks both rows.
  FlowProblem p;
  p.R = Mat::from_rows({{0.5, 0.5}, {0.5, 0.5}});
  p.F = Mat::from_rows({{0.05, 0.5}, {0.5, 0.05}});
  p.lambda = 2.0;
  p.alpha = 100.0;
  SolverConfig cfg;
  cfg.step_policy = StepPolicy::precond;
  SeededRng zrng(5);
  const FlowSolution sol = solve(p, cfg, zrng);
  REQUIRE(sol.converged);
  CHECK(sol.kkt_residual <= cfg.tol);
  CHECK(max_err_vs_row_oracle(p, sol.Z) <= 5e-2);
}

TEST_CASE("gradient mapping norm") {
  SeededRng rng(101);
  FlowProblem p = oracle::random_problem(rng, 4, 0.0, 1.0);
  const Mat zstar = oracle::penalized_lambda0_closed_form(p);
  CHECK(gradient_mapping_norm(p, zstar, safe_step(p.alpha, 4)) <= 1e-8);
  CHECK_THROWS_AS(gradient_mapping_norm(p, zstar, 0.0), std::domain_error);

  // trend: decreasing across safe-step checkpoints
  for (int inst = 0; inst < 10; ++inst) {
    FlowProblem q = oracle::random_problem(rng, 6, 1.0, 0.1);
    const double t = safe_step(q.alpha, 6);
    Mat z = uniform_mat(rng, 6, 6, 0.0, 2.0 / 6.0);
    double prev = gradient_mapping_norm(q, z, t);
    for (int block = 0; block < 5; ++block) {
      for (int k = 0; k < 20; ++k) z = prox_iterate(q, z, t);
      const double cur = gradient_mapping_norm(q, z, t);
      CHECK(cur < prev + 1e-12);
      prev = cur;
    }
  }
}

TEST_CASE("kkt_check") {
  SeededRng rng(111);
  FlowProblem p = oracle::random_problem(rng, 5, 0.0, 1.0);

  // dense closed form under the exact constraint, checked with the
  // exact-constraint multipliers mu_i = 1/T_i
  const Mat zs = dense_closed_form(p.R);
  std::vector<double> mu(5);
  for (std::size_t i = 0; i < 5; ++i) {
    double t = 0.0;
    for (std::size_t j = 0; j < 5; ++j) t += 1.0 / p.R(i, j);
    mu[i] = 1.0 / t;
  }
  CHECK(kkt_residual_with_mu(p, zs, mu, 1e-8) <= 1e-9);

  // solver output at convergence
  FlowProblem q = oracle::random_problem(rng, 6, 1.0, 10.0);
  SolverConfig cfg;
  cfg.step_policy = StepPolicy::precond;
  SeededRng zrng(9);
  const FlowSolution sol = solve(q, cfg, zrng);
  REQUIRE(sol.converged);
  CHECK(kkt_check(q, sol.Z).kkt_residual <= cfg.tol);

  // perturbing an active entry produces a visible violation
  Mat zp = sol.Z;
  std::size_t arg = 0;
  for (std::size_t i = 0; i < zp.size(); ++i)
    if (zp.raw()[i] > zp.raw()[arg]) arg = i;
  zp.raw()[arg] += 0.1;
  CHECK(kkt_check(q, zp).kkt_residual >= 0.05);
}

TEST_CASE("penalty error shrinks as alpha grows") {
  SeededRng rng(121);
  const double lambda_star = 1.0;
  for (int trial = 0; trial < 5; ++trial) {
    const std::size_t n = 3 + rng.next_below(10);
    const Mat r = oracle::random_row_stochastic(rng, n);
    const Mat f = oracle::random_row_stochastic(rng, n);
    double prev_err = 1e300;
    for (double alpha : {10.0, 100.0, 1000.0}) {
      FlowProblem p{r, f, lambda_star / static_cast<double>(n), alpha};
      SolverConfig cfg;
      cfg.step_policy = StepPolicy::precond;
      SeededRng zrng(SeededRng::derive(1, static_cast<std::uint64_t>(trial)));
      const FlowSolution sol = solve(p, cfg, zrng);
      REQUIRE(sol.converged);
      const double err = max_err_vs_row_oracle(p, sol.Z);
      CHECK(err <= 5.0 / alpha);
      CHECK(err < prev_err);
      prev_err = err;
    }
  }
}

TEST_CASE("friction-induced exact zeros") {
  // constructed heterogeneous-friction instance: uniform resistances,
  // one large friction entry per row
  const std::size_t n = 4;
  FlowProblem p;
  p.R = Mat::filled(n, n, 0.25);
  p.F = Mat(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) p.F(i, j) = j + 1 == n ? 0.85 : 0.05;
  p.alpha = 100.0;

  SolverConfig cfg;
  cfg.step_policy = StepPolicy::precond;
  cfg.tol = 1e-9;

  // lambda = 0: no exact zeros at all
  p.lambda = 0.0;
  SeededRng z1(2);
  const FlowSolution dense_sol = solve(p, cfg, z1);
  REQUIRE(dense_sol.converged);
  for (double v : dense_sol.Z.raw()) CHECK(std::abs(v) > 1e-8);

  // lambda = 2*mu0/min f: the large-friction column dies in every row
  std::vector<double> r0(n, 0.25), f0(n);
  for (std::size_t j = 0; j < n; ++j) f0[j] = p.F(0, j);
  const RowSolution base = dual_bisection_row(r0, f0, 0.0);
  p.lambda = 2.0 * base.mu / 0.05;
  SeededRng z2(2);
  const FlowSolution sparse_sol = solve(p, cfg, z2);
  REQUIRE(sparse_sol.converged);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t zeros = 0;
    for (std::size_t j = 0; j < n; ++j)
      if (std::abs(sparse_sol.Z(i, j)) < 1e-8) ++zeros;
    CHECK(zeros >= 1);
  }
}

TEST_CASE("descent with the fixed safe step") {
  SeededRng rng(131);
  const double grid[] = {0.0, 0.5, 1.0, 2.0, 5.0};
  for (int trial = 0; trial < 25; ++trial) {
    const std::size_t n = 4 + rng.next_below(13);
    FlowProblem p = oracle::random_problem(rng, n, 0.0, 0.1);
    p.lambda = grid[trial % 5] / static_cast<double>(n);
    const double t = safe_step(p.alpha, n);
    Mat z = uniform_mat(rng, n, n, 0.0, 2.0 / static_cast<double>(n));
    double prev = penalized_objective(p, z);
    for (int k = 0; k < 400; ++k) {
      z = prox_iterate(p, z, t);
      const double obj = penalized_objective(p, z);
      CHECK(obj <= prev + 1e-12);
      prev = obj;
    }
  }
}

TEST_CASE("unsafe regime: the stated step bound diverges on stiff instances") {
  // At alpha=1000 the true Lipschitz constant is ~alpha*n, far above the
  // 1+alpha*sqrt(n) the fixed step assumes, so the literal iteration
  // blows up. The precond policy solves the same instance.
  SeededRng rng(141);
  FlowProblem p = oracle::random_problem(rng, 8, 1.0, 1000.0);
  SolverConfig cfg;
  cfg.step_policy = StepPolicy::fixed;
  cfg.max_iter = 5000;
  SeededRng z1(4);
  CHECK_THROWS_AS(solve(p, cfg, z1), DivergenceError);

  cfg.step_policy = StepPolicy::precond;
  cfg.max_iter = 100000;
  SeededRng z2(4);
  CHECK(solve(p, cfg, z2).converged);
}

TEST_CASE("solve respects max_iter") {
  SeededRng rng(151);
  FlowProblem p = oracle::random_problem(rng, 6, 1.0, 0.1);
  SolverConfig cfg;
  cfg.max_iter = 1;
  SeededRng zrng(1);
  const FlowSolution sol = solve(p, cfg, zrng);
  CHECK_FALSE(sol.converged);
  CHECK(sol.iterations == 1);
}

TEST_CASE("problem validation") {
  FlowProblem p;
  p.R = Mat::from_rows({{0.6, 0.6}, {0.5, 0.5}});  // bad row sum
  p.F = Mat(2, 2);
  CHECK_THROWS_AS(p.validate(), std::domain_error);
  p.R = Mat::from_rows({{0.5, 0.5}, {0.5, 0.5}});
  p.alpha = 0.0;
  CHECK_THROWS_AS(p.validate(), std::domain_error);
  p.alpha = 1.0;
  p.lambda = -0.1;
  CHECK_THROWS_AS(p.validate(), std::domain_error);
  p.lambda = 0.0;
  CHECK_NOTHROW(p.validate());
}
