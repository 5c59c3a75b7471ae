"""Self-verification suites: derivative cross-checks and QP brute-force oracle.

These back the `check` CLI command and are reused by the test suite. The
oracles here are deliberately independent of the implementations they judge:
the QP reference enumerates active sets instead of iterating, and the
dynamics reference differentiates numerically.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .dynamics import dynamics_derivatives, forward_dynamics
from .qp import QpProblem, QpSolver, expand_constraints, regularized_hessian
from .robot_model import RobotModel


@dataclass
class CheckResult:
    name: str
    passed: bool
    worst: float
    tolerance: float
    detail: str = ""

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"[{tag}] {self.name}: worst {self.worst:.3e} (tol {self.tolerance:.1e}) {self.detail}"


def solve_qp_by_enumeration(p: QpProblem):
    """Global optimum by exhaustive active-set enumeration.

    Solves the equality-constrained KKT system for every subset of the
    inequality rows, keeps the feasible candidates, and returns the feasible
    minimizer. Exponential in the constraint count; testing tool only.
    Uses the same regularized Hessian as the solver so objectives agree.
    Returns (z, objective) or (None, inf) when no subset yields a feasible
    point.
    """
    rows = expand_constraints(p)
    d = p.dim
    h_reg = regularized_hessian(p.H)
    best = None
    best_obj = np.inf
    all_in = range(rows.n_in)
    for size in range(0, min(d - rows.n_eq, rows.n_in) + 1):
        for subset in itertools.combinations(all_in, size):
            a_act = np.vstack([rows.a_eq, rows.a_in[list(subset)]]) if subset else rows.a_eq
            b_act = np.concatenate([rows.b_eq, rows.b_in[list(subset)]]) if subset else rows.b_eq
            k = a_act.shape[0]
            kkt = np.zeros((d + k, d + k))
            kkt[:d, :d] = h_reg
            if k:
                kkt[:d, d:] = a_act.T
                kkt[d:, :d] = a_act
            rhs = np.concatenate([-p.g, b_act])
            try:
                sol = np.linalg.solve(kkt, rhs)
            except np.linalg.LinAlgError:
                continue
            z = sol[:d]
            if rows.n_eq and np.abs(rows.a_eq @ z - rows.b_eq).max() > 1e-8:
                continue
            if rows.n_in and np.min(rows.a_in @ z - rows.b_in) < -1e-9 * (1 + np.abs(rows.b_in).max()):
                continue
            obj = float(0.5 * z @ h_reg @ z + p.g @ z)
            if obj < best_obj:
                best_obj = obj
                best = z
    return best, best_obj


def random_qp(rng: np.random.Generator, dim: int, n_ineq: int, with_eq: bool = False) -> QpProblem:
    """A random strictly convex QP with a mix of bounds and general rows."""
    m = rng.standard_normal((dim, dim))
    h = m @ m.T + dim * np.eye(dim)
    g = 3.0 * rng.standard_normal(dim)
    n_general = n_ineq // 2
    n_bounds = n_ineq - n_general
    lb = np.full(dim, -np.inf)
    ub = np.full(dim, np.inf)
    for i in rng.choice(dim, size=min(n_bounds, dim), replace=False):
        lo, hi = np.sort(rng.uniform(-2.0, 2.0, size=2))
        lb[i], ub[i] = lo, hi + 0.1
    a_in = lin = uin = None
    if n_general:
        a_in = rng.standard_normal((n_general, dim))
        mid = rng.uniform(-1.0, 1.0, size=n_general)
        width = rng.uniform(0.5, 3.0, size=n_general)
        lin, uin = mid - width, mid + width
    aeq = beq = None
    if with_eq and dim >= 2:
        aeq = rng.standard_normal((1, dim))
        beq = rng.uniform(-0.5, 0.5, size=1)
    return QpProblem(H=h, g=g, Aeq=aeq, beq=beq, lb=lb, ub=ub, Ain=a_in, lin=lin, uin=uin)


def run_qp_check(n_problems: int = 500, seed: int = 0, tol: float = 1e-8,
                 max_dim: int = 6, max_ineq: int = 8) -> CheckResult:
    """Random QPs against the exhaustive active-set oracle + KKT residuals."""
    rng = np.random.default_rng(seed)
    solver = QpSolver()
    worst = 0.0
    detail = ""
    for i in range(n_problems):
        dim = int(rng.integers(2, max_dim + 1))
        n_ineq = int(rng.integers(0, max_ineq + 1))
        prob = random_qp(rng, dim, n_ineq, with_eq=bool(rng.integers(0, 2)))
        sol = solver.solve(prob)
        ref, _ = solve_qp_by_enumeration(prob)
        if ref is None:
            if sol.status == "optimal":
                return CheckResult("qp_vs_enumeration", False, np.inf, tol,
                                   f"problem {i}: solver claims optimal, oracle finds none")
            continue
        if sol.status != "optimal":
            return CheckResult("qp_vs_enumeration", False, np.inf, tol,
                               f"problem {i}: solver status {sol.status}, oracle solved")
        err = float(np.linalg.norm(sol.z_star - ref, ord=np.inf))
        kkt_max = sol.kkt.max() / (1.0 + float(np.linalg.norm(prob.g)))
        worst = max(worst, err, kkt_max)
        if err > tol or kkt_max > tol:
            detail = f"problem {i} (dim={dim}, m={n_ineq})"
            return CheckResult("qp_vs_enumeration", False, worst, tol, detail)
    return CheckResult("qp_vs_enumeration", True, worst, tol, f"{n_problems} problems")


def run_dynamics_derivative_check(model: RobotModel, n_states: int = 200, seed: int = 0,
                                  tol: float = 1e-5) -> CheckResult:
    """Analytic forward-dynamics derivatives vs central finite differences."""
    rng = np.random.default_rng(seed)
    n = model.n
    lo, hi = model.limits.q_min, model.limits.q_max
    worst = 0.0
    h = 1e-6
    for i in range(n_states):
        q = lo + (hi - lo) * (0.1 + 0.8 * rng.random(n))
        qd = rng.standard_normal(n)
        u = 10.0 * rng.standard_normal(n)
        qdd = forward_dynamics(model, q, qd, u)
        der = dynamics_derivatives(model, q, qd, qdd)
        for block, wrt in ((der.dqdd_dq, "q"), (der.dqdd_dqd, "qd"), (der.dqdd_du, "u")):
            fd = np.empty((n, n))
            for j in range(n):
                e = np.zeros(n)
                e[j] = h
                if wrt == "q":
                    hi_v = forward_dynamics(model, q + e, qd, u)
                    lo_v = forward_dynamics(model, q - e, qd, u)
                elif wrt == "qd":
                    hi_v = forward_dynamics(model, q, qd + e, u)
                    lo_v = forward_dynamics(model, q, qd - e, u)
                else:
                    hi_v = forward_dynamics(model, q, qd, u + e)
                    lo_v = forward_dynamics(model, q, qd, u - e)
                fd[:, j] = (hi_v - lo_v) / (2 * h)
            rel = float(np.linalg.norm(block - fd) / (1.0 + np.linalg.norm(fd)))
            worst = max(worst, rel)
            if rel > tol:
                return CheckResult("dynamics_derivatives_vs_fd", False, worst, tol,
                                   f"state {i}, block d/d{wrt}")
    return CheckResult("dynamics_derivatives_vs_fd", True, worst, tol, f"{n_states} states")


def run_identity_check(model: RobotModel, n_states: int = 200, seed: int = 1,
                       tol: float = 1e-10) -> CheckResult:
    """Forward/inverse derivative identity dqdd_dx = -Minv dtau_dx."""
    rng = np.random.default_rng(seed)
    n = model.n
    lo, hi = model.limits.q_min, model.limits.q_max
    worst = 0.0
    for i in range(n_states):
        q = lo + (hi - lo) * (0.1 + 0.8 * rng.random(n))
        qd = rng.standard_normal(n)
        u = 10.0 * rng.standard_normal(n)
        qdd = forward_dynamics(model, q, qd, u)
        der = dynamics_derivatives(model, q, qd, qdd)
        for dfd, did in ((der.dqdd_dq, der.dtau_dq), (der.dqdd_dqd, der.dtau_dqd)):
            res = float(np.linalg.norm(dfd + der.minv @ did) / (1.0 + np.linalg.norm(did)))
            worst = max(worst, res)
            if res > tol:
                return CheckResult("fd_id_derivative_identity", False, worst, tol, f"state {i}")
    return CheckResult("fd_id_derivative_identity", True, worst, tol, f"{n_states} states")


CHECK_NAMES = ("dynamics", "qp", "identity")


def run_checks(model: RobotModel, which=CHECK_NAMES, seed: int = 0,
               tol_scale: float = 1.0) -> list[CheckResult]:
    results = []
    if "dynamics" in which:
        results.append(run_dynamics_derivative_check(model, seed=seed, tol=1e-5 * tol_scale))
    if "qp" in which:
        results.append(run_qp_check(seed=seed, tol=1e-8 * tol_scale))
    if "identity" in which:
        results.append(run_identity_check(model, seed=seed + 1, tol=1e-10 * tol_scale))
    return results
