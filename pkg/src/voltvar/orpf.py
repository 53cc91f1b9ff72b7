"""Loss-minimizing optimal reactive power flow on the linearized feeder.

The decision is the generator reactive injection ``q_C``.  Substituting the
full injection vector ``q = [q_C; q_L]`` into the loss proxy gives

    q_C' R q_C + 2 q_L' R_L' q_C + (q_L' R_LL q_L + p' Rtilde p)

subject to the capability box and the voltage band under the linear map.
The QP is written as ``min 1/2 x'Px + c'x + const  s.t.  l <= Ax <= u`` and
solved with an ADMM operator-splitting scheme (OSQP-style: a linear solve for
``x`` then a projection of the splitting variable ``z`` onto ``[l, u]``),
followed by an active-set polish.  Many scenarios that share one sensitivity
model are solved together with batched numpy kernels.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionError, InputError
from .gridmodel import FeederModel, SensitivityModel

logger = logging.getLogger(__name__)

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
MAX_ITER = "max_iter"

KKT_TOL = 1e-6
FEAS_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class OrpfProblem:
    sens: SensitivityModel
    p: np.ndarray
    q_L: np.ndarray
    q_min: np.ndarray
    q_max: np.ndarray
    v_min: np.ndarray
    v_max: np.ndarray
    v_hat: np.ndarray
    P: np.ndarray
    c: np.ndarray
    const: float
    A: np.ndarray
    l: np.ndarray
    u: np.ndarray

    @property
    def n(self) -> int:
        return self.P.shape[0]

    def objective(self, q_C) -> float:
        q_C = np.asarray(q_C, dtype=float)
        return float(0.5 * q_C @ self.P @ q_C + self.c @ q_C + self.const)

    def voltages(self, q_C) -> np.ndarray:
        """Partition-order voltages ``[v_C; v_L]``."""
        return self.A[self.n:] @ np.asarray(q_C, dtype=float) + self._v_hat_part

    @property
    def _v_hat_part(self) -> np.ndarray:
        s = self.sens
        return np.concatenate([self.v_hat[s.gen_index], self.v_hat[s.load_index]])


@dataclass(frozen=True, eq=False)
class OrpfSolution:
    q_star: np.ndarray
    objective: float
    kkt_residual: float
    status: str
    duals: np.ndarray = field(repr=False, default=None)
    iterations: int = 0
    residuals: dict = field(default_factory=dict)
    log: list = field(default_factory=list, repr=False)


def assemble(sens: SensitivityModel, p, q_L, boxes, v_limits) -> OrpfProblem:
    """Build the QP data for one operating point.

    ``p`` is bus order, ``q_L`` load order, ``boxes`` a pair of C-vectors
    ``(q_min, q_max)`` and ``v_limits`` a pair of bus-order N-vectors.
    """
    p = np.asarray(p, dtype=float)
    q_L = np.asarray(q_L, dtype=float)
    q_min, q_max = (np.asarray(b, dtype=float).reshape(-1) for b in boxes)
    v_min, v_max = (np.broadcast_to(np.asarray(v, dtype=float), (sens.n,)) for v in v_limits)
    C, nl = sens.c, len(sens.load_index)
    if p.shape != (sens.n,):
        raise DimensionError(f"p must have shape ({sens.n},), got {p.shape}")
    if q_L.shape != (nl,):
        raise DimensionError(f"q_L must have shape ({nl},), got {q_L.shape}")
    if q_min.shape != (C,) or q_max.shape != (C,):
        raise DimensionError(f"boxes must be two vectors of length {C}")
    if np.any(q_min > q_max):
        raise InputError("empty reactive capability box")

    v_hat = sens.offsets(p, q_L)
    gi, li = sens.gen_index, sens.load_index
    P = 2.0 * np.asarray(sens.R)
    c = 2.0 * sens.R_L @ q_L
    const = float(q_L @ sens.R_LL @ q_L + p @ sens.Rtilde @ p)
    A = np.vstack([np.eye(C), sens.X, sens.X_L.T])
    vh = np.concatenate([v_hat[gi], v_hat[li]])
    l = np.concatenate([q_min, np.concatenate([v_min[gi], v_min[li]]) - vh])
    u = np.concatenate([q_max, np.concatenate([v_max[gi], v_max[li]]) - vh])
    return OrpfProblem(sens, p, q_L, q_min, q_max, np.array(v_min), np.array(v_max), v_hat,
                       P, c, const, A, l, u)


def assemble_from_model(model: FeederModel, sens: SensitivityModel, p=None, q_L=None) -> OrpfProblem:
    p = model.p if p is None else p
    q_L = model.q_load if q_L is None else q_L
    return assemble(sens, p, q_L, (model.q_min, model.q_max), (model.v_min, model.v_max))


def kkt_residuals(prob: OrpfProblem, x, y) -> dict[str, float]:
    """Stationarity, primal feasibility and complementary slackness residuals.

    ``y`` holds one multiplier per row of ``A``: positive for an active upper
    bound, negative for an active lower bound.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    Ax = prob.A @ x
    stat = np.max(np.abs(prob.P @ x + prob.c + prob.A.T @ y), initial=0.0)
    viol = np.max(np.maximum(Ax - prob.u, 0.0) + np.maximum(prob.l - Ax, 0.0), initial=0.0)
    yp, ym = np.maximum(y, 0.0), np.maximum(-y, 0.0)
    comp = np.max(np.maximum(np.abs(yp * (prob.u - Ax)), np.abs(ym * (Ax - prob.l))), initial=0.0)
    return {"stationarity": float(stat), "primal": float(viol), "complementarity": float(comp)}


@dataclass
class AdmmSettings:
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    eps_abs: float = 1e-9
    eps_rel: float = 1e-9
    eps_pinf: float = 1e-7
    max_iter: int = 50_000
    check_every: int = 10
    adapt_every: int = 50
    polish: bool = True


def _solve_kkt_factors(P, AtA, sigma, rho):
    M = P[None] + sigma * np.eye(P.shape[0])[None] + rho[:, None, None] * AtA[None]
    return np.linalg.inv(M)


def _admm_batch(P, A, c, l, u, x0, z0, y0, st: AdmmSettings, want_log: bool):
    """Run ADMM on ``B`` problems sharing ``P`` and ``A``.

    Returns per-problem iterates, iteration counts, status codes
    (0 running, 1 converged, 2 infeasible) and an incumbent-objective log.
    """
    B, n = c.shape
    x, z, y = x0.copy(), z0.copy(), y0.copy()
    rho = np.full(B, st.rho)
    AtA = A.T @ A
    Minv = _solve_kkt_factors(P, AtA, st.sigma, rho)
    status = np.zeros(B, dtype=int)
    iters = np.zeros(B, dtype=int)
    best = np.full(B, np.inf)
    log: list[list[float]] = [[] for _ in range(B)]
    y_prev = y.copy()
    active = np.arange(B)
    for k in range(1, st.max_iter + 1):
        xa, za, ya, ra = x[active], z[active], y[active], rho[active]
        rhs = st.sigma * xa - c[active] + (ra[:, None] * za - ya) @ A
        xt = np.einsum("bij,bj->bi", Minv[active], rhs)
        zt = xt @ A.T
        x_new = st.alpha * xt + (1 - st.alpha) * xa
        zr = st.alpha * zt + (1 - st.alpha) * za
        z_new = np.clip(zr + ya / ra[:, None], l[active], u[active])
        y_new = ya + ra[:, None] * (zr - z_new)
        x[active], z[active], y[active] = x_new, z_new, y_new
        iters[active] = k

        if k % st.check_every and k != st.max_iter:
            continue
        Ax = x_new @ A.T
        Px = x_new @ P.T
        Aty = y_new @ A
        r_prim = np.max(np.abs(Ax - z_new), axis=1)
        r_dual = np.max(np.abs(Px + c[active] + Aty), axis=1)
        n_prim = np.maximum(np.max(np.abs(Ax), axis=1), np.max(np.abs(z_new), axis=1))
        n_dual = np.maximum.reduce([np.max(np.abs(Px), axis=1), np.max(np.abs(Aty), axis=1),
                                    np.max(np.abs(c[active]), axis=1)])
        done = (r_prim <= st.eps_abs + st.eps_rel * n_prim) & (r_dual <= st.eps_abs + st.eps_rel * n_dual)

        if want_log:
            viol = np.max(np.maximum(Ax - u[active], 0) + np.maximum(l[active] - Ax, 0), axis=1)
            obj = 0.5 * np.einsum("bi,bi->b", x_new, Px) + np.einsum("bi,bi->b", c[active], x_new)
            ok = viol <= FEAS_TOL
            best[active] = np.where(ok, np.minimum(best[active], obj), best[active])
            for j, b in enumerate(active):
                log[b].append(float(best[b]))

        dy = y_new - y_prev[active]
        ndy = np.max(np.abs(dy), axis=1)
        cert = (np.max(np.abs(dy @ A), axis=1) <= st.eps_pinf * ndy) & (
            np.einsum("bi,bi->b", u[active], np.maximum(dy, 0)) + np.einsum("bi,bi->b", l[active], np.minimum(dy, 0))
            < -st.eps_pinf * ndy
        ) & (ndy > 0)
        y_prev[active] = y_new

        status[active[done]] = 1
        status[active[cert & ~done]] = 2
        if k % st.adapt_every == 0:
            num = r_prim / np.maximum(n_prim, 1e-30)
            den = r_dual / np.maximum(n_dual, 1e-30)
            ratio = np.sqrt(num / np.maximum(den, 1e-30))
            new_rho = np.clip(rho[active] * ratio, 1e-6, 1e6)
            change = (new_rho > 5 * rho[active]) | (new_rho < 0.2 * rho[active])
            if np.any(change):
                idx = active[change]
                rho[idx] = new_rho[change]
                Minv[idx] = _solve_kkt_factors(P, AtA, st.sigma, rho[idx])
        active = np.flatnonzero(status == 0)
        if active.size == 0:
            break
    return x, z, y, iters, status, log


def _polish(prob: OrpfProblem, x, y):
    """Solve the equality-constrained KKT system on guessed active sets."""
    Ax = prob.A @ x
    gap = 1e-7 * (1 + np.abs(prob.u - prob.l))
    cands = []
    thr = 1e-9 * max(1.0, np.max(np.abs(y), initial=0.0))
    cands.append((y < -thr, y > thr))
    cands.append((Ax - prob.l <= gap, prob.u - Ax <= gap))
    best = None
    n = prob.n
    for lo, hi in cands:
        lo = lo & ~hi
        rows = np.flatnonzero(lo | hi)
        b = np.where(lo, prob.l, prob.u)[rows]
        Aa = prob.A[rows]
        K = np.block([[prob.P, Aa.T], [Aa, np.zeros((len(rows), len(rows)))]])
        rhs = np.concatenate([-prob.c, b])
        sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
        xp = sol[:n]
        yp = np.zeros_like(y)
        yp[rows] = sol[n:]
        # multipliers with the wrong sign mean the guessed set is wrong
        if np.any(yp[lo] > 1e-12) or np.any(yp[hi] < -1e-12):
            continue
        res = kkt_residuals(prob, xp, yp)
        score = max(res.values())
        if best is None or score < best[0]:
            best = (score, xp, yp, res)
    return best


def solve_batch(problems: Sequence[OrpfProblem], settings: AdmmSettings | None = None,
                warm_start: Sequence[OrpfSolution | None] | None = None,
                log: bool = False) -> list[OrpfSolution]:
    """Solve problems that share one sensitivity model; output order follows input."""
    st = settings or AdmmSettings()
    if not problems:
        return []
    P, A = problems[0].P, problems[0].A
    for pr in problems[1:]:
        if pr.A.shape != A.shape or not (np.array_equal(pr.P, P) and np.array_equal(pr.A, A)):
            raise InputError("batched problems must share the quadratic form and constraint matrix")
    c = np.array([pr.c for pr in problems])
    l = np.array([pr.l for pr in problems])
    u = np.array([pr.u for pr in problems])
    B, n = c.shape
    x0 = np.zeros((B, n))
    y0 = np.zeros((B, A.shape[0]))
    if warm_start is not None:
        for i, ws in enumerate(warm_start):
            if ws is not None:
                x0[i] = ws.q_star
                if ws.duals is not None:
                    y0[i] = ws.duals
    z0 = np.clip(x0 @ A.T, l, u)
    x, z, y, iters, status, logs = _admm_batch(P, A, c, l, u, x0, z0, y0, st, log)

    out = []
    for i, pr in enumerate(problems):
        if status[i] == 2:
            out.append(OrpfSolution(x[i].copy(), pr.objective(x[i]), np.inf, INFEASIBLE, y[i].copy(),
                                    int(iters[i]), {}, logs[i]))
            continue
        xi, yi = x[i].copy(), y[i].copy()
        res = kkt_residuals(pr, xi, yi)
        if st.polish:
            pol = _polish(pr, xi, yi)
            if pol is not None and pol[0] <= max(res.values()):
                _, xi, yi, res = pol
        kkt = max(res.values())
        ok = res["primal"] <= FEAS_TOL and kkt <= KKT_TOL
        if status[i] == 1 or ok:
            stat = OPTIMAL if ok else MAX_ITER
        else:
            stat = MAX_ITER
        lg = [v + pr.const for v in logs[i]]
        if log and ok:
            lg.append(min(lg[-1] if lg else np.inf, pr.objective(xi)))
        out.append(OrpfSolution(xi, pr.objective(xi), kkt, stat, yi, int(iters[i]), res, lg))
    return out


def solve(problem: OrpfProblem, settings: AdmmSettings | None = None,
          warm_start: OrpfSolution | None = None, log: bool = False) -> OrpfSolution:
    return solve_batch([problem], settings, None if warm_start is None else [warm_start], log)[0]


def grid_search(problem: OrpfProblem, step: float = 2e-3) -> tuple[np.ndarray, float]:
    """Brute-force minimizer over a regular grid of the box (C <= 2).

    Independent of the ADMM path; used as a test oracle.
    """
    C = problem.n
    if C > 2:
        raise InputError("grid search is limited to two generators")
    axes = [np.linspace(lo, hi, int(round((hi - lo) / step)) + 1) for lo, hi in zip(problem.q_min, problem.q_max)]
    mesh = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=1)
    V = mesh @ problem.A[C:].T
    ok = np.all((V >= problem.l[C:] - 1e-12) & (V <= problem.u[C:] + 1e-12), axis=1)
    if not np.any(ok):
        raise InputError("no feasible grid point")
    cand = mesh[ok]
    obj = 0.5 * np.einsum("bi,ij,bj->b", cand, problem.P, cand) + cand @ problem.c + problem.const
    k = int(np.argmin(obj))
    return cand[k], float(obj[k])
