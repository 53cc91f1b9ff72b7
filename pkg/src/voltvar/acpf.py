"""Exact AC power flow for radial feeders by backward/forward sweep."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, DivergenceError, InfeasibleError
from .gridmodel import FeederModel, build_admittance

logger = logging.getLogger(__name__)

MISMATCH_TOL = 1e-8
UPDATE_TOL = 1e-10
COLLAPSE_VOLTAGE = 0.5


@dataclass(frozen=True, eq=False)
class AcSolution:
    v_mag: np.ndarray
    v_ang: np.ndarray
    iterations: int
    max_mismatch: float

    @property
    def voltage(self) -> np.ndarray:
        """Complex bus voltages, substation included."""
        return self.v_mag * np.exp(1j * self.v_ang)


class _Sweep:
    """Precomputed tree arrays; reused across solves on the same feeder."""

    def __init__(self, model: FeederModel):
        self.model = model
        order = np.array(model.bfs_order[1:], dtype=int)
        self.order = order
        self.parent = np.array(model.parent, dtype=int)
        z = np.zeros(model.n + 1, dtype=complex)
        for ln in model.lines:
            child = ln.dst if model.parent[ln.dst] == ln.src else ln.src
            z[child] = complex(ln.r, ln.x)
        self.z = z
        self.Y = build_admittance(model)


def injections(model: FeederModel, q_C, p=None, q_L=None) -> np.ndarray:
    """Complex power injections for buses ``0..N`` (entry 0 unused)."""
    q_C = np.asarray(q_C, dtype=float)
    if q_C.shape != (model.c,):
        raise DimensionError(f"q_C must have shape ({model.c},), got {q_C.shape}")
    p = model.p if p is None else np.asarray(p, dtype=float)
    q_L = model.q_load if q_L is None else np.asarray(q_L, dtype=float)
    if p.shape != (model.n,) or q_L.shape != (len(model.loads),):
        raise DimensionError("p or q_L does not match the feeder")
    q = np.empty(model.n)
    q[model.gen_index] = q_C
    q[model.load_index] = q_L
    s = np.zeros(model.n + 1, dtype=complex)
    s[1:] = p + 1j * q
    if not np.all(np.isfinite(s)):
        raise DimensionError("injections must be finite")
    return s


def power_mismatch(Y: np.ndarray, V: np.ndarray, S: np.ndarray) -> float:
    """Largest complex-power mismatch over the non-substation buses."""
    S_calc = V * np.conj(Y @ V)
    return float(np.max(np.abs(S_calc[1:] - S[1:]), initial=0.0))


def solve_ac(model: FeederModel, q_C, p=None, q_L=None, v0=None, max_iter: int = 100,
             tol: float = MISMATCH_TOL, _sweep: _Sweep | None = None) -> AcSolution:
    """Solve the balanced AC power flow with the substation fixed at 1 p.u.

    ``p`` and ``q_L`` default to the feeder's own bus data.  ``v0`` is an
    optional complex warm start (length N+1); flat start otherwise.
    """
    sw = _sweep or _Sweep(model)
    S = injections(model, q_C, p, q_L)
    V = np.ones(model.n + 1, dtype=complex) if v0 is None else np.array(v0, dtype=complex)
    V[0] = 1.0
    children_first = sw.order[::-1]
    mismatch = np.inf
    for it in range(1, max_iter + 1):
        I_inj = np.conj(S / V)
        J = np.zeros_like(V)
        J[1:] = -I_inj[1:]
        for b in children_first:
            if sw.parent[b] != 0:
                J[sw.parent[b]] += J[b]
        V_new = V.copy()
        for b in sw.order:
            V_new[b] = V_new[sw.parent[b]] - sw.z[b] * J[b]
        step = float(np.max(np.abs(V_new - V)))
        V = V_new
        if np.min(np.abs(V[1:]), initial=np.inf) < COLLAPSE_VOLTAGE or not np.all(np.isfinite(V)):
            raise InfeasibleError(f"voltage collapse at sweep {it} (|v| < {COLLAPSE_VOLTAGE})")
        mismatch = power_mismatch(sw.Y, V, S)
        if step < UPDATE_TOL and mismatch < tol:
            return AcSolution(np.abs(V), np.angle(V), it, mismatch)
    raise DivergenceError(f"sweep did not converge in {max_iter} iterations", last_mismatch=mismatch)


class AcPlant:
    """Stateful wrapper used by the closed-loop simulator (warm starts)."""

    def __init__(self, model: FeederModel, max_iter: int = 100):
        self.model = model
        self.max_iter = max_iter
        self._sweep = _Sweep(model)
        self._last: np.ndarray | None = None

    def solve(self, q_C, p=None, q_L=None) -> AcSolution:
        sol = solve_ac(self.model, q_C, p, q_L, v0=self._last, max_iter=self.max_iter, _sweep=self._sweep)
        self._last = sol.voltage
        return sol

    def generator_voltage(self, q_C, p=None, q_L=None) -> np.ndarray:
        sol = self.solve(q_C, p, q_L)
        return sol.v_mag[np.array(self.model.generators, dtype=int)]
