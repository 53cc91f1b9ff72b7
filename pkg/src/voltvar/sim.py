"""Closed-loop simulation of the incremental Volt/Var rule.

Every agent applies ``q <- (1 - eps) q + eps h(q, v)`` using only its own
measurements.  Voltages come either from the linear model (``plant="linear"``)
or from the AC sweep solver (``plant="ac"``).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .acpf import AcPlant
from .errors import DimensionError, DivergenceError, DomainError, InputError, NonContractionError, NumericalError
from .gridmodel import FeederModel, SensitivityModel, generator_voltage
from .orpf import OPTIMAL, assemble_from_model, solve as solve_orpf
from .surrogate import SurrogateSet, certify

logger = logging.getLogger(__name__)

LINEAR = "linear"
AC = "ac"


@dataclass(eq=False)
class SimulationTrace:
    """States ``q[t]`` and measured voltages ``v[t]`` for ``t = 0..T``."""

    t: np.ndarray
    q: np.ndarray
    v: np.ndarray
    eps: float
    converged: bool
    final_residual: float
    nodes: tuple[int, ...] = ()
    distance_to_orpf: float | None = None
    windows: list = field(default_factory=list)
    plant: str = LINEAR

    @property
    def steps(self) -> int:
        return len(self.t) - 1

    def residuals(self) -> np.ndarray:
        """``||q[t+1] - q[t]||_inf`` for every step."""
        return np.max(np.abs(np.diff(self.q, axis=0)), axis=1) if self.steps else np.zeros(0)

    def rows(self):
        for k, t in enumerate(self.t):
            for j, bus in enumerate(self.nodes):
                yield int(t), bus, float(self.q[k, j]), float(self.v[k, j])

    def summary(self, regime: str | None = None) -> dict:
        d = {
            "converged": bool(self.converged),
            "steps": int(self.steps),
            "final_residual": float(self.final_residual),
            "distance_to_orpf": self.distance_to_orpf,
            "eps": float(self.eps),
            "regime": regime,
            "plant": self.plant,
        }
        if self.windows:
            d["windows"] = self.windows
            d["mean_window_distance"] = float(np.mean([w["distance_to_orpf"] for w in self.windows]))
        return d


def _check_eps(eps: float) -> None:
    if not 0.0 <= eps <= 1.0:
        raise DomainError(f"step size eps={eps} must lie in [0, 1]")


def _check_box(s: SurrogateSet, q: np.ndarray) -> None:
    if q.shape != (s.c,):
        raise DimensionError(f"q_C must have shape ({s.c},), got {q.shape}")
    if np.any(q < s.q_min) or np.any(q > s.q_max):
        raise DomainError("q_C lies outside the capability box")


def step(s: SurrogateSet, q_C, v_C, eps: float) -> np.ndarray:
    """One synchronous update of every agent."""
    _check_eps(eps)
    q_C = np.asarray(q_C, dtype=float)
    _check_box(s, q_C)
    q_next = (1.0 - eps) * q_C + eps * s.h(q_C, np.asarray(v_C, dtype=float))
    # a convex combination of box points stays in the box; clip only guards rounding
    return np.clip(q_next, s.q_min, s.q_max)


def g(s: SurrogateSet, sens: SensitivityModel, q_C, eps: float) -> np.ndarray:
    """Closed-loop map on the linear model."""
    return step(s, q_C, generator_voltage(sens, np.asarray(q_C, dtype=float)), eps)


def _inf(a) -> float:
    return float(np.max(np.abs(a), initial=0.0))


def run_closed_loop(s: SurrogateSet, model: FeederModel | None, sens: SensitivityModel, eps: float, q0,
                    plant: str = LINEAR, max_steps: int = 1000, tol: float = 1e-9,
                    injections: tuple | None = None, q_star=None, fixed_steps: bool = False,
                    _ac: AcPlant | None = None) -> SimulationTrace:
    """Iterate measurement and update until successive states agree within ``tol``.

    ``injections=(p, q_L)`` overrides the operating point of both the model
    and the sensitivity offsets.  With ``fixed_steps`` the run always lasts
    ``max_steps`` steps.  ``q_star`` (if given) sets ``distance_to_orpf``.
    """
    _check_eps(eps)
    q = np.array(q0, dtype=float)
    _check_box(s, q)
    p = q_L = None
    if injections is not None:
        p, q_L = (np.asarray(a, dtype=float) for a in injections)
        sens = sens.with_injections(p, q_L)
    if plant == LINEAR:
        measure = lambda qc: generator_voltage(sens, qc)  # noqa: E731
    elif plant == AC:
        if model is None:
            raise InputError("the AC plant needs the feeder model")
        ac = _ac or AcPlant(model)

        def measure(qc):
            return ac.generator_voltage(qc, p, q_L)
    else:
        raise InputError(f"unknown plant {plant!r}")

    qs, vs = [q], []
    converged = False
    residual = np.inf
    for k in range(max_steps):
        try:
            v = measure(q)
        except NumericalError as exc:
            raise DivergenceError(f"plant failed at step {k}: {exc}", step=k) from exc
        vs.append(v)
        q_next = step(s, q, v, eps)
        residual = _inf(q_next - q)
        qs.append(q_next)
        q = q_next
        if residual < tol and not fixed_steps:
            converged = True
            break
    else:
        converged = residual < tol
    vs.append(measure(q))
    Q = np.array(qs)
    trace = SimulationTrace(np.arange(len(Q)), Q, np.array(vs), float(eps), converged,
                            float(residual) if len(Q) > 1 else 0.0, tuple(s.nodes), plant=plant)
    if q_star is not None:
        trace.distance_to_orpf = float(np.linalg.norm(Q[-1] - np.asarray(q_star, dtype=float)))
    return trace


def find_fixed_point(s: SurrogateSet, sens: SensitivityModel, q0=None, tol: float = 1e-12,
                     max_iter: int = 200_000) -> tuple[np.ndarray, np.ndarray]:
    """Unique equilibrium ``(q, v)`` of a certified surrogate set on the linear model."""
    cert = certify(s, sens)
    if not cert.certified:
        raise NonContractionError(f"{s.regime} condition does not hold; equilibrium not guaranteed unique")
    eps = min(cert.eps_max, 1.0) * 0.99
    q = np.clip(np.zeros(s.c) if q0 is None else np.asarray(q0, dtype=float), s.q_min, s.q_max)
    best = np.inf
    stall = 0
    for _ in range(max_iter):
        q_next = g(s, sens, q, eps)
        r = _inf(q_next - q)
        q = q_next
        if r < tol:
            break
        if r < 0.999 * best:
            best, stall = r, 0
        else:
            stall += 1
            if stall > 5000:
                break
    v = generator_voltage(sens, q)
    fp_res = _inf(q - s.h(q, v))
    if fp_res > 1e-10:
        raise NonContractionError(f"fixed-point residual stagnated at {fp_res:.3e}")
    return q, v


def orpf_setpoint(model: FeederModel, sens: SensitivityModel, p=None, q_L=None) -> np.ndarray | None:
    sol = solve_orpf(assemble_from_model(model, sens, p, q_L))
    return sol.q_star if sol.status == OPTIMAL else None


def time_varying_run(s: SurrogateSet, model: FeederModel, sens: SensitivityModel, eps: float,
                     profiles: Sequence[tuple], steps_per_change: int, q0=None,
                     plant: str = LINEAR) -> SimulationTrace:
    """Apply the controller while the operating point changes every window.

    The controller state carries over between windows.  Each window logs the
    terminal distance to that window's ORPF setpoint.
    """
    if not profiles:
        raise InputError("profiles must be nonempty")
    q = np.clip(np.zeros(s.c) if q0 is None else np.asarray(q0, dtype=float), s.q_min, s.q_max)
    ac = AcPlant(model) if plant == AC else None
    Qs, Vs, windows = [], [], []
    t_off = 0
    last = None
    for w, (p, q_L) in enumerate(profiles):
        q_star = orpf_setpoint(model, sens, p, q_L)
        tr = run_closed_loop(s, model, sens, eps, q, plant, steps_per_change, 0.0,
                             injections=(p, q_L), q_star=q_star, fixed_steps=True, _ac=ac)
        start = 0 if w == 0 else 1
        Qs.append(tr.q[start:])
        Vs.append(tr.v[start:])
        windows.append({
            "window": w,
            "start": t_off,
            "final_residual": tr.final_residual,
            "distance_to_orpf": tr.distance_to_orpf,
        })
        t_off += tr.steps
        q = tr.q[-1]
        last = tr
    Q, V = np.vstack(Qs), np.vstack(Vs)
    out = SimulationTrace(np.arange(len(Q)), Q, V, float(eps), last.converged, last.final_residual,
                          tuple(s.nodes), last.distance_to_orpf, windows, plant)
    return out


def classify_divergence(trace: SimulationTrace, horizon: int = 200) -> bool:
    """True when the step residual never drops below its initial value within ``horizon`` steps."""
    r = trace.residuals()[:horizon]
    if len(r) < 2:
        return False
    return bool(np.all(r[1:] >= r[0]))
