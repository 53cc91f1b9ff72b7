"""Synthetic 37-bus radial feeder and daily load/solar profiles.

Stand-ins for field data: the feeder keeps the generator placements of the
two study cases, and the profiles are minute-resolution daily shapes
(double-peak residential load, bell-shaped solar) with multiplicative noise.
"""

from __future__ import annotations

import csv
import logging
from pathlib import Path

import numpy as np

from .errors import InfeasibleError, InputError
from .gridmodel import GENERATOR, LOAD, FeederModel, SensitivityModel, feeder_from_parents

logger = logging.getLogger(__name__)

CASE1_GENERATORS = (27, 31, 32, 34, 35)
CASE2_EXTRA = (6, 18, 28, 29, 33)
CASE_QMAX = {1: 0.4, 2: 0.2}

# parent of bus i (i = 1..36); long lateral 19..36 hosts most generators
PARENTS_37 = (
    0, 1, 2, 3, 3, 5, 5, 7, 8, 8, 10, 10, 12, 13, 13, 15, 15, 17,
    4, 19, 19, 21, 22, 23, 23, 25, 26, 26, 28, 29, 30, 31, 30, 33, 34, 35,
)


def case_generators(case: int) -> tuple[int, ...]:
    if case == 1:
        return CASE1_GENERATORS
    if case == 2:
        return tuple(sorted(CASE1_GENERATORS + CASE2_EXTRA))
    raise InputError(f"unknown case {case}; expected 1 or 2")


def synthetic_feeder(case: int = 1, seed: int = 0, r_range=(0.004, 0.010), x_range=(0.004, 0.010),
                     load_p_range=(0.02, 0.06), load_pf=0.95, solar_p: float | None = None,
                     v_limits=(0.95, 1.05)) -> FeederModel:
    """Deterministic 37-bus radial feeder for study case 1 or 2.

    Line impedances and nominal loads are drawn from the given ranges.  Load
    bus ``p``/``q`` are nominal peak consumption (negative injections);
    generator bus ``p`` is rated solar output (default half the reactive
    capability).
    """
    rng = np.random.default_rng(seed)
    gens = set(case_generators(case))
    n = len(PARENTS_37)
    kinds = [GENERATOR if i + 1 in gens else LOAD for i in range(n)]
    r = rng.uniform(*r_range, n)
    x = rng.uniform(*x_range, n)
    load = rng.uniform(*load_p_range, n)
    tan_phi = np.tan(np.arccos(load_pf))
    qmax = CASE_QMAX[case]
    sp = 0.5 * qmax if solar_p is None else solar_p
    p = np.where([k == LOAD for k in kinds], -load, sp)
    q = np.where([k == LOAD for k in kinds], -load * tan_phi, 0.0)
    return feeder_from_parents(PARENTS_37, r, x, kinds, p, q, box=(-qmax, qmax), v_limits=v_limits)


def load_shape(steps: int = 1440) -> np.ndarray:
    """Residential double-peak curve on ``[0.3, 1]`` over one day."""
    h = np.arange(steps) * 24.0 / steps
    s = 0.3 + 0.45 * np.exp(-((h - 8.0) / 1.8) ** 2) + 0.7 * np.exp(-((h - 19.0) / 2.2) ** 2)
    return s / s.max()


def solar_shape(steps: int = 1440, sunrise: float = 6.0, sunset: float = 20.0) -> np.ndarray:
    """Bell curve peaking at 13:00, truncated to zero outside daylight."""
    h = np.arange(steps) * 24.0 / steps
    s = np.exp(-((h - 13.0) / 2.6) ** 2)
    s[(h < sunrise) | (h > sunset)] = 0.0
    return s


def synthetic_profiles(model: FeederModel, steps: int = 1440, seed: int = 0, noise: float = 0.05,
                       sens: SensitivityModel | None = None, max_resample: int = 50):
    """Per-step ``(p, q_L)`` pairs scaled from the model's nominal injections.

    With ``sens`` given, steps whose ORPF is infeasible are redrawn (and
    logged) up to ``max_resample`` times.
    """
    rng = np.random.default_rng(seed)
    gi, li = model.gen_index, model.load_index
    p_nom, q_nom = model.p, model.q_load
    ls, ss = load_shape(steps), solar_shape(steps)

    def draw(k, size):
        u = rng.uniform(-noise, noise, (size, len(li)))
        P = np.zeros((size, model.n))
        P[:, li] = p_nom[li] * ls[k][:, None] * (1 + u)
        P[:, gi] = p_nom[gi] * ss[k][:, None] * (1 + rng.uniform(-noise, noise, (size, len(gi))))
        QL = q_nom * ls[k][:, None] * (1 + u)
        return P, QL

    idx = np.arange(steps)
    P, QL = draw(idx, steps)
    if sens is not None:
        from .orpf import INFEASIBLE, assemble_from_model, solve_batch

        for attempt in range(max_resample + 1):
            probs = [assemble_from_model(model, sens, P[k], QL[k]) for k in idx]
            bad = [k for k, s in zip(idx, solve_batch(probs)) if s.status == INFEASIBLE]
            if not bad:
                break
            if attempt == max_resample:
                raise InfeasibleError(f"{len(bad)} profile steps stay infeasible after resampling",
                                      scenario_id=int(bad[0]))
            logger.info("resampling %d infeasible profile steps", len(bad))
            idx = np.array(bad)
            P[idx], QL[idx] = draw(idx, len(idx))
    return [(P[k], QL[k]) for k in range(steps)]


PROFILE_HEADER = ["step", "bus", "p_pu", "q_pu"]


def write_profiles(path: str | Path, model: FeederModel, profiles) -> None:
    from .serialize import write_csv

    qpos = {b: i for i, b in enumerate(model.loads)}
    rows = []
    for k, (p, q_L) in enumerate(profiles):
        for b in range(1, model.n + 1):
            rows.append((k, b, float(p[b - 1]), float(q_L[qpos[b]]) if b in qpos else 0.0))
    write_csv(path, PROFILE_HEADER, rows)


def read_profiles(path: str | Path, model: FeederModel):
    """Parse ``step,bus,p_pu,q_pu``; every step must list every non-substation bus."""
    path = Path(path)
    data: dict[int, dict[int, tuple[float, float]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        for col in PROFILE_HEADER:
            if col not in header:
                raise InputError(f"{path}:1: missing column {col!r}")
        pos = {c: header.index(c) for c in PROFILE_HEADER}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                k, b = int(row[pos["step"]]), int(row[pos["bus"]])
                pv, qv = float(row[pos["p_pu"]]), float(row[pos["q_pu"]])
            except (ValueError, IndexError):
                raise InputError(f"{path}:{lineno}: malformed row") from None
            data.setdefault(k, {})[b] = (pv, qv)
    if not data:
        raise InputError(f"{path}: no profile rows")
    out = []
    for k in sorted(data):
        rec = data[k]
        if sorted(rec) != list(range(1, model.n + 1)):
            raise InputError(f"{path}: step {k} does not list buses 1..{model.n}")
        p = np.array([rec[b][0] for b in range(1, model.n + 1)])
        q_L = np.array([rec[b][1] for b in model.loads])
        out.append((p, q_L))
    return out
