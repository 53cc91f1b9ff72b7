"""Scenario generation, per-node datasets and constrained surrogate fitting."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DivergenceError, InfeasibleError, InputError
from .gridmodel import FeederModel, SensitivityModel, generator_voltage
from .orpf import INFEASIBLE, OPTIMAL, OrpfSolution, assemble_from_model, solve_batch
from .surrogate import (
    CVPSC,
    CVPSC_PHI_BUDGET,
    CVPSC_PSI_CAP,
    FREE,
    NONINCREASING,
    RPSC,
    RPSC_PSI_CAP,
    ScalarShapeFunction,
    SurrogateSet,
    _cap_output_weights,
    lipschitz_bound,
    normalize_regime,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Scenario:
    id: int
    step: int
    p: np.ndarray
    q_L: np.ndarray
    q_C_init: np.ndarray


@dataclass(frozen=True, eq=False)
class NodeDataset:
    node: int
    v: np.ndarray
    q: np.ndarray
    q_star: np.ndarray

    def __len__(self) -> int:
        return len(self.v)


def generate_scenarios(model: FeederModel, profile_source: Iterable[tuple], samples_per_step: int,
                       seed: int) -> list[Scenario]:
    """``samples_per_step`` uniform draws of ``q_C`` in the box for every profile step."""
    profiles = list(profile_source)
    if not profiles:
        raise InputError("profile source is empty")
    if samples_per_step < 0:
        raise InputError("samples_per_step must be nonnegative")
    rng = np.random.default_rng(seed)
    lo, hi = model.q_min, model.q_max
    out = []
    for k, (p, q_L) in enumerate(profiles):
        p = np.asarray(p, dtype=float)
        q_L = np.asarray(q_L, dtype=float)
        for _ in range(samples_per_step):
            out.append(Scenario(len(out), k, p, q_L, rng.uniform(lo, hi)))
    return out


def label_scenarios(model: FeederModel, sens: SensitivityModel,
                    scenarios: Sequence[Scenario]) -> tuple[np.ndarray, list[OrpfSolution]]:
    """Linear-model generator voltages at ``q_C_init`` and ORPF labels.

    Scenarios sharing a profile step share one ORPF solve.
    """
    if not scenarios:
        return np.zeros((0, sens.c)), []
    V = np.array([generator_voltage(sens.with_injections(s.p, s.q_L), s.q_C_init) for s in scenarios])
    keys: dict[int, int] = {}
    probs = []
    for s in scenarios:
        if s.step not in keys:
            keys[s.step] = len(probs)
            probs.append(assemble_from_model(model, sens, s.p, s.q_L))
    sols = solve_batch(probs)
    labels = [sols[keys[s.step]] for s in scenarios]
    for s, sol in zip(scenarios, labels):
        if sol.status == INFEASIBLE:
            raise InfeasibleError(f"ORPF infeasible for scenario {s.id}", scenario_id=s.id)
        if sol.status != OPTIMAL:
            logger.warning("scenario %d: ORPF stopped with status %s (kkt %.2e)", s.id, sol.status, sol.kkt_residual)
    return V, labels


def build_datasets(model: FeederModel, sens: SensitivityModel, scenarios: Sequence[Scenario]) -> list[NodeDataset]:
    V, labels = label_scenarios(model, sens, scenarios)
    return datasets_from_labels(model, scenarios, V, labels)


def datasets_from_labels(model, scenarios, V, labels) -> list[NodeDataset]:
    Q = np.array([s.q_C_init for s in scenarios]).reshape(len(scenarios), model.c)
    S = np.array([np.clip(l.q_star, model.q_min, model.q_max) for l in labels]).reshape(len(scenarios), model.c)
    return [NodeDataset(g, V[:, j].copy(), Q[:, j].copy(), S[:, j].copy()) for j, g in enumerate(model.generators)]


# --------------------------------------------------------------------------- fitting

@dataclass
class FitConfig:
    hidden_size: int = 20
    lr: float = 1e-2
    momentum: float = 0.9
    epochs: int = 5000
    seed: int = 0
    psi_cap: float | None = None
    phi_cap: float | None = None
    phi_only: bool = False
    v_scale: float = 20.0
    log_every: int = 1
    threads: int = 1


def regime_caps(regime: str, X_norm: float, cfg: FitConfig) -> tuple[float, float, str]:
    """Slope caps for psi and phi and phi's sign mode under ``regime``."""
    regime = normalize_regime(regime)
    if regime == CVPSC:
        psi_cap = CVPSC_PSI_CAP if cfg.psi_cap is None else cfg.psi_cap
        phi_cap = CVPSC_PHI_BUDGET / X_norm if cfg.phi_cap is None else cfg.phi_cap
        return psi_cap, phi_cap, FREE
    psi_cap = RPSC_PSI_CAP if cfg.psi_cap is None else cfg.psi_cap
    phi_cap = math.inf if cfg.phi_cap is None else cfg.phi_cap
    return psi_cap, phi_cap, NONINCREASING


@dataclass
class NodeModel:
    """Trainable parameters of one node, both functions in normalized inputs."""

    psi_in: np.ndarray
    psi_b: np.ndarray
    psi_out: np.ndarray
    phi_in: np.ndarray
    phi_b: np.ndarray
    phi_out: np.ndarray
    offset: float
    q_scale: float
    v_scale: float
    psi_cap: float
    phi_cap: float
    phi_mode: str
    train_psi: bool = True

    _NAMES = ("psi_in", "psi_b", "psi_out", "phi_in", "phi_b", "phi_out")

    def flat(self) -> np.ndarray:
        return np.concatenate([getattr(self, k) for k in self._NAMES] + [[self.offset]])

    def set_flat(self, theta: np.ndarray) -> None:
        H = len(self.psi_in)
        for i, k in enumerate(self._NAMES):
            setattr(self, k, theta[i * H:(i + 1) * H].copy())
        self.offset = float(theta[-1])

    def project(self) -> None:
        """Enforce sign pattern and slope caps in place; a no-op when feasible."""
        if self.phi_mode == NONINCREASING:
            self.phi_in = np.maximum(self.phi_in, 0.0)
            self.phi_out = np.minimum(self.phi_out, 0.0)
        self.phi_out = _cap_output_weights(self.phi_in, self.phi_out, self.v_scale, self.phi_cap)
        self.psi_out = _cap_output_weights(self.psi_in, self.psi_out, self.q_scale, self.psi_cap)

    def functions(self) -> tuple[ScalarShapeFunction, ScalarShapeFunction]:
        psi = ScalarShapeFunction(self.psi_in, self.psi_out, self.psi_b, 0.0, FREE, self.psi_cap,
                                  0.0, self.q_scale)
        phi = ScalarShapeFunction(self.phi_in, self.phi_out, self.phi_b, self.offset, self.phi_mode,
                                  self.phi_cap, 1.0, self.v_scale)
        return psi, phi


def init_node(ds: NodeDataset, q_max: float, cfg: FitConfig, psi_cap: float, phi_cap: float,
              phi_mode: str) -> NodeModel:
    """Seeded initialization shared by the full and the phi-only fits.

    phi draws come from their own stream so that both fits start from the
    same phi; psi starts with zero output weights.
    """
    H = cfg.hidden_size
    r_phi = np.random.default_rng([cfg.seed, ds.node, 1])
    r_psi = np.random.default_rng([cfg.seed, ds.node, 2])
    phi_in = r_phi.uniform(0.5, 2.0, H)
    phi_b = r_phi.uniform(-2.0, 2.0, H)
    phi_out = r_phi.normal(0.0, 0.01, H)
    if phi_mode != NONINCREASING:
        phi_in = phi_in * r_phi.choice([-1.0, 1.0], H)
    psi_in = r_psi.uniform(-2.0, 2.0, H)
    psi_b = r_psi.uniform(-2.0, 2.0, H)
    psi_out = np.zeros(H)
    q_scale = 1.0 / q_max if q_max > 0 else 1.0
    m = NodeModel(psi_in, psi_b, psi_out, phi_in, phi_b, phi_out, float(np.mean(ds.q_star)),
                  q_scale, cfg.v_scale, psi_cap, phi_cap, phi_mode, train_psi=not cfg.phi_only)
    if cfg.phi_only:
        m.psi_in = np.zeros(H)
        m.psi_b = np.zeros(H)
    m.project()
    return m


class _Workspace:
    """Reusable ``K x H`` buffers; fresh allocation per epoch dominates the run time."""

    def __init__(self, K: int, H: int):
        self.tq = np.empty((K, H))
        self.tv = np.empty((K, H))


def _hidden(x, w, b, out):
    np.multiply(x[:, None], w, out=out)
    out += b
    return np.tanh(out, out=out)


def loss_and_grad(theta: np.ndarray, ds: NodeDataset, q_scale: float, v_scale: float,
                  train_psi: bool = True, work: _Workspace | None = None) -> tuple[float, np.ndarray]:
    """Mean squared error of the unclamped output and its exact gradient."""
    H = (len(theta) - 1) // 6
    psi_in, psi_b, psi_out, phi_in, phi_b, phi_out = (theta[i * H:(i + 1) * H] for i in range(6))
    off = theta[-1]
    K = len(ds.q_star)
    work = work or _Workspace(K, H)
    xq = ds.q * q_scale
    xv = (ds.v - 1.0) * v_scale
    tv = _hidden(xv, phi_in, phi_b, work.tv)
    r = tv @ phi_out + off - ds.q_star
    if train_psi:
        tq = _hidden(xq, psi_in, psi_b, work.tq)
        r += tq @ psi_out
    loss = float(r @ r / K)
    d = 2.0 * r / K
    g_out_v = tv.T @ d
    # tanh' = 1 - t^2, formed in place
    np.square(tv, out=tv)
    np.subtract(1.0, tv, out=tv)
    g_phi = [phi_out * (tv.T @ (d * xv)), phi_out * (tv.T @ d), g_out_v]
    if train_psi:
        g_out_q = tq.T @ d
        np.square(tq, out=tq)
        np.subtract(1.0, tq, out=tq)
        g_psi = [psi_out * (tq.T @ (d * xq)), psi_out * (tq.T @ d), g_out_q]
    else:
        g_psi = [np.zeros(H)] * 3
    grad = np.concatenate(g_psi + g_phi + [[d.sum()]])
    return loss, grad


def _fit_node(ds: NodeDataset, q_max: float, cfg: FitConfig, caps, log: Callable | None):
    psi_cap, phi_cap, phi_mode = caps
    m = init_node(ds, q_max, cfg, psi_cap, phi_cap, phi_mode)
    theta = m.flat()
    vel = np.zeros_like(theta)
    best_loss, best_theta = math.inf, theta.copy()
    records = []
    work = _Workspace(len(ds.q_star), len(m.psi_in))
    for epoch in range(cfg.epochs + 1):
        loss, grad = loss_and_grad(theta, ds, m.q_scale, m.v_scale, m.train_psi, work)
        if not math.isfinite(loss):
            raise DivergenceError(f"node {ds.node}: loss became non-finite at epoch {epoch}; "
                                  "try a smaller step size")
        if loss < best_loss:
            best_loss, best_theta = loss, theta.copy()
        if epoch % cfg.log_every == 0 or epoch == cfg.epochs:
            psi, phi = m.functions()
            records.append({"epoch": epoch, "node": ds.node, "loss": loss,
                            "lipschitz_psi": lipschitz_bound(psi), "lipschitz_phi": lipschitz_bound(phi)})
        if epoch == cfg.epochs:
            break
        vel = cfg.momentum * vel - cfg.lr * grad
        theta = theta + vel
        m.set_flat(theta)
        m.project()
        theta = m.flat()
    m.set_flat(best_theta)
    return m, records


def fit(datasets: Sequence[NodeDataset], regime: str, hyper: FitConfig | None = None, *,
        X_norm: float, q_min, q_max, log: list | None = None) -> SurrogateSet:
    """Fit one ``(psi, phi)`` pair per node by projected momentum gradient descent.

    Every optimizer step is followed by the regime projection, so the
    returned set satisfies its slope and sign constraints exactly.  ``log``
    (if given) receives JSON-ready per-epoch records.
    """
    cfg = hyper or FitConfig()
    if not datasets or any(len(d) == 0 for d in datasets):
        raise InputError("datasets must be nonempty")
    regime = normalize_regime(regime)
    caps = regime_caps(regime, X_norm, cfg)
    q_min = np.asarray(q_min, dtype=float)
    q_max = np.asarray(q_max, dtype=float)
    scales = np.maximum(np.abs(q_min), np.abs(q_max))

    def work(j):
        return _fit_node(datasets[j], float(scales[j]), cfg, caps, None)

    if cfg.threads > 1:
        with ThreadPoolExecutor(cfg.threads) as ex:
            results = list(ex.map(work, range(len(datasets))))
    else:
        results = [work(j) for j in range(len(datasets))]
    psis, phis = [], []
    for m, recs in results:
        psi, phi = m.functions()
        psis.append(psi)
        phis.append(phi)
        if log is not None:
            log.extend(recs)
    s = SurrogateSet(tuple(d.node for d in datasets), psis, phis, regime, q_min, q_max,
                     meta={"phi_only": cfg.phi_only, "epochs": cfg.epochs, "lr": cfg.lr,
                           "momentum": cfg.momentum, "hidden_size": cfg.hidden_size, "seed": cfg.seed})
    return s


def training_loss(s: SurrogateSet, datasets: Sequence[NodeDataset]) -> float:
    """``1/(K C) sum_n sum_k |q*_n - h_n(q_n, v_n)|^2`` with the clamped output."""
    Q = np.stack([d.q for d in datasets], axis=1)
    V = np.stack([d.v for d in datasets], axis=1)
    S = np.stack([d.q_star for d in datasets], axis=1)
    H = np.array([s.h(q, v) for q, v in zip(Q, V)])
    return float(np.mean((S - H) ** 2))


def node_losses(s: SurrogateSet, datasets: Sequence[NodeDataset]) -> list[float]:
    Q = np.stack([d.q for d in datasets], axis=1)
    V = np.stack([d.v for d in datasets], axis=1)
    S = np.stack([d.q_star for d in datasets], axis=1)
    H = np.array([s.h(q, v) for q, v in zip(Q, V)])
    return [float(x) for x in np.mean((S - H) ** 2, axis=0)]
