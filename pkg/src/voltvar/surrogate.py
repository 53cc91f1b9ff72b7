"""Separable equilibrium functions and their stability certificates.

Each controllable bus ``n`` carries ``h_n(q, v) = clamp(psi_n(q) + phi_n(v))``
where ``psi_n`` and ``phi_n`` are single-hidden-layer tanh networks and the
clamp maps into the reactive capability box.  Slope caps and monotonicity are
enforced through the weights, so a certificate only needs the weights:

* CVP-SC: ``L_psi + L_phi * ||X|| < 1`` gives a global contraction for any
  step size in (0, 1];
* RP-SC: nonincreasing ``phi_n`` and ``L_psi < 1`` give a unique equilibrium,
  locally stable for ``eps < 2 / (L_psi + L_phi ||X|| + 1)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import DimensionError, DomainError, InputError, NonsmoothPointError, NumericalError
from .gridmodel import SensitivityModel

CVPSC = "CVP-SC"
RPSC = "RP-SC"
REGIMES = (CVPSC, RPSC)

FREE = "free"
NONINCREASING = "nonincreasing"

# CVP-SC default budget: psi slope + phi slope * ||X|| = 0.95
CVPSC_PSI_CAP = 0.45
CVPSC_PHI_BUDGET = 0.5
RPSC_PSI_CAP = 0.9


def normalize_regime(name: str) -> str:
    key = name.replace("-", "").replace("_", "").lower()
    for r in REGIMES:
        if r.replace("-", "").lower() == key:
            return r
    raise InputError(f"unknown regime {name!r}; expected one of {REGIMES}")


@dataclass(frozen=True, eq=False)
class ScalarShapeFunction:
    """``offset + sum_i w_out[i] * tanh(w_in[i] * (x - shift) * scale + b[i])``.

    ``shift`` and ``scale`` are the stored input normalization.  The slope
    bound ``sum |w_out * w_in| * scale`` is in the units of the raw input.
    """

    input_weights: np.ndarray
    output_weights: np.ndarray
    biases: np.ndarray
    offset: float = 0.0
    sign_mode: str = FREE
    slope_cap: float = math.inf
    shift: float = 0.0
    scale: float = 1.0
    activation: str = "tanh"

    def __post_init__(self):
        arrs = [np.array(getattr(self, k), dtype=float).reshape(-1)
                for k in ("input_weights", "output_weights", "biases")]
        if not (len(arrs[0]) == len(arrs[1]) == len(arrs[2])):
            raise DimensionError("weight vectors must share the hidden size")
        for k, a in zip(("input_weights", "output_weights", "biases"), arrs):
            if not np.all(np.isfinite(a)):
                raise InputError(f"{k} must be finite")
            a.setflags(write=False)
            object.__setattr__(self, k, a)
        if self.activation != "tanh":
            raise InputError(f"unsupported activation {self.activation!r}")
        if self.sign_mode not in (FREE, NONINCREASING):
            raise InputError(f"unknown sign_mode {self.sign_mode!r}")
        if not self.scale > 0:
            raise InputError("input scale must be positive")
        if not self.slope_cap >= 0:
            raise InputError("slope_cap must be nonnegative")
        object.__setattr__(self, "offset", float(self.offset))
        object.__setattr__(self, "slope_cap", float(self.slope_cap))

    @property
    def hidden_size(self) -> int:
        return len(self.input_weights)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        z = np.multiply.outer((x - self.shift) * self.scale, self.input_weights) + self.biases
        return self.offset + np.tanh(z) @ self.output_weights

    def derivative(self, x):
        """Closed-form derivative with respect to the raw input."""
        x = np.asarray(x, dtype=float)
        z = np.multiply.outer((x - self.shift) * self.scale, self.input_weights) + self.biases
        sech2 = 1.0 - np.tanh(z) ** 2
        return self.scale * (sech2 @ (self.output_weights * self.input_weights))

    def is_valid(self) -> bool:
        if lipschitz_bound(self) > self.slope_cap:
            return False
        if self.sign_mode == NONINCREASING:
            return bool(np.all(self.output_weights <= 0) and np.all(self.input_weights >= 0))
        return True

    def to_dict(self) -> dict:
        return {
            "hidden_size": self.hidden_size,
            "activation": self.activation,
            "input_weights": self.input_weights,
            "output_weights": self.output_weights,
            "biases": self.biases,
            "offset": self.offset,
            "sign_mode": self.sign_mode,
            "slope_cap": None if math.isinf(self.slope_cap) else self.slope_cap,
            "input_shift": self.shift,
            "input_scale": self.scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScalarShapeFunction":
        cap = d.get("slope_cap")
        return cls(
            np.array(d["input_weights"], dtype=float),
            np.array(d["output_weights"], dtype=float),
            np.array(d["biases"], dtype=float),
            float(d.get("offset", 0.0)),
            d.get("sign_mode", FREE),
            math.inf if cap is None else float(cap),
            float(d.get("input_shift", 0.0)),
            float(d.get("input_scale", 1.0)),
            d.get("activation", "tanh"),
        )

    @classmethod
    def zero(cls, hidden_size: int = 1, **kw) -> "ScalarShapeFunction":
        h = np.zeros(hidden_size)
        return cls(h, h, h, **kw)

    @classmethod
    def near_linear(cls, slope: float, center: float = 0.0, value: float = 0.0, width: float = 1e-4,
                    **kw) -> "ScalarShapeFunction":
        """One tanh unit approximating ``value + slope * (x - center)``.

        The Lipschitz bound equals ``|slope|`` exactly; the curvature error is
        ``O(slope * width^2 * (x - center)^3)``.
        """
        return cls(np.array([width]), np.array([slope / width]), np.array([0.0]), value, shift=center, **kw)


def project(f: ScalarShapeFunction) -> ScalarShapeFunction:
    """Nearest-in-spirit feasible function: sign clipping, then radial rescale.

    Leaves an already-feasible function untouched.
    """
    w_in, w_out = f.input_weights, f.output_weights
    if f.sign_mode == NONINCREASING and (np.any(w_in < 0) or np.any(w_out > 0)):
        w_in = np.maximum(w_in, 0.0)
        w_out = np.minimum(w_out, 0.0)
    w_out = _cap_output_weights(w_in, w_out, f.scale, f.slope_cap)
    if w_in is f.input_weights and w_out is f.output_weights:
        return f
    return replace(f, input_weights=w_in, output_weights=w_out)


def _cap_output_weights(w_in, w_out, scale, cap):
    bound = float(np.sum(np.abs(w_out * w_in)) * scale)
    if bound <= cap:
        return w_out
    w_out = w_out * (cap / bound)
    # rounding can leave the product a few ulps above the cap
    for _ in range(64):
        if float(np.sum(np.abs(w_out * w_in)) * scale) <= cap:
            return w_out
        w_out = np.nextafter(w_out, 0.0)
    return np.zeros_like(w_out)


def lipschitz_bound(f: ScalarShapeFunction) -> float:
    """Upper bound on the slope of ``f`` using ``|tanh'| <= 1``."""
    return float(np.sum(np.abs(f.output_weights * f.input_weights)) * f.scale)


def sampled_slope(f: ScalarShapeFunction, lo: float, hi: float, n: int = 1001,
                  include_peaks: bool = True) -> float:
    """Lower estimate of the Lipschitz constant from derivatives on a grid.

    Each unit's derivative peaks where its tanh argument is zero; those
    points are added to the grid when they fall inside ``[lo, hi]``.
    """
    xs = np.linspace(lo, hi, n)
    if include_peaks:
        nz = f.input_weights != 0
        with np.errstate(over="ignore", divide="ignore"):
            peaks = f.shift - f.biases[nz] / (f.input_weights[nz] * f.scale)
        xs = np.concatenate([xs, peaks[(peaks >= lo) & (peaks <= hi)]])
    return float(np.max(np.abs(f.derivative(xs)), initial=0.0))


def lipschitz_report(f: ScalarShapeFunction, lo: float, hi: float) -> tuple[float, float]:
    """``(certified upper bound, sampled lower estimate)`` on ``[lo, hi]``."""
    return lipschitz_bound(f), sampled_slope(f, lo, hi)


class _Stack:
    """Per-node weights padded into ``(C, H)`` arrays for vectorized evaluation."""

    def __init__(self, funcs: Sequence[ScalarShapeFunction]):
        H = max((f.hidden_size for f in funcs), default=0)
        C = len(funcs)
        self.w_in = np.zeros((C, H))
        self.w_out = np.zeros((C, H))
        self.b = np.zeros((C, H))
        for i, f in enumerate(funcs):
            k = f.hidden_size
            self.w_in[i, :k] = f.input_weights
            self.w_out[i, :k] = f.output_weights
            self.b[i, :k] = f.biases
        self.offset = np.array([f.offset for f in funcs], dtype=float)
        self.shift = np.array([f.shift for f in funcs], dtype=float)
        self.scale = np.array([f.scale for f in funcs], dtype=float)

    def value(self, x):
        z = ((x - self.shift) * self.scale)[:, None] * self.w_in + self.b
        return self.offset + np.sum(self.w_out * np.tanh(z), axis=1)

    def derivative(self, x):
        z = ((x - self.shift) * self.scale)[:, None] * self.w_in + self.b
        return self.scale * np.sum(self.w_out * self.w_in * (1.0 - np.tanh(z) ** 2), axis=1)


@dataclass(frozen=True, eq=False)
class SurrogateSet:
    """Per-generator ``(psi, phi)`` pairs with their regime and boxes."""

    nodes: tuple[int, ...]
    psi: tuple[ScalarShapeFunction, ...]
    phi: tuple[ScalarShapeFunction, ...]
    regime: str
    q_min: np.ndarray
    q_max: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(int(n) for n in self.nodes))
        object.__setattr__(self, "psi", tuple(self.psi))
        object.__setattr__(self, "phi", tuple(self.phi))
        object.__setattr__(self, "regime", normalize_regime(self.regime))
        C = len(self.nodes)
        if len(self.psi) != C or len(self.phi) != C:
            raise DimensionError("need one psi and one phi per node")
        q_min = np.array(self.q_min, dtype=float).reshape(-1)
        q_max = np.array(self.q_max, dtype=float).reshape(-1)
        if q_min.shape != (C,) or q_max.shape != (C,):
            raise DimensionError("boxes must have one entry per node")
        if np.any(q_min > q_max):
            raise InputError("empty reactive capability box")
        q_min.setflags(write=False)
        q_max.setflags(write=False)
        object.__setattr__(self, "q_min", q_min)
        object.__setattr__(self, "q_max", q_max)
        object.__setattr__(self, "_psi", _Stack(self.psi))
        object.__setattr__(self, "_phi", _Stack(self.phi))

    @property
    def c(self) -> int:
        return len(self.nodes)

    @property
    def L_psi(self) -> np.ndarray:
        return np.array([lipschitz_bound(f) for f in self.psi])

    @property
    def L_phi(self) -> np.ndarray:
        return np.array([lipschitz_bound(f) for f in self.phi])

    @property
    def L_psi_max(self) -> float:
        return float(np.max(self.L_psi, initial=0.0))

    @property
    def L_phi_max(self) -> float:
        return float(np.max(self.L_phi, initial=0.0))

    def raw(self, q, v) -> np.ndarray:
        """Unclamped ``psi(q) + phi(v)`` for C-vectors."""
        return self._psi.value(np.asarray(q, dtype=float)) + self._phi.value(np.asarray(v, dtype=float))

    def h(self, q, v) -> np.ndarray:
        """Stacked equilibrium functions, clamped into the boxes."""
        return np.clip(self.raw(q, v), self.q_min, self.q_max)

    def psi_prime(self, q) -> np.ndarray:
        return self._psi.derivative(np.asarray(q, dtype=float))

    def phi_prime(self, v) -> np.ndarray:
        return self._phi.derivative(np.asarray(v, dtype=float))

    def with_regime(self, regime: str) -> "SurrogateSet":
        return replace(self, regime=regime)

    def to_dict(self) -> dict:
        return {
            "regime": self.regime,
            "nodes": list(self.nodes),
            "q_min": self.q_min,
            "q_max": self.q_max,
            "L_psi_max": self.L_psi_max,
            "L_phi_max": self.L_phi_max,
            "functions": [
                {"node": n, "psi": f.to_dict(), "phi": g.to_dict()}
                for n, f, g in zip(self.nodes, self.psi, self.phi)
            ],
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SurrogateSet":
        fns = d["functions"]
        return cls(
            nodes=tuple(int(f["node"]) for f in fns),
            psi=tuple(ScalarShapeFunction.from_dict(f["psi"]) for f in fns),
            phi=tuple(ScalarShapeFunction.from_dict(f["phi"]) for f in fns),
            regime=d["regime"],
            q_min=np.array(d["q_min"], dtype=float),
            q_max=np.array(d["q_max"], dtype=float),
            meta=dict(d.get("meta", {})),
        )


def evaluate(f: ScalarShapeFunction, x: float) -> float:
    return float(f(float(x)))


def evaluate_h(s: SurrogateSet, n: int, q_n: float, v_n: float) -> float:
    """Equilibrium function of the ``n``-th node (position, not bus id)."""
    lo, hi = s.q_min[n], s.q_max[n]
    if not lo <= q_n <= hi:
        raise DomainError(f"q={q_n} outside [{lo}, {hi}] at node {s.nodes[n]}")
    val = float(s.psi[n](q_n)) + float(s.phi[n](v_n))
    return min(max(val, float(lo)), float(hi))


@dataclass(frozen=True)
class StabilityCertificate:
    regime: str
    L_psi_max: float
    L_phi_max: float
    X_norm: float
    c1_value: float
    c1_satisfied: bool
    c2_satisfied: bool
    eps_max: float
    jacobian_spectral_radius: float | None = None

    @property
    def certified(self) -> bool:
        return self.eps_max > 0

    def contraction_factor(self, eps: float) -> float:
        """Worst-case Lipschitz constant of the closed-loop map for step ``eps``."""
        return 1.0 - eps + eps * (self.L_psi_max + self.L_phi_max * self.X_norm)

    def to_dict(self) -> dict:
        return {
            "regime": self.regime,
            "L_psi_max": self.L_psi_max,
            "L_phi_max": self.L_phi_max,
            "X_norm": self.X_norm,
            "c1_value": self.c1_value,
            "c1_satisfied": self.c1_satisfied,
            "c2_satisfied": self.c2_satisfied,
            "eps_max": self.eps_max,
            "contraction_factor_at_eps_max": self.contraction_factor(self.eps_max),
            "jacobian_spectral_radius": self.jacobian_spectral_radius,
        }


def rpsc_eps_bound(L_psi: float, L_phi: float, X_norm: float) -> float:
    """Step-size bound ``2 / (L_psi + L_phi ||X|| + 1)`` before clamping to 1."""
    return 2.0 / (L_psi + L_phi * X_norm + 1.0)


def check_conditions(s: SurrogateSet, X_norm: float) -> tuple[float, bool, bool]:
    c1_value = s.L_psi_max + s.L_phi_max * X_norm
    c1 = c1_value < 1.0
    c2 = all(f.sign_mode == NONINCREASING and f.is_valid() for f in s.phi) and s.L_psi_max < 1.0
    return c1_value, c1, c2


def certify(s: SurrogateSet, sens: SensitivityModel | None = None, X_norm: float | None = None,
            q_eq=None, eps: float | None = None) -> StabilityCertificate:
    """Check the declared regime's condition and derive the admissible step range.

    When the declared regime's condition fails, ``eps_max`` is 0.  Pass
    ``q_eq`` (with ``sens``) to also record the Jacobian spectral radius at
    that equilibrium for step ``eps`` (default: ``0.99 * eps_max``).
    """
    if X_norm is None:
        if sens is None:
            raise InputError("need a sensitivity model or X_norm")
        X_norm = sens.X_norm
    c1_value, c1, c2 = check_conditions(s, X_norm)
    if s.regime == CVPSC:
        eps_max = 1.0 if c1 else 0.0
    else:
        eps_max = min(1.0, rpsc_eps_bound(s.L_psi_max, s.L_phi_max, X_norm)) if c2 else 0.0
    rho = None
    if q_eq is not None and sens is not None and eps_max > 0:
        rho = jacobian_spectral_radius(s, sens, q_eq, 0.99 * eps_max if eps is None else eps)
    return StabilityCertificate(s.regime, s.L_psi_max, s.L_phi_max, float(X_norm), float(c1_value),
                                bool(c1), bool(c2), float(eps_max), rho)


def closed_loop_jacobian(s: SurrogateSet, sens: SensitivityModel, q_eq, eps: float,
                         clamp_tol: float = 1e-12) -> np.ndarray:
    """``(1-eps) I + eps J_psi + eps J_phi X`` at an interior equilibrium."""
    q_eq = np.asarray(q_eq, dtype=float)
    if q_eq.shape != (s.c,):
        raise DimensionError(f"q_eq must have shape ({s.c},)")
    v_eq = sens.X @ q_eq + sens.v_hat_C
    raw = s.raw(q_eq, v_eq)
    span = s.q_max - s.q_min
    on_clamp = (raw <= s.q_min + clamp_tol * (1 + span)) | (raw >= s.q_max - clamp_tol * (1 + span))
    if np.any(on_clamp):
        bad = [s.nodes[i] for i in np.flatnonzero(on_clamp)]
        raise NonsmoothPointError(f"clamp active at nodes {bad}; Jacobian undefined")
    Jpsi = np.diag(s.psi_prime(q_eq))
    Jphi = np.diag(s.phi_prime(v_eq))
    return (1 - eps) * np.eye(s.c) + eps * Jpsi + eps * Jphi @ sens.X


def jacobian_spectral_radius(s: SurrogateSet, sens: SensitivityModel, q_eq, eps: float) -> float:
    """Spectral radius of the closed-loop Jacobian at ``q_eq``.

    When every ``phi'`` is negative the Jacobian is similar to a symmetric
    matrix, so its spectrum must be real; a violation raises.
    """
    J = closed_loop_jacobian(s, sens, q_eq, eps)
    lam = np.linalg.eigvals(J)
    v_eq = sens.X @ np.asarray(q_eq, dtype=float) + sens.v_hat_C
    if np.all(s.phi_prime(v_eq) < 0) and np.max(np.abs(lam.imag), initial=0.0) > 1e-8:
        raise NumericalError("complex eigenvalues where the spectrum must be real")
    return float(np.max(np.abs(lam), initial=0.0))
