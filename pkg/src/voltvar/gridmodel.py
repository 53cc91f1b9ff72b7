"""Radial feeder model, bus admittance matrix and linear voltage sensitivities.

Buses are numbered ``0..N`` with bus 0 the substation.  Vectors indexed by
"bus order" have length N and follow bus ids ``1..N``.  Generator and load
quantities follow ascending bus id inside their own group, which is the
partition order used by every block matrix here.
"""

from __future__ import annotations

import csv
import logging
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DimensionError,
    InputError,
    ModelInvalidError,
    NumericalRankError,
    SingularLineError,
    TopologyError,
)

logger = logging.getLogger(__name__)

SUBSTATION = "substation"
GENERATOR = "generator"
LOAD = "load"
_KINDS = (SUBSTATION, GENERATOR, LOAD)

# smallest admissible eigenvalue of R and X, relative to the largest
PD_REL_TOL = 1e-10


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str
    p: float = 0.0
    q: float = 0.0


@dataclass(frozen=True)
class Line:
    src: int
    dst: int
    r: float
    x: float

    @property
    def admittance(self) -> complex:
        z = complex(self.r, self.x)
        if z == 0:
            raise SingularLineError(f"line {self.src}-{self.dst} has zero impedance")
        return 1.0 / z


@dataclass(frozen=True, eq=False)
class FeederModel:
    """Balanced single-phase equivalent of a radial distribution feeder.

    ``v_min``/``v_max`` are N-vectors in bus order.  ``q_box`` maps each
    generator bus id to its ``(q_min, q_max)`` reactive capability.
    """

    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    v_min: np.ndarray
    v_max: np.ndarray
    q_box: dict[int, tuple[float, float]]
    mva_base: float = 1.0
    _parent: tuple[int, ...] = field(default=(), repr=False, compare=False)
    _order: tuple[int, ...] = field(default=(), repr=False, compare=False)

    def __post_init__(self):
        buses = tuple(sorted(self.buses, key=lambda b: b.id))
        object.__setattr__(self, "buses", buses)
        object.__setattr__(self, "lines", tuple(self.lines))
        n = len(buses) - 1
        ids = [b.id for b in buses]
        if ids != list(range(n + 1)):
            raise InputError(f"bus ids must be 0..{n} without gaps, got {ids}")
        for b in buses:
            if b.kind not in _KINDS:
                raise InputError(f"bus {b.id}: unknown kind {b.kind!r}")
        subs = [b.id for b in buses if b.kind == SUBSTATION]
        if subs != [0]:
            raise InputError(f"exactly one substation labeled 0 is required, got {subs}")

        v_min = np.array(self.v_min, dtype=float).reshape(-1)
        v_max = np.array(self.v_max, dtype=float).reshape(-1)
        if v_min.shape != (n,) or v_max.shape != (n,):
            raise DimensionError(f"voltage limits must have length {n}")
        if not np.all(v_min < v_max):
            bad = int(np.argmin(v_max - v_min)) + 1
            raise InputError(f"bus {bad}: v_min must be below v_max")
        v_min.setflags(write=False)
        v_max.setflags(write=False)
        object.__setattr__(self, "v_min", v_min)
        object.__setattr__(self, "v_max", v_max)

        gens = [b.id for b in buses if b.kind == GENERATOR]
        box = {int(k): (float(lo), float(hi)) for k, lo, hi in
               ((k, *v) for k, v in self.q_box.items())}
        if sorted(box) != gens:
            raise InputError(f"q_box keys {sorted(box)} do not match generator buses {gens}")
        for k, (lo, hi) in box.items():
            if not lo <= hi:
                raise InputError(f"generator {k}: q_min {lo} exceeds q_max {hi}")
        object.__setattr__(self, "q_box", box)

        for ln in self.lines:
            if complex(ln.r, ln.x) == 0:
                raise SingularLineError(f"line {ln.src}-{ln.dst} has zero impedance")
            if ln.r < 0 or not ln.x > 0:
                raise InputError(f"line {ln.src}-{ln.dst}: need r >= 0 and x > 0")
        parent, order = _tree_structure(n + 1, self.lines)
        object.__setattr__(self, "_parent", parent)
        object.__setattr__(self, "_order", order)

    @property
    def n(self) -> int:
        """Number of non-substation buses."""
        return len(self.buses) - 1

    @property
    def generators(self) -> tuple[int, ...]:
        return tuple(b.id for b in self.buses if b.kind == GENERATOR)

    @property
    def loads(self) -> tuple[int, ...]:
        return tuple(b.id for b in self.buses if b.kind == LOAD)

    @property
    def c(self) -> int:
        return len(self.generators)

    @property
    def gen_index(self) -> np.ndarray:
        """Positions of generator buses inside bus-order vectors."""
        return np.array(self.generators, dtype=int) - 1

    @property
    def load_index(self) -> np.ndarray:
        return np.array(self.loads, dtype=int) - 1

    @property
    def p(self) -> np.ndarray:
        return np.array([b.p for b in self.buses[1:]], dtype=float)

    @property
    def q_load(self) -> np.ndarray:
        return np.array([self.buses[i].q for i in self.loads], dtype=float)

    @property
    def q_min(self) -> np.ndarray:
        return np.array([self.q_box[g][0] for g in self.generators], dtype=float)

    @property
    def q_max(self) -> np.ndarray:
        return np.array([self.q_box[g][1] for g in self.generators], dtype=float)

    @property
    def parent(self) -> tuple[int, ...]:
        """Parent bus of every bus (``-1`` for the substation)."""
        return self._parent

    @property
    def bfs_order(self) -> tuple[int, ...]:
        """Buses in breadth-first order from the substation."""
        return self._order

    def line_to(self, bus: int) -> Line:
        """The line connecting ``bus`` to its parent."""
        for ln in self.lines:
            if {ln.src, ln.dst} == {bus, self._parent[bus]}:
                return ln
        raise TopologyError(f"bus {bus} has no parent line")

    def with_injections(self, p: Sequence[float], q_load: Sequence[float]) -> "FeederModel":
        """Copy with bus-order active injections ``p`` and load reactive ``q_load``."""
        p = np.asarray(p, dtype=float)
        q_load = np.asarray(q_load, dtype=float)
        if p.shape != (self.n,) or q_load.shape != (len(self.loads),):
            raise DimensionError("injection vectors do not match the feeder")
        qmap = dict(zip(self.loads, q_load))
        buses = [self.buses[0]] + [
            replace(b, p=float(p[b.id - 1]), q=float(qmap.get(b.id, b.q))) for b in self.buses[1:]
        ]
        return FeederModel(buses, self.lines, self.v_min, self.v_max, self.q_box, self.mva_base)


def _tree_structure(n_nodes: int, lines: Sequence[Line]) -> tuple[tuple[int, ...], tuple[int, ...]]:
    if len(lines) != n_nodes - 1:
        raise TopologyError(f"a spanning tree over {n_nodes} buses needs {n_nodes - 1} lines, got {len(lines)}")
    adj: list[list[int]] = [[] for _ in range(n_nodes)]
    for ln in lines:
        for a in (ln.src, ln.dst):
            if not 0 <= a < n_nodes:
                raise TopologyError(f"line {ln.src}-{ln.dst} references unknown bus {a}")
        if ln.src == ln.dst:
            raise TopologyError(f"self-loop at bus {ln.src}")
        adj[ln.src].append(ln.dst)
        adj[ln.dst].append(ln.src)
    parent = [-2] * n_nodes
    parent[0] = -1
    order = []
    queue = deque([0])
    while queue:
        u = queue.popleft()
        order.append(u)
        for w in sorted(adj[u]):
            if parent[w] == -2:
                parent[w] = u
                queue.append(w)
    missing = [i for i in range(n_nodes) if parent[i] == -2]
    if missing:
        raise TopologyError(f"feeder is disconnected; unreachable buses {missing}")
    return tuple(parent), tuple(order)


def build_admittance(model: FeederModel) -> np.ndarray:
    """Bus admittance matrix of shape ``(N+1, N+1)``, shunts neglected."""
    size = model.n + 1
    Y = np.zeros((size, size), dtype=complex)
    for ln in model.lines:
        y = ln.admittance
        Y[ln.src, ln.dst] -= y
        Y[ln.dst, ln.src] -= y
        Y[ln.src, ln.src] += y
        Y[ln.dst, ln.dst] += y
    return Y


@dataclass(frozen=True, eq=False)
class SensitivityModel:
    """Linearized voltage sensitivities of a feeder at a fixed operating point.

    ``Rtilde``/``Xtilde`` are in bus order; the blocks ``R, X`` (generator x
    generator), ``R_L, X_L`` (generator x load) and ``R_LL, X_LL`` (load x load)
    follow the partition order.  ``v_hat`` is the bus-order voltage obtained
    with zero generator reactive injection.
    """

    Rtilde: np.ndarray
    Xtilde: np.ndarray
    gen_index: np.ndarray
    load_index: np.ndarray
    v_hat: np.ndarray
    gen_ids: tuple[int, ...] = ()
    load_ids: tuple[int, ...] = ()

    def __post_init__(self):
        for name in ("Rtilde", "Xtilde", "gen_index", "load_index", "v_hat"):
            a = np.array(getattr(self, name))
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        c, l = self.gen_index, self.load_index
        blocks = {
            "R": self.Rtilde[np.ix_(c, c)], "X": self.Xtilde[np.ix_(c, c)],
            "R_L": self.Rtilde[np.ix_(c, l)], "X_L": self.Xtilde[np.ix_(c, l)],
            "R_LL": self.Rtilde[np.ix_(l, l)], "X_LL": self.Xtilde[np.ix_(l, l)],
        }
        for k, v in blocks.items():
            v = np.ascontiguousarray(v)
            v.setflags(write=False)
            object.__setattr__(self, k, v)
        object.__setattr__(self, "X_norm", float(np.linalg.eigvalsh(self.X)[-1]) if len(c) else 0.0)

    R: np.ndarray = field(init=False, repr=False)
    X: np.ndarray = field(init=False, repr=False)
    R_L: np.ndarray = field(init=False, repr=False)
    X_L: np.ndarray = field(init=False, repr=False)
    R_LL: np.ndarray = field(init=False, repr=False)
    X_LL: np.ndarray = field(init=False, repr=False)
    X_norm: float = field(init=False)

    @property
    def n(self) -> int:
        return self.Rtilde.shape[0]

    @property
    def c(self) -> int:
        return len(self.gen_index)

    @property
    def v_hat_C(self) -> np.ndarray:
        return self.v_hat[self.gen_index]

    @property
    def v_hat_L(self) -> np.ndarray:
        return self.v_hat[self.load_index]

    def offsets(self, p: np.ndarray, q_L: np.ndarray) -> np.ndarray:
        """Bus-order ``v_hat`` for active injections ``p`` and load reactive ``q_L``.

        Accepts stacked inputs of shape ``(K, N)`` and ``(K, N-C)``.
        """
        p = np.asarray(p, dtype=float)
        q_L = np.asarray(q_L, dtype=float)
        if p.shape[-1] != self.n or q_L.shape[-1] != len(self.load_index):
            raise DimensionError(f"p must have {self.n} and q_L {len(self.load_index)} trailing entries")
        XL_cols = self.Xtilde[:, self.load_index]
        return q_L @ XL_cols.T + p @ self.Rtilde.T + 1.0

    def with_injections(self, p, q_L) -> "SensitivityModel":
        return replace(self, v_hat=self.offsets(p, q_L))

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "generators": list(self.gen_ids),
            "loads": list(self.load_ids),
            "Rtilde": self.Rtilde,
            "Xtilde": self.Xtilde,
            "v_hat": self.v_hat,
            "X_norm": self.X_norm,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SensitivityModel":
        gens = tuple(int(g) for g in d["generators"])
        loads = tuple(int(b) for b in d["loads"])
        return cls(
            Rtilde=np.array(d["Rtilde"], dtype=float).reshape(d["n"], d["n"]),
            Xtilde=np.array(d["Xtilde"], dtype=float).reshape(d["n"], d["n"]),
            gen_index=np.array(gens, dtype=int) - 1,
            load_index=np.array(loads, dtype=int) - 1,
            v_hat=np.array(d["v_hat"], dtype=float),
            gen_ids=gens,
            load_ids=loads,
        )


def _check_pd(name: str, M: np.ndarray) -> float:
    if M.size == 0:
        return np.inf
    eig = np.linalg.eigvalsh(M)
    if not eig[0] > PD_REL_TOL * eig[-1] or eig[-1] <= 0:
        raise ModelInvalidError(
            f"{name} is not positive definite (smallest eigenvalue {eig[0]:.3e})", float(eig[0])
        )
    return float(eig[0])


def build_sensitivity(model: FeederModel) -> SensitivityModel:
    """Invert the reduced admittance matrix and partition the result.

    Raises :class:`ModelInvalidError` when R or X is not positive definite.
    """
    Y = build_admittance(model)[1:, 1:]
    if np.linalg.cond(Y) > 1.0 / np.finfo(float).eps:
        raise NumericalRankError("reduced admittance matrix is singular to working precision")
    Z = np.linalg.inv(Y)
    # symmetrize away LU round-off so downstream eigensolvers see exact symmetry
    Z = 0.5 * (Z + Z.T)
    sens = SensitivityModel(
        Rtilde=Z.real.copy(),
        Xtilde=Z.imag.copy(),
        gen_index=model.gen_index,
        load_index=model.load_index,
        v_hat=np.zeros(model.n),
        gen_ids=model.generators,
        load_ids=model.loads,
    )
    _check_pd("R", sens.R)
    _check_pd("X", sens.X)
    return sens.with_injections(model.p, model.q_load)


def pd_margins(sens: SensitivityModel) -> dict[str, float]:
    """Smallest eigenvalues of R and X, for reporting."""
    return {"R_min_eig": _check_pd("R", sens.R), "X_min_eig": _check_pd("X", sens.X)}


def linear_voltage(sens: SensitivityModel, q_C) -> np.ndarray:
    """Bus-order voltages under the linear model for generator injections ``q_C``."""
    q_C = np.asarray(q_C, dtype=float)
    if q_C.shape != (sens.c,):
        raise DimensionError(f"q_C must have shape ({sens.c},), got {q_C.shape}")
    v = np.empty(sens.n)
    v[sens.gen_index] = generator_voltage(sens, q_C)
    v[sens.load_index] = sens.X_L.T @ q_C + sens.v_hat_L
    return v


def generator_voltage(sens: SensitivityModel, q_C: np.ndarray) -> np.ndarray:
    """``X q_C + v_hat_C``; the closed loop and :func:`linear_voltage` share this."""
    return sens.X @ q_C + sens.v_hat_C


def path_reactance_matrix(model: FeederModel, attr: str = "x") -> np.ndarray:
    """Brute-force ``sum of line parameters on the common root path`` matrix.

    Independent of the admittance inversion; used to cross-check it.
    """
    n = model.n
    paths = []
    for b in range(1, n + 1):
        edges = set()
        u = b
        while u != 0:
            edges.add((min(u, model.parent[u]), max(u, model.parent[u])))
            u = model.parent[u]
        paths.append(edges)
    val = {(min(l.src, l.dst), max(l.src, l.dst)): getattr(l, attr) for l in model.lines}
    M = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            M[i, j] = sum(val[e] for e in paths[i] & paths[j])
    return M


# --------------------------------------------------------------------------- I/O

LINE_HEADER = ["from", "to", "r_pu", "x_pu"]
BUS_HEADER = ["id", "kind", "p_pu", "q_pu", "qmin_pu", "qmax_pu", "vmin_pu", "vmax_pu"]


def _read_table(path: Path, header: list[str]) -> list[tuple[int, dict[str, str]]]:
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            got = [h.strip() for h in next(reader)]
        except StopIteration:
            raise InputError(f"{path}: empty file") from None
        for col in header:
            if col not in got:
                raise InputError(f"{path}:1: missing column {col!r}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(got):
                raise InputError(f"{path}:{lineno}: expected {len(got)} fields, got {len(row)}")
            rows.append((lineno, {k: v.strip() for k, v in zip(got, row)}))
    return rows


def _num(path, lineno, rec, key, default=None):
    s = rec.get(key, "")
    if s == "":
        if default is None:
            raise InputError(f"{path}:{lineno}: column {key!r} is blank")
        return default
    try:
        return float(s)
    except ValueError:
        raise InputError(f"{path}:{lineno}: column {key!r} is not a number: {s!r}") from None


def read_feeder(lines_csv: str | Path, buses_csv: str | Path, mva_base: float = 1.0) -> FeederModel:
    """Parse the two-table feeder format.  Errors name file, line and column."""
    lines_csv, buses_csv = Path(lines_csv), Path(buses_csv)
    lines = []
    for lineno, rec in _read_table(lines_csv, LINE_HEADER):
        try:
            a, b = int(rec["from"]), int(rec["to"])
        except ValueError:
            raise InputError(f"{lines_csv}:{lineno}: bus ids must be integers") from None
        lines.append(Line(a, b, _num(lines_csv, lineno, rec, "r_pu"), _num(lines_csv, lineno, rec, "x_pu")))
    buses, box, vlim = [], {}, {}
    for lineno, rec in _read_table(buses_csv, BUS_HEADER):
        try:
            bid = int(rec["id"])
        except ValueError:
            raise InputError(f"{buses_csv}:{lineno}: column 'id' must be an integer") from None
        kind = rec["kind"]
        if kind not in _KINDS:
            raise InputError(f"{buses_csv}:{lineno}: column 'kind' has unknown value {kind!r}")
        buses.append(Bus(bid, kind, _num(buses_csv, lineno, rec, "p_pu", 0.0), _num(buses_csv, lineno, rec, "q_pu", 0.0)))
        if kind == GENERATOR:
            box[bid] = (_num(buses_csv, lineno, rec, "qmin_pu"), _num(buses_csv, lineno, rec, "qmax_pu"))
        if kind != SUBSTATION:
            vlim[bid] = (_num(buses_csv, lineno, rec, "vmin_pu"), _num(buses_csv, lineno, rec, "vmax_pu"))
    n = len(buses) - 1
    missing = [i for i in range(1, n + 1) if i not in vlim]
    if missing:
        raise InputError(f"{buses_csv}: no voltage limits for buses {missing}")
    v_min = [vlim[i][0] for i in range(1, n + 1)]
    v_max = [vlim[i][1] for i in range(1, n + 1)]
    return FeederModel(tuple(buses), tuple(lines), v_min, v_max, box, mva_base)


def write_feeder(model: FeederModel, lines_csv: str | Path, buses_csv: str | Path) -> None:
    from .serialize import fmt_float, write_csv

    write_csv(lines_csv, LINE_HEADER, [(l.src, l.dst, float(l.r), float(l.x)) for l in model.lines])
    rows = []
    for b in model.buses:
        lo, hi = model.q_box.get(b.id, (None, None))
        vmin = "" if b.id == 0 else fmt_float(model.v_min[b.id - 1])
        vmax = "" if b.id == 0 else fmt_float(model.v_max[b.id - 1])
        rows.append((
            b.id, b.kind, float(b.p), float(b.q),
            "" if lo is None else fmt_float(lo), "" if hi is None else fmt_float(hi), vmin, vmax,
        ))
    write_csv(buses_csv, BUS_HEADER, rows)


def single_line_feeder(r: float = 0.1, x: float = 0.2, p: float = 0.0, kind: str = GENERATOR,
                       q: float = 0.0, box=(-0.4, 0.4), v_limits=(0.95, 1.05)) -> FeederModel:
    """Two-bus feeder; handy for worked examples and tests."""
    buses = (Bus(0, SUBSTATION), Bus(1, kind, p, q))
    q_box = {1: box} if kind == GENERATOR else {}
    return FeederModel(buses, (Line(0, 1, r, x),), [v_limits[0]], [v_limits[1]], q_box)


def feeder_from_parents(parents: Iterable[int], r, x, kinds, p=None, q=None, box=(-0.4, 0.4),
                        v_limits=(0.95, 1.05)) -> FeederModel:
    """Build a feeder where bus ``i+1`` hangs off ``parents[i]``."""
    parents = list(parents)
    n = len(parents)
    r = np.broadcast_to(np.asarray(r, dtype=float), (n,))
    x = np.broadcast_to(np.asarray(x, dtype=float), (n,))
    p = np.zeros(n) if p is None else np.asarray(p, dtype=float)
    q = np.zeros(n) if q is None else np.asarray(q, dtype=float)
    buses = [Bus(0, SUBSTATION)] + [Bus(i + 1, kinds[i], float(p[i]), float(q[i])) for i in range(n)]
    lines = [Line(parents[i], i + 1, float(r[i]), float(x[i])) for i in range(n)]
    gens = [i + 1 for i in range(n) if kinds[i] == GENERATOR]
    boxes = box if isinstance(box, dict) else {g: tuple(box) for g in gens}
    return FeederModel(tuple(buses), tuple(lines), [v_limits[0]] * n, [v_limits[1]] * n, boxes)
