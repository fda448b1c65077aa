"""Solver-agnostic conic programs and the interior-point backend.

Every variable is stored in a shifted and scaled form: the solver sees
``xbar`` and the modeled quantity is ``offset + scale * xbar``. Builders set
the offset to the current iterate, so ``xbar = 0`` is the expansion point and
the objective's variable part measures the improvement over it. This keeps
the numbers the solver works with of order one even though SINRs span many
decades.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import clarabel
import numpy as np
import scipy.sparse as sp

STATUSES = ("optimal", "infeasible", "numerical_failure", "iteration_limit")
RESIDUAL_TOL = 1e-7


class Affine:
    """Dense affine expression coef @ xbar + const over the solver variables."""

    __slots__ = ("coef", "const")

    def __init__(self, coef: np.ndarray, const: float = 0.0):
        self.coef = coef
        self.const = float(const)

    def __add__(self, other):
        if isinstance(other, Affine):
            return Affine(self.coef + other.coef, self.const + other.const)
        return Affine(self.coef, self.const + float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Affine):
            return Affine(self.coef - other.coef, self.const - other.const)
        return Affine(self.coef, self.const - float(other))

    def __rsub__(self, other):
        return Affine(-self.coef, float(other) - self.const)

    def __mul__(self, c):
        c = float(c)
        return Affine(self.coef * c, self.const * c)

    __rmul__ = __mul__

    def __neg__(self):
        return Affine(-self.coef, -self.const)

    def value(self, xbar: np.ndarray | None = None) -> float:
        return self.const if xbar is None else float(self.coef @ xbar) + self.const


@dataclass
class VarBlock:
    name: str
    start: int
    shape: tuple[int, ...]
    offset: np.ndarray
    scale: np.ndarray
    symbols: int

    @property
    def stop(self) -> int:
        return self.start + int(np.prod(self.shape))


@dataclass
class ConicProgram:
    """maximize c @ xbar + objective_constant subject to affine rows in cones.

    ``eq_rows`` hold A xbar + b = 0, ``ineq_rows`` A xbar + b >= 0 and each
    entry of ``cones`` is (kind, A, b) with A xbar + b in the standard
    second-order cone (first entry bounds the norm of the rest). Rotated cones
    are stored already converted; ``kind`` records the original form. Box
    bounds are ordinary inequality rows. ``groups`` counts constraints by
    family label.
    """

    n_vars: int
    objective: np.ndarray
    objective_constant: float
    eq_rows: tuple[np.ndarray, np.ndarray]
    ineq_rows: tuple[np.ndarray, np.ndarray]
    cones: list[tuple[str, np.ndarray, np.ndarray]]
    name_map: dict[str, VarBlock]
    groups: Counter = field(default_factory=Counter)
    info: dict = field(default_factory=dict)
    labels: dict = field(default_factory=dict)

    @property
    def symbol_count(self) -> int:
        """Decision symbols in the sense of complexity tables (complex entries count once)."""
        return sum(b.symbols for b in self.name_map.values())

    @property
    def real_variable_count(self) -> int:
        return sum(int(np.prod(b.shape)) for b in self.name_map.values())

    @property
    def group_count(self) -> int:
        return sum(self.groups.values())

    def to_model_units(self, xbar: np.ndarray) -> np.ndarray:
        out = np.empty(self.n_vars)
        for b in self.name_map.values():
            out[b.start:b.stop] = b.offset.ravel() + b.scale.ravel() * xbar[b.start:b.stop]
        return out

    def from_model_units(self, values: np.ndarray) -> np.ndarray:
        out = np.empty(self.n_vars)
        for b in self.name_map.values():
            out[b.start:b.stop] = (values[b.start:b.stop] - b.offset.ravel()) / b.scale.ravel()
        return out

    def extract(self, values: np.ndarray) -> dict[str, np.ndarray]:
        """Split a model-unit vector into named, reshaped blocks."""
        return {name: values[b.start:b.stop].reshape(b.shape) for name, b in self.name_map.items()}

    def objective_at(self, xbar: np.ndarray | None = None) -> float:
        if xbar is None:
            return self.objective_constant
        return float(self.objective @ xbar) + self.objective_constant

    def violations(self, xbar: np.ndarray | None = None) -> list[tuple[float, str, str, int]]:
        """(violation, section, label, index) for every row and cone, largest first."""
        x = np.zeros(self.n_vars) if xbar is None else xbar
        out = []
        a, b = self.eq_rows
        for i, v in enumerate(np.abs(a @ x + b)):
            out.append((float(v), "eq", self._label("eq", i), i))
        a, b = self.ineq_rows
        for i, v in enumerate(-(a @ x + b)):
            out.append((float(v), "ineq", self._label("ineq", i), i))
        for i, (_, a, b) in enumerate(self.cones):
            v = a @ x + b
            out.append((float(np.linalg.norm(v[1:]) - v[0]), "cone", self._label("cone", i), i))
        return sorted(out, key=lambda t: -t[0])

    def _label(self, section: str, i: int) -> str:
        names = self.labels.get(section, [])
        return names[i] if i < len(names) else ""

    def residual(self, xbar: np.ndarray | None = None) -> float:
        """Largest violation over all rows and cones (rows are normalized at build time)."""
        x = np.zeros(self.n_vars) if xbar is None else xbar
        worst = 0.0
        a, b = self.eq_rows
        if len(b):
            worst = max(worst, float(np.max(np.abs(a @ x + b))))
        a, b = self.ineq_rows
        if len(b):
            worst = max(worst, float(np.max(-(a @ x + b))))
        for _, a, b in self.cones:
            v = a @ x + b
            worst = max(worst, float(np.linalg.norm(v[1:]) - v[0]))
        return worst


@dataclass
class ConicSolution:
    status: str
    values: np.ndarray
    objective_value: float
    xbar: np.ndarray | None = None
    residual: float = math.nan
    iterations: int = 0
    raw_status: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


class ProgramBuilder:
    """Incremental construction of a ConicProgram over shifted/scaled variables."""

    def __init__(self):
        self.blocks: dict[str, VarBlock] = {}
        self.n = 0
        self._frozen = False
        self.eq: list[Affine] = []
        self.ineq: list[Affine] = []
        self.cones: list[tuple[str, list[Affine]]] = []
        self.groups: Counter = Counter()
        self.labels: dict[str, list[str]] = {"eq": [], "ineq": [], "cone": []}
        self.objective = None
        self.info: dict = {}

    # variables -----------------------------------------------------------
    def add_var(self, name: str, shape, offset=None, scale=1.0, symbols: int | None = None) -> VarBlock:
        if self._frozen:
            raise RuntimeError("variables must be declared before expressions are built")
        shape = tuple(np.atleast_1d(shape).astype(int)) if not isinstance(shape, tuple) else shape
        size = int(np.prod(shape))
        off = np.zeros(shape) if offset is None else np.array(offset, dtype=float).reshape(shape)
        sc = np.broadcast_to(np.asarray(scale, dtype=float), shape).copy()
        if np.any(~(sc > 0)):
            raise ValueError(f"scales of '{name}' must be positive")
        block = VarBlock(name, self.n, shape, off, sc, size if symbols is None else symbols)
        self.blocks[name] = block
        self.n += size
        return block

    def has(self, name: str) -> bool:
        return name in self.blocks

    def freeze(self) -> None:
        self._frozen = True
        self.objective = self.zero()

    def zero(self) -> Affine:
        return Affine(np.zeros(self.n), 0.0)

    def const(self, c: float) -> Affine:
        return Affine(np.zeros(self.n), c)

    def var(self, name: str, index=()) -> Affine:
        b = self.blocks[name]
        flat = int(np.ravel_multi_index(np.atleast_1d(index), b.shape)) if b.shape != () else 0
        coef = np.zeros(self.n)
        coef[b.start + flat] = b.scale.ravel()[flat]
        return Affine(coef, b.offset.ravel()[flat])

    def linear(self, name: str, weights: np.ndarray, const: float = 0.0) -> Affine:
        """sum(weights * block) + const, with ``weights`` shaped like the block."""
        b = self.blocks[name]
        w = np.asarray(weights, dtype=float).ravel()
        coef = np.zeros(self.n)
        coef[b.start:b.stop] = w * b.scale.ravel()
        return Affine(coef, float(w @ b.offset.ravel()) + const)

    # constraints ---------------------------------------------------------
    def add_eq(self, expr: Affine, group: str | None, tag: str | None = None) -> None:
        self.eq.append(expr)
        self.labels["eq"].append(group or tag or "")
        if group:
            self.groups[group] += 1

    def add_ge(self, expr: Affine, group: str | None, tag: str | None = None) -> None:
        """expr >= 0."""
        self.ineq.append(expr)
        self.labels["ineq"].append(group or tag or "")
        if group:
            self.groups[group] += 1

    def add_soc(self, head: Affine, tail: list[Affine], group: str | None, kind: str = "soc",
                tag: str | None = None) -> None:
        """||tail|| <= head."""
        self.cones.append((kind, [head] + list(tail)))
        self.labels["cone"].append(group or tag or "")
        if group:
            self.groups[group] += 1

    def add_rotated(self, u: Affine, v: Affine, tail: list[Affine], group: str | None,
                    tag: str | None = None) -> None:
        """u * v >= ||tail||^2 with u, v >= 0, balanced at the expansion point."""
        u0, v0 = u.const, v.const
        if u0 > 0 and v0 > 0:
            c = math.sqrt(v0 / u0)
            u, v = u * c, v * (1.0 / c)
        self.add_soc(u + v, [u - v] + [t * 2.0 for t in tail], group, kind="rsoc", tag=tag)

    def maximize(self, expr: Affine) -> None:
        self.objective = self.objective + expr

    # assembly ------------------------------------------------------------
    def build(self) -> ConicProgram:
        def stack(rows: list[Affine]):
            if not rows:
                return np.zeros((0, self.n)), np.zeros(0)
            a = np.array([r.coef for r in rows])
            b = np.array([r.const for r in rows])
            norm = np.abs(a).max(axis=1)
            norm = np.where(norm > 0, norm, 1.0)
            return a / norm[:, None], b / norm

        eq_a, eq_b = stack(self.eq)
        in_a, in_b = stack(self.ineq)
        cones = []
        for kind, rows in self.cones:
            a = np.array([r.coef for r in rows])
            b = np.array([r.const for r in rows])
            s = float(np.abs(a).max())
            s = s if s > 0 else 1.0
            cones.append((kind, a / s, b / s))
        return ConicProgram(
            n_vars=self.n, objective=self.objective.coef.copy(),
            objective_constant=self.objective.const,
            eq_rows=(eq_a, eq_b), ineq_rows=(in_a, in_b), cones=cones,
            name_map=dict(self.blocks), groups=Counter(self.groups), info=dict(self.info),
            labels={k: list(v) for k, v in self.labels.items()},
        )


_STATUS_MAP = {
    "Solved": "optimal",
    "AlmostSolved": "optimal",
    "PrimalInfeasible": "infeasible",
    "AlmostPrimalInfeasible": "infeasible",
    "MaxIterations": "iteration_limit",
    "MaxTime": "iteration_limit",
}


def _settings(tol: float, overrides: dict) -> "clarabel.DefaultSettings":
    s = clarabel.DefaultSettings()
    s.verbose = False
    s.tol_feas = tol
    s.tol_gap_abs = tol
    s.tol_gap_rel = tol
    s.max_iter = 200
    s.presolve_enable = False
    # the self-interference rows couple every beam into the uplink cones with
    # coefficients spanning many decades; the default 10 equilibration passes
    # leave the KKT system badly scaled
    s.equilibrate_max_iter = 100
    for key, value in overrides.items():
        setattr(s, key, value)
    return s


# settings tried in order while the solver reports a numerical breakdown
_RETRY_LADDER = (
    {},
    {"static_regularization_constant": 1e-10},
    {"max_step_fraction": 0.9},
    {"equilibrate_min_scaling": 1e-6, "equilibrate_max_scaling": 1e6},
    {"iterative_refinement_reltol": 1e-14, "iterative_refinement_max_iter": 50},
)


def solve(program: ConicProgram, tol: float = 1e-8) -> ConicSolution:
    """Solve with the Clarabel interior-point method.

    Rows with no variable dependence are checked directly and dropped.
    ``optimal`` is only reported when the re-substituted residual is at
    most ``RESIDUAL_TOL``.
    """
    n = program.n_vars
    blocks_a, blocks_b, cones = [], [], []

    def take(a, b, const_ok):
        nz = np.abs(a).max(axis=1) > 0 if len(b) else np.zeros(0, bool)
        if np.any(~nz) and not const_ok(b[~nz]):
            return False
        return a[nz], b[nz]

    eq_a, eq_b = program.eq_rows
    in_a, in_b = program.ineq_rows
    eq = take(eq_a, eq_b, lambda c: np.all(np.abs(c) <= RESIDUAL_TOL))
    ineq = take(in_a, in_b, lambda c: np.all(c >= -RESIDUAL_TOL))
    if eq is False or ineq is False:
        return ConicSolution("infeasible", np.full(n, np.nan), -math.inf, raw_status="ConstantRow")
    if len(eq[1]):
        blocks_a.append(eq[0])
        blocks_b.append(-eq[1])
        cones.append(clarabel.ZeroConeT(len(eq[1])))
    if len(ineq[1]):
        blocks_a.append(-ineq[0])
        blocks_b.append(ineq[1])
        cones.append(clarabel.NonnegativeConeT(len(ineq[1])))
    for _, a, b in program.cones:
        blocks_a.append(-a)
        blocks_b.append(b)
        cones.append(clarabel.SecondOrderConeT(len(b)))
    if not blocks_a:
        raise ValueError("program has no constraints")
    a_mat = sp.csc_matrix(np.vstack(blocks_a))
    b_vec = np.concatenate(blocks_b)
    p_mat = sp.csc_matrix((n, n))
    q = -np.asarray(program.objective, dtype=float)
    if not np.all(np.isfinite(q)) or not np.all(np.isfinite(b_vec)) or not np.all(np.isfinite(a_mat.data)):
        raise ValueError("program contains non-finite data")
    for overrides in _RETRY_LADDER:
        solver = clarabel.DefaultSolver(p_mat, q, a_mat, b_vec, cones, _settings(tol, overrides))
        raw = solver.solve()
        raw_status = str(raw.status)
        status = _STATUS_MAP.get(raw_status, "numerical_failure")
        xbar = np.asarray(raw.x, dtype=float)
        if not np.all(np.isfinite(xbar)):
            status = "numerical_failure" if status == "optimal" else status
            xbar = np.zeros(n)
        res = program.residual(xbar)
        if status == "optimal" and res > RESIDUAL_TOL:
            status = "numerical_failure"
        if status != "numerical_failure":
            break
    return ConicSolution(
        status=status, values=program.to_model_units(xbar), objective_value=program.objective_at(xbar),
        xbar=xbar, residual=res, iterations=int(raw.iterations), raw_status=raw_status,
    )


def dump_program(program: ConicProgram, path: str | Path) -> None:
    """Write a plain-text description of a program.

    Format: a ``VARS`` section with one ``name start size offset... scale...``
    line per block, an ``OBJ`` line (constant then coefficients), then
    ``EQ``, ``GE`` and ``SOC <kind> <dim>`` sections, each row written as the
    constant followed by ``index:coef`` pairs for its nonzeros.
    """
    def row(a, b):
        nz = np.flatnonzero(a)
        return f"{b:.17g} " + " ".join(f"{i}:{a[i]:.17g}" for i in nz)

    lines = [f"NVARS {program.n_vars}", "VARS"]
    for b in program.name_map.values():
        lines.append(f"{b.name} {b.start} {b.stop - b.start} "
                     + " ".join(f"{v:.17g}" for v in b.offset.ravel()) + " | "
                     + " ".join(f"{v:.17g}" for v in b.scale.ravel()))
    lines.append("OBJ " + row(program.objective, program.objective_constant))
    a, b = program.eq_rows
    lines.append(f"EQ {len(b)}")
    lines.extend(row(a[i], b[i]) for i in range(len(b)))
    a, b = program.ineq_rows
    lines.append(f"GE {len(b)}")
    lines.extend(row(a[i], b[i]) for i in range(len(b)))
    for kind, a, b in program.cones:
        lines.append(f"SOC {kind} {len(b)}")
        lines.extend(row(a[i], b[i]) for i in range(len(b)))
    Path(path).write_text("\n".join(lines) + "\n")
