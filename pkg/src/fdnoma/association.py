"""Discrete user association: pairing tensors, decoding orders, enumeration and rounding.

All zone and user indices are 0-based. Zone 0 is the inner zone.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

ENUMERATION_LIMIT = 10**6


def is_permutation_matrix(m: np.ndarray) -> bool:
    m = np.asarray(m)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        return False
    return bool(np.all((m == 0) | (m == 1)) and np.all(m.sum(0) == 1) and np.all(m.sum(1) == 1))


@dataclass(frozen=True)
class AssociationTensor:
    """Stack of Z permutation matrices; the first is the identity.

    ``c_matrices[i][c, k] = 1`` when user k of zone i belongs to cluster c.
    """

    c_matrices: tuple[np.ndarray, ...]

    def __post_init__(self):
        mats = tuple(np.asarray(c, dtype=int) for c in self.c_matrices)
        if not mats:
            raise ValueError("at least one zone is required")
        if not np.array_equal(mats[0], np.eye(mats[0].shape[0], dtype=int)):
            raise ValueError("the inner-zone matrix must be the identity")
        for c in mats:
            if not is_permutation_matrix(c) or c.shape != mats[0].shape:
                raise ValueError("every zone matrix must be a K x K permutation matrix")
        object.__setattr__(self, "c_matrices", mats)

    @property
    def n_zones(self) -> int:
        return len(self.c_matrices)

    @classmethod
    def random(cls, n_zones: int, k: int, rng: np.random.Generator) -> "AssociationTensor":
        eye = np.eye(k, dtype=int)
        return cls((eye,) + tuple(eye[:, rng.permutation(k)] for _ in range(n_zones - 1)))


def ua_matrix(tensor: AssociationTensor, i: int, z: int) -> np.ndarray:
    """Association matrix between zones i and z: entry (a, b) is 1 when they share a cluster."""
    if not (0 <= i < tensor.n_zones and 0 <= z < tensor.n_zones):
        raise IndexError("zone index out of range")
    return tensor.c_matrices[i].T @ tensor.c_matrices[z]


@dataclass(frozen=True)
class PairingMatrix:
    """alpha[k, j] = 1 when inner user k performs SIC for outer user j."""

    alpha: np.ndarray
    relaxed: bool = False

    def __post_init__(self):
        a = np.array(self.alpha, dtype=float)
        a.setflags(write=False)
        object.__setattr__(self, "alpha", a)

    @classmethod
    def identity(cls, k: int) -> "PairingMatrix":
        return cls(np.eye(k))

    @classmethod
    def from_permutation(cls, perm: Sequence[int]) -> "PairingMatrix":
        k = len(perm)
        a = np.zeros((k, k))
        a[np.arange(k), list(perm)] = 1.0
        return cls(a)

    def partner(self, k: int) -> int:
        return int(np.argmax(self.alpha[k]))


@dataclass(frozen=True)
class DecodingOrder:
    """beta[l, m] = 1 when uplink user l is decoded before user m."""

    beta: np.ndarray
    relaxed: bool = False

    def __post_init__(self):
        b = np.array(self.beta, dtype=float)
        b.setflags(write=False)
        object.__setattr__(self, "beta", b)

    def order(self) -> tuple[int, ...]:
        """Decoding sequence (first decoded first) implied by the row sums."""
        sums = self.beta.sum(1)
        return tuple(int(i) for i in sorted(range(len(sums)), key=lambda i: (-sums[i], i)))


def beta_from_order(order: Sequence[int]) -> DecodingOrder:
    order = [int(o) for o in order]
    n = len(order)
    if sorted(order) != list(range(n)):
        raise ValueError("order must be a permutation of 0..L-1")
    beta = np.zeros((n, n))
    for pos, ell in enumerate(order):
        for m in order[pos + 1:]:
            beta[ell, m] = 1.0
    return DecodingOrder(beta)


def enumerate_associations(k: int, n_ul: int) -> Iterator[tuple[PairingMatrix, DecodingOrder]]:
    """Every (pairing, decoding order) pair; inner users keep their index order."""
    if k < 1 or n_ul < 1:
        raise ValueError("K and L must be positive")
    if math.factorial(k) * math.factorial(n_ul) > ENUMERATION_LIMIT:
        raise ValueError("association space exceeds the enumeration limit")
    for perm in itertools.permutations(range(k)):
        for order in itertools.permutations(range(n_ul)):
            yield PairingMatrix.from_permutation(perm), beta_from_order(order)


def random_association(k: int, n_ul: int, rng: np.random.Generator) -> tuple[PairingMatrix, DecodingOrder]:
    perm = np.arange(k)
    rng.shuffle(perm)
    order = np.arange(n_ul)
    rng.shuffle(order)
    return PairingMatrix.from_permutation(perm), beta_from_order(order)


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def validate_association(alpha: PairingMatrix, beta: DecodingOrder, atol: float = 0.0) -> ValidationReport:
    """Check the binary pairing and decoding-order constraints and name the violated ones."""
    rep = ValidationReport()
    a, b = np.asarray(alpha.alpha), np.asarray(beta.beta)
    if not np.all(np.isclose(a, 0, atol=atol) | np.isclose(a, 1, atol=atol)):
        rep.violations.append("alpha_binary")
    if not np.allclose(a.sum(1), 1, atol=atol):
        rep.violations.append("alpha_row_sums")
    if not np.allclose(a.sum(0), 1, atol=atol):
        rep.violations.append("alpha_col_sums")
    if not np.all(np.isclose(b, 0, atol=atol) | np.isclose(b, 1, atol=atol)):
        rep.violations.append("beta_binary")
    if not np.allclose(np.diag(b), 0, atol=atol):
        rep.violations.append("beta_diagonal")
    off = ~np.eye(b.shape[0], dtype=bool)
    if not np.allclose((b + b.T)[off], 1, atol=atol):
        rep.violations.append("beta_complement")
    sums = b.sum(1)
    gaps = np.abs(sums[:, None] - sums[None, :])[off]
    if gaps.size and gaps.min() < 1 - atol:
        rep.violations.append("beta_distinct_rows")
    return rep


def round_and_project(alpha: PairingMatrix, beta: DecodingOrder) -> tuple[PairingMatrix, DecodingOrder]:
    """Round relaxed values to the nearest integers and repair any constraint violation."""
    a_rel, b_rel = np.asarray(alpha.alpha), np.asarray(beta.beta)
    a = np.floor(a_rel + 0.5)
    if not is_permutation_matrix(a):
        rows, cols = linear_sum_assignment(a_rel, maximize=True)
        a = np.zeros_like(a_rel)
        a[rows, cols] = 1.0
    b = np.floor(b_rel + 0.5)
    out_beta = DecodingOrder(b)
    if not validate_association(PairingMatrix(a), out_beta).ok:
        sums = b_rel.sum(1)
        order = sorted(range(len(sums)), key=lambda i: (-sums[i], i))
        out_beta = beta_from_order(order)
    return PairingMatrix(a), out_beta


def binary_gap(alpha: np.ndarray, beta: np.ndarray) -> float:
    """Infinity norm of the stacked (v^2 - v) residuals over all pairing and order entries."""
    v = np.concatenate([np.ravel(alpha), np.ravel(beta)])
    return float(np.max(np.abs(v * v - v))) if v.size else 0.0


def draw_relaxed_order(n_ul: int, rng: np.random.Generator, shrink=(0.5, 0.9)) -> np.ndarray:
    """Fractional decoding-order start: a random binary order contracted toward 1/2.

    Diagonal stays 0, complementary entries sum to 1 and all off-diagonal
    entries lie strictly inside (0, 1).
    """
    order = rng.permutation(n_ul)
    binary = beta_from_order(order).beta
    u = rng.uniform(*shrink)
    beta = 0.5 + (binary - 0.5) * u
    np.fill_diagonal(beta, 0.0)
    return beta
