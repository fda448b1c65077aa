"""Convex minorants, majorants, smoothing and penalty terms used by the iterations.

Every construction here is tangent to its target at the expansion point. The
conic builders turn these coefficient bundles into cone rows.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .channel import ChannelSet

EIG_CLIP = 1e-10


@dataclass
class SolverIterate:
    """Continuous decision state of one iteration.

    ``w`` has shape (Z, K, N), ``p`` (L,), ``alpha`` (K, K), ``beta`` (L, L),
    ``omega`` (Z, K), ``lam`` and ``mu`` (K, K), ``nu`` (L,).
    """

    w: np.ndarray
    p: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    omega: np.ndarray | None = None
    lam: np.ndarray | None = None
    mu: np.ndarray | None = None
    nu: np.ndarray | None = None
    extras: dict = field(default_factory=dict)

    def copy(self, **changes) -> "SolverIterate":
        base = {k: (None if v is None else np.array(v, copy=True))
                for k, v in self.__dict__.items() if k != "extras"}
        base["extras"] = dict(self.extras)
        base.update(changes)
        return SolverIterate(**base)


def log_minorant(omega_ref: float) -> tuple[float, float]:
    """Coefficients (A, B) with A + B*omega <= ln(1 + 1/omega), tight at ``omega_ref``."""
    if not omega_ref > 0:
        raise ValueError("omega_ref must be positive")
    a = math.log1p(1.0 / omega_ref) + 1.0 / (omega_ref + 1.0)
    b = -1.0 / (omega_ref * (omega_ref + 1.0))
    return a, b


def rotate_phases(w: np.ndarray, h_own: np.ndarray) -> np.ndarray:
    """Rotate every beam so its intended effective channel h^H w is real and nonnegative."""
    x = np.einsum("...n,...n->...", h_own.conj(), w)
    phase = np.where(np.abs(x) > 0, np.exp(-1j * np.angle(x)), 1.0)
    return w * phase[..., None]


@dataclass(frozen=True)
class LinearizedGain:
    """Affine under-estimator of |h^H w|^2 (optionally divided by alpha + eps).

    value(w, a) = 2 Re(conj(x_ref) h^H w) / d - |x_ref|^2 * (a + eps) / d^2,
    with d = alpha_ref + eps. Without the pairing term (``alpha_ref is None``)
    the second part reduces to -|x_ref|^2.
    """

    h: np.ndarray
    x_ref: complex
    alpha_ref: float | None = None
    epsilon: float = 0.0

    @property
    def denom(self) -> float:
        return 1.0 if self.alpha_ref is None else self.alpha_ref + self.epsilon

    def value(self, w: np.ndarray, alpha: float | None = None) -> float:
        x = np.vdot(self.h, w)
        lin = 2.0 * np.real(np.conj(self.x_ref) * x) / self.denom
        if self.alpha_ref is None:
            return float(lin - abs(self.x_ref) ** 2)
        a = self.alpha_ref if alpha is None else alpha
        return float(lin - abs(self.x_ref) ** 2 * (a + self.epsilon) / self.denom**2)

    def target(self, w: np.ndarray, alpha: float | None = None) -> float:
        x2 = abs(np.vdot(self.h, w)) ** 2
        if self.alpha_ref is None:
            return float(x2)
        a = self.alpha_ref if alpha is None else alpha
        return float(x2 / (a + self.epsilon))

    @property
    def reference_value(self) -> float:
        return abs(self.x_ref) ** 2 / self.denom

    def trust_ok(self, delta: float) -> bool:
        return self.reference_value >= delta


def linearize_quadratic(h: np.ndarray, w_ref: np.ndarray, variant: str,
                        alpha_ref: float | None = None, epsilon: float = 1e-3) -> LinearizedGain:
    """First-order under-estimator of |h^H w|^2 around ``w_ref``.

    ``zone1`` and ``zone2_own`` keep only Re(h^H w_ref), which is tangent once
    the reference beam has been phase-rotated; ``bfs`` and ``zone2_sic`` use
    the full complex reference. ``zone2_sic`` divides by (alpha + eps).
    """
    x = complex(np.vdot(h, w_ref))
    if variant in ("zone1", "zone2_own"):
        x_eff: complex = complex(x.real, 0.0)
        model = LinearizedGain(np.asarray(h), x_eff)
    elif variant == "bfs":
        x_eff = x
        model = LinearizedGain(np.asarray(h), x_eff)
    elif variant == "zone2_sic":
        if alpha_ref is None or alpha_ref + epsilon <= 0:
            raise ValueError("zone2_sic needs alpha_ref + epsilon > 0")
        x_eff = x
        model = LinearizedGain(np.asarray(h), x_eff, alpha_ref=float(alpha_ref), epsilon=epsilon)
    else:
        raise ValueError(f"unknown variant '{variant}'")
    if abs(x_eff) == 0.0:
        raise ValueError("zero effective channel at the reference point")
    return model


def product_majorant(x_ref: float, z_ref: float) -> tuple[float, float]:
    """Coefficients (cx, cz) with x*z <= cx*x^2 + cz*z^2, tight when x/x_ref = z/z_ref."""
    if not (x_ref > 0 and z_ref > 0):
        raise ValueError("references must be positive")
    return z_ref / (2.0 * x_ref), x_ref / (2.0 * z_ref)


def product_majorant_value(x, z, x_ref: float, z_ref: float):
    cx, cz = product_majorant(x_ref, z_ref)
    return cx * np.square(x) + cz * np.square(z)


def psd_factor(m: np.ndarray, clip: float = EIG_CLIP) -> np.ndarray:
    """F with F F^H = m for a Hermitian PSD matrix, clipping tiny negative eigenvalues."""
    vals, vecs = np.linalg.eigh((m + m.conj().T) / 2.0)
    if vals.min() < -clip * max(1.0, abs(vals).max()):
        raise ValueError("matrix is not positive semidefinite")
    vals = np.clip(vals, 0.0, None)
    # eigenvalues at round-off level relative to the largest carry no information
    keep = vals > 1e-13 * max(vals.max(), 0.0)
    return vecs[:, keep] * np.sqrt(vals[keep])


def si_covariance(channels: ChannelSet, w: np.ndarray) -> np.ndarray:
    n = channels.n_antennas
    s = channels.g_si.conj().T @ np.asarray(w, dtype=complex).reshape(-1, n).T
    return channels.rho_sq * (s @ s.conj().T) + channels.noise_power * np.eye(n)


def relaxed_psi(channels: ChannelSet, w, p, beta, ell: int) -> np.ndarray:
    h = channels.h_ul
    weights = np.asarray(beta)[ell] * np.asarray(p, dtype=float) ** 2
    return si_covariance(channels, w) + (h.T * weights) @ h.conj()


@dataclass(frozen=True)
class ULMinorant:
    """Concave quadratic lower model of one uplink rate.

    rate >= const + lin * p_l - Phi, where
    Phi = Lambda_l p_l^2 + sum_m Lambda_m beta_lm p_m^2
          + rho^2 sum_b ||F^H G^H w_b||^2 + sigma^2 tr(Xi), Xi = F F^H.
    """

    ell: int
    gamma_ref: float
    const: float
    lin: float
    lam: np.ndarray
    xi_factor: np.ndarray
    xi_trace: float

    def phi(self, channels: ChannelSet, w, p, beta) -> float:
        p = np.asarray(p, dtype=float)
        b = np.asarray(beta, dtype=float)[self.ell].copy()
        b[self.ell] = 0.0
        quad = self.lam[self.ell] * p[self.ell] ** 2 + float(np.sum(self.lam * b * p**2))
        return quad + self._si_part(channels, w) + channels.noise_power * self.xi_trace

    def phi_majorized(self, channels: ChannelSet, w, p, beta, nu, beta_ref, nu_ref) -> float:
        """Phi with every beta_lm p_m^2 replaced by the product majorant of beta_lm nu_m."""
        p = np.asarray(p, dtype=float)
        total = self.lam[self.ell] * p[self.ell] ** 2
        for m in range(len(p)):
            if m != self.ell:
                total += self.lam[m] * product_majorant_value(beta[self.ell][m], nu[m],
                                                    beta_ref[self.ell][m], nu_ref[m])
        return float(total + self._si_part(channels, w) + channels.noise_power * self.xi_trace)

    def _si_part(self, channels: ChannelSet, w) -> float:
        n = channels.n_antennas
        beams = np.asarray(w, dtype=complex).reshape(-1, n)
        v = self.xi_factor.conj().T @ (channels.g_si.conj().T @ beams.T)
        return channels.rho_sq * float(np.sum(np.abs(v) ** 2))

    def value(self, channels: ChannelSet, w, p, beta) -> float:
        return self.const + self.lin * float(np.asarray(p)[self.ell]) - self.phi(channels, w, p, beta)


def ul_minorant(channels: ChannelSet, iterate: SolverIterate, ell: int) -> ULMinorant:
    w, p, beta = iterate.w, np.asarray(iterate.p, dtype=float), np.asarray(iterate.beta)
    h = channels.h_ul
    psi = relaxed_psi(channels, w, p, beta, ell)
    v = np.linalg.solve(psi, h[ell])
    q = float(np.real(h[ell].conj() @ v))
    gamma = p[ell] ** 2 * q
    # Psi^-1 - (Psi + p^2 h h^H)^-1 in Sherman-Morrison form; subtracting the two inverses
    # directly loses positive semidefiniteness to round-off when Psi is ill-conditioned
    xi = (p[ell] ** 2 / (1.0 + gamma)) * np.outer(v, v.conj())
    factor = psd_factor(xi)
    xi_psd = factor @ factor.conj().T
    lam = np.maximum(np.real(np.einsum("mn,nk,mk->m", h.conj(), xi_psd, h)), 0.0)
    return ULMinorant(ell=ell, gamma_ref=gamma, const=math.log1p(gamma) - gamma,
                      lin=2.0 * p[ell] * q, lam=lam, xi_factor=factor,
                      xi_trace=float(np.real(np.trace(xi_psd))))


def lse_value(s, omega: float):
    """Smoothed |s|: (1/Omega) ln(e^{Omega s} + e^{-Omega s}) - ln(2)/Omega."""
    s = np.asarray(s, dtype=float)
    return (np.logaddexp(omega * s, -omega * s) - math.log(2.0)) / omega


def lse_linearize(s_ref: float, omega: float) -> tuple[float, float]:
    """(value, slope) of the tangent line of the smoothed |s| at ``s_ref``."""
    return float(lse_value(s_ref, omega)), math.tanh(omega * s_ref)


def lse_threshold(omega: float) -> float:
    """Right-hand side of the linearized order-separation rows.

    The smoothed |s| at the integer gap |s| = 1 equals 1 - ln(2)/Omega up to
    O(e^{-2 Omega}), so this is the largest threshold every valid binary
    order satisfies.
    """
    return 1.0 - math.log(2.0) / omega


def penalty(v, v_ref=None, rho: float = 1.0, mode: str = "value"):
    """Binary-forcing penalty rho (v^2 - v) and its tangent minorant.

    ``value`` returns rho (v^2 - v); ``linearized`` returns the tangent line
    evaluated at ``v`` when ``v`` is numeric, or its (slope, intercept) when
    ``v`` is None.
    """
    if not rho > 0:
        raise ValueError("rho must be positive")
    if mode == "value":
        v = np.asarray(v, dtype=float)
        return rho * (v * v - v)
    if mode == "linearized":
        slope, intercept = rho * (2.0 * np.asarray(v_ref) - 1.0), -rho * np.asarray(v_ref) ** 2
        if v is None:
            return slope, intercept
        return slope * np.asarray(v) + intercept
    raise ValueError(f"unknown mode '{mode}'")


def penalty_bound(objective_gap: float, n_entries: int, epsilon: float) -> float:
    """Smallest penalty weight guaranteeing a relaxed entry within epsilon of {0,1} is not preferred."""
    if not 0 < epsilon < 1:
        raise ValueError("epsilon must lie in (0, 1)")
    return objective_gap / (n_entries * epsilon * (1.0 - epsilon))


def relaxed_dl_sinrs(channels: ChannelSet, w, p, alpha, epsilon: float) -> np.ndarray:
    """DL SINRs of the relaxed model with fractional pairing, shape (2, K).

    Inner user k sees outer beam j attenuated by (1 - alpha_kj); outer user j
    must be decodable at every inner user with SINR scaled by 1/(alpha_kj + eps).
    """
    k_users, n = channels.users_per_zone, channels.n_antennas
    a = np.asarray(alpha, dtype=float)
    gains = np.abs(channels.h_dl.reshape(-1, n).conj() @ np.asarray(w, complex).reshape(-1, n).T) ** 2
    p = np.asarray(p, dtype=float)
    cci = (np.einsum("l,lu->u", p**2, np.abs(channels.g_cci.reshape(len(p), -1)) ** 2)
           if len(p) else np.zeros(2 * k_users))
    noise = channels.noise_power
    total, own = gains.sum(1), np.diag(gains)
    out = np.empty((2, k_users))
    for k in range(k_users):
        phi = gains[k, :k_users].sum() - own[k] + (gains[k, k_users:] * (1 - a[k])).sum() + cci[k] + noise
        out[0, k] = own[k] / phi
    for j in range(k_users):
        u = k_users + j
        best = own[u] / (total[u] - own[u] + cci[u] + noise)
        for k in range(k_users):
            psi = total[k] - gains[k, u] + cci[k] + noise
            best = min(best, gains[k, u] / ((a[k, j] + epsilon) * psi))
        out[1, j] = best
    return out


def relaxed_ul_rates(channels: ChannelSet, w, p, beta) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    out = np.empty(channels.n_uplink)
    for ell in range(channels.n_uplink):
        psi = relaxed_psi(channels, w, p, beta, ell)
        h = channels.h_ul[ell]
        out[ell] = math.log1p(p[ell] ** 2 * float(np.real(h.conj() @ np.linalg.solve(psi, h))))
    return out


def relaxed_total(channels: ChannelSet, w, p, alpha, beta, epsilon: float) -> float:
    dl = np.log1p(relaxed_dl_sinrs(channels, w, p, alpha, epsilon)).sum()
    return float(dl + relaxed_ul_rates(channels, w, p, beta).sum())

