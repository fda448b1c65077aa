"""Exact SINR and rate evaluation (nats/s/Hz) for binary associations.

Array conventions: beamformers ``w`` have shape (Z, K, N), uplink amplitudes
``p`` shape (L,) with transmit power p**2, pairing ``alpha`` is K x K and
decoding order ``beta`` is L x L.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .association import AssociationTensor, DecodingOrder, PairingMatrix, ua_matrix
from .channel import LN2, ChannelSet, SystemConfig

QOS_SLACK = 1e-6


def _matrix(x, kind: str) -> np.ndarray:
    if isinstance(x, (PairingMatrix, DecodingOrder)):
        if x.relaxed:
            raise ValueError(f"exact rates need a binary {kind}")
        x = x.alpha if isinstance(x, PairingMatrix) else x.beta
    m = np.asarray(x, dtype=float)
    if not np.all((m == 0) | (m == 1)):
        raise ValueError(f"exact rates need a binary {kind}")
    return m


def _dl_gains(channels: ChannelSet, w: np.ndarray) -> np.ndarray:
    """|h_u^H w_b|^2 for every DL user u and beam b, both flattened zone-major."""
    n = channels.n_antennas
    h = channels.h_dl.reshape(-1, n)
    beams = np.asarray(w, dtype=complex).reshape(-1, n)
    return np.abs(h.conj() @ beams.T) ** 2


def _cci(channels: ChannelSet, p: np.ndarray) -> np.ndarray:
    """Uplink-to-downlink interference power at every DL user, flattened zone-major."""
    p = np.asarray(p, dtype=float)
    if channels.n_uplink == 0:
        return np.zeros(channels.n_zones * channels.users_per_zone)
    return np.einsum("l,lu->u", p**2, np.abs(channels.g_cci.reshape(channels.n_uplink, -1)) ** 2)


def dl_sinrs(channels: ChannelSet, w, p, alpha, noma: bool = True) -> np.ndarray:
    """Per-user DL SINR, shape (2, K), for the two-zone model.

    With ``noma=False`` no pairing SIC is performed: every non-intended beam
    interferes and the outer-zone SINR is its own-channel term only.
    """
    if channels.n_zones != 2:
        raise ValueError("use dl_rates_general for more than two zones")
    a = _matrix(alpha, "pairing") if noma else np.zeros((channels.users_per_zone,) * 2)
    k_users = channels.users_per_zone
    gains = _dl_gains(channels, w)
    cci = _cci(channels, p)
    noise = channels.noise_power
    total = gains.sum(1)
    own = np.diag(gains)
    sinr = np.empty((2, k_users))
    for k in range(k_users):
        zone2_leak = gains[k, k_users:] * (1.0 - a[k])
        phi = gains[k, :k_users].sum() - own[k] + zone2_leak.sum() + cci[k] + noise
        sinr[0, k] = own[k] / phi
    for j in range(k_users):
        u = k_users + j
        own_sinr = own[u] / (total[u] - own[u] + cci[u] + noise)
        paired = np.flatnonzero(a[:, j])
        if paired.size:
            k = paired[0]
            psi = total[k] - gains[k, u] + cci[k] + noise
            own_sinr = min(own_sinr, gains[k, u] / psi)
        sinr[1, j] = own_sinr
    return sinr


def dl_rates(channels: ChannelSet, w, p, alpha, noma: bool = True) -> np.ndarray:
    return np.log1p(dl_sinrs(channels, w, p, alpha, noma=noma))


def dl_sinrs_general(channels: ChannelSet, w, p, tensor: AssociationTensor) -> np.ndarray:
    """Min-max SINR for any number of zones, shape (Z, K).

    The signal of user (i, k) must be decodable at every same-cluster user of
    zones 0..i; beams of farther zones in the same cluster are already removed.
    """
    z_count, k_users = channels.n_zones, channels.users_per_zone
    gains = _dl_gains(channels, w).reshape(z_count, k_users, z_count, k_users)
    cci = _cci(channels, p).reshape(z_count, k_users)
    t = {(a, b): ua_matrix(tensor, a, b) for a in range(z_count) for b in range(z_count)}
    out = np.empty((z_count, k_users))
    for i in range(z_count):
        for k in range(k_users):
            best = math.inf
            for z in range(i + 1):
                j = int(np.argmax(t[(z, i)][:, k]))
                g = gains[z, j]
                theta = g[: i + 1].sum() - g[i, k]
                for i2 in range(i + 1, z_count):
                    theta += ((1.0 - t[(z, i2)][j]) * g[i2]).sum()
                theta += cci[z, j] + channels.noise_power
                best = min(best, g[i, k] / theta)
            out[i, k] = best
    return out


def dl_rate(channels: ChannelSet, w, p, association, zone, user: int, noma: bool = True) -> float:
    """Rate of one DL user. ``zone`` is 0, 1 or "general" (then ``association`` is a tensor)."""
    if zone == "general":
        if not isinstance(association, AssociationTensor):
            raise TypeError("general-zone evaluation needs an AssociationTensor")
        zone_idx, k = divmod(user, channels.users_per_zone)
        return float(np.log1p(dl_sinrs_general(channels, w, p, association)[zone_idx, k]))
    return float(dl_rates(channels, w, p, association, noma=noma)[zone, user])


def _si_covariance(channels: ChannelSet, w) -> np.ndarray:
    n = channels.n_antennas
    beams = np.asarray(w, dtype=complex).reshape(-1, n)
    s = channels.g_si.conj().T @ beams.T
    return channels.rho_sq * (s @ s.conj().T) + channels.noise_power * np.eye(n)


def ul_sinrs(channels: ChannelSet, w, p, beta) -> np.ndarray:
    b = _matrix(beta, "decoding order")
    p = np.asarray(p, dtype=float)
    base = _si_covariance(channels, w)
    h = channels.h_ul
    out = np.empty(channels.n_uplink)
    for ell in range(channels.n_uplink):
        later = b[ell] * p**2
        psi = base + (h.T * later) @ h.conj()
        out[ell] = p[ell] ** 2 * np.real(h[ell].conj() @ np.linalg.solve(psi, h[ell]))
    return out


def ul_rates(channels: ChannelSet, w, p, beta) -> np.ndarray:
    return np.log1p(ul_sinrs(channels, w, p, beta))


def ul_rate(channels: ChannelSet, w, p, beta, ell: int) -> float:
    return float(ul_rates(channels, w, p, beta)[ell])


def ul_sum_rate_oracle(channels: ChannelSet, w, p) -> float:
    """Order-free uplink sum rate: log det(I + Phi^-1 sum_m p_m^2 h_m h_m^H)."""
    phi = _si_covariance(channels, w)
    p = np.asarray(p, dtype=float)
    h = channels.h_ul
    signal = (h.T * p**2) @ h.conj()
    _, logdet = np.linalg.slogdet(np.eye(channels.n_antennas) + np.linalg.solve(phi, signal))
    return float(logdet)


@dataclass(frozen=True)
class RateReport:
    dl_rates: np.ndarray
    ul_rates: np.ndarray
    qos_dl: np.ndarray
    qos_ul: np.ndarray

    @property
    def total_se(self) -> float:
        return float(self.dl_rates.sum() + self.ul_rates.sum())

    @property
    def total_se_bits(self) -> float:
        return self.total_se / LN2

    @property
    def qos_ok(self) -> bool:
        return bool(self.qos_dl.all() and self.qos_ul.all())

    @property
    def durr(self) -> float:
        dl, ul = float(self.dl_rates.sum()), float(self.ul_rates.sum())
        if ul > 0:
            return dl / ul
        return math.inf if dl > 0 else math.nan


def total_se_and_qos(channels: ChannelSet, w, p, alpha, beta, config: SystemConfig,
                     noma: bool = True) -> RateReport:
    dl = dl_rates(channels, w, p, alpha, noma=noma)
    ul = ul_rates(channels, w, p, beta) if channels.n_uplink else np.zeros(0)
    thr_dl = np.asarray(config.rate_thresholds_dl).reshape(dl.shape)
    thr_ul = np.asarray(config.rate_thresholds_ul)
    return RateReport(dl_rates=dl, ul_rates=ul,
                      qos_dl=dl >= thr_dl - QOS_SLACK, qos_ul=ul >= thr_ul - QOS_SLACK)


def power_feasible(w, p, config: SystemConfig, rtol: float = 1e-6) -> bool:
    bs = float(np.sum(np.abs(w) ** 2))
    ue = np.asarray(p, dtype=float) ** 2
    return bool(bs <= config.p_bs_max * (1 + rtol) + 1e-12
                and np.all(ue <= np.asarray(config.p_ul_max) * (1 + rtol) + 1e-12)
                and np.all(np.asarray(p) >= -1e-9))
