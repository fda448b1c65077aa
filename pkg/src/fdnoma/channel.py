"""Cell geometry, path loss and random channel realizations.

Internal units are watts and meters. dBm/dB values only appear in the
config-file loader and in report helpers.
"""
from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

LN2 = math.log(2.0)


def dbm_to_watt(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


def watt_to_dbm(watt: float) -> float:
    return 10.0 * math.log10(watt) + 30.0


def db_to_linear(db: float) -> float:
    return 10.0 ** (db / 10.0)


def _as_tuple(value, length: int, name: str) -> tuple[float, ...]:
    if np.isscalar(value):
        return tuple(float(value) for _ in range(length))
    out = tuple(float(v) for v in value)
    if len(out) != length:
        raise ValueError(f"{name} needs {length} entries, got {len(out)}")
    return out


@dataclass(frozen=True)
class SystemConfig:
    """Scenario constants for one FD-NOMA cell.

    Scalars given for the per-user fields ``p_ul_max``,
    ``rate_thresholds_dl`` and ``rate_thresholds_ul`` are broadcast.
    Rate thresholds are in nats/s/Hz.
    """

    n_antennas: int = 4
    n_zones: int = 2
    users_per_zone: int = 2
    n_uplink: int = 2
    cell_radius_m: float = 100.0
    zone_boundaries_m: tuple[float, ...] = (50.0, 100.0)
    min_distance_m: float = 10.0
    p_bs_max: float = dbm_to_watt(38.0)
    p_ul_max: tuple[float, ...] | float = dbm_to_watt(18.0)
    noise_power: float = dbm_to_watt(-104.0)
    rho_sq: float = db_to_linear(-90.0)
    rate_thresholds_dl: tuple[float, ...] | float = LN2
    rate_thresholds_ul: tuple[float, ...] | float = LN2
    rician_factor_db: float = 5.0
    tolerance: float = 1e-3
    max_iters: int = 100
    max_init_iters: int = 30
    init_retries: int = 5
    pairing_epsilon: float = 1e-3
    lse_sharpness: float = 20.0
    trust_delta: float = 1e-6

    def __post_init__(self):
        for name in ("n_antennas", "n_zones", "users_per_zone", "n_uplink", "max_iters"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        zb = tuple(float(z) for z in self.zone_boundaries_m)
        if len(zb) != self.n_zones:
            raise ValueError("one zone boundary per zone is required")
        edges = (self.min_distance_m,) + zb
        if any(b <= a for a, b in zip(edges, edges[1:])):
            raise ValueError("zone boundaries must be strictly increasing beyond min_distance_m")
        if zb[-1] > self.cell_radius_m + 1e-12:
            raise ValueError("outermost zone boundary exceeds the cell radius")
        object.__setattr__(self, "zone_boundaries_m", zb)
        object.__setattr__(self, "p_ul_max", _as_tuple(self.p_ul_max, self.n_uplink, "p_ul_max"))
        n_dl = self.n_zones * self.users_per_zone
        object.__setattr__(self, "rate_thresholds_dl",
                           _as_tuple(self.rate_thresholds_dl, n_dl, "rate_thresholds_dl"))
        object.__setattr__(self, "rate_thresholds_ul",
                           _as_tuple(self.rate_thresholds_ul, self.n_uplink, "rate_thresholds_ul"))
        # zero budgets are accepted so that degenerate scenarios can be reported as infeasible
        if self.p_bs_max < 0 or min(self.p_ul_max) < 0:
            raise ValueError("power budgets must be nonnegative")
        if self.noise_power <= 0:
            raise ValueError("noise_power must be positive")
        if not 0.0 <= self.rho_sq < 1.0:
            raise ValueError("rho_sq must lie in [0, 1)")
        if min(self.rate_thresholds_dl + self.rate_thresholds_ul) < 0:
            raise ValueError("rate thresholds must be nonnegative")
        if self.tolerance <= 0 or self.pairing_epsilon <= 0 or self.lse_sharpness <= 0:
            raise ValueError("tolerance, pairing_epsilon and lse_sharpness must be positive")

    @property
    def n_dl(self) -> int:
        return self.n_zones * self.users_per_zone

    def replace(self, **changes) -> "SystemConfig":
        """Like ``dataclasses.replace`` but rebroadcasts uniform per-user fields after resizing."""
        sizes = {"p_ul_max": changes.get("n_uplink", self.n_uplink),
                 "rate_thresholds_ul": changes.get("n_uplink", self.n_uplink),
                 "rate_thresholds_dl": changes.get("n_zones", self.n_zones)
                 * changes.get("users_per_zone", self.users_per_zone)}
        for name, count in sizes.items():
            current = getattr(self, name)
            if name not in changes and len(current) != count:
                if len(set(current)) != 1:
                    raise ValueError(f"cannot resize non-uniform {name}")
                changes[name] = current[0]
        return replace(self, **changes)

    def with_rate_threshold_bits(self, bits: float) -> "SystemConfig":
        return self.replace(rate_thresholds_dl=bits * LN2, rate_thresholds_ul=bits * LN2)

    @classmethod
    def desk(cls, **changes) -> "SystemConfig":
        return cls(**changes)

    @classmethod
    def full_scale(cls, **changes) -> "SystemConfig":
        base = dict(n_antennas=10, users_per_zone=4, n_uplink=4)
        base.update(changes)
        return cls().replace(**base)


# config-file keys carrying a unit suffix are converted on load
_UNIT_KEYS = {
    "p_bs_max_dbm": ("p_bs_max", dbm_to_watt),
    "p_ul_max_dbm": ("p_ul_max", dbm_to_watt),
    "noise_power_dbm": ("noise_power", dbm_to_watt),
    "rho_sq_db": ("rho_sq", db_to_linear),
    "rate_threshold_bits": ("rate_thresholds", lambda b: b * LN2),
}


def config_from_mapping(values: dict[str, str], base: SystemConfig | None = None) -> SystemConfig:
    """Build a config from flat string key/value pairs (as read from a file)."""
    base = base or SystemConfig()
    known = {f.name: f for f in fields(SystemConfig)}
    changes: dict = {}
    for key, raw in values.items():
        key = key.strip().lower()
        parsed = _parse_value(raw)
        if key in _UNIT_KEYS:
            target, conv = _UNIT_KEYS[key]
            converted = conv(parsed) if np.isscalar(parsed) else tuple(conv(v) for v in parsed)
            if target == "rate_thresholds":
                changes["rate_thresholds_dl"] = converted
                changes["rate_thresholds_ul"] = converted
            else:
                changes[target] = converted
        elif key in known:
            ftype = known[key].type
            if ftype == "int":
                parsed = int(parsed)
            changes[key] = parsed
        else:
            raise KeyError(f"unknown configuration key '{key}'")
    return base.replace(**changes)


def _parse_value(raw: str):
    text = str(raw).strip()
    if "," in text:
        return tuple(float(t) for t in text.split(",") if t.strip())
    try:
        return int(text)
    except ValueError:
        return float(text)


def load_config(path: str | Path, section: str = "system", base: SystemConfig | None = None) -> SystemConfig:
    parser = configparser.ConfigParser()
    parser.read_string(Path(path).read_text())
    if not parser.has_section(section):
        return base or SystemConfig()
    return config_from_mapping(dict(parser.items(section)), base)


def pathloss_db(kind: str, distance_km: float) -> float:
    """Path loss in dB for a BS-user (``bs_user``) or user-user (``ue_ue``) link."""
    if not distance_km > 0:
        raise ValueError("distance must be positive")
    if kind == "bs_user":
        return 103.8 + 20.9 * math.log10(distance_km)
    if kind == "ue_ue":
        return 145.4 + 37.5 * math.log10(distance_km)
    raise ValueError(f"unknown link kind '{kind}'")


def path_gain(kind: str, distance_km: float) -> float:
    return 10.0 ** (-pathloss_db(kind, distance_km) / 10.0)


@dataclass(frozen=True)
class Topology:
    """User positions in meters; the BS sits at the origin.

    ``dl_positions`` has shape (Z, K, 2) and ``ul_positions`` shape (L, 2).
    """

    dl_positions: np.ndarray
    ul_positions: np.ndarray

    @property
    def dl_distances(self) -> np.ndarray:
        return np.linalg.norm(self.dl_positions, axis=-1)

    @property
    def ul_distances(self) -> np.ndarray:
        return np.linalg.norm(self.ul_positions, axis=-1)


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _uniform_annulus(rng: np.random.Generator, r_in: float, r_out: float, size: int) -> np.ndarray:
    # inverse-CDF sampling of the radius gives a uniform density over the area
    radius = np.sqrt(rng.uniform(r_in**2, r_out**2, size))
    angle = rng.uniform(0.0, 2.0 * np.pi, size)
    return np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=-1)


def place_users(config: SystemConfig, seed) -> Topology:
    rng = _rng(seed)
    edges = (config.min_distance_m,) + config.zone_boundaries_m
    dl = np.stack([
        _uniform_annulus(rng, edges[z], edges[z + 1], config.users_per_zone)
        for z in range(config.n_zones)
    ])
    ul = _uniform_annulus(rng, config.min_distance_m, config.cell_radius_m, config.n_uplink)
    return Topology(dl_positions=dl, ul_positions=ul)


@dataclass(frozen=True)
class ChannelSet:
    """One channel realization.

    Shapes: ``h_dl`` (Z, K, N), ``h_ul`` (L, N), ``g_si`` (N, N) and
    ``g_cci`` (L, Z, K). Vectors follow the h^H w convention.
    """

    h_dl: np.ndarray
    h_ul: np.ndarray
    g_si: np.ndarray
    g_cci: np.ndarray
    rho_sq: float
    noise_power: float
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_antennas(self) -> int:
        return self.h_dl.shape[-1]

    @property
    def n_zones(self) -> int:
        return self.h_dl.shape[0]

    @property
    def users_per_zone(self) -> int:
        return self.h_dl.shape[1]

    @property
    def n_uplink(self) -> int:
        return self.h_ul.shape[0]

    def normalized(self) -> "ChannelSet":
        """Copy scaled so the noise power is one (rates are unchanged)."""
        if "normalized" not in self._cache:
            s = 1.0 / math.sqrt(self.noise_power)
            self._cache["normalized"] = ChannelSet(
                h_dl=self.h_dl * s, h_ul=self.h_ul * s, g_si=self.g_si, g_cci=self.g_cci * s,
                rho_sq=self.rho_sq / self.noise_power, noise_power=1.0,
            )
        return self._cache["normalized"]


def _cn(rng: np.random.Generator, shape) -> np.ndarray:
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / math.sqrt(2.0)


def draw_channels(topology: Topology, config: SystemConfig, seed) -> ChannelSet:
    rng = _rng(seed)
    n = config.n_antennas
    dl_gain = np.vectorize(lambda d: path_gain("bs_user", d / 1000.0))(topology.dl_distances)
    ul_gain = np.vectorize(lambda d: path_gain("bs_user", d / 1000.0))(topology.ul_distances)
    h_dl = np.sqrt(dl_gain)[..., None] * _cn(rng, dl_gain.shape + (n,))
    h_ul = np.sqrt(ul_gain)[:, None] * _cn(rng, (config.n_uplink, n))

    k_lin = db_to_linear(config.rician_factor_db)
    los = np.ones((n, n), dtype=complex)
    g_si = math.sqrt(k_lin / (k_lin + 1.0)) * los + math.sqrt(1.0 / (k_lin + 1.0)) * _cn(rng, (n, n))

    # user-to-user distances, floored at 1 m so the log-distance law stays physical
    diff = topology.ul_positions[:, None, None, :] - topology.dl_positions[None, :, :, :]
    d_ue = np.maximum(np.linalg.norm(diff, axis=-1), 1.0)
    ue_gain = np.vectorize(lambda d: path_gain("ue_ue", d / 1000.0))(d_ue)
    g_cci = np.sqrt(ue_gain) * _cn(rng, d_ue.shape)
    return ChannelSet(h_dl=h_dl, h_ul=h_ul, g_si=g_si, g_cci=g_cci,
                      rho_sq=config.rho_sq, noise_power=config.noise_power)


def instance_streams(seed: int, n: int) -> list[np.random.SeedSequence]:
    """Independent child streams, one per (topology, realization) cell."""
    return np.random.SeedSequence(seed).spawn(n)


def make_instance(config: SystemConfig, seed) -> tuple[Topology, ChannelSet]:
    """Topology and channel drawn from two independent children of ``seed``."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    topo_ss, chan_ss = ss.spawn(2)
    topology = place_users(config, topo_ss)
    return topology, draw_channels(topology, config, chan_ss)


# -- plain-text dump ---------------------------------------------------------
#
# Each array is written as a header line "# <name> <dim0> <dim1> ..." followed
# by one value per line; complex values as "<re> <im>". Scalars use a
# single "# <name> 0" header followed by the value.

def _write_array(lines: list[str], name: str, arr) -> None:
    arr = np.asarray(arr)
    lines.append("# " + " ".join([name] + [str(d) for d in arr.shape] if arr.ndim else [name, "0"]))
    flat = arr.reshape(-1)
    if np.iscomplexobj(flat):
        lines.extend(f"{v.real:.17g} {v.imag:.17g}" for v in flat)
    else:
        lines.extend(f"{float(v):.17g}" for v in flat)


def _read_arrays(text: str) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    lines = [ln for ln in text.splitlines() if ln.strip()]
    i = 0
    while i < len(lines):
        head = lines[i].split()
        if head[0] != "#":
            raise ValueError(f"line {i + 1}: expected an array header")
        name, dims = head[1], [int(d) for d in head[2:]]
        shape = () if dims == [0] else tuple(dims)
        count = int(np.prod(shape)) if shape else 1
        body = [ln.split() for ln in lines[i + 1:i + 1 + count]]
        if body and len(body[0]) == 2:
            vals = np.array([float(a) + 1j * float(b) for a, b in body])
        else:
            vals = np.array([float(b[0]) for b in body])
        out[name] = vals.reshape(shape) if shape else vals[0]
        i += 1 + count
    return out


def dump_instance(path: str | Path, topology: Topology, channels: ChannelSet) -> None:
    lines: list[str] = []
    _write_array(lines, "dl_positions", topology.dl_positions)
    _write_array(lines, "ul_positions", topology.ul_positions)
    for name in ("h_dl", "h_ul", "g_si", "g_cci"):
        _write_array(lines, name, getattr(channels, name))
    _write_array(lines, "rho_sq", channels.rho_sq)
    _write_array(lines, "noise_power", channels.noise_power)
    Path(path).write_text("\n".join(lines) + "\n")


def load_instance(path: str | Path) -> tuple[Topology, ChannelSet]:
    data = _read_arrays(Path(path).read_text())
    topology = Topology(dl_positions=data["dl_positions"].real, ul_positions=data["ul_positions"].real)
    channels = ChannelSet(
        h_dl=data["h_dl"].astype(complex), h_ul=data["h_ul"].astype(complex),
        g_si=data["g_si"].astype(complex), g_cci=data["g_cci"].astype(complex),
        rho_sq=float(np.real(data["rho_sq"])), noise_power=float(np.real(data["noise_power"])),
    )
    return topology, channels


def scalar_channels(h_dl: Sequence, h_ul: Sequence | None = None, g_si=None, g_cci=None,
                    rho_sq: float = 0.0, noise_power: float = 1.0) -> ChannelSet:
    """Small hand-built channel sets (tests and examples)."""
    h_dl = np.asarray(h_dl, dtype=complex)
    n = h_dl.shape[-1]
    h_ul = np.zeros((0, n), complex) if h_ul is None else np.asarray(h_ul, dtype=complex)
    g_si = np.zeros((n, n), complex) if g_si is None else np.asarray(g_si, dtype=complex)
    if g_cci is None:
        g_cci = np.zeros((h_ul.shape[0],) + h_dl.shape[:2], complex)
    return ChannelSet(h_dl=h_dl, h_ul=h_ul, g_si=g_si, g_cci=np.asarray(g_cci, dtype=complex),
                      rho_sq=rho_sq, noise_power=noise_power)
