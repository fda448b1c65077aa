import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fdnoma.channel import (
    LN2,
    SystemConfig,
    config_from_mapping,
    db_to_linear,
    dbm_to_watt,
    draw_channels,
    dump_instance,
    load_config,
    load_instance,
    make_instance,
    path_gain,
    pathloss_db,
    place_users,
    watt_to_dbm,
)
from fdnoma.rates import dl_rates, ul_rates


@given(st.floats(-60, 60))
def test_dbm_round_trip(dbm):
    assert watt_to_dbm(dbm_to_watt(dbm)) == pytest.approx(dbm, abs=1e-9)


def test_unit_conversions():
    assert dbm_to_watt(30.0) == pytest.approx(1.0)
    assert dbm_to_watt(38.0) == pytest.approx(6.30957, rel=1e-5)
    assert db_to_linear(-90.0) == pytest.approx(1e-9)


def test_pathloss_laws():
    assert pathloss_db("bs_user", 1.0) == pytest.approx(103.8)
    assert pathloss_db("ue_ue", 1.0) == pytest.approx(145.4)
    assert pathloss_db("bs_user", 0.1) == pytest.approx(103.8 - 20.9)
    with pytest.raises(ValueError):
        pathloss_db("bs_user", 0.0)
    with pytest.raises(ValueError):
        pathloss_db("satellite", 1.0)


@given(st.floats(1e-3, 1.0), st.floats(1.001, 3.0))
def test_path_gain_strictly_decreasing(d, factor):
    for kind in ("bs_user", "ue_ue"):
        assert path_gain(kind, d * factor) < path_gain(kind, d)


def test_config_defaults_and_broadcast():
    cfg = SystemConfig()
    assert cfg.n_dl == 4
    assert cfg.p_ul_max == (dbm_to_watt(18.0),) * 2
    assert cfg.rate_thresholds_dl == (LN2,) * 4
    bigger = cfg.replace(users_per_zone=3, n_uplink=3)
    assert len(bigger.rate_thresholds_dl) == 6 and len(bigger.p_ul_max) == 3
    assert cfg.with_rate_threshold_bits(2.0).rate_thresholds_ul == (2 * LN2,) * 2


@pytest.mark.parametrize("changes", [
    dict(zone_boundaries_m=(60.0, 50.0)),
    dict(zone_boundaries_m=(50.0,)),
    dict(zone_boundaries_m=(50.0, 120.0)),
    dict(p_bs_max=-1.0),
    dict(rho_sq=1.5),
    dict(noise_power=0.0),
    dict(n_antennas=0),
    dict(rate_thresholds_dl=(1.0, 1.0)),
])
def test_config_rejects_invalid(changes):
    with pytest.raises(ValueError):
        SystemConfig(**changes)


def test_zero_budget_is_accepted():
    assert SystemConfig(p_bs_max=0.0).p_bs_max == 0.0


def test_full_scale_preset():
    cfg = SystemConfig.full_scale()
    assert (cfg.n_antennas, cfg.users_per_zone, cfg.n_uplink, cfg.n_dl) == (10, 4, 4, 8)


def test_config_file_units(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[system]\np_bs_max_dbm = 30\nrho_sq_db = -100\nrate_threshold_bits = 2\nn_antennas = 6\n")
    cfg = load_config(path)
    assert cfg.p_bs_max == pytest.approx(1.0)
    assert cfg.rho_sq == pytest.approx(1e-10)
    assert cfg.rate_thresholds_dl == pytest.approx((2 * LN2,) * 4)
    assert cfg.n_antennas == 6 and isinstance(cfg.n_antennas, int)
    with pytest.raises(KeyError):
        config_from_mapping({"bandwidth": "1"})


@given(st.integers(0, 2**32 - 1))
def test_users_respect_zone_annuli(seed):
    cfg = SystemConfig()
    topo = place_users(cfg, seed)
    d = topo.dl_distances
    assert np.all((d[0] >= cfg.min_distance_m) & (d[0] <= cfg.zone_boundaries_m[0]))
    assert np.all((d[1] >= cfg.zone_boundaries_m[0]) & (d[1] <= cfg.zone_boundaries_m[1]))
    u = topo.ul_distances
    assert np.all((u >= cfg.min_distance_m) & (u <= cfg.cell_radius_m))


def test_channel_shapes_and_determinism():
    cfg = SystemConfig()
    t1, c1 = make_instance(cfg, 5)
    t2, c2 = make_instance(cfg, 5)
    assert c1.h_dl.shape == (2, 2, 4) and c1.h_ul.shape == (2, 4)
    assert c1.g_si.shape == (4, 4) and c1.g_cci.shape == (2, 2, 2)
    for a, b in [(c1.h_dl, c2.h_dl), (c1.h_ul, c2.h_ul), (c1.g_si, c2.g_si), (c1.g_cci, c2.g_cci),
                 (t1.dl_positions, t2.dl_positions)]:
        assert np.array_equal(a, b)
    _, c3 = make_instance(cfg, 6)
    assert not np.array_equal(c1.h_dl, c3.h_dl)


def test_fading_power_per_entry():
    cfg = SystemConfig()
    topo = place_users(cfg, 0)
    gain = path_gain("bs_user", topo.dl_distances[0, 0] / 1000.0)
    draws = np.array([draw_channels(topo, cfg, s).h_dl[0, 0] for s in range(10_000)])
    per_entry = np.mean(np.abs(draws) ** 2, axis=0) / gain
    assert np.all((per_entry >= 0.97) & (per_entry <= 1.03))


def test_expected_gain_at_100m():
    cfg = SystemConfig(n_antennas=4)
    rng = np.random.default_rng(3)
    topo = place_users(cfg, 0)
    topo = type(topo)(dl_positions=np.full_like(topo.dl_positions, 100.0 / math.sqrt(2.0)),
                      ul_positions=topo.ul_positions)
    vals = [np.sum(np.abs(draw_channels(topo, cfg, rng).h_dl[0, 0]) ** 2) / 4 for _ in range(2500)]
    assert np.mean(vals) == pytest.approx(10 ** -8.29, rel=0.05)


def test_rician_si_los_ratio():
    cfg = SystemConfig(n_antennas=4)
    topo = place_users(cfg, 0)
    stack = np.array([draw_channels(topo, cfg, s).g_si for s in range(3000)])
    los = np.abs(stack.mean(0)) ** 2
    scatter = stack.var(0)
    assert np.mean(los / scatter) == pytest.approx(10 ** 0.5, rel=0.1)


def test_normalization_preserves_rates(desk):
    cfg, ch = desk
    rng = np.random.default_rng(0)
    w = (rng.standard_normal(ch.h_dl.shape) + 1j * rng.standard_normal(ch.h_dl.shape)) * 0.5
    p = np.array([0.1, 0.05])
    beta = np.array([[0, 1], [0, 0]])
    norm = ch.normalized()
    assert norm.noise_power == 1.0
    assert np.allclose(dl_rates(ch, w, p, np.eye(2)), dl_rates(norm, w, p, np.eye(2)), rtol=1e-10)
    assert np.allclose(ul_rates(ch, w, p, beta), ul_rates(norm, w, p, beta), rtol=1e-10)


def test_instance_dump_round_trip(tmp_path, desk):
    cfg, _ = desk
    topo, ch = make_instance(cfg, 9)
    path = tmp_path / "inst.txt"
    dump_instance(path, topo, ch)
    topo2, ch2 = load_instance(path)
    assert np.allclose(topo2.dl_positions, topo.dl_positions)
    for name in ("h_dl", "h_ul", "g_si", "g_cci"):
        assert np.allclose(getattr(ch2, name), getattr(ch, name), rtol=1e-15, atol=0)
    assert ch2.rho_sq == ch.rho_sq and ch2.noise_power == ch.noise_power
