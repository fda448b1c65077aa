import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fdnoma.association import AssociationTensor, DecodingOrder, PairingMatrix, beta_from_order
from fdnoma.channel import SystemConfig, make_instance, scalar_channels
from fdnoma.rates import (
    dl_rate,
    dl_rates,
    dl_sinrs,
    dl_sinrs_general,
    power_feasible,
    total_se_and_qos,
    ul_rate,
    ul_rates,
    ul_sum_rate_oracle,
)


def _random_point(ch, rng, scale=1.0):
    w = (rng.standard_normal(ch.h_dl.shape) + 1j * rng.standard_normal(ch.h_dl.shape)) * scale
    p = rng.uniform(0.0, 0.3, ch.n_uplink)
    return w, p


def test_single_user_examples():
    # one DL user per zone, N=1; zone-2 beam silent
    ch = scalar_channels([[[1.0]], [[0.0]]])
    w = np.array([[[1.0]], [[0.0]]])
    assert dl_rates(ch, w, np.zeros(0), np.eye(1))[0, 0] == pytest.approx(math.log(2))
    ch = scalar_channels([[[1.0]], [[0.0]]], h_ul=[[0.0]], g_cci=[[[1.0], [0.0]]])
    assert dl_rate(ch, w, [1.0], np.eye(1), 0, 0) == pytest.approx(math.log(1.5))


def test_equal_channel_pair_uses_symmetric_min():
    ch = scalar_channels([[[1.0]], [[1.0]]])
    w = np.array([[[0.0]], [[1.0]]])
    r = dl_rates(ch, w, np.zeros(0), np.eye(1))
    assert r[1, 0] == pytest.approx(math.log(2))


def test_ul_examples():
    ch = scalar_channels(np.zeros((2, 1, 2)), h_ul=[[1.0, 0.0]])
    w = np.zeros((2, 1, 2))
    assert ul_rate(ch, w, [1.0], np.zeros((1, 1)), 0) == pytest.approx(math.log(2))
    ch = scalar_channels(np.zeros((2, 1, 1)), h_ul=[[1.0], [1.0]])
    r = ul_rates(ch, np.zeros((2, 1, 1)), [1.0, 1.0], beta_from_order([0, 1]))
    assert r[0] == pytest.approx(math.log(1.5))
    assert r[1] == pytest.approx(math.log(2.0))


def test_self_interference_drives_ul_rate_down():
    cfg = SystemConfig(n_antennas=2)
    _, ch = make_instance(cfg, 2)
    w, _ = _random_point(ch, np.random.default_rng(0))
    beta = beta_from_order([0, 1])
    rates = [ul_rates(ch, w * s, [0.2, 0.2], beta).sum() for s in (0, 1, 10, 100, 1e3, 1e4, 1e5)]
    assert all(b <= a for a, b in zip(rates, rates[1:]))
    assert rates[-1] < 1e-2 * rates[0]


def test_exact_rates_reject_relaxed(desk):
    cfg, ch = desk
    with pytest.raises(ValueError):
        dl_rates(ch, np.zeros_like(ch.h_dl), np.zeros(2), np.full((2, 2), 0.5))
    with pytest.raises(ValueError):
        ul_rates(ch, np.zeros_like(ch.h_dl), np.zeros(2), DecodingOrder(np.full((2, 2), 0.5), relaxed=True))


@given(st.integers(0, 10**6), st.sampled_from([1, 2, 3]), st.sampled_from([1, 2, 4]))
def test_decoding_order_invariance(seed, l, n):
    cfg = SystemConfig(n_antennas=n, n_uplink=l, rho_sq=1e-7)
    _, ch = make_instance(cfg, seed)
    rng = np.random.default_rng(seed)
    w, p = _random_point(ch, rng)
    oracle = ul_sum_rate_oracle(ch, w, p)
    for order in itertools.permutations(range(l)):
        total = ul_rates(ch, w, p, beta_from_order(order)).sum()
        assert total == pytest.approx(oracle, abs=1e-9, rel=1e-12)


def test_oracle_edge_cases(desk):
    cfg, ch = desk
    rng = np.random.default_rng(0)
    w, p = _random_point(ch, rng)
    assert ul_sum_rate_oracle(ch, w, np.zeros(2)) == pytest.approx(0.0, abs=1e-15)
    cfg1 = SystemConfig(n_uplink=1)
    _, ch1 = make_instance(cfg1, 4)
    assert ul_sum_rate_oracle(ch1, w, [0.2]) == pytest.approx(ul_rate(ch1, w, [0.2], np.zeros((1, 1)), 0))


def _direct_dl(ch, w, p, alpha):
    """Independent per-user evaluation written from the interference sums."""
    k = ch.users_per_zone
    hd = ch.h_dl
    cci = lambda z, u: sum(p[l] ** 2 * abs(ch.g_cci[l, z, u]) ** 2 for l in range(len(p)))
    g = lambda z, u, zb, kb: abs(np.vdot(hd[z, u], w[zb, kb])) ** 2
    out = np.zeros((2, k))
    for u in range(k):
        interf = sum(g(0, u, 0, v) for v in range(k) if v != u)
        interf += sum(g(0, u, 1, j) for j in range(k) if alpha[u, j] == 0)
        out[0, u] = math.log1p(g(0, u, 0, u) / (interf + cci(0, u) + ch.noise_power))
    for j in range(k):
        own_i = sum(g(1, j, 0, v) for v in range(k)) + sum(g(1, j, 1, v) for v in range(k) if v != j)
        sinr = g(1, j, 1, j) / (own_i + cci(1, j) + ch.noise_power)
        partner = int(np.argmax(alpha[:, j]))
        sic_i = sum(g(0, partner, 0, v) for v in range(k)) + sum(g(0, partner, 1, v) for v in range(k) if v != j)
        sinr = min(sinr, g(0, partner, 1, j) / (sic_i + cci(0, partner) + ch.noise_power))
        out[1, j] = math.log1p(sinr)
    return out


@given(st.integers(0, 10**6))
def test_dl_rates_match_direct_evaluation(seed):
    cfg = SystemConfig(users_per_zone=3)
    _, ch = make_instance(cfg, seed)
    rng = np.random.default_rng(seed)
    w, p = _random_point(ch, rng)
    alpha = np.eye(3)[rng.permutation(3)]
    assert np.allclose(dl_rates(ch, w, p, alpha), _direct_dl(ch, w, p, alpha), rtol=1e-12, atol=0)


@given(st.integers(0, 10**6))
def test_general_evaluator_agrees_for_two_zones(seed):
    cfg = SystemConfig(users_per_zone=3)
    _, ch = make_instance(cfg, seed)
    rng = np.random.default_rng(seed)
    w, p = _random_point(ch, rng)
    perm = rng.permutation(3)
    alpha = np.eye(3)[:, perm]
    # cluster c holds inner user c and the outer user it is paired with
    c2 = alpha.T.astype(int).T
    tensor = AssociationTensor((np.eye(3, dtype=int), c2))
    assert np.allclose(dl_sinrs_general(ch, w, p, tensor), dl_sinrs(ch, w, p, alpha), rtol=1e-12)
    assert dl_rate(ch, w, p, tensor, "general", 4) == pytest.approx(dl_rates(ch, w, p, alpha)[1, 1])


@given(st.integers(0, 10**6), st.floats(1.5, 10.0))
def test_rates_monotone_in_noise(seed, factor):
    cfg = SystemConfig()
    _, ch = make_instance(cfg, seed)
    rng = np.random.default_rng(seed)
    w, p = _random_point(ch, rng)
    noisy = type(ch)(h_dl=ch.h_dl, h_ul=ch.h_ul, g_si=ch.g_si, g_cci=ch.g_cci, rho_sq=ch.rho_sq,
                     noise_power=ch.noise_power * factor)
    beta = beta_from_order([1, 0])
    assert np.all(dl_rates(noisy, w, p, np.eye(2)) <= dl_rates(ch, w, p, np.eye(2)) + 1e-15)
    assert np.all(ul_rates(noisy, w, p, beta) <= ul_rates(ch, w, p, beta) + 1e-15)


@given(st.integers(0, 10**6))
def test_zone2_rate_bounded_by_own_sinr(seed):
    cfg = SystemConfig()
    _, ch = make_instance(cfg, seed)
    rng = np.random.default_rng(seed)
    w, p = _random_point(ch, rng)
    paired = dl_rates(ch, w, p, np.eye(2))[1]
    own_only = dl_rates(ch, w, p, np.eye(2), noma=False)[1]
    assert np.all(paired <= own_only + 1e-15)
    assert np.all(np.isfinite(paired)) and np.all(paired >= 0)


def test_report_fields(desk):
    cfg, ch = desk
    rng = np.random.default_rng(5)
    w, p = _random_point(ch, rng, 0.3)
    rep = total_se_and_qos(ch, w, p, PairingMatrix.identity(2), beta_from_order([0, 1]), cfg)
    assert rep.total_se == pytest.approx(rep.dl_rates.sum() + rep.ul_rates.sum())
    assert rep.total_se_bits == pytest.approx(rep.total_se / math.log(2))
    assert rep.durr == pytest.approx(rep.dl_rates.sum() / rep.ul_rates.sum())
    zero = total_se_and_qos(ch, np.zeros_like(w), np.zeros(2), np.eye(2), beta_from_order([0, 1]), cfg)
    assert zero.total_se == 0 and not zero.qos_ok and math.isnan(zero.durr)


def test_power_feasibility():
    cfg = SystemConfig(p_bs_max=1.0, p_ul_max=0.25)
    w = np.zeros((2, 2, 4), complex)
    w[0, 0, 0] = 1.0
    assert power_feasible(w, [0.5, 0.5], cfg)
    assert not power_feasible(w * 1.01, [0.5, 0.5], cfg)
    assert not power_feasible(w, [0.51, 0.5], cfg)
