"""Convex subproblems of the inner-approximation iterations.

One routine assembles every variant: relaxed or binary association, parts of
the association held fixed, sum-rate / downlink / uplink / feasibility-margin
objectives, optional binary-forcing penalty, NOMA on or off, and full-duplex or
single-direction links. The public ``build_*`` functions pick the options.

All channel quantities are noise-normalized first, so the noise power inside a
program is one. Constraint-family labels recorded in ``ConicProgram.groups``:

power_bs, power_ul, p_nonneg, qos_ul, trust_z1, sinr_z1, qos_z1, trust_z2,
sinr_z2_own, qos_z2, sic, trust_sic, alpha_rows, alpha_cols, alpha_lo,
alpha_hi, lambda_def, mu_cone, beta_lo, beta_hi, beta_order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..channel import ChannelSet, SystemConfig
from ..surrogate import (
    SolverIterate,
    product_majorant,
    linearize_quadratic,
    log_minorant,
    lse_linearize,
    lse_threshold,
    rotate_phases,
    ul_minorant,
)
from .program import Affine, ConicProgram, ProgramBuilder

MAJORANT_FLOOR = 1e-9
PHASES = ("cr_dl", "cr_ul", "crpf_dl", "crpf_ul", "bfs_eta", "cr_eta")


class DegenerateReference(ValueError):
    """The expansion point violates a trust region or has a zero effective channel."""


@dataclass(frozen=True)
class BuildOptions:
    relaxed: bool = True
    alpha_fixed: np.ndarray | None = None
    beta_fixed: np.ndarray | None = None
    objective: str = "total"
    rho: float = 0.0
    noma: bool = True
    links: str = "both"


def _positive_scale(x: float, fallback: float = 1.0) -> float:
    return x if x > 0 else fallback


class _Context:
    """Shared state while one program is assembled."""

    def __init__(self, channels: ChannelSet, config: SystemConfig, it: SolverIterate, opts: BuildOptions):
        self.ch = channels.normalized()
        self.cfg = config
        self.opts = opts
        self.k = self.ch.users_per_zone
        self.n = self.ch.n_antennas
        self.l = self.ch.n_uplink
        self.dl_on = opts.links != "ul"
        self.ul_on = opts.links != "dl" and self.l > 0
        self.alpha_free = opts.relaxed and opts.alpha_fixed is None and self.dl_on and opts.noma
        self.beta_free = opts.relaxed and opts.beta_fixed is None and self.ul_on
        # relaxed entries stay unclipped: nudging a solver value of -1e-9 to 0 breaks tangency of
        # the SIC gain by 1e-9/eps through its (alpha + eps) denominator
        self.alpha = np.asarray(it.alpha if opts.alpha_fixed is None else opts.alpha_fixed, float)
        self.beta = np.asarray(it.beta if opts.beta_fixed is None else opts.beta_fixed, float)
        if self.dl_on:
            self.w_ref = rotate_phases(np.asarray(it.w, complex), self.ch.h_dl)
        else:
            self.w_ref = np.zeros((2, self.k, self.n), complex)
        self.p_ref = np.maximum(np.asarray(it.p, float), 0.0) if self.ul_on else np.zeros(self.l)
        self.pb = ProgramBuilder()

    # expression helpers --------------------------------------------------
    def inner(self, h: np.ndarray, zone: int, k: int) -> tuple[Affine, Affine]:
        """Real and imaginary parts of h^H w_{zone,k}."""
        pb = self.pb
        if not self.dl_on:
            return pb.zero(), pb.zero()
        block = pb.blocks["w"]
        hr, hi = h.real, h.imag
        a_re = np.concatenate([hr, hi])
        a_im = np.concatenate([-hi, hr])
        lo = block.start + (zone * self.k + k) * 2 * self.n
        off = block.offset[zone, k]
        sc = block.scale[zone, k]
        c_re = np.zeros(pb.n)
        c_im = np.zeros(pb.n)
        c_re[lo:lo + 2 * self.n] = a_re * sc
        c_im[lo:lo + 2 * self.n] = a_im * sc
        return Affine(c_re, float(a_re @ off)), Affine(c_im, float(a_im @ off))

    def cci_terms(self, zone: int, k: int) -> list[Affine]:
        if not self.ul_on:
            return []
        gains = np.abs(self.ch.g_cci[:, zone, k])
        return [self.pb.var("p", (ell,)) * gains[ell] for ell in range(self.l) if gains[ell] > 0]

    def gain_affine(self, model, zone: int, k: int, alpha_expr: Affine | None = None) -> Affine:
        """Affine form of a LinearizedGain acting on beam (zone, k)."""
        re, im = self.inner(model.h, zone, k)
        x = model.x_ref
        lin = (re * x.real + im * x.imag) * (2.0 / model.denom)
        if model.alpha_ref is None:
            return lin - abs(x) ** 2
        alpha_expr = alpha_expr if alpha_expr is not None else self.pb.const(model.alpha_ref)
        return lin - (alpha_expr + model.epsilon) * (abs(x) ** 2 / model.denom**2)


def _declare(ctx: _Context, it: SolverIterate) -> None:
    pb, cfg, k, n, l = ctx.pb, ctx.cfg, ctx.k, ctx.n, ctx.l
    if ctx.dl_on:
        w_real = np.concatenate([ctx.w_ref.real, ctx.w_ref.imag], axis=-1)
        pb.add_var("w", (2, k, 2 * n), w_real, _positive_scale(math.sqrt(cfg.p_bs_max)), symbols=2 * k * n)
        pb.add_var("omega", (2, k), np.ones((2, k)), 1.0)
    if ctx.ul_on:
        pb.add_var("p", (l,), ctx.p_ref,
                   np.array([_positive_scale(math.sqrt(pm)) for pm in cfg.p_ul_max]))
    if ctx.alpha_free:
        lam = 1.0 - ctx.alpha
        mu = _mu_ref(ctx)
        pb.add_var("alpha", (k, k), ctx.alpha, 1.0)
        pb.add_var("lam", (k, k), lam, np.maximum(lam, 1e-3))
        pb.add_var("mu", (k, k), mu, np.maximum(mu, 1e-3 * max(1.0, mu.max())))
    if ctx.beta_free:
        nu = ctx.p_ref**2
        pmax = np.asarray(cfg.p_ul_max)
        pb.add_var("beta", (l, l), ctx.beta, 1.0)
        pb.add_var("nu", (l,), nu, np.maximum(nu, 1e-3 * np.where(pmax > 0, pmax, 1.0)))
    if ctx.ul_on:
        pb.add_var("t", (l,), np.zeros(l), 1.0, symbols=0)
    if ctx.opts.objective == "eta":
        pb.add_var("eta", (1,), np.zeros(1), 1.0, symbols=0)
    pb.freeze()


def _mu_ref(ctx: _Context) -> np.ndarray:
    h0 = ctx.ch.h_dl[0]
    return np.abs(h0.conj() @ ctx.w_ref[1].T) ** 2


def _majorant_refs(x: float, z: float, z_floor: float) -> tuple[float, float]:
    return max(x, MAJORANT_FLOOR), max(z, z_floor)


def _dl_rows(ctx: _Context) -> list[dict]:
    """Per DL user: the list of (gain, tail, labels) rows defining its SINR auxiliary."""
    pb, k, ch, opts = ctx.pb, ctx.k, ctx.ch, ctx.opts
    h = ch.h_dl
    eps = ctx.cfg.pairing_epsilon
    users = []
    mu_ref = _mu_ref(ctx) if ctx.alpha_free else None
    mu_floor = MAJORANT_FLOOR * max(1.0, float(mu_ref.max())) if mu_ref is not None else 0.0

    def beam_terms(hu, beams):
        out = []
        for zb, kb in beams:
            out.extend(ctx.inner(hu, zb, kb))
        return out

    for kk in range(k):
        hu = h[0, kk]
        model = _lin(hu, ctx.w_ref[0, kk], "zone1")
        gain = ctx.gain_affine(model, 0, kk)
        tail = beam_terms(hu, [(0, k2) for k2 in range(k) if k2 != kk])
        tail += ctx.cci_terms(0, kk)
        for j in range(k):
            if not opts.noma:
                tail += list(ctx.inner(hu, 1, j))
            elif not opts.relaxed:
                if ctx.alpha[kk, j] == 0:
                    tail += list(ctx.inner(hu, 1, j))
            elif ctx.alpha_free:
                x_ref, z_ref = _majorant_refs(1.0 - ctx.alpha[kk, j], mu_ref[kk, j], mu_floor)
                cx, cz = product_majorant(x_ref, z_ref)
                tail += [pb.var("lam", (kk, j)) * math.sqrt(cx), pb.var("mu", (kk, j)) * math.sqrt(cz)]
            else:
                weight = 1.0 - ctx.alpha[kk, j]
                if weight > 0:
                    tail += [t * math.sqrt(weight) for t in ctx.inner(hu, 1, j)]
        tail.append(pb.const(1.0))
        users.append(dict(zone=0, k=kk, rows=[(gain, tail, "sinr_z1", "trust_z1")]))

    for j in range(k):
        hu = h[1, j]
        model = _lin(hu, ctx.w_ref[1, j], "zone2_own")
        gain = ctx.gain_affine(model, 1, j)
        tail = beam_terms(hu, [(0, k2) for k2 in range(k)] + [(1, j2) for j2 in range(k) if j2 != j])
        tail += ctx.cci_terms(1, j)
        tail.append(pb.const(1.0))
        rows = [(gain, tail, "sinr_z2_own", "trust_z2")]
        if opts.noma:
            if opts.relaxed:
                partners = range(k)
            else:
                partners = [int(kk) for kk in np.flatnonzero(ctx.alpha[:, j] == 1)]
            for kk in partners:
                hs = h[0, kk]
                if opts.relaxed:
                    model = _lin(hs, ctx.w_ref[1, j], "zone2_sic", ctx.alpha[kk, j], eps)
                    a_expr = pb.var("alpha", (kk, j)) if ctx.alpha_free else None
                    sic_gain = ctx.gain_affine(model, 1, j, a_expr)
                else:
                    model = _lin(hs, ctx.w_ref[1, j], "bfs")
                    sic_gain = ctx.gain_affine(model, 1, j)
                sic_tail = beam_terms(hs, [(0, k2) for k2 in range(k)]
                                      + [(1, j2) for j2 in range(k) if j2 != j])
                sic_tail += ctx.cci_terms(0, kk)
                sic_tail.append(pb.const(1.0))
                rows.append((sic_gain, sic_tail, "sic", "trust_sic"))
        users.append(dict(zone=1, k=j, rows=rows))
    return users


def _lin(h, w_ref, variant, alpha_ref=None, eps=1e-3):
    try:
        return linearize_quadratic(h, w_ref, variant, alpha_ref=alpha_ref, epsilon=eps)
    except ValueError as exc:
        raise DegenerateReference(str(exc)) from exc


def _sq_norm_const(tail: list[Affine]) -> float:
    return float(sum(t.const**2 for t in tail))


def _add_dl(ctx: _Context) -> list[tuple[Affine, float, str]]:
    pb, delta = ctx.pb, ctx.cfg.trust_delta
    users = _dl_rows(ctx)
    omega_block = pb.blocks["omega"]
    for u in users:
        ratios = []
        for gain, tail, _, _ in u["rows"]:
            if not gain.const >= delta:
                raise DegenerateReference("expansion point violates a trust region")
            ratios.append(_sq_norm_const(tail) / gain.const)
        omega_block.offset[u["zone"], u["k"]] = max(ratios)
        omega_block.scale[u["zone"], u["k"]] = max(ratios)
    rates = []
    thresholds = np.asarray(ctx.cfg.rate_thresholds_dl).reshape(2, ctx.k)
    for u in users:
        z, kk = u["zone"], u["k"]
        omega = pb.var("omega", (z, kk))
        for gain, tail, sinr_label, trust_label in u["rows"]:
            pb.add_ge(gain - delta, trust_label)
            pb.add_rotated(omega, gain, tail, sinr_label)
        a, b = log_minorant(omega.const)
        rates.append((omega * b + a, float(thresholds[z, kk]), "qos_z1" if z == 0 else "qos_z2"))
    return rates


def _add_ul(ctx: _Context) -> list[tuple[Affine, float, str]]:
    pb, ch, l = ctx.pb, ctx.ch, ctx.l
    it = SolverIterate(w=ctx.w_ref, p=ctx.p_ref, alpha=ctx.alpha, beta=ctx.beta)
    t_block = pb.blocks["t"]
    nu_floor = MAJORANT_FLOOR * max(max(ctx.cfg.p_ul_max), 1e-300)
    bundles = []
    for ell in range(l):
        mn = ul_minorant(ch, it, ell)
        tail = [pb.var("p", (ell,)) * math.sqrt(mn.lam[ell])]
        if ctx.dl_on and ch.rho_sq > 0 and mn.xi_factor.size:
            m = mn.xi_factor.conj().T @ ch.g_si.conj().T * math.sqrt(ch.rho_sq)
            for zb in range(2):
                for kb in range(ctx.k):
                    for row in m:
                        tail.extend(ctx.inner(row.conj(), zb, kb))
        for mm in range(l):
            if mm == ell or mn.lam[mm] <= 0:
                continue
            if ctx.beta_free:
                x_ref, z_ref = _majorant_refs(ctx.beta[ell, mm], ctx.p_ref[mm] ** 2, nu_floor)
                cx, cz = product_majorant(x_ref, z_ref)
                tail += [pb.var("beta", (ell, mm)) * math.sqrt(mn.lam[mm] * cx),
                         pb.var("nu", (mm,)) * math.sqrt(mn.lam[mm] * cz)]
            elif ctx.beta[ell, mm] > 0:
                tail.append(pb.var("p", (mm,)) * math.sqrt(mn.lam[mm] * ctx.beta[ell, mm]))
        phi0 = _sq_norm_const(tail) + mn.xi_trace
        t_block.offset[ell] = phi0
        t_block.scale[ell] = max(abs(phi0), 1.0)
        bundles.append((mn, tail))
    rates = []
    thresholds = np.asarray(ctx.cfg.rate_thresholds_ul)
    for ell, (mn, tail) in enumerate(bundles):
        t = pb.var("t", (ell,))
        pb.add_rotated(t - mn.xi_trace, pb.const(1.0), tail, None, tag="ul_epigraph")
        rate = pb.var("p", (ell,)) * mn.lin + mn.const - t
        rates.append((rate, float(thresholds[ell]), "qos_ul"))
    return rates


def _add_power(ctx: _Context) -> None:
    pb, cfg = ctx.pb, ctx.cfg
    if ctx.dl_on:
        tail = []
        for z in range(2):
            for kk in range(ctx.k):
                for c in range(2 * ctx.n):
                    tail.append(pb.var("w", (z, kk, c)))
        pb.add_soc(pb.const(math.sqrt(cfg.p_bs_max)), tail, "power_bs")
    if ctx.ul_on:
        for ell in range(ctx.l):
            p = pb.var("p", (ell,))
            pmax = cfg.p_ul_max[ell]
            if ctx.beta_free:
                nu = pb.var("nu", (ell,))
                pb.add_rotated(nu, pb.const(1.0), [p], "power_ul")
                pb.add_ge(pmax - nu, None, tag="nu_box")
            else:
                pb.add_ge(math.sqrt(pmax) - p, "power_ul")
            pb.add_ge(p, "p_nonneg")


def _add_alpha(ctx: _Context) -> None:
    pb, k = ctx.pb, ctx.k
    if not ctx.alpha_free:
        return
    for r in range(k):
        pb.add_eq(sum((pb.var("alpha", (r, c)) for c in range(k)), pb.zero()) - 1.0, "alpha_rows")
    for c in range(k):
        pb.add_eq(sum((pb.var("alpha", (r, c)) for r in range(k)), pb.zero()) - 1.0, "alpha_cols")
    for r in range(k):
        for c in range(k):
            a = pb.var("alpha", (r, c))
            pb.add_ge(a, "alpha_lo")
            pb.add_ge(1.0 - a, "alpha_hi")
            pb.add_eq(pb.var("lam", (r, c)) + a - 1.0, "lambda_def")
            re, im = ctx.inner(ctx.ch.h_dl[0, r], 1, c)
            pb.add_rotated(pb.var("mu", (r, c)), pb.const(1.0), [re, im], "mu_cone")


def _add_beta(ctx: _Context) -> None:
    pb, l = ctx.pb, ctx.l
    if not ctx.beta_free:
        return
    omega = ctx.cfg.lse_sharpness
    thr = lse_threshold(omega)
    for r in range(l):
        for c in range(l):
            b = pb.var("beta", (r, c))
            pb.add_ge(b, "beta_lo")
            pb.add_ge(1.0 - b, "beta_hi")
    sums = ctx.beta.sum(1)
    for r in range(l):
        for c in range(l):
            if r == c:
                pb.add_eq(pb.var("beta", (r, r)), "beta_order")
            elif r < c:
                pb.add_eq(pb.var("beta", (r, c)) + pb.var("beta", (c, r)) - 1.0, "beta_order")
            else:
                # separation of the row sums of c and r (c < r), one row per unordered pair
                s = (sum((pb.var("beta", (c, m)) for m in range(l)), pb.zero())
                     - sum((pb.var("beta", (r, m)) for m in range(l)), pb.zero()))
                value, slope = lse_linearize(float(sums[c] - sums[r]), omega)
                pb.add_ge((s - float(sums[c] - sums[r])) * slope + value - thr, "beta_order")


def _penalty_terms(ctx: _Context, name: str) -> Affine:
    pb, rho = ctx.pb, ctx.opts.rho
    ref = pb.blocks[name].offset
    # rho * ((2 v_ref - 1) v - v_ref^2), tangent to rho (v^2 - v)
    return pb.linear(name, rho * (2.0 * ref - 1.0), const=float(-rho * np.sum(ref**2)))


def _build(channels: ChannelSet, config: SystemConfig, it: SolverIterate, opts: BuildOptions) -> ConicProgram:
    if channels.n_zones != 2:
        raise ValueError("the solver handles two zones")
    ctx = _Context(channels, config, it, opts)
    _declare(ctx, it)
    pb = ctx.pb
    dl_rates = _add_dl(ctx) if ctx.dl_on else []
    ul_rates = _add_ul(ctx) if ctx.ul_on else []
    _add_power(ctx)
    _add_alpha(ctx)
    _add_beta(ctx)

    if opts.objective == "eta":
        margins = [r.const - thr for r, thr, _ in dl_rates + ul_rates]
        pb.blocks["eta"].offset[0] = min(margins) if margins else 0.0
        eta = pb.var("eta", (0,))
        for rate, thr, label in dl_rates + ul_rates:
            pb.add_ge(rate - thr - eta, label)
        pb.maximize(eta)
    else:
        for rate, thr, label in dl_rates + ul_rates:
            pb.add_ge(rate - thr, label)
        if opts.objective in ("total", "dl"):
            for rate, _, _ in dl_rates:
                pb.maximize(rate)
        if opts.objective in ("total", "ul"):
            for rate, _, _ in ul_rates:
                pb.maximize(rate)
        if opts.rho > 0:
            if ctx.alpha_free and opts.objective in ("total", "dl"):
                pb.maximize(_penalty_terms(ctx, "alpha"))
            if ctx.beta_free and opts.objective in ("total", "ul"):
                pb.maximize(_penalty_terms(ctx, "beta"))
    pb.info.update(options=opts, alpha=ctx.alpha, beta=ctx.beta, w_ref=ctx.w_ref, p_ref=ctx.p_ref)
    return pb.build()


# public builders -------------------------------------------------------------

def build_cr_subproblem(channels: ChannelSet, config: SystemConfig, iterate: SolverIterate) -> ConicProgram:
    return _build(channels, config, iterate, BuildOptions(relaxed=True))


def build_crpf_subproblem(channels: ChannelSet, config: SystemConfig, iterate: SolverIterate,
                          rho: float) -> ConicProgram:
    if rho < 0:
        raise ValueError("rho must be nonnegative")
    return _build(channels, config, iterate, BuildOptions(relaxed=True, rho=float(rho)))


def build_bfs_subproblem(channels: ChannelSet, config: SystemConfig, alpha, beta, iterate: SolverIterate,
                         noma: bool = True, links: str = "both", objective: str = "total") -> ConicProgram:
    a = np.asarray(getattr(alpha, "alpha", alpha), float)
    b = np.asarray(getattr(beta, "beta", beta), float)
    if not (np.all((a == 0) | (a == 1)) and np.all((b == 0) | (b == 1))):
        raise ValueError("fixed-association subproblems need a binary association")
    opts = BuildOptions(relaxed=False, alpha_fixed=a, beta_fixed=b, noma=noma, links=links, objective=objective)
    return _build(channels, config, iterate, opts)


def build_init_programs(channels: ChannelSet, config: SystemConfig, phase: str, iterate: SolverIterate,
                        fixed: dict | None = None, rho: float = 1.0, noma: bool = True,
                        links: str = "both") -> ConicProgram:
    """Initialization programs.

    ``cr_dl``/``crpf_dl`` hold the decoding order at ``fixed["beta"]`` and
    maximize the downlink surrogate; ``cr_ul``/``crpf_ul`` hold the pairing at
    ``fixed["alpha"]`` and maximize the uplink surrogate. ``cr_eta`` maximizes
    the smallest QoS margin with the decoding order held. ``bfs_eta``
    maximizes that margin at a binary association given by ``fixed``.
    """
    fixed = fixed or {}
    if phase not in PHASES:
        raise ValueError(f"unknown phase '{phase}'")
    penalty = rho if phase.startswith("crpf") else 0.0
    if phase in ("cr_dl", "crpf_dl", "cr_eta"):
        if "beta" not in fixed:
            raise ValueError(f"{phase} needs a fixed decoding order")
        objective = "eta" if phase == "cr_eta" else "dl"
        opts = BuildOptions(relaxed=True, beta_fixed=np.asarray(fixed["beta"], float),
                            objective=objective, rho=penalty)
    elif phase in ("cr_ul", "crpf_ul"):
        if "alpha" not in fixed:
            raise ValueError(f"{phase} needs a fixed pairing")
        opts = BuildOptions(relaxed=True, alpha_fixed=np.asarray(fixed["alpha"], float),
                            objective="ul", rho=penalty)
    else:
        if "alpha" not in fixed or "beta" not in fixed:
            raise ValueError("bfs_eta needs a fixed association")
        return build_bfs_subproblem(channels, config, fixed["alpha"], fixed["beta"], iterate,
                                    noma=noma, links=links, objective="eta")
    return _build(channels, config, iterate, opts)


def iterate_from_solution(program: ConicProgram, values: np.ndarray, previous: SolverIterate) -> SolverIterate:
    """New iterate from a program's model-unit solution; held parts are copied through."""
    parts = program.extract(values)
    opts: BuildOptions = program.info["options"]
    if "w" in parts:
        n = parts["w"].shape[-1] // 2
        w = parts["w"][..., :n] + 1j * parts["w"][..., n:]
    else:
        w = np.zeros_like(np.asarray(previous.w, complex))
    p = np.maximum(parts["p"], 0.0) if "p" in parts else (
        np.zeros_like(previous.p) if opts.links == "dl" else np.asarray(previous.p, float))
    alpha = np.array(parts["alpha"]) if "alpha" in parts else np.asarray(program.info["alpha"])
    beta = np.array(parts["beta"]) if "beta" in parts else np.asarray(program.info["beta"])
    return SolverIterate(
        w=w, p=p, alpha=alpha, beta=beta,
        omega=parts.get("omega", previous.omega),
        lam=parts.get("lam", 1.0 - alpha),
        mu=parts.get("mu", previous.mu),
        nu=parts.get("nu", p**2),
    )
