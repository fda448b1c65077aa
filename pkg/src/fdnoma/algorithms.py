"""Outer iterative algorithms, their initializers, post-processing and baselines.

Every loop solves a sequence of conic subproblems built at the current
iterate. The recorded ``objective`` of an iteration is the optimal value of its
subproblem; within one phase of a run these values are nondecreasing because
each subproblem admits the previous solution with a value equal to the exact
objective there.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .association import (
    DecodingOrder,
    PairingMatrix,
    binary_gap,
    draw_relaxed_order,
    enumerate_associations,
    random_association,
    round_and_project,
)
from .channel import ChannelSet, SystemConfig
from .conic import (
    DegenerateReference,
    build_bfs_subproblem,
    build_cr_subproblem,
    build_crpf_subproblem,
    build_init_programs,
    iterate_from_solution,
    solve,
)
from .conic.program import ConicProgram
from .rates import RateReport, total_se_and_qos
from .surrogate import SolverIterate, relaxed_dl_sinrs, relaxed_ul_rates

# constraint violation tolerated at the expansion point before a subproblem is solved
REFERENCE_TOL = 1e-6
FREEZE_GAP = 1e-2
INIT_RHO = 1.0
SCHEMES = ("ica_cr", "ica_cr_pf", "ica_bfs", "fd_noma_rua", "hd_noma", "fd_conventional")


@dataclass(frozen=True)
class TraceRow:
    iteration: int
    phase: str
    objective: float
    exact_se: float
    u_inf: float = 0.0
    rho: float = 0.0


@dataclass
class RunResult:
    scheme: str
    final_se: float
    status: str
    alpha: PairingMatrix | None = None
    beta: DecodingOrder | None = None
    w: np.ndarray | None = None
    p: np.ndarray | None = None
    report: RateReport | None = None
    trace: list[TraceRow] = field(default_factory=list)
    wallclock: float = 0.0
    n_associations_tried: int = 0
    note: str = ""

    @property
    def final_se_bits(self) -> float:
        return self.final_se / math.log(2.0)

    @property
    def qos_ok(self) -> bool:
        return self.report is not None and self.report.qos_ok

    @property
    def feasible(self) -> bool:
        return self.status in ("converged", "max_iters") and self.qos_ok

    @property
    def iterations(self) -> int:
        return len(self.trace)

    @property
    def durr(self) -> float:
        return self.report.durr if self.report is not None else math.nan

    def phase_objectives(self) -> dict[str, list[float]]:
        out: dict[str, list[float]] = {}
        for row in self.trace:
            out.setdefault(row.phase, []).append(row.objective)
        return out


def monotonicity_violations(result: RunResult, rel_slack: float = 1e-6) -> list[tuple[str, int, float, float]]:
    """(phase, iteration, previous, current) for every objective drop beyond ``rel_slack``.

    Only consecutive rows of one phase with the same penalty weight optimize
    the same surrogate family, so only those pairs are compared.
    """
    drops = []
    last: dict[str, TraceRow] = {}
    for row in result.trace:
        prev = last.get(row.phase)
        if prev is not None and prev.rho == row.rho:
            if row.objective < prev.objective - rel_slack * max(1.0, abs(prev.objective)):
                drops.append((row.phase, row.iteration, prev.objective, row.objective))
        last[row.phase] = row
    return drops


class _Failure(Exception):
    def __init__(self, status: str, note: str):
        super().__init__(note)
        self.status = status
        self.note = note


def default_schedule(base: float = 3.0, cap: float = 1e6) -> Callable[[int], float]:
    """Penalty weight base**kappa (kappa = 1, 2, ...) capped at ``cap``."""
    def schedule(kappa: int) -> float:
        return float(min(base ** kappa, cap))
    return schedule


def matched_start(channels: ChannelSet, config: SystemConfig, alpha, beta, links: str = "both") -> SolverIterate:
    """Matched-filter beams at 0.9 of the BS budget split equally, uplink amplitudes at half their maximum."""
    h = channels.h_dl
    norms = np.linalg.norm(h, axis=-1, keepdims=True)
    directions = np.divide(h, norms, out=np.zeros_like(h), where=norms > 0)
    n_beams = h.shape[0] * h.shape[1]
    w = directions * math.sqrt(0.9 * config.p_bs_max / n_beams)
    p = np.sqrt(np.asarray(config.p_ul_max, dtype=float)) / 2.0
    if links == "ul":
        w = np.zeros_like(w)
    if links == "dl":
        p = np.zeros_like(p)
    return SolverIterate(w=w, p=p, alpha=np.asarray(alpha, float), beta=np.asarray(beta, float))


def _links_qos(report: RateReport, links: str) -> bool:
    dl = bool(report.qos_dl.all())
    ul = bool(report.qos_ul.all())
    return {"both": dl and ul, "dl": dl, "ul": ul}[links]


def _exact(channels, config, it: SolverIterate, alpha, beta, noma=True) -> RateReport:
    return total_se_and_qos(channels, it.w, it.p, alpha, beta, config, noma=noma)


def _step(program_factory: Callable[[], ConicProgram], it: SolverIterate, check_reference: bool,
          degenerate_status: str = "subproblem_failure"):
    """Build, verify the expansion point, solve and return (program, solution, new iterate)."""
    try:
        program = program_factory()
    except DegenerateReference as exc:
        raise _Failure(degenerate_status, f"degenerate reference: {exc}") from exc
    if check_reference:
        res = program.residual()
        if res > REFERENCE_TOL:
            raise _Failure("subproblem_failure", f"iterate infeasible for its subproblem (residual {res:.3g})")
    sol = solve(program)
    if not sol.ok:
        raise _Failure("subproblem_failure", f"solver status {sol.status} ({sol.raw_status})")
    return program, sol, iterate_from_solution(program, sol.values, it)


# fixed-association pipeline ----------------------------------------------------

def _eta_phase(channels, config, it, alpha, beta, noma, links, trace, label="init_eta"):
    """Raise the smallest QoS margin until every exact QoS constraint holds."""
    last = -math.inf
    for _ in range(config.max_init_iters):
        rep = _exact(channels, config, it, alpha, beta, noma)
        if _links_qos(rep, links):
            return it
        # a start with no usable channel gain cannot be repaired: report it as an infeasible start
        _, sol, it = _step(lambda: build_bfs_subproblem(channels, config, alpha, beta, it, noma=noma,
                                                        links=links, objective="eta"), it, False,
                           degenerate_status="infeasible_init")
        trace.append(TraceRow(len(trace), label, sol.objective_value, rep.total_se))
        if sol.objective_value < 0 and sol.objective_value - last < 1e-9:
            break  # the margin has stalled below zero
        last = sol.objective_value
    rep = _exact(channels, config, it, alpha, beta, noma)
    if _links_qos(rep, links):
        return it
    raise _Failure("infeasible_init", "QoS margin stayed negative")


def _fixed_iterations(channels, config, it, alpha, beta, noma, links, trace, label="fixed"):
    """Convex iterations at a fixed binary association; returns (iterate, status)."""
    prev = None
    for _ in range(config.max_iters):
        program, sol, it = _step(lambda: build_bfs_subproblem(channels, config, alpha, beta, it, noma=noma,
                                                              links=links), it, True)
        if prev is None:
            prev = program.objective_at()
        rep = _exact(channels, config, it, alpha, beta, noma)
        trace.append(TraceRow(len(trace), label, sol.objective_value, rep.total_se))
        if abs(sol.objective_value - prev) < config.tolerance:
            return it, "converged"
        prev = sol.objective_value
    return it, "max_iters"


def post_process(channels: ChannelSet, config: SystemConfig, alpha, beta, iterate: SolverIterate,
                 noma: bool = True, links: str = "both", trace: list | None = None,
                 restart: bool = True) -> tuple[SolverIterate, str]:
    """Refine (w, p) at a binary association.

    When the starting point misses a QoS target the smallest margin is raised
    first. With ``restart`` the same iterations are also run from the matched
    start and the result with the larger exact SE is kept; the refinement
    from ``iterate`` alone already never lowers the SE of ``iterate``.
    Returns the refined iterate and a status, ``infeasible_init`` when the
    QoS targets cannot be met at this association.
    """
    trace = [] if trace is None else trace
    a = np.asarray(getattr(alpha, "alpha", alpha), float)
    b = np.asarray(getattr(beta, "beta", beta), float)
    starts = [("", SolverIterate(w=np.asarray(iterate.w, complex), p=np.asarray(iterate.p, float),
                                 alpha=a, beta=b))]
    if restart:
        starts.append(("restart_", matched_start(channels, config, a, b, links)))
    best = None
    for prefix, it in starts:
        rows: list[TraceRow] = []
        try:
            it = _eta_phase(channels, config, it, a, b, noma, links, rows, prefix + "post_eta")
            it, status = _fixed_iterations(channels, config, it, a, b, noma, links, rows, prefix + "fixed")
        except _Failure as exc:
            status = exc.status
        for row in rows:
            trace.append(TraceRow(len(trace), row.phase, row.objective, row.exact_se, row.u_inf, row.rho))
        if status == "infeasible_init":
            candidate = (-math.inf, it, status)
        else:
            candidate = (_exact(channels, config, it, a, b, noma).total_se, it, status)
        if best is None or candidate[0] > best[0]:
            best = candidate
    return best[1], best[2]


def _fixed_pipeline(channels, config, alpha, beta, noma=True, links="both", trace=None):
    """Matched start, QoS repair, then fixed-association iterations."""
    trace = [] if trace is None else trace
    a = np.asarray(getattr(alpha, "alpha", alpha), float)
    b = np.asarray(getattr(beta, "beta", beta), float)
    it = matched_start(channels, config, a, b, links)
    it = _eta_phase(channels, config, it, a, b, noma, links, trace)
    it, status = _fixed_iterations(channels, config, it, a, b, noma, links, trace)
    return it, status


def _finish(scheme, channels, config, it, alpha, beta, status, trace, t0, noma=True, tried=0, note=""):
    alpha = alpha if isinstance(alpha, PairingMatrix) else PairingMatrix(alpha)
    beta = beta if isinstance(beta, DecodingOrder) else DecodingOrder(beta)
    rep = total_se_and_qos(channels, it.w, it.p, alpha, beta, config, noma=noma)
    return RunResult(scheme=scheme, final_se=rep.total_se, status=status, alpha=alpha, beta=beta,
                     w=np.asarray(it.w), p=np.asarray(it.p), report=rep, trace=trace,
                     wallclock=time.perf_counter() - t0, n_associations_tried=tried, note=note)


def _infeasible(scheme, channels, config, t0, trace, note, tried=0, status="infeasible_init"):
    k, l = channels.users_per_zone, channels.n_uplink
    it = SolverIterate(w=np.zeros_like(channels.h_dl), p=np.zeros(l), alpha=np.eye(k), beta=np.zeros((l, l)))
    res = _finish(scheme, channels, config, it, np.eye(k), np.triu(np.ones((l, l)), 1), status, trace, t0,
                  tried=tried, note=note)
    return res


# initialization ----------------------------------------------------------------

def _relaxed_qos_ok(channels, config, it: SolverIterate) -> bool:
    eps = config.pairing_epsilon
    dl = np.log1p(relaxed_dl_sinrs(channels, it.w, it.p, it.alpha, eps)).ravel()
    ul = relaxed_ul_rates(channels, it.w, it.p, it.beta)
    return bool(np.all(dl >= np.asarray(config.rate_thresholds_dl) - 1e-6)
                and np.all(ul >= np.asarray(config.rate_thresholds_ul) - 1e-6))


def _init_relaxed(channels, config, rng, penalized: bool, trace) -> SolverIterate:
    k, l = channels.users_per_zone, channels.n_uplink
    rho = INIT_RHO if penalized else 0.0
    dl_phase, ul_phase = ("crpf_dl", "crpf_ul") if penalized else ("cr_dl", "cr_ul")
    last = _Failure("infeasible_init", "no attempt made")
    for attempt in range(config.init_retries):
        beta_bar = draw_relaxed_order(l, rng)
        tag = "init" if attempt == 0 else f"retry{attempt}"
        it = matched_start(channels, config, np.full((k, k), 1.0 / k), beta_bar)
        try:
            for _ in range(config.max_init_iters):
                if _relaxed_qos_ok(channels, config, it):
                    break
                _, sol, it = _step(lambda: build_init_programs(channels, config, "cr_eta", it,
                                                               {"beta": beta_bar}), it, False)
                trace.append(TraceRow(len(trace), f"{tag}_eta", sol.objective_value, math.nan))
            else:
                if not _relaxed_qos_ok(channels, config, it):
                    raise _Failure("infeasible_init", "QoS margin stayed negative")
            _, sol, it = _step(lambda: build_init_programs(channels, config, dl_phase, it,
                                                           {"beta": beta_bar}, rho=rho), it, False)
            trace.append(TraceRow(len(trace), f"{tag}_dl", sol.objective_value, math.nan, rho=rho))
            alpha_bar = np.array(it.alpha)
            _, sol, it = _step(lambda: build_init_programs(channels, config, ul_phase, it,
                                                           {"alpha": alpha_bar}, rho=rho), it, False)
            trace.append(TraceRow(len(trace), f"{tag}_ul", sol.objective_value, math.nan, rho=rho))
            return it
        except _Failure as exc:
            last = exc
    raise _Failure("infeasible_init", f"initialization failed after {config.init_retries} attempts: {last.note}")


def initialize(channels: ChannelSet, config: SystemConfig, scheme: str, association=None,
               seed=0, trace: list | None = None) -> SolverIterate:
    """Feasible starting iterate for ``scheme`` in {"cr", "crpf", "bfs"}.

    Raises ``RuntimeError`` when no feasible start is found.
    """
    trace = [] if trace is None else trace
    try:
        if scheme in ("cr", "crpf"):
            return _init_relaxed(channels, config, np.random.default_rng(seed), scheme == "crpf", trace)
        if scheme == "bfs":
            if association is None:
                raise ValueError("bfs initialization needs an association")
            alpha, beta = association
            a = np.asarray(getattr(alpha, "alpha", alpha), float)
            b = np.asarray(getattr(beta, "beta", beta), float)
            return _eta_phase(channels, config, matched_start(channels, config, a, b), a, b, True, "both", trace)
    except _Failure as exc:
        raise RuntimeError(exc.note) from exc
    raise ValueError(f"unknown scheme '{scheme}'")


# relaxed algorithms --------------------------------------------------------------

def _snapshot_se(channels, config, it) -> float:
    a, b = round_and_project(PairingMatrix(it.alpha, relaxed=True), DecodingOrder(it.beta, relaxed=True))
    return total_se_and_qos(channels, it.w, it.p, a, b, config).total_se


def _relaxed_run(scheme, channels, config, seed, schedule=None, restart=True):
    t0 = time.perf_counter()
    trace: list[TraceRow] = []
    penalized = schedule is not None
    try:
        it = _init_relaxed(channels, config, np.random.default_rng(seed), penalized, trace)
    except _Failure as exc:
        return _infeasible(scheme, channels, config, t0, trace, exc.note)
    status, note = "max_iters", ""
    prev = None
    try:
        for kappa in range(1, config.max_iters + 1):
            rho = schedule(kappa) if penalized else 0.0
            factory = ((lambda: build_crpf_subproblem(channels, config, it, rho)) if penalized
                       else (lambda: build_cr_subproblem(channels, config, it)))
            program, sol, it = _step(factory, it, True)
            if prev is None:
                prev = program.objective_at()
            gap = binary_gap(it.alpha, it.beta)
            trace.append(TraceRow(len(trace), "relaxed", sol.objective_value,
                                  _snapshot_se(channels, config, it), gap, rho))
            if penalized:
                if gap < FREEZE_GAP:
                    status = "converged"
                    break
            elif abs(sol.objective_value - prev) < config.tolerance:
                status = "converged"
                break
            prev = sol.objective_value
    except _Failure as exc:
        status, note = exc.status, exc.note
    alpha, beta = round_and_project(PairingMatrix(it.alpha, relaxed=True), DecodingOrder(it.beta, relaxed=True))
    refined, post_status = post_process(channels, config, alpha, beta, it, trace=trace, restart=restart)
    if status == "converged" and post_status != "converged":
        status = post_status
        note = note or f"post-processing ended with {post_status}"
    if post_status == "infeasible_init":
        # QoS unreachable at the rounded association; report the rounded point
        refined = SolverIterate(w=it.w, p=it.p, alpha=alpha.alpha, beta=beta.beta)
    return _finish(scheme, channels, config, refined, alpha, beta, status, trace, t0, note=note)


def ica_cr(channels: ChannelSet, config: SystemConfig, seed=0, restart: bool = True) -> RunResult:
    """Continuous relaxation: iterate the relaxed subproblem, round, then refine."""
    return _relaxed_run("ica_cr", channels, config, seed, restart=restart)


def ica_cr_pf(channels: ChannelSet, config: SystemConfig, penalty_schedule: Callable[[int], float] | None = None,
              seed=0, restart: bool = True) -> RunResult:
    """Penalized continuous relaxation; the association freezes once every relaxed entry is within 1e-2 of binary."""
    return _relaxed_run("ica_cr_pf", channels, config, seed, penalty_schedule or default_schedule(), restart)


# brute force ---------------------------------------------------------------------

def ica_bfs(channels: ChannelSet, config: SystemConfig, seed=0,
            associations: Iterable | None = None) -> RunResult:
    """Solve every (pairing, order) association and keep the best exact SE."""
    t0 = time.perf_counter()
    k, l = channels.users_per_zone, channels.n_uplink
    candidates = associations if associations is not None else enumerate_associations(k, l)
    best, tried, skipped = None, 0, []
    for alpha, beta in candidates:
        tried += 1
        trace: list[TraceRow] = []
        try:
            it, status = _fixed_pipeline(channels, config, alpha, beta, trace=trace)
        except _Failure as exc:
            if exc.status == "infeasible_init":
                skipped.append(tried - 1)
                continue
            it, status = None, exc.status
        if it is None:
            continue
        res = _finish("ica_bfs", channels, config, it, alpha, beta, status, trace, t0)
        if res.qos_ok and (best is None or res.final_se > best.final_se):
            best = res
    if best is None:
        return _infeasible("ica_bfs", channels, config, t0, [], "no association reached a feasible start",
                           tried=tried)
    best.n_associations_tried = tried
    best.wallclock = time.perf_counter() - t0
    if skipped:
        best.note = f"skipped associations {skipped}"
    return best


# baselines -----------------------------------------------------------------------

def _single_pipeline(scheme, channels, config, alpha, beta, noma, links, trace, t0):
    try:
        it, status = _fixed_pipeline(channels, config, alpha, beta, noma=noma, links=links, trace=trace)
        return it, status, ""
    except _Failure as exc:
        return None, exc.status, exc.note


def run_baseline(channels: ChannelSet, config: SystemConfig, which: str, seed=0) -> RunResult:
    """Comparison schemes.

    ``fd_noma_rua``: one uniformly random association, then the fixed-association pipeline.
    ``hd_noma``: downlink-only and uplink-only problems at a random association; SE is their mean.
    ``fd_conventional``: full duplex without pairing SIC, uplink SIC kept with a random order.
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    k, l = channels.users_per_zone, channels.n_uplink
    alpha, beta = random_association(k, l, rng)
    trace: list[TraceRow] = []
    if which in ("fd_noma_rua", "fd_conventional"):
        noma = which == "fd_noma_rua"
        if not noma:
            alpha = PairingMatrix.identity(k)
        it, status, note = _single_pipeline(which, channels, config, alpha, beta, noma, "both", trace, t0)
        if it is None:
            return _infeasible(which, channels, config, t0, trace, note, status=status)
        return _finish(which, channels, config, it, alpha, beta, status, trace, t0, noma=noma,
                       note="" if noma else "reinterpreted no-SIC baseline")
    if which == "hd_noma":
        dl_trace, ul_trace = [], []
        it_dl, st_dl, note_dl = _single_pipeline(which, channels, config, alpha, beta, True, "dl", dl_trace, t0)
        it_ul, st_ul, note_ul = _single_pipeline(which, channels, config, alpha, beta, True, "ul", ul_trace, t0)
        trace = [TraceRow(i, f"{r.phase}_dl", r.objective, r.exact_se) for i, r in enumerate(dl_trace)]
        trace += [TraceRow(len(trace) + i, f"{r.phase}_ul", r.objective, r.exact_se)
                  for i, r in enumerate(ul_trace)]
        if it_dl is None or it_ul is None:
            status = st_dl if it_dl is None else st_ul
            return _infeasible(which, channels, config, t0, trace, note_dl or note_ul, status=status)
        rep_dl = total_se_and_qos(channels, it_dl.w, it_dl.p, alpha, beta, config)
        rep_ul = total_se_and_qos(channels, it_ul.w, it_ul.p, alpha, beta, config)
        report = RateReport(dl_rates=rep_dl.dl_rates / 2.0, ul_rates=rep_ul.ul_rates / 2.0,
                            qos_dl=rep_dl.qos_dl, qos_ul=rep_ul.qos_ul)
        status = "converged" if st_dl == st_ul == "converged" else (st_dl if st_dl != "converged" else st_ul)
        return RunResult(scheme=which, final_se=report.total_se, status=status, alpha=alpha, beta=beta,
                         w=np.asarray(it_dl.w), p=np.asarray(it_ul.p), report=report, trace=trace,
                         wallclock=time.perf_counter() - t0, note="time-shared halves")
    raise ValueError(f"unknown baseline '{which}'")


def run_scheme(scheme: str, channels: ChannelSet, config: SystemConfig, seed=0, **kwargs) -> RunResult:
    restart = kwargs.get("restart", True)
    if scheme == "ica_cr":
        return ica_cr(channels, config, seed, restart)
    if scheme == "ica_cr_pf":
        return ica_cr_pf(channels, config, kwargs.get("penalty_schedule"), seed, restart)
    if scheme == "ica_bfs":
        return ica_bfs(channels, config, seed)
    if scheme in ("fd_noma_rua", "hd_noma", "fd_conventional"):
        return run_baseline(channels, config, scheme, seed)
    raise ValueError(f"unknown scheme '{scheme}'")
