"""Parameter sweeps, Monte-Carlo aggregation and convergence traces written as CSV.

Every (sweep value, topology, realization) cell draws its topology from the
stream ``(seed, topology)`` and its channel from ``(seed, topology,
realization)``. The same instances are therefore reused across sweep values
and schemes, and the output does not depend on how cells are scheduled.
"""
from __future__ import annotations

import configparser
import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .algorithms import SCHEMES, RunResult, default_schedule, run_scheme
from .channel import (
    ChannelSet,
    SystemConfig,
    config_from_mapping,
    db_to_linear,
    dbm_to_watt,
    draw_channels,
    place_users,
)

SWEEP_AXES = ("p_bs_max", "n_antennas", "rho_sq", "rate_threshold")
# largest K!L! for which ica_bfs is accepted in a sweep
BFS_GUARD = 1000
# statuses that end with a returned iterate; combined with the QoS flag they define feasibility
TERMINATED = ("converged", "max_iters")

RESULT_COLUMNS = ("sweep_axis", "sweep_value", "scheme", "topology", "realization", "se_bits", "se_nats",
                  "durr", "qos_pass", "status", "iterations", "associations_tried")
SUMMARY_COLUMNS = ("sweep_axis", "sweep_value", "scheme", "runs", "mean_se_bits", "loss_vs_bfs_pct",
                   "feasibility_rate")
TIMING_COLUMNS = ("sweep_value", "scheme", "topology", "realization", "wallclock_s")
TRACE_COLUMNS = ("iteration", "phase", "objective", "exact_se_bits", "u_inf", "rho")

PRESETS = {
    "desk": (SystemConfig.desk, 20, 10),
    "full": (SystemConfig.full_scale, 1000, 500),
}


class SpecError(ValueError):
    """Invalid experiment description."""


class ParseError(ValueError):
    """Malformed results file; the message names the offending line."""


@dataclass(frozen=True)
class ExperimentSpec:
    """One sweep.

    Sweep values are read in the axis' natural unit: dBm for ``p_bs_max``,
    dB for ``rho_sq``, bits/s/Hz for ``rate_threshold`` and a count for
    ``n_antennas``.
    """

    base: SystemConfig = field(default_factory=SystemConfig)
    sweep_axis: str = "rate_threshold"
    sweep_values: tuple[float, ...] = (1.0,)
    schemes: tuple[str, ...] = SCHEMES
    n_topologies: int = 20
    n_realizations: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.sweep_axis not in SWEEP_AXES:
            raise SpecError(f"sweep axis must be one of {', '.join(SWEEP_AXES)}, got '{self.sweep_axis}'")
        if not self.sweep_values:
            raise SpecError("at least one sweep value is required")
        if not self.schemes:
            raise SpecError("the scheme list is empty")
        unknown = [s for s in self.schemes if s not in SCHEMES]
        if unknown:
            raise SpecError(f"unknown schemes: {', '.join(unknown)}")
        if len(set(self.schemes)) != len(self.schemes):
            raise SpecError("schemes must not repeat")
        if self.n_topologies < 1 or self.n_realizations < 1:
            raise SpecError("n_topologies and n_realizations must be positive")
        if self.sweep_axis == "n_antennas" and any(v != int(v) or v < 1 for v in self.sweep_values):
            raise SpecError("antenna counts must be positive integers")
        if "ica_bfs" in self.schemes:
            k, l = self.base.users_per_zone, self.base.n_uplink
            if math.factorial(k) * math.factorial(l) > BFS_GUARD:
                raise SpecError(f"ica_bfs would try {math.factorial(k) * math.factorial(l)} associations "
                                f"(limit {BFS_GUARD})")
        for value in self.sweep_values:
            self.config_at(value)

    def config_at(self, value: float) -> SystemConfig:
        try:
            if self.sweep_axis == "p_bs_max":
                return self.base.replace(p_bs_max=dbm_to_watt(value))
            if self.sweep_axis == "n_antennas":
                return self.base.replace(n_antennas=int(value))
            if self.sweep_axis == "rho_sq":
                return self.base.replace(rho_sq=db_to_linear(value))
            return self.base.with_rate_threshold_bits(value)
        except ValueError as exc:
            raise SpecError(f"sweep value {value}: {exc}") from exc

    @property
    def n_cells(self) -> int:
        return len(self.sweep_values) * self.n_topologies * self.n_realizations


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.replace(";", ",").split(",") if t.strip())


def spec_from_text(text: str, preset: str = "desk", seed: int | None = None) -> ExperimentSpec:
    """Parse an INI description with an optional ``[system]`` and a required ``[experiment]`` section."""
    if preset not in PRESETS:
        raise SpecError(f"unknown preset '{preset}'")
    make_base, n_topo, n_real = PRESETS[preset]
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise SpecError(str(exc)) from exc
    if not parser.has_section("experiment"):
        raise SpecError("missing [experiment] section")
    try:
        base = make_base()
        if parser.has_section("system"):
            base = config_from_mapping(dict(parser.items("system")), base)
        exp = dict(parser.items("experiment"))
        known = {"sweep", "values", "schemes", "n_topologies", "n_realizations", "seed"}
        extra = sorted(set(exp) - known)
        if extra:
            raise SpecError(f"unknown experiment keys: {', '.join(extra)}")
        if "sweep" not in exp or "values" not in exp:
            raise SpecError("[experiment] needs 'sweep' and 'values'")
        schemes = tuple(s.strip() for s in exp.get("schemes", ",".join(SCHEMES)).split(",") if s.strip())
        return ExperimentSpec(
            base=base,
            sweep_axis=exp["sweep"].strip(),
            sweep_values=_floats(exp["values"]),
            schemes=schemes,
            n_topologies=int(exp.get("n_topologies", n_topo)),
            n_realizations=int(exp.get("n_realizations", n_real)),
            seed=int(seed if seed is not None else exp.get("seed", 0)),
        )
    except SpecError:
        raise
    except (KeyError, ValueError) as exc:
        raise SpecError(str(exc).strip("'\"")) from exc


def load_spec(path: str | Path, preset: str = "desk", seed: int | None = None) -> ExperimentSpec:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise SpecError(f"cannot read {path}: {exc.strerror}") from exc
    return spec_from_text(text, preset, seed)


# instances -------------------------------------------------------------------------

def cell_channels(config: SystemConfig, seed: int, topology: int, realization: int) -> ChannelSet:
    topo = place_users(config, np.random.SeedSequence([seed, topology]))
    return draw_channels(topo, config, np.random.SeedSequence([seed, topology, realization]))


def cell_seed(seed: int, topology: int, realization: int) -> int:
    """Seed for the randomized parts of a scheme (association draws, relaxed start orders)."""
    return int(np.random.SeedSequence([seed, topology, realization, 1]).generate_state(1)[0])


def _fmt(x: float) -> str:
    return repr(float(x))


def _association_fields(result: RunResult, k: int, l: int) -> list[str]:
    alpha = result.alpha.alpha if result.alpha is not None else np.zeros((k, k))
    beta = result.beta.beta if result.beta is not None else np.zeros((l, l))
    return [str(int(v)) for v in np.asarray(alpha).ravel()] + [str(int(v)) for v in np.asarray(beta).ravel()]


def association_columns(k: int, l: int) -> list[str]:
    return ([f"alpha_{i}_{j}" for i in range(k) for j in range(k)]
            + [f"beta_{i}_{j}" for i in range(l) for j in range(l)])


def _run_cell(job):
    spec, index, topology, realization = job
    value = spec.sweep_values[index]
    config = spec.config_at(value)
    channels = cell_channels(config, spec.seed, topology, realization)
    seed = cell_seed(spec.seed, topology, realization)
    k, l = config.users_per_zone, config.n_uplink
    rows, timings = [], []
    for scheme in spec.schemes:
        res = run_scheme(scheme, channels, config, seed)
        head = [spec.sweep_axis, _fmt(value), scheme, str(topology), str(realization)]
        rows.append(head + [_fmt(res.final_se_bits), _fmt(res.final_se), _fmt(res.durr),
                            str(int(res.qos_ok)), res.status, str(res.iterations),
                            str(res.n_associations_tried)] + _association_fields(res, k, l))
        timings.append([_fmt(value), scheme, str(topology), str(realization), f"{res.wallclock:.6f}"])
    return rows, timings


def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


@dataclass(frozen=True)
class ExperimentOutput:
    results: Path
    aggregate: Path
    timings: Path
    any_feasible: bool


def run_experiment(spec: ExperimentSpec, out_dir: str | Path, threads: int = 1) -> ExperimentOutput:
    """Run every cell and scheme; write results.csv, aggregate.csv and timings.csv under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(spec, i, t, r) for i in range(len(spec.sweep_values))
            for t in range(spec.n_topologies) for r in range(spec.n_realizations)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            outputs = list(pool.map(_run_cell, jobs))
    else:
        outputs = [_run_cell(job) for job in jobs]
    rows = [row for cell_rows, _ in outputs for row in cell_rows]
    timings = [row for _, cell_timings in outputs for row in cell_timings]
    header = list(RESULT_COLUMNS) + association_columns(spec.base.users_per_zone, spec.base.n_uplink)
    results = out / "results.csv"
    _write_csv(results, header, rows)
    timing_path = out / "timings.csv"
    _write_csv(timing_path, TIMING_COLUMNS, timings)
    summary = emit_summary(results)
    aggregate = out / "aggregate.csv"
    write_summary_csv(summary, aggregate)
    feasible = any(row[8] == "1" and row[9] in TERMINATED for row in rows)
    return ExperimentOutput(results=results, aggregate=aggregate, timings=timing_path, any_feasible=feasible)


# summaries -------------------------------------------------------------------------

@dataclass(frozen=True)
class ResultRow:
    sweep_axis: str
    sweep_value: float
    scheme: str
    se_bits: float
    qos_pass: bool
    status: str

    @property
    def feasible(self) -> bool:
        return self.qos_pass and self.status in TERMINATED


@dataclass(frozen=True)
class SummaryRow:
    sweep_axis: str
    sweep_value: float
    scheme: str
    runs: int
    mean_se_bits: float
    loss_vs_bfs_pct: float
    feasibility_rate: float


def read_results(source) -> list[ResultRow]:
    """Parse a results CSV (path or text stream)."""
    if isinstance(source, (str, Path)):
        try:
            text = Path(source).read_text()
        except OSError as exc:
            raise ParseError(f"cannot read {source}: {exc.strerror}") from exc
        source = io.StringIO(text)
    reader = csv.reader(source)
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("line 1: empty file") from None
    except csv.Error as exc:
        raise ParseError(f"line 1: {exc}") from exc
    missing = [c for c in RESULT_COLUMNS if c not in header]
    if missing:
        raise ParseError(f"line 1: header lacks {', '.join(missing)}")
    col = {name: header.index(name) for name in RESULT_COLUMNS}
    rows = []
    while True:
        try:
            fields = next(reader)
        except StopIteration:
            break
        except csv.Error as exc:
            raise ParseError(f"line {reader.line_num}: {exc}") from exc
        line = reader.line_num
        if not fields:
            continue
        if len(fields) != len(header):
            raise ParseError(f"line {line}: expected {len(header)} fields, found {len(fields)}")
        try:
            qos = fields[col["qos_pass"]]
            if qos not in ("0", "1"):
                raise ValueError(f"qos_pass must be 0 or 1, got '{qos}'")
            scheme = fields[col["scheme"]]
            if scheme not in SCHEMES:
                raise ValueError(f"unknown scheme '{scheme}'")
            se = float(fields[col["se_bits"]])
            if math.isnan(se):
                raise ValueError("se_bits is nan")
            rows.append(ResultRow(sweep_axis=fields[col["sweep_axis"]],
                                  sweep_value=float(fields[col["sweep_value"]]),
                                  scheme=scheme, se_bits=se, qos_pass=qos == "1",
                                  status=fields[col["status"]]))
        except ValueError as exc:
            raise ParseError(f"line {line}: {exc}") from exc
    return rows


def summarize_rows(rows: list[ResultRow]) -> list[SummaryRow]:
    """Mean SE, loss against ica_bfs (percent) and feasibility rate per (sweep value, scheme)."""
    groups: dict[tuple[str, float, str], list[ResultRow]] = {}
    for row in rows:
        groups.setdefault((row.sweep_axis, row.sweep_value, row.scheme), []).append(row)
    means = {key: math.fsum(r.se_bits for r in grp) / len(grp) for key, grp in groups.items()}
    order = {s: i for i, s in enumerate(SCHEMES)}
    out = []
    for key in sorted(groups, key=lambda k: (k[0], k[1], order[k[2]])):
        axis, value, scheme = key
        grp = groups[key]
        bfs = means.get((axis, value, "ica_bfs"))
        loss = 100.0 * (bfs - means[key]) / bfs if bfs else math.nan
        out.append(SummaryRow(axis, value, scheme, len(grp), means[key], loss,
                              sum(r.feasible for r in grp) / len(grp)))
    return out


def emit_summary(results) -> list[SummaryRow]:
    return summarize_rows(read_results(results))


def _g6(x: float) -> str:
    return "nan" if math.isnan(x) else format(x, ".6g")


def format_summary(summary: list[SummaryRow]) -> str:
    """Fixed-width table with 6 significant digits."""
    lines = [" ".join(f"{c:>16}" for c in SUMMARY_COLUMNS)]
    for s in summary:
        cells = (s.sweep_axis, _g6(s.sweep_value), s.scheme, str(s.runs), _g6(s.mean_se_bits),
                 _g6(s.loss_vs_bfs_pct), _g6(s.feasibility_rate))
        lines.append(" ".join(f"{c:>16}" for c in cells))
    return "\n".join(lines) + "\n"


def write_summary_csv(summary: list[SummaryRow], path: str | Path) -> None:
    rows = [[s.sweep_axis, _fmt(s.sweep_value), s.scheme, str(s.runs), _fmt(s.mean_se_bits),
             _fmt(s.loss_vs_bfs_pct), _fmt(s.feasibility_rate)] for s in summary]
    _write_csv(Path(path), SUMMARY_COLUMNS, rows)


# traces ----------------------------------------------------------------------------

def trace_convergence(config: SystemConfig, scheme: str, penalty_base: float = 3.0, seed: int = 0,
                      out_path: str | Path | None = None) -> RunResult:
    """Run one relaxed scheme on the instance of cell (seed, 0, 0) and optionally write its trace CSV.

    Exact SE entries are in bits; rows of the initialization phases carry nan.
    """
    if scheme not in ("ica_cr", "ica_cr_pf"):
        raise SpecError("traces are available for ica_cr and ica_cr_pf only")
    if not penalty_base > 1.0:
        raise SpecError("the penalty base must exceed 1")
    channels = cell_channels(config, seed, 0, 0)
    kwargs = {"penalty_schedule": default_schedule(penalty_base)} if scheme == "ica_cr_pf" else {}
    result = run_scheme(scheme, channels, config, cell_seed(seed, 0, 0), **kwargs)
    if out_path is not None:
        rows = [[str(r.iteration), r.phase, _fmt(r.objective), _fmt(r.exact_se / math.log(2.0)),
                 _fmt(r.u_inf), _fmt(r.rho)] for r in result.trace]
        _write_csv(Path(out_path), TRACE_COLUMNS, rows)
    return result
