"""Command-line entry point: ``fdnoma run|trace|summarize``.

Exit codes: 0 success, 2 usage error, 3 no feasible run anywhere, 4 internal error.
"""
from __future__ import annotations

import argparse
import configparser
import logging
import sys
import traceback
from pathlib import Path

from .channel import load_config
from .experiments import (
    PRESETS,
    ParseError,
    SpecError,
    TERMINATED,
    emit_summary,
    format_summary,
    load_spec,
    run_experiment,
    trace_convergence,
    write_summary_csv,
)

EXIT_OK, EXIT_USAGE, EXIT_INFEASIBLE, EXIT_INTERNAL = 0, 2, 3, 4

log = logging.getLogger("fdnoma")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SpecError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed (overrides the spec file)")
    common.add_argument("--threads", type=int, default=1, help="worker processes for independent cells")
    common.add_argument("--out-dir", type=Path, default=Path("."), help="directory for CSV outputs")
    common.add_argument("--preset", choices=sorted(PRESETS), default="desk",
                        help="base scenario and default Monte-Carlo counts")

    parser = _Parser(prog="fdnoma", description="FD-NOMA joint beamforming and association experiments")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", parents=[common], help="run a sweep described by an INI file")
    run.add_argument("spec", type=Path)

    trace = sub.add_parser("trace", parents=[common], help="per-iteration trace of one relaxed run")
    trace.add_argument("--scheme", choices=("ica_cr", "ica_cr_pf"), default="ica_cr_pf")
    trace.add_argument("--penalty-base", type=float, default=3.0, help="penalty weight base**iteration")
    trace.add_argument("--config", type=Path, default=None, help="INI file with a [system] section")

    summ = sub.add_parser("summarize", parents=[common], help="aggregate a results CSV")
    summ.add_argument("results", type=Path)
    return parser


def _run(args) -> int:
    if args.threads < 1:
        raise SpecError("--threads must be positive")
    spec = load_spec(args.spec, preset=args.preset, seed=args.seed)
    log.info("running %d cells x %d schemes", spec.n_cells, len(spec.schemes))
    output = run_experiment(spec, args.out_dir, threads=args.threads)
    sys.stdout.write(format_summary(emit_summary(output.results)))
    if not output.any_feasible:
        log.error("no run met its QoS targets")
        return EXIT_INFEASIBLE
    return EXIT_OK


def _trace(args) -> int:
    config = PRESETS[args.preset][0]()
    if args.config is not None:
        try:
            config = load_config(args.config, base=config)
        except (OSError, configparser.Error, KeyError, ValueError) as exc:
            raise SpecError(f"bad config file {args.config}: {exc}") from exc
    args.out_dir.mkdir(parents=True, exist_ok=True)
    path = args.out_dir / f"trace_{args.scheme}.csv"
    result = trace_convergence(config, args.scheme, args.penalty_base, args.seed or 0, path)
    sys.stdout.write(f"{path}: {len(result.trace)} rows, final SE {result.final_se_bits:.6g} bits/s/Hz, "
                     f"status {result.status}\n")
    if not (result.qos_ok and result.status in TERMINATED):
        return EXIT_INFEASIBLE
    return EXIT_OK


def _summarize(args) -> int:
    summary = emit_summary(args.results)
    sys.stdout.write(format_summary(summary))
    if args.out_dir != Path("."):
        args.out_dir.mkdir(parents=True, exist_ok=True)
        write_summary_csv(summary, args.out_dir / "aggregate.csv")
    return EXIT_OK


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args = build_parser().parse_args(argv)
        handler = {"run": _run, "trace": _trace, "summarize": _summarize}[args.command]
        return handler(args)
    except (SpecError, ParseError) as exc:
        sys.stderr.write(f"fdnoma: error: {exc}\n")
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception:
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
