"""Command line entry point.

    evdomain calibrate  stages 1-2: Gumbel virtual data, Frechet/Weibull anchors
    evdomain select     stages 1-3: adds the virtual-size balancing
    evdomain run        stages 1-5: full run with report
    evdomain report     stage 5 only, from persisted stage 1-4 outputs

Exit codes: 0 success, 2 configuration error, 3 data error,
4 success with convergence flagged, 1 any other stage failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from evdomain.calibration import ConfigurationError
from evdomain.pipeline import (STAGES, DataError, PipelineState, RunConfig, default_config_path,
                               emit_report, fixture_path, ingest_csv, load_config, partial_report,
                               StageError, run_pipeline, stage5, _load_stage)

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DATA, EXIT_FLAGGED = 0, 1, 2, 3, 4

log = logging.getLogger("evdomain")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", type=Path, default=None,
                        help="JSON run configuration (default: the shipped Corsica config)")
    common.add_argument("-d", "--data", type=Path, default=None,
                        help="label,value CSV of block maxima (default: the Corsica fixture)")
    common.add_argument("-s", "--seed", type=int, default=None, help="override the config seed")
    common.add_argument("-o", "--out", type=Path, default=Path("evdomain-out"), help="output directory")
    common.add_argument("--resume", action="store_true",
                        help="reuse persisted stage outputs that match config, data and seed")
    common.add_argument("-v", "--verbose", action="count", default=0)
    common.add_argument("-q", "--quiet", action="store_true")
    p = argparse.ArgumentParser(prog="evdomain",
                                description="Bayesian choice of the Frechet, Weibull or Gumbel domain for block maxima.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("calibrate", parents=[common], help="calibrate the three priors (stages 1-2)")
    sub.add_parser("select", parents=[common], help="calibrate and balance virtual sizes (stages 1-3)")
    sub.add_parser("run", parents=[common], help="full pipeline with report (stages 1-5)")
    sub.add_parser("report", parents=[common], help="rebuild the report from persisted stage outputs")
    return p


def _setup_logging(verbose: int, quiet: bool) -> None:
    level = logging.ERROR if quiet else (logging.DEBUG if verbose > 1 else
                                         logging.INFO if verbose == 1 else logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _summary_lines(state: PipelineState) -> list:
    lines = []
    if state.gumbel is not None:
        lines.append(f"gumbel virtual data: {', '.join(f'{v:.2f}' for v in state.gumbel.hyper.virtual_data)}"
                     f" (orders {', '.join(f'{p:.3f}' for p in state.gumbel.achieved_orders)})")
    for mod, res in state.shape.items():
        for m, r in res.items():
            h = r.hyper.__dict__
            anchors = ", ".join(f"{k}={v:.4g}" for k, v in h.items() if k.startswith(("x_e", "rho")))
            lines.append(f"{mod} m={m}: {anchors} (orders {', '.join(f'{p:.3f}' for p in r.achieved_orders)})")
    for mod, c in state.compatibility.items():
        lines.append(f"{mod}: m* = {c.m_star} (argmin {c.m_argmin})")
    if state.report is not None:
        r = state.report
        lines.append("P(model | data): " + ", ".join(f"{k}={v:.4f}" for k, v in r.model_probs.items()))
        lines.append("return levels: " + ", ".join(f"T={k}: {v:.1f}" for k, v in r.return_levels.items()))
        lines.append(f"max R-hat: {r.diagnostics.get('max_rhat', float('nan')):.4f}")
    return lines


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    _setup_logging(args.verbose, args.quiet)
    try:
        config = load_config(args.config or default_config_path())
        if args.seed is not None:
            config = config.with_seed(args.seed)
    except ConfigurationError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        data = ingest_csv(args.data or fixture_path())
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA

    out: Path = args.out
    until = {"calibrate": 2, "select": 3, "run": 5, "report": 5}[args.command]
    try:
        if args.command == "report":
            state = PipelineState()
            for stage in range(1, 5):
                if not _load_stage(out, stage, config, data, state):
                    print(f"data error: no persisted output for stage {stage} ({STAGES[stage]}) "
                          f"matching this config, data and seed in {out}", file=sys.stderr)
                    return EXIT_DATA
            try:
                state.report = stage5(config, data, state)
            except Exception as e:      # noqa: BLE001
                state.failure = StageError(5, e)
        else:
            state = run_pipeline(config, data, out, until=until, resume=args.resume)
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA

    if not args.quiet:
        for line in _summary_lines(state):
            print(line)

    try:
        if state.failure is not None:
            if until == 5:
                emit_report(partial_report(config, data, state), "json", out / "report.json")
            print(f"error: {state.failure}", file=sys.stderr)
            cause = state.failure.cause
            if isinstance(cause, ConfigurationError):
                return EXIT_CONFIG
            if isinstance(cause, DataError):
                return EXIT_DATA
            return EXIT_FAIL
        if until == 5:
            path = emit_report(state.report, "json", out / "report.json", state.draws)
            if not args.quiet:
                print(f"report: {path}")
            if not state.report.diagnostics.get("converged", True):
                print("warning: convergence flagged (split R-hat above threshold)", file=sys.stderr)
                return EXIT_FLAGGED
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
