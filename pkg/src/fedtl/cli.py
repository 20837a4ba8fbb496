"""Batch command-line front end.

Subcommands:

    simulate CONFIG            run one configuration (no sweep grid)
    sweep CONFIG               run the full parameter grid of a configuration
    rates CSV --axis AXIS      fit log-log slope of median error vs an axis
    validate-transcript PATH   audit a serialized transcript

Configs are JSON files; the schema is the field set of
:class:`fedtl.experiment.ExperimentConfig` (see README).  Exit codes:
0 success, 2 configuration or parse error, 3 privacy-ledger violation.
The FEDTL_THREADS environment variable sets the sweep worker count.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import __version__
from .errors import ParameterError, TranscriptFormatError
from .experiment import ExperimentConfig, fit_rate_slopes, run_sweep
from .harness import Transcript, audit_ledger
from .mechanisms import PrivacyBudget

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_LEDGER = 3


def _load_config(path: str, allow_sweep: bool) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ParameterError(f"cannot read config {path}: {exc}") from exc
    config = ExperimentConfig.from_dict(raw)
    if config.sweep and not allow_sweep:
        raise ParameterError("config contains a sweep grid; use the 'sweep' subcommand")
    return config


def _cmd_run(args: argparse.Namespace, allow_sweep: bool) -> int:
    config = _load_config(args.config, allow_sweep)
    if args.output:
        config = ExperimentConfig.from_dict({**json.loads(config.to_json()), "output": args.output})
    result = run_sweep(config)
    if not config.output:
        sys.stdout.write(result.csv_text)
    else:
        print(f"wrote {len(result.rows)} rows to {config.output}")
    if getattr(args, "transcript", None):
        # re-run the first cell to materialize its transcript for inspection
        transcript_text = _first_cell_transcript(config)
        with open(args.transcript, "w") as fh:
            fh.write(transcript_text)
        print(f"wrote transcript of grid point 0, rep 0 to {args.transcript}")
    if not result.ledger_clean:
        print("ledger violations detected", file=sys.stderr)
        return EXIT_LEDGER
    return EXIT_OK


def _first_cell_transcript(config: ExperimentConfig) -> str:
    from . import seeding
    from .experiment import _problem_spec, _resolve_tilde_c
    from .highdim import SparseRegConfig, default_sparsity, meta_sparse
    from .lowdim import RegressionConfig, fed_linreg
    from .meanest import run_fed_mean
    from .synth import Family, generate

    overrides = config.grid()[0]
    params = config.cell_params(overrides)
    budget = PrivacyBudget(float(params["epsilon"]), float(params["delta"]))
    spec = _problem_spec(config, params)
    tilde_c = _resolve_tilde_c(config, spec, budget, 0)
    data_seed = int(seeding.spawn(config.master_seed, seeding.DOMAIN_SWEEP, 0, 0, 0).integers(2**62))
    run_seed = int(seeding.spawn(config.master_seed, seeding.DOMAIN_SWEEP, 0, 0, 1).integers(2**62))
    sites, _ = generate(spec, data_seed)
    if config.family is Family.MEAN:
        _, report = run_fed_mean(sites, budget, config.eta, tilde_c, run_seed)
    elif config.family is Family.LOWDIM:
        cfg = RegressionConfig(budget=budget, eta=config.eta, **config.estimator)
        report = fed_linreg(sites, cfg, tilde_c, run_seed)
    else:
        est_kw = dict(config.estimator)
        est_kw.setdefault("s_prime", default_sparsity(spec.s, config.L))
        cfg = SparseRegConfig(budget=budget, eta=config.eta, **est_kw)
        report = meta_sparse(sites, cfg, tilde_c, run_seed)
    return report.transcript.serialize()


def _cmd_rates(args: argparse.Namespace) -> int:
    try:
        with open(args.csv) as fh:
            text = fh.read()
    except OSError as exc:
        raise ParameterError(f"cannot read {args.csv}: {exc}") from exc
    slope, stderr = fit_rate_slopes(text, args.axis, column=args.column)
    print(f"slope of log(median {args.column}) vs log({args.axis}): {slope:.4f} +/- {stderr:.4f}")
    return EXIT_OK


def _cmd_validate(args: argparse.Namespace) -> int:
    try:
        with open(args.path) as fh:
            text = fh.read()
        transcript = Transcript.parse(text)
    except (OSError, TranscriptFormatError) as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    verdict = audit_ledger(transcript, PrivacyBudget(args.epsilon, args.delta))
    if verdict.ok:
        print(f"ok: {len(transcript.entries)} entries, {transcript.round_count} rounds, no violations")
        return EXIT_OK
    for v in verdict.violations:
        print(f"violation site={v.site} round={v.round} rule={v.rule}: {v.detail}")
    return EXIT_LEDGER


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedtl", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"fedtl {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="run one configuration")
    p_sim.add_argument("config")
    p_sim.add_argument("--output", help="CSV output path (default: stdout)")
    p_sim.add_argument("--transcript", help="also write the transcript of grid point 0, rep 0")

    p_sweep = sub.add_parser("sweep", help="run a parameter grid")
    p_sweep.add_argument("config")
    p_sweep.add_argument("--output", help="CSV output path (default: stdout)")
    p_sweep.add_argument("--transcript", help="also write the transcript of grid point 0, rep 0")

    p_rates = sub.add_parser("rates", help="fit error-rate slopes from a sweep CSV")
    p_rates.add_argument("csv")
    p_rates.add_argument("--axis", required=True, choices=("n", "K", "epsilon"))
    p_rates.add_argument("--column", default="err_federated",
                         choices=("err_federated", "err_target_only"))

    p_val = sub.add_parser("validate-transcript", help="audit a serialized transcript")
    p_val.add_argument("path")
    p_val.add_argument("--epsilon", type=float, required=True, help="declared per-round epsilon")
    p_val.add_argument("--delta", type=float, required=True, help="declared per-round delta")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "simulate":
            return _cmd_run(args, allow_sweep=False)
        if args.command == "sweep":
            return _cmd_run(args, allow_sweep=True)
        if args.command == "rates":
            return _cmd_rates(args)
        return _cmd_validate(args)
    except ParameterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
