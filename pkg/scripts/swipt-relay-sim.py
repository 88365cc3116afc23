#!/usr/bin/env -S uv run --quiet --script
# /// script
# dependencies = [
#   "numpy>=1.26",
#   "scipy",
#   "cvxopt",
#   "pandas",
# ]
# ///
"""
Monte-Carlo simulator for multiuser MISO relay transceivers with SWIPT receivers

Commands:
  run        run an experiment file and write records.csv, summary.json,
             series/ and codebooks.json to the output directory
  summarize  re-aggregate the records of a finished run
  codebook   draw one channel realization and print its scored codebook

Usage:
./swipt-relay-sim.py run --spec experiments/psi-sweep.json --out results/psi -v
./swipt-relay-sim.py summarize --in results/psi
./swipt-relay-sim.py codebook --nt 4 --nr 4 --b 8 --method sum_max
"""

import logging
import sys
from argparse import ArgumentParser, RawDescriptionHelpFormatter
from dataclasses import replace

import numpy as np

from conic import ConicSolverError
from logger import setup_logging
from relay_experiments import (
    ExperimentSpec,
    ResultsDatabase,
    emit,
    read_records,
    run_experiment,
    summarize,
    trial_channels,
)
from swipt_model import ConfigurationError, RawConfig
from switched_relaying import CodebookMethod, build_codebook

EXIT_OK = 0
EXIT_CONFIGURATION = 2
EXIT_SOLVER = 3


def add_standard_cli_arguments(parser):
    parser.add_argument(
        "-v",
        "--verbose",
        action="count",
        default=0,
        dest="verbose",
        help="Increase verbosity of logging output",
    )


def parse_args(argv=None):
    parser = ArgumentParser(description=__doc__, formatter_class=RawDescriptionHelpFormatter)
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="Run an experiment file")
    add_standard_cli_arguments(run)
    run.add_argument("--spec", required=True, help="Path to the experiment JSON file")
    run.add_argument("--out", help="Output directory (defaults to the file's output entry)")
    run.add_argument("--trials", type=int, help="Override the number of trials")
    run.add_argument("--seed", type=int, help="Override the master seed")
    run.add_argument("--workers", type=int, default=1, help="Worker processes")
    run.add_argument("--db-path", help="Also store the records in this SQLite database")

    summarize_cmd = commands.add_parser("summarize", help="Summarize a finished run")
    add_standard_cli_arguments(summarize_cmd)
    summarize_cmd.add_argument("--in", dest="input", required=True, help="Directory holding records.csv")

    codebook = commands.add_parser("codebook", help="Print a scored codebook for one channel draw")
    add_standard_cli_arguments(codebook)
    codebook.add_argument("--nt", type=int, default=4, help="BS antennas")
    codebook.add_argument("--nr", type=int, default=4, help="Relay antennas")
    codebook.add_argument("--k", type=int, default=3, help="Users")
    codebook.add_argument("--b", type=int, default=8, help="Codebook size")
    codebook.add_argument(
        "--method",
        choices=[m.value for m in CodebookMethod],
        default=CodebookMethod.SUM_MAX.value,
        help="Codebook construction",
    )
    codebook.add_argument("--seed", type=int, default=0, help="Channel seed")
    return parser.parse_args(argv)


def print_summaries(summaries):
    for s in summaries:
        mean = f"{s.mean_power_dbm:8.3f} dBm" if s.mean_power_dbm is not None else "     n/a    "
        ci = f" ± {s.ci_half_width_db:.3f}" if s.ci_half_width_db is not None else ""
        print(
            f"{s.algorithm:<24} sweep={s.sweep:<8g} power={mean}{ci}  "
            f"feasible={s.num_feasible}/{s.num_trials} ({s.feasibility_rate:.0%})"
        )


def run_command(args):
    spec = ExperimentSpec.from_json(args.spec)
    if args.trials is not None:
        spec = replace(spec, num_trials=args.trials)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    out = args.out or spec.output
    if not out:
        raise ConfigurationError("No output directory: pass --out or set 'output' in the experiment file")
    if args.workers < 1:
        raise ConfigurationError("--workers must be >= 1")

    records, codebooks = run_experiment(spec, workers=args.workers)
    summaries = summarize(records)
    emit(records, summaries, out, codebooks, tags=[a.name for a in spec.algorithms])
    if args.db_path:
        with ResultsDatabase(args.db_path, spec.name, spec.key()) as db:
            db.setup_tables()
            db.record_experiment_run(spec)
            db.insert_records(records)
    print_summaries(summaries)


def summarize_command(args):
    records = read_records(args.input)
    if not records:
        raise ConfigurationError(f"No records in {args.input}")
    tags = list(dict.fromkeys(r.algorithm for r in records))
    summaries = summarize(records)
    emit(records, summaries, args.input, tags=tags)
    print_summaries(summaries)


def codebook_command(args):
    raw = RawConfig(nt=args.nt, nr=args.nr, k=args.k, seed=args.seed)
    channels = trial_channels(raw, raw.seed)
    method = CodebookMethod(args.method)
    rng = np.random.default_rng(raw.seed)
    print(build_codebook(channels.first_phase, channels.second_phase_estimated, args.b, method, rng))


COMMANDS = {
    "run": run_command,
    "summarize": summarize_command,
    "codebook": codebook_command,
}


def main(args):
    try:
        COMMANDS[args.command](args)
    except ConfigurationError as e:
        logging.error(f"Configuration error: {e}")
        print(f"Configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIGURATION
    except ConicSolverError as e:
        logging.error(f"Solver failure: {e}")
        print(f"Solver failure: {e}", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


if __name__ == "__main__":
    args = parse_args()
    setup_logging(args.verbose)
    sys.exit(main(args))
