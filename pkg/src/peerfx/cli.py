"""Command-line entry point: ``peerfx {synth,score,estimate,validate,accept}``.

Settings come from built-in defaults, then the JSON file given with
``--config``, then flags (``--seed``, ``--out``, ``--data-dir``).  ``--jobs``
only sets the worker count; outputs do not depend on it.

Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure,
4 acceptance failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import pandas as pd

from . import pipeline
from .core import load_dataset, write_dataset
from .errors import ConfigError, DataError, NumericalError
from .models import DynamicProfile
from .peers import compute_peer_stats

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL, EXIT_ACCEPT = 0, 1, 2, 3, 4

log = logging.getLogger("peerfx")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes (results do not depend on it)")
    common.add_argument("--out", type=Path, help="output directory (must exist)")
    common.add_argument("--data-dir", type=Path, help="input directory (defaults to --out)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="peerfx", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("synth", parents=[common], help="generate persons.csv, courses.csv, ground_truth.json")
    sub.add_parser("score", parents=[common], help="propensity matching, balance, employability scores")
    sub.add_parser("estimate", parents=[common], help="run the configured model specifications")
    sub.add_parser("validate", parents=[common], help="resampling, exogeneity, sorting, variance decomposition")
    sub.add_parser("accept", parents=[common], help="run the acceptance suite")
    return p


def _config(args) -> pipeline.RunConfig:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    paths = {}
    if args.out is not None:
        paths["out_dir"] = str(args.out)
    if args.data_dir is not None:
        paths["data_dir"] = str(args.data_dir)
    if paths:
        overrides["paths"] = paths
    return pipeline.RunConfig.load(args.config, overrides)


def _dirs(cfg, need_data=True):
    out = cfg["paths"]["out_dir"]
    if out is None:
        raise UsageError("an output directory is required (--out or paths.out_dir)")
    out = Path(out)
    if not out.is_dir():
        raise UsageError(f"output directory {out} does not exist")
    data = Path(cfg["paths"]["data_dir"] or out)
    if need_data and not data.is_dir():
        raise DataError(f"data directory {data} does not exist")
    return data, out


def _load(data_dir, scored):
    persons = data_dir / ("persons_scored.csv" if scored else "persons.csv")
    if scored and not persons.exists():
        raise DataError(f"{persons} not found; run `peerfx score` first")
    return load_dataset(persons, data_dir / "courses.csv")


def cmd_synth(cfg, jobs):
    _, out = _dirs(cfg, need_data=False)
    pipeline.synth_stage(cfg, out)
    log.info("wrote persons.csv, courses.csv, ground_truth.json to %s", out)


def cmd_score(cfg, jobs):
    data, out = _dirs(cfg)
    ds = _load(data, scored=False)
    scored, result = pipeline.score_stage(cfg, ds)
    write_dataset(scored, out / "persons_scored.csv", out / "courses.csv", header=cfg.header())
    models = {}
    for label in result.employability:
        models[label] = {"propensity": result.propensity[label].to_dict(),
                         "employability": result.employability[label].to_dict(),
                         "balance_summary": {"max_abs_sb": result.balance[label].max_abs_sb,
                                             "share_below_25": result.balance[label].share_below_reference}}
    pipeline.write_json(out / "score_model.json", {"groups": models}, cfg)
    frames = []
    for label, rep in result.balance.items():
        t = rep.table.copy()
        t.insert(0, "group", label)
        frames.append(t)
    pipeline.write_csv(out / "balance.csv", pd.concat(frames, ignore_index=True), cfg)
    log.info("scored %d persons", len(scored.persons))


def cmd_estimate(cfg, jobs):
    data, out = _dirs(cfg)
    ds = _load(data, scored=True)
    table = pipeline.estimation_table(cfg, ds)
    stats = compute_peer_stats(table, "employability")
    pipeline.write_csv(out / "peer_stats.csv", stats, cfg)
    runs = pipeline.estimate_stage(cfg, table, jobs)
    for (spec, ptype, outcome), rep in runs:
        if isinstance(rep, DynamicProfile):
            pipeline.write_csv(out / f"dynamics_{ptype}.csv", rep.to_frame(), cfg)
        else:
            pipeline.write_csv(out / f"effects_{spec}_{ptype}_{outcome}.csv", rep.to_frame(), cfg)
    pipeline.write_json(out / "report.json", pipeline.report_payload(runs), cfg)
    log.info("ran %d estimation jobs", len(runs))


def cmd_validate(cfg, jobs):
    data, out = _dirs(cfg)
    ds = _load(data, scored=True)
    table = pipeline.estimation_table(cfg, ds)
    res = pipeline.validate_stage(cfg, table, jobs)
    pipeline.write_json(out / "validity_resampling.json", {"reports": [r.to_dict() for r in res["resampling"]]}, cfg)
    pipeline.write_json(out / "validity_guryan.json", {"reports": [r.to_dict() for r in res["guryan"]]}, cfg)
    pipeline.write_csv(out / "sorting_diagnostics.csv", res["sorting"].table, cfg)
    pipeline.write_csv(out / "sorting_screens.csv", res["sorting"].screens, cfg)
    pipeline.write_csv(out / "variance_decomposition.csv", res["variance"], cfg)


def cmd_accept(cfg, jobs):
    from .acceptance import run_acceptance

    _, out = _dirs(cfg, need_data=False)
    report = run_acceptance(cfg, jobs=jobs, out_dir=out)
    pipeline.write_json(out / "acceptance.json", report.to_dict(), cfg)
    for line in report.lines():
        print(line)
    return EXIT_OK if report.passed else EXIT_ACCEPT


COMMANDS = {"synth": cmd_synth, "score": cmd_score, "estimate": cmd_estimate,
            "validate": cmd_validate, "accept": cmd_accept}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        print("peerfx: error: --jobs must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg = _config(args)
        code = COMMANDS[args.command](cfg, args.jobs)
        return EXIT_OK if code is None else code
    except (UsageError, ConfigError) as exc:
        print(f"peerfx: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"peerfx: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"peerfx: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
