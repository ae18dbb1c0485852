"""Command-line entry point.

Every subcommand reads an experiment plan (JSON). Flags given on the command
line override the plan's values; relative paths inside the plan resolve
against the plan file's directory, relative paths on the command line
against the working directory.

Exit status: 0 when every run succeeded, 1 when some runs failed but the
command finished, 2 when the command aborted (bad plan, bad data, or too
many failed runs). On a nonzero exit a JSON failure summary goes to stderr
and to ``failures.json`` in the output directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from dataclasses import replace
from importlib import resources
from pathlib import Path

from . import __version__
from . import experiments as ex
from .data import SplitPlan, make_teacher_dataset, write_dataset
from .errors import ConfigurationError, DataError

log = logging.getLogger("qhml")


def shipped_config(name: str) -> Path:
    return Path(str(resources.files("qhml") / "configs" / name))


def _common(parser):
    parser.add_argument("--plan", type=Path, required=True, help="experiment plan JSON")
    parser.add_argument("--out", type=Path, help="output directory (overrides plan)")
    parser.add_argument("--seed", type=int, help="base seed (overrides plan)")
    parser.add_argument("--workers", type=int, help="parallel worker processes (overrides plan)")
    parser.add_argument("--drug", action="append", help="restrict to this drug; repeatable")
    parser.add_argument("--no-figures", action="store_true", help="skip PNG rendering")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qhml", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("grid-search", help="repeated stratified k-fold CV over the grid")
    _common(p)

    for name, helptext in (("compare", "held-out comparison of normalization methods"),
                           ("sweep-a", "test AUC over the gradual-tanh a values"),
                           ("sweep-r", "test AUC over the gradual-tanh r values")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--repeats", type=int, help="seeded test runs per cell (overrides eval_repeats)")
        p.add_argument("--use-ranking", action="store_true",
                       help="take the grid method's config from this output's ranking.csv")
        if name == "compare":
            p.add_argument("--method", action="append", choices=sorted(ex.METHODS), help="repeatable")

    p = sub.add_parser("train-one", help="one held-out training run")
    _common(p)
    p.add_argument("--method", default="proposed-multi", choices=sorted(ex.METHODS))
    p.add_argument("--config", help="n1,n2,n3,lr (defaults to the plan's config for the method)")
    p.add_argument("--split-plan", type=Path, help="JSON with train/val/test row indices")
    p.add_argument("--use-ranking", action="store_true")

    p = sub.add_parser("emit-dist", help="encoder outputs before/after normalization")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--bins", type=int, default=40)

    p = sub.add_parser("emit-curves", help="mean validation AUC by epoch from cv_records.csv")
    _common(p)
    p.add_argument("--records", type=Path, help="defaults to <out>/<drug>/grid/cv_records.csv")

    p = sub.add_parser("make-synthetic", help="write a synthetic teacher dataset and a desk-scale plan")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=500)
    p.add_argument("--genes", type=int, default=50)
    return parser


def load_plan(args) -> tuple[ex.ExperimentPlan, Path]:
    plan = ex.ExperimentPlan.from_file(args.plan)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.workers is not None:
        overrides["workers"] = args.workers
    if args.drug:
        overrides["drugs"] = args.drug
    if getattr(args, "repeats", None) is not None:
        overrides["eval_repeats"] = args.repeats
    if getattr(args, "method", None) and args.command == "compare":
        overrides["methods"] = args.method
    plan = replace(plan, **overrides)
    out = args.out if args.out is not None else args.plan.parent / plan.out
    plan.out = str(out)
    return plan, out


def _parse_config(text: str) -> ex.GridPoint:
    try:
        n1, n2, n3, lr = text.split(",")
        return ex.GridPoint(int(n1), int(n2), int(n3), float(lr))
    except ValueError:
        raise ConfigurationError(f"--config expects n1,n2,n3,lr, got {text!r}") from None


def _failed_runs(out: Path, command: str) -> list[dict]:
    path = out / f"manifest_{command}.json"
    if not path.exists():
        return []
    runs = json.loads(path.read_text())["runs"]
    return [r for r in runs if r["status"] == "failed"]


def run(args) -> tuple[int, dict | None]:
    if args.command == "make-synthetic":
        matrix, table = make_teacher_dataset(args.samples, args.genes, seed=args.seed)
        write_dataset(matrix, table, args.out / "data", drug="Synthetic")
        shutil.copyfile(shipped_config("desk_plan.json"), args.out / "plan.json")
        print(args.out / "plan.json")
        return 0, None

    plan, out = load_plan(args)
    render = not args.no_figures
    cmd = args.command
    if cmd == "grid-search":
        rankings = ex.run_grid_search(plan, out, render=render)
        for drug, rows in rankings.items():
            if rows:
                print(f"{drug}: best {rows[0][2]} mean AUC {rows[0][7]:.4f} at epoch {rows[0][8]}")
    elif cmd == "compare":
        rows = ex.run_comparison(plan, out, use_ranking=args.use_ranking)
        print((out / "comparison_table.csv").read_text(), end="")
    elif cmd in ("sweep-a", "sweep-r"):
        which = cmd[-1]
        ex.run_ar_sweep(plan, which, out, render=render, use_ranking=args.use_ranking)
        print((out / f"sweep_{which}_table.csv").read_text(), end="")
    elif cmd == "train-one":
        drugs = plan.selected_drugs()
        if len(drugs) != 1:
            raise ConfigurationError("train-one needs exactly one drug; pass --drug")
        point = _parse_config(args.config) if args.config else ex.chosen_config(
            plan, args.method, drugs[0], out, args.use_ranking)
        split = SplitPlan.load(args.split_plan) if args.split_plan else None
        summary = ex.train_one(plan, drugs[0], args.method, point, out, split=split)
        print(json.dumps(summary, indent=2, sort_keys=True))
        if summary["status"] != "ok":
            return 1, {"command": cmd, "failures": [{"run": drugs[0], "message": summary["message"]}]}
        return 0, None
    elif cmd == "emit-dist":
        drug = args.drug[0] if args.drug else None
        summary = ex.emit_distribution(args.checkpoint, plan, drug, args.samples, out, args.bins, render=render)
        print(json.dumps(summary, indent=2, sort_keys=True))
        return 0, None
    elif cmd == "emit-curves":
        for drug in plan.selected_drugs():
            records_path = args.records or out / drug / "grid" / "cv_records.csv"
            records = [r for r in ex.records_from_csv(records_path) if r.drug == drug]
            ex.emit_curves(records, out / drug / "grid", drug, render=render)
            print(out / drug / "grid" / "curves.csv")
        return 0, None

    failed = _failed_runs(out, cmd)
    if failed:
        return 1, {"command": cmd, "failures": failed}
    return 0, None


def _failure_dir(args) -> Path | None:
    if getattr(args, "out", None) is not None:
        return args.out
    try:
        return args.plan.parent / json.loads(args.plan.read_text()).get("out", "results")
    except (AttributeError, OSError, ValueError):
        return None


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        code, summary = run(args)
    except ex.ExperimentAborted as exc:
        code, summary = 2, {"command": args.command, "error": str(exc), "failures": exc.failures}
    except (ConfigurationError, DataError, FileNotFoundError, KeyError, json.JSONDecodeError) as exc:
        code, summary = 2, {"command": args.command, "error": f"{type(exc).__name__}: {exc}", "failures": []}
    if summary is not None:
        text = json.dumps(summary, indent=2)
        print(text, file=sys.stderr)
        out = _failure_dir(args)
        if out is not None:
            try:
                Path(out).mkdir(parents=True, exist_ok=True)
                ex.atomic_write(Path(out) / "failures.json", text)
            except OSError:
                pass
    return code


if __name__ == "__main__":
    sys.exit(main())
