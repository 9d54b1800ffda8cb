"""Command-line interface: ``pdmpstop <command> [--config PATH] [--seed N] [--out DIR] [--threads N]``."""

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from .bounds import compute_bounds
from .config import build_model, load_config
from .dp import ValueTable, backward_solve, continuous_oracle, write_oracle_csv
from .exceptions import AbsentRowError, ConfigError, DomainError, GridFileError, UnsupportedModelError
from .policy import build_policy, choose_beta, evaluate_rule, write_evaluation_csv, write_outcomes_csv
from .quantization import estimate_errors, estimate_transition_weights, load_grids, save_grids, train_grids
from .reporting import (
    RunManifest,
    dump_json,
    plot_report_svg,
    plot_trajectories_svg,
    read_table_csv,
    write_oracle_summary,
    write_table_csv,
)
from .simulation import simulate_chains_streamed, write_trajectories_csv

__all__ = ["main", "build_parser", "EXIT_OK", "EXIT_CONFIG", "EXIT_NUMERIC", "EXIT_IO"]

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
VALUES_SCHEMA_VERSION = 1


class FeasibilityError(RuntimeError):
    """Raised when ``--require-feasible`` is set and a bound is not certified."""


def _resolve_threads(arg, cfg):
    if arg is not None:
        n = arg
    elif os.environ.get("PDMPSTOP_THREADS"):
        try:
            n = int(os.environ["PDMPSTOP_THREADS"])
        except ValueError as exc:
            raise ConfigError("PDMPSTOP_THREADS must be an integer") from exc
    else:
        n = cfg["threads"]
    if n < 0:
        raise ConfigError("threads must be >= 0")
    return (os.cpu_count() or 1) if n == 0 else n


class Run:
    """Shared state of one command invocation."""

    def __init__(self, args, command):
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.out is not None:
            overrides["output_dir"] = args.out
        self.cfg = load_config(args.config, overrides)
        self.threads = _resolve_threads(args.threads, self.cfg)
        self.model = build_model(self.cfg)
        self.out = self.cfg["output_dir"]
        os.makedirs(self.out, exist_ok=True)
        self.seed = self.cfg["seed"]
        self.x0 = self.cfg["model"]["x0"]
        self.manifest = RunManifest(self.path("manifest.json"), self.cfg, command, __version__)

    def path(self, name):
        return os.path.join(self.out, name)

    def output(self, name):
        return self.manifest.artifact(self.path(name))

    # phases -----------------------------------------------------------

    def simulate(self, n_traj):
        self.manifest.start("simulate")
        N = self.cfg["N"]
        batch = simulate_chains_streamed(self.model, self.x0, N, n_traj, self.seed, "simulate", threads=self.threads)
        with open(self.output("trajectories.csv"), "w", encoding="utf-8") as fh:
            write_trajectories_csv(fh, batch)
        with open(self.output("trajectories.svg"), "w", encoding="utf-8") as fh:
            plot_trajectories_svg(fh, self.model, [batch.trajectory(i) for i in range(batch.n_paths)])
        self.manifest.finish(n_trajectories=n_traj)
        return batch

    def train(self):
        q = self.cfg["quantization"]
        self.manifest.start("train")
        grids = train_grids(
            self.model, self.x0, self.cfg["N"], q["points_per_stage"], q["train_samples"], q["p"],
            self.seed, tuple(q["component_weights"]), q["max_iter"], q["tol"], self.threads,
        )
        self.manifest.finish(
            lloyd_iterations=grids.manifest["lloyd_iterations"],
            degenerate_stages=grids.manifest["degenerate_stages"],
        )
        self.manifest.start("weights")
        grids = estimate_transition_weights(self.model, grids, q["weight_samples"], self.seed, self.threads)
        self.manifest.finish()
        self.manifest.start("errors")
        table = estimate_errors(self.model, grids, q["eval_samples"], q["p"], self.seed, self.threads)
        with open(self.output("grids.json"), "w", encoding="utf-8") as fh:
            save_grids(grids, fh)
        self.manifest.finish(QE=table["QE"])
        return grids

    def solve(self, grids):
        self.manifest.start("solve")
        values = backward_solve(self.model, grids, self.cfg["dp"]["delta"])
        doc = values.to_dict()
        doc["schema_version"] = VALUES_SCHEMA_VERSION
        doc["model_tag"] = grids.model_tag
        with open(self.output("values.json"), "w", encoding="utf-8") as fh:
            dump_json(doc, fh)
        self.manifest.finish(V0_hat=values.V0_hat, clipping_count=values.clipping_count)
        return values

    def policy(self, grids, values):
        s = self.cfg["stopping"]
        probe = build_policy(values, grids, 0.0)
        beta, feasible = choose_beta(self.model.constants, grids.errors, s["a"], probe.min_delta)
        if s["beta_override"] is not None:
            beta = float(s["beta_override"])
            feasible = bool(beta / s["a"] < probe.min_delta)
        return build_policy(values, grids, beta, s["a"]), feasible

    def evaluate(self, grids, values, dump=False):
        self.manifest.start("evaluate")
        policy, beta_feasible = self.policy(grids, values)
        result = evaluate_rule(
            self.model, policy, self.x0, self.cfg["stopping"]["n_mc"], self.seed, self.threads, keep_outcomes=dump
        )
        result.feasible = bool(beta_feasible and policy.feasible)
        with open(self.output("evaluation.csv"), "w", encoding="utf-8") as fh:
            write_evaluation_csv(fh, result)
        if dump:
            with open(self.output("outcomes.csv"), "w", encoding="utf-8") as fh:
                write_outcomes_csv(fh, result.outcomes)
        self.manifest.finish(
            V_bar_0=result.V_bar_0, B1=result.B1, beta=policy.beta, beta_feasible=result.feasible,
            redirected_projections=result.redirected,
        )
        return result

    def bounds(self, grids):
        self.manifest.start("bounds")
        report = compute_bounds(self.model, grids, self.cfg["dp"]["delta"], self.cfg["stopping"]["a"])
        with open(self.output("bounds.json"), "w", encoding="utf-8") as fh:
            dump_json(report.to_dict(), fh)
        self.manifest.finish(
            B2=report.B2, B3=report.B3,
            b2_certified=bool(np.all(report.b2_feasible)), b3_certified=bool(np.all(report.b3_feasible)),
        )
        return report

    def oracle(self):
        self.manifest.start("oracle")
        N = self.cfg["N"]
        try:
            res = continuous_oracle(self.model, self.x0, N)
        except UnsupportedModelError as exc:
            self.manifest.finish(skipped=str(exc))
            return None
        with open(self.output("oracle.csv"), "w", encoding="utf-8") as fh:
            write_oracle_summary(fh, N, self.x0, res.V0)
        for k in range(N + 1):
            with open(self.output(f"oracle_v{k}.csv"), "w", encoding="utf-8") as fh:
                write_oracle_csv(fh, res, k)
        self.manifest.finish(V0=res.V0)
        return res


def _load_grids_file(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return load_grids(fh)
    except FileNotFoundError as exc:
        raise FileNotFoundError(f"grid file not found: {path}") from exc


def _load_values_file(path):
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError as exc:
        raise FileNotFoundError(f"value file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise GridFileError(f"{path}: malformed value file ({exc})") from exc
    if doc.get("schema_version") != VALUES_SCHEMA_VERSION:
        raise GridFileError(f"{path}: unsupported value-file schema {doc.get('schema_version')!r}")
    try:
        return ValueTable.from_dict(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise GridFileError(f"{path}: malformed value file ({exc})") from exc


def _check_feasible(args, flags):
    if getattr(args, "require_feasible", False) and not all(flags):
        raise FeasibilityError("a feasibility condition failed and --require-feasible is set")


def cmd_simulate(args):
    run = Run(args, "simulate")
    with _guard(run):
        n = args.n_trajectories if args.n_trajectories is not None else run.cfg["simulate"]["n_trajectories"]
        run.simulate(n)


def cmd_train(args):
    run = Run(args, "train")
    with _guard(run):
        run.train()


def cmd_solve(args):
    run = Run(args, "solve")
    with _guard(run):
        run.manifest.start("load")
        grids = _load_grids_file(args.grids or run.path("grids.json"))
        run.manifest.finish()
        run.solve(grids)


def cmd_evaluate(args):
    run = Run(args, "evaluate")
    with _guard(run):
        run.manifest.start("load")
        grids = _load_grids_file(args.grids or run.path("grids.json"))
        values = _load_values_file(args.values or run.path("values.json"))
        run.manifest.finish()
        result = run.evaluate(grids, values, args.dump)
        _check_feasible(args, [result.feasible])


def cmd_bounds(args):
    run = Run(args, "bounds")
    with _guard(run):
        run.manifest.start("load")
        grids = _load_grids_file(args.grids or run.path("grids.json"))
        values = _load_values_file(args.values or run.path("values.json"))
        if values.N != grids.N:
            raise GridFileError("grid and value files have different horizons")
        run.manifest.finish()
        report = run.bounds(grids)
        _check_feasible(args, [report.certified])


def cmd_pipeline(args):
    run = Run(args, "pipeline")
    with _guard(run):
        grids = run.train()
        values = run.solve(grids)
        result = run.evaluate(grids, values, args.dump)
        report = run.bounds(grids) if run.cfg["bounds"]["enable"] else None
        oracle = run.oracle() if run.cfg["bounds"]["oracle"] else None
        run.manifest.start("table")
        delta = run.cfg["dp"]["delta"]
        row = {
            "Pt": run.cfg["quantization"]["points_per_stage"],
            "QE": grids.errors["QE"],
            "Delta": delta if not isinstance(delta, list) else max(delta),
            "V0_hat": values.V0_hat,
            "V0_bar": result.V_bar_0,
            "B1": result.B1,
            "B2": None if report is None else report.B2,
            "B3": None if report is None else report.B3,
        }
        with open(run.output("table.csv"), "w", encoding="utf-8") as fh:
            write_table_csv(fh, [row])
        run.manifest.doc["results"] = dict(row, V0_oracle=None if oracle is None else oracle.V0)
        run.manifest.finish()
        flags = [result.feasible] + ([] if report is None else [report.certified])
        run.manifest.doc["results"]["certified"] = bool(all(flags))
        _check_feasible(args, flags)


def cmd_report(args):
    run = Run(args, "report")
    with _guard(run):
        run.manifest.start("collect")
        rows, oracle = [], None
        for d in args.runs:
            with open(os.path.join(d, "table.csv"), encoding="utf-8") as fh:
                rows.extend(read_table_csv(fh))
            orc = os.path.join(d, "oracle.csv")
            if oracle is None and os.path.exists(orc):
                with open(orc, encoding="utf-8") as fh:
                    fh.readline()
                    oracle = float(fh.readline().strip().split(",")[2])
        rows.sort(key=lambda r: r["Pt"])
        with open(run.output("report.csv"), "w", encoding="utf-8") as fh:
            write_table_csv(fh, rows)
        with open(run.output("report.svg"), "w", encoding="utf-8") as fh:
            plot_report_svg(fh, rows, oracle)
        run.manifest.finish(n_rows=len(rows))


class _guard:
    """Record a failing phase in the manifest, then re-raise; finalize on success."""

    def __init__(self, run):
        self.run = run

    def __enter__(self):
        return self.run

    def __exit__(self, exc_type, exc, tb):
        if exc is None:
            self.run.manifest.close()
        else:
            self.run.manifest.fail(exc)
        return False


def build_parser():
    parser = argparse.ArgumentParser(prog="pdmpstop", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON run configuration")
    common.add_argument("--seed", type=int, metavar="U64", help="master seed (overrides the config)")
    common.add_argument("--out", metavar="DIR", help="output directory (overrides the config)")
    common.add_argument("--threads", type=int, metavar="N", help="worker threads, 0 = all cores")
    artifacts = argparse.ArgumentParser(add_help=False)
    artifacts.add_argument("--grids", metavar="PATH", help="grid file (default OUT/grids.json)")
    artifacts.add_argument("--values", metavar="PATH", help="value file (default OUT/values.json)")
    strict = argparse.ArgumentParser(add_help=False)
    strict.add_argument("--require-feasible", action="store_true", help="exit 3 if a bound is not certified")

    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("simulate", parents=[common], help="simulate trajectories, write CSV and SVG")
    p.add_argument("--n-trajectories", type=int, metavar="N")
    p.set_defaults(func=cmd_simulate)
    p = sub.add_parser("train", parents=[common], help="train grids, weights and error table")
    p.set_defaults(func=cmd_train)
    p = sub.add_parser("solve", parents=[common], help="backward recursion on a grid file")
    p.add_argument("--grids", metavar="PATH")
    p.set_defaults(func=cmd_solve)
    p = sub.add_parser("evaluate", parents=[common, artifacts, strict], help="Monte-Carlo value of the stopping rule")
    p.add_argument("--dump", action="store_true", help="also write per-trajectory outcomes")
    p.set_defaults(func=cmd_evaluate)
    p = sub.add_parser("bounds", parents=[common, artifacts, strict], help="error bounds from saved artifacts")
    p.set_defaults(func=cmd_bounds)
    p = sub.add_parser("pipeline", parents=[common, strict], help="train, solve, evaluate, bound and tabulate")
    p.add_argument("--dump", action="store_true", help="also write per-trajectory outcomes")
    p.set_defaults(func=cmd_pipeline)
    p = sub.add_parser("report", parents=[common], help="merge pipeline result rows into one table")
    p.add_argument("runs", nargs="+", metavar="RUN_DIR")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"pdmpstop: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (GridFileError, OSError) as exc:
        print(f"pdmpstop: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (FeasibilityError, DomainError, AbsentRowError, UnsupportedModelError, ArithmeticError, ValueError) as exc:
        print(f"pdmpstop: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
