"""Command-line front end.

Every command writes its artifacts into an output directory (``--out``,
default ``$POLICYLAB_OUT`` or the working directory) and prints a JSON run
manifest on stdout: inputs and outputs with SHA-256 digests, the resolved
arguments, the seed and library versions.

Exit codes: 0 success, 1 usage error, 2 data or validation error, 3 internal error.
"""

from __future__ import annotations

import argparse
import json
import os
import platform
import sys
import traceback
from pathlib import Path

import numpy as np

from . import __version__
from .core import DataValidationError, PolicyLabError, SchemaMismatchError, balance_check, validate_dataset
from .evaluation import (
    APPROACHES,
    BASELINE,
    CVConfig,
    EvalReport,
    cross_task_table,
    curve_long_csv,
    evaluate_policy,
    fit_approach,
    geometric_sizes,
    learning_curve,
    nested_cv,
)
from .io import file_sha256, read_dataset, read_truth, write_binary, write_csv, write_truth
from .policies import Policy, constant_policy, load_policy, save_policy
from .synthgen import ScenarioConfig, SyntheticTruth, generate, preset_names, scenario_preset

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
OUT_ENV = "POLICYLAB_OUT"
STOCHASTIC = {"gen", "train", "curve", "crosstask"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in str(text).split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in str(text).split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _approaches(text: str) -> tuple[str, ...]:
    names = tuple(v.strip() for v in str(text).split(",") if v.strip())
    for n in names:
        if n not in APPROACHES + (BASELINE,):
            raise argparse.ArgumentTypeError(f"unknown approach {n!r}; choose from {APPROACHES + (BASELINE,)}")
    return names


def _threads(text: str) -> int:
    if str(text) == "max":
        return os.cpu_count() or 1
    n = int(text)
    if n < 1:
        raise argparse.ArgumentTypeError("--threads must be >= 1 or 'max'")
    return n


# Defaults live here rather than in the parser so that "not given" is
# distinguishable from "given the default" when merging a --config file.
DEFAULTS = {
    "format": "both",
    "name": "data",
    "threads": 1,
    "outer_folds": 10,
    "inner_folds": 3,
    "max_depth": CVConfig.max_depth,
    "min_samples_leaf": CVConfig.min_samples_leaf,
    "min_loss_reduction": CVConfig.min_loss_reduction,
    "approach": APPROACHES,
    "n_sizes": 5,
}
# config-file values go through the same converters as flags
CONVERTERS = {
    "max_depth": _int_list,
    "min_samples_leaf": _int_list,
    "min_loss_reduction": _float_list,
    "approach": _approaches,
    "sizes": _int_list,
    "threads": _threads,
}


def _add_common(p: argparse.ArgumentParser, seed=True) -> None:
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or .)")
    p.add_argument("--config", help="JSON file of option values; explicit flags win")
    p.add_argument("--threads", type=_threads, help="parallel workers (integer or 'max'); output does not depend on it")
    if seed:
        p.add_argument("--seed", type=int, help="random seed (mandatory)")


def _add_cv(p: argparse.ArgumentParser) -> None:
    p.add_argument("--outer-folds", type=int)
    p.add_argument("--inner-folds", type=int)
    p.add_argument("--max-depth", type=_int_list, help="grid, e.g. 1,2,4,8")
    p.add_argument("--min-samples-leaf", type=_int_list, help="grid, e.g. 100,1000")
    p.add_argument("--min-loss-reduction", type=_float_list, help="grid, e.g. 0")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="policylab", description="Offline treatment-assignment policy learning on randomized logs.")
    parser.add_argument("--version", action="version", version=f"policylab {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen", help="generate a synthetic randomized log with its truth sidecar")
    _add_common(p)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--preset", choices=list(preset_names()))
    src.add_argument("--scenario", help="ScenarioConfig JSON file")
    p.add_argument("--n", type=int, help="rows to generate (default 100000, or the scenario file's n_rows)")
    p.add_argument("--format", choices=["csv", "binary", "both"])
    p.add_argument("--name", help="file stem for the outputs (default 'data')")

    p = sub.add_parser("train", help="tune by inner CV and fit policies on a whole dataset")
    _add_common(p)
    p.add_argument("--data")
    p.add_argument("--approach", type=_approaches, help="comma-separated: op,cp,tp,best-on-average")
    _add_cv(p)

    p = sub.add_parser("eval", help="evaluate saved policies, or approaches by nested CV")
    _add_common(p)
    p.add_argument("--data")
    p.add_argument("--truth", help="truth sidecar (default: <data>.truth when present)")
    p.add_argument("--policy", action="append", help="policy file or constant:ARM; repeatable")
    p.add_argument("--approach", type=_approaches, help="nested-CV approaches (needs --seed)")
    _add_cv(p)

    p = sub.add_parser("curve", help="learning curves over training sizes, CSV plus SVG")
    _add_common(p)
    p.add_argument("--data")
    p.add_argument("--truth")
    p.add_argument("--approach", type=_approaches)
    p.add_argument("--sizes", type=_int_list, help="training sizes, e.g. 1000,3000,10000")
    p.add_argument("--n-sizes", type=int, help="geometric schedule length when --sizes is absent")
    _add_cv(p)

    p = sub.add_parser("crosstask", help="each approach scored on every task's loss")
    _add_common(p)
    p.add_argument("--data")
    p.add_argument("--truth")
    _add_cv(p)

    p = sub.add_parser("validate", help="check a dataset (and optional truth or policy) for violations")
    _add_common(p, seed=False)
    p.add_argument("--data")
    p.add_argument("--truth")
    p.add_argument("--policy", action="append")
    return parser


def resolve_args(argv) -> argparse.Namespace:
    args = build_parser().parse_args(argv)
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise UsageError(f"config file {args.config} not found")
        except json.JSONDecodeError as e:
            raise UsageError(f"config file {args.config} is not valid JSON: {e}")
        for key, value in cfg.items():
            key = key.replace("-", "_")
            if not hasattr(args, key) or key in ("command", "config"):
                raise UsageError(f"unknown option {key!r} in config file for command {args.command!r}")
            if getattr(args, key) is None:
                try:
                    if key in CONVERTERS and isinstance(value, (list, tuple)):
                        value = ",".join(str(v) for v in value)
                    if key in CONVERTERS:
                        value = CONVERTERS[key](value)
                except (argparse.ArgumentTypeError, ValueError) as e:
                    raise UsageError(f"config option {key!r}: {e}")
                setattr(args, key, value)
    for key, value in DEFAULTS.items():
        if key == "approach" and args.command == "eval":
            continue  # eval runs nested CV only when asked to
        if hasattr(args, key) and getattr(args, key) is None:
            setattr(args, key, value)
    if args.out is None:
        args.out = os.environ.get(OUT_ENV, ".")
    if args.command in STOCHASTIC or (args.command == "eval" and args.approach):
        if getattr(args, "seed", None) is None:
            raise UsageError(f"policylab {args.command}: --seed is required")
    needs_data = args.command != "gen"
    if needs_data and not args.data:
        raise UsageError(f"policylab {args.command}: --data is required")
    if args.command == "gen" and not (args.preset or args.scenario):
        raise UsageError("policylab gen: one of --preset or --scenario is required")
    if args.command == "eval" and not (args.policy or args.approach):
        raise UsageError("policylab eval: give --policy and/or --approach")
    return args


# -- helpers ------------------------------------------------------------------


class Run:
    """Collects inputs and outputs for the manifest."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}
        self.summary: dict = {}

    def input(self, path) -> Path:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"input file {path} does not exist")
        self.inputs[str(path)] = file_sha256(path)
        return path

    def write_text(self, name: str, text: str) -> Path:
        path = self.out / name
        path.write_text(text)
        return self.record(path)

    def record(self, path) -> Path:
        path = Path(path)
        self.outputs[path.relative_to(self.out).as_posix()] = file_sha256(path)
        return path

    def manifest(self) -> dict:
        resolved = {
            k: (list(v) if isinstance(v, tuple) else v)
            for k, v in sorted(vars(self.args).items())
            if k not in ("out", "config", "threads")
        }
        import pandas
        import scipy

        return {
            "command": self.args.command,
            "arguments": resolved,
            "seed": getattr(self.args, "seed", None),
            "inputs": self.inputs,
            "outputs": self.outputs,
            "summary": self.summary,
            "versions": {
                "policylab": __version__,
                "python": platform.python_version(),
                "numpy": np.__version__,
                "scipy": scipy.__version__,
                "pandas": pandas.__version__,
            },
        }


def _cv_config(args) -> CVConfig:
    return CVConfig(
        outer_folds=args.outer_folds,
        inner_folds=args.inner_folds,
        max_depth=tuple(args.max_depth),
        min_samples_leaf=tuple(args.min_samples_leaf),
        min_loss_reduction=tuple(args.min_loss_reduction),
        seed=args.seed if getattr(args, "seed", None) is not None else 0,
    )


def _load_data(run: Run, path):
    return read_dataset(run.input(path))


def _load_truth(run: Run, data_path, truth_path, d) -> SyntheticTruth | None:
    """Explicit truth must bind to the dataset; an implicit ``<data>.truth`` is used when it does."""
    if truth_path is None:
        guess = Path(str(data_path) + ".truth")
        if not guess.exists():
            return None
        truth_path = guess
    mu = read_truth(run.input(truth_path), data_path)
    if mu.shape != (d.n_rows, d.arm_count):
        raise DataValidationError(f"truth matrix {mu.shape} does not match dataset ({d.n_rows}, {d.arm_count})")
    return SyntheticTruth(mu)


def _load_policy(run: Run, spec: str, d) -> Policy:
    if spec.startswith("constant:"):
        try:
            arm = int(spec.split(":", 1)[1])
        except ValueError:
            raise UsageError(f"bad policy spec {spec!r}; use constant:ARM")
        return constant_policy(arm, d.arm_count, d.schema_hash)
    pol = load_policy(run.input(spec))
    pol.check_compatible(d)
    return pol


def _policy_label(spec: str) -> str:
    return spec.replace(":", "-") if spec.startswith("constant:") else Path(spec).stem


def _shares_table(rows: list[tuple[str, list[float], float]], K: int) -> str:
    head = "| policy | " + " | ".join(f"T={j}" for j in range(K)) + " | entropy |"
    lines = [head, "|---" * (K + 2) + "|"]
    for name, shares, h in rows:
        lines.append(f"| {name} | " + " | ".join(f"{100 * s:.2f}%" for s in shares) + f" | {h:.4f} |")
    return "\n".join(lines) + "\n"


# -- commands -----------------------------------------------------------------


def cmd_gen(args, run: Run) -> None:
    if args.scenario:
        cfg = ScenarioConfig.load(run.input(args.scenario)).replace(seed=args.seed)
        if args.n is not None:
            cfg = cfg.replace(n_rows=args.n)
    else:
        cfg = scenario_preset(args.preset, n_rows=args.n or 100_000, seed=args.seed)
    cfg.validate()
    d, truth = generate(cfg)
    run.record(cfg.save(run.out / f"{args.name}.scenario.json"))
    paths = []
    if args.format in ("binary", "both"):
        paths.append(write_binary(d, run.out / f"{args.name}.bin"))
    if args.format in ("csv", "both"):
        paths.append(write_csv(d, run.out / f"{args.name}.csv"))
        run.record(Path(str(paths[-1]) + ".meta.json"))
    for p in paths:
        run.record(p)
        run.record(write_truth(truth.potential_outcomes, p, Path(str(p) + ".truth")))
    bal = balance_check(d)
    run.summary = {
        "n_rows": d.n_rows,
        "arm_shares": (d.arm_counts() / d.n_rows).tolist(),
        "schema_hash": d.schema_hash,
        "content_hash": d.content_hash(),
        "balance": {"balanced": bool(bal.balanced), "max_distance": float(bal.distances.max()), "threshold": bal.threshold},
    }


def cmd_train(args, run: Run) -> None:
    d = _load_data(run, args.data)
    cfg = _cv_config(args)
    run.summary = {"policies": {}}
    for approach in args.approach:
        policy, hp = fit_approach(d, approach, cfg, args.seed)
        policy.provenance.setdefault("data_file_sha256", run.inputs[str(Path(args.data))])
        path = run.record(save_policy(policy, run.out / f"policy_{approach}.json"))
        run.summary["policies"][approach] = {"file": str(path), "hyperparams": hp}


def cmd_eval(args, run: Run) -> None:
    d = _load_data(run, args.data)
    truth = _load_truth(run, args.data, args.truth, d)
    rows, reports = [], {}
    for spec in args.policy or []:
        policy = _load_policy(run, spec, d)
        res = evaluate_policy(policy, d, truth, 0, 0)
        rep = EvalReport(_policy_label(spec), [res], {"policy": spec}, d.schema_hash)
        reports[rep.approach] = rep
    if args.approach:
        cfg = _cv_config(args)
        for a in args.approach:
            reports[a] = nested_cv(d, a, cfg, truth, threads=args.threads)
    for name, rep in reports.items():
        run.write_text(f"eval_{name}.json", rep.to_json())
        run.write_text(f"eval_{name}_folds.csv", rep.per_fold_csv())
        rows.append((name, rep.pooled_shares(), rep.mean("entropy_bits")))
    run.write_text("assignment_shares.md", _shares_table(rows, d.arm_count))
    run.summary = {
        name: {m: rep.mean(m) for m in ("ips_value", "lift_vs_control", "entropy_bits", "regret")}
        for name, rep in reports.items()
    }


def _curve_svg(points, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "policylab"
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for approach in dict.fromkeys(p.approach for p in points):
        pts = sorted((p for p in points if p.approach == approach), key=lambda p: p.size)
        x = np.array([p.size for p in pts], dtype=float)
        ci = [p.report.ci95["lift_vs_control"] for p in pts]
        m = np.array([c[0] for c in ci])
        h = np.nan_to_num(np.array([c[1] for c in ci]))
        style = "--" if approach == BASELINE else "-"
        (line,) = ax.plot(x, 100 * m, style, marker="o", label=approach.upper() if approach in APPROACHES else approach)
        ax.fill_between(x, 100 * (m - h), 100 * (m + h), color=line.get_color(), alpha=0.2, linewidth=0)
    ax.axhline(0.0, color="0.5", linewidth=0.8)
    ax.set_xscale("log")
    ax.set_xlabel("training rows")
    ax.set_ylabel("lift vs control (%)")
    ax.legend(loc="best")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def cmd_curve(args, run: Run) -> None:
    d = _load_data(run, args.data)
    truth = _load_truth(run, args.data, args.truth, d)
    sizes = list(args.sizes) if args.sizes else geometric_sizes(d.n_rows, args.n_sizes)
    approaches = [a for a in args.approach if a != BASELINE]
    points = learning_curve(d, approaches, sizes, _cv_config(args), truth, threads=args.threads)
    run.write_text("curve.csv", curve_long_csv(points))
    svg = run.out / "curve.svg"
    _curve_svg(points, svg)
    run.record(svg)
    run.summary = {
        "sizes": sizes,
        "lift": {f"{p.approach}@{p.size}": p.report.mean("lift_vs_control") for p in points},
    }


def cmd_crosstask(args, run: Run) -> None:
    d = _load_data(run, args.data)
    truth = _load_truth(run, args.data, args.truth, d)
    table = cross_task_table(d, _cv_config(args), APPROACHES, truth, threads=args.threads)
    run.write_text("crosstask.json", json.dumps(table.to_dict(), indent=2, sort_keys=True) + "\n")
    run.write_text("crosstask.md", table.to_markdown())
    for a, rep in table.reports.items():
        run.write_text(f"crosstask_{a}_folds.csv", rep.per_fold_csv())
    run.summary = table.to_dict()


def cmd_validate(args, run: Run) -> int:
    d = read_dataset(run.input(args.data), validate=False)
    problems = validate_dataset(d)
    summary = {
        "n_rows": d.n_rows,
        "schema_hash": d.schema_hash,
        "violations": len(problems),
        "first_violations": [{"row": v.row, "rule": v.rule} for v in problems[:20]],
    }
    if not problems:
        bal = balance_check(d)
        summary["balance"] = {"balanced": bool(bal.balanced), "max_distance": float(bal.distances.max())}
        if args.truth:
            _load_truth(run, args.data, args.truth, d)
            summary["truth"] = "bound to dataset"
        for spec in args.policy or []:
            _load_policy(run, spec, d)
        if args.policy:
            summary["policies"] = "schema-compatible"
    run.summary = summary
    return EXIT_OK if not problems else EXIT_DATA


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "curve": cmd_curve,
    "crosstask": cmd_crosstask,
    "validate": cmd_validate,
}


def main(argv=None) -> int:
    try:
        args = resolve_args(argv)
        run = Run(args)
        code = COMMANDS[args.command](args, run) or EXIT_OK
        text = json.dumps(run.manifest(), indent=2, sort_keys=True)
        (run.out / "run_manifest.json").write_text(text + "\n")
        print(text)
        return code
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (PolicyLabError, SchemaMismatchError, FileNotFoundError, json.JSONDecodeError, KeyError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception:
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
