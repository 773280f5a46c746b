"""Command-line entry points: estimate, simulate, bench.

Configuration may come from flags or a single JSON config file
(``--config``); flags override file values and unknown config keys are
rejected. Every output file embeds the tool version, the resolved
configuration, the RNG identifier where randomness is involved, and an
input digest, so reports are self-describing.

Exit codes: 0 success, 1 estimation failure, 2 input/validation failure,
64 usage error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import statistics
import sys
import time
from pathlib import Path

from . import __version__
from .data import CsvSchema, parse_dataset, validate
from .errors import DataError, EcborrowError
from .estimators import combined_tau, run_estimator
from .sim import (
    RNG_ALGORITHM,
    MonteCarloMetrics,
    ScenarioConfig,
    generate_bench_dataset,
    export_lambda_distribution,
    parse_estimator_spec,
    run_monte_carlo,
)

EXIT_OK = 0
EXIT_ESTIMATION = 1
EXIT_VALIDATION = 2
EXIT_USAGE = 64

DEFAULT_METHODS = "unadjusted,aipw,optimized,pooling,test_then_pool,combined"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 64, not argparse's 2
        raise UsageError(message)


def _sha256(data: bytes) -> str:
    return "sha256:" + hashlib.sha256(data).hexdigest()


def _canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _merge_config(args: argparse.Namespace, defaults: dict) -> dict:
    """Resolve option values: flag > config file > default; fail on unknown keys."""
    file_values = {}
    if getattr(args, "config", None):
        try:
            file_values = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config file: {exc}") from exc
        if not isinstance(file_values, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = set(file_values) - set(defaults)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
    resolved = {}
    for key, default in defaults.items():
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            resolved[key] = flag_value
        elif key in file_values:
            resolved[key] = file_values[key]
        else:
            resolved[key] = default
    return resolved


def _resolve_workers(value) -> int:
    if value is not None:
        return max(1, int(value))
    env = os.environ.get("EC_WORKERS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _parse_method_list(text: str):
    specs = [parse_estimator_spec(tok) for tok in text.split(",") if tok.strip()]
    if not specs:
        raise UsageError("no estimators selected")
    return specs


# ---------------------------------------------------------------------------
# estimate


def _cmd_estimate(args: argparse.Namespace) -> int:
    defaults = {
        "input": None,
        "out": "report.json",
        "p1": None,
        "methods": DEFAULT_METHODS,
        "s_col": "S",
        "a_col": "A",
        "y_col": "Y",
        "covariates": None,
        "level": 0.95,
        "allow_treated_external": False,
    }
    cfg = _merge_config(args, defaults)
    if cfg["input"] is None:
        raise UsageError("--input is required")
    if cfg["p1"] is None:
        raise UsageError("--p1 is required")
    if not 0.0 < float(cfg["p1"]) < 1.0:
        raise UsageError("--p1 must lie in (0, 1)")
    specs = _parse_method_list(cfg["methods"])

    report = {
        "schema": 1,
        "tool": {"name": "ecborrow", "version": __version__},
        "command": "estimate",
        "config": cfg,
        "rng": None,
        "validation": None,
        "estimates": [],
        "errors": [],
    }

    try:
        csv_bytes = Path(cfg["input"]).read_bytes()
    except OSError as exc:
        raise UsageError(f"cannot read input: {exc}") from exc
    report["input_digest"] = _sha256(csv_bytes)

    covariates = None
    if cfg["covariates"]:
        covariates = tuple(c.strip() for c in str(cfg["covariates"]).split(",") if c.strip())
    schema = CsvSchema(s=cfg["s_col"], a=cfg["a_col"], y=cfg["y_col"], covariates=covariates)

    try:
        ds = parse_dataset(
            csv_bytes.decode("utf-8"),
            schema,
            float(cfg["p1"]),
            treatment_variation_allowed=bool(cfg["allow_treated_external"]),
        )
    except DataError as exc:
        report["validation"] = {
            "ok": False,
            "issues": [[None, type(exc).__name__, str(exc)]],
        }
        _write_json(cfg["out"], report)
        return EXIT_VALIDATION

    check = validate(ds)
    report["validation"] = {
        "ok": check.ok,
        "issues": [[issue.row, issue.code, issue.message] for issue in check.issues],
    }
    if not check.ok:
        _write_json(cfg["out"], report)
        return EXIT_VALIDATION

    failed = False
    for spec in specs:
        try:
            estimate = run_estimator(spec.method, ds, level=float(cfg["level"]), **spec.kwargs())
        except EcborrowError as exc:
            failed = True
            report["errors"].append(
                {"estimator": spec.label, "error": type(exc).__name__, "message": str(exc)}
            )
            continue
        entry = estimate.to_dict()
        entry["estimator"] = spec.label
        report["estimates"].append(entry)
    _write_json(cfg["out"], report)
    return EXIT_ESTIMATION if failed else EXIT_OK


# ---------------------------------------------------------------------------
# simulate


def _metrics_csv(metrics: MonteCarloMetrics, resolved: dict) -> str:
    config_echo = dict(resolved)
    config_echo.pop("workers", None)  # execution detail; keeps output worker-invariant
    header = [
        f"# ecborrow {__version__}",
        "# command: simulate",
        f"# rng: {metrics.rng_algorithm}",
        f"# config: {_canonical_json(config_echo)}",
        f"# config_digest: {_sha256(_canonical_json(config_echo).encode())}",
        f"# tau_true: {metrics.tau_true!r}",
        f"# artifact_defined_scenario: {str(metrics.artifact_defined_scenario).lower()}",
    ]
    if metrics.d1_oracle is not None:
        header.append(
            f"# tau_true_oracle: seed={metrics.d1_oracle[0]} draws={metrics.d1_oracle[1]}"
        )
    lines = header + [
        "estimator,mean_abs_bias,empirical_variance,coverage_rate,mean_se,replication_count,failures"
    ]
    for row in metrics.rows:
        lines.append(
            ",".join(
                [
                    row.estimator,
                    repr(row.mean_abs_bias),
                    repr(row.empirical_variance),
                    repr(row.coverage_rate),
                    repr(row.mean_se),
                    str(row.replication_count),
                    str(row.failures),
                ]
            )
        )
    return "\n".join(lines) + "\n"


def _metrics_json(metrics: MonteCarloMetrics, resolved: dict) -> dict:
    return {
        "schema": 1,
        "tool": {"name": "ecborrow", "version": __version__},
        "command": "simulate",
        "config": resolved,
        "config_digest": _sha256(_canonical_json(resolved).encode()),
        "rng": metrics.rng_algorithm,
        "tau_true": metrics.tau_true,
        "tau_true_oracle": (
            None
            if metrics.d1_oracle is None
            else {"seed": metrics.d1_oracle[0], "draws": metrics.d1_oracle[1]}
        ),
        "artifact_defined_scenario": metrics.artifact_defined_scenario,
        "wall_clock_seconds": metrics.wall_clock_seconds,
        "rows": [
            {
                "estimator": row.estimator,
                "mean_abs_bias": row.mean_abs_bias,
                "empirical_variance": row.empirical_variance,
                "coverage_rate": row.coverage_rate,
                "mean_se": row.mean_se,
                "replication_count": row.replication_count,
                "failures": row.failures,
                "wall_clock_seconds": row.wall_clock_seconds,
                "error_counts": row.error_counts,
            }
            for row in metrics.rows
        ],
    }


def _cmd_simulate(args: argparse.Namespace) -> int:
    defaults = {
        "scenario": "A",
        "n1": 50,
        "n0": 200,
        "beta": 0.0,
        "seed": 0,
        "p1": 0.5,
        "reps": 250,
        "estimators": DEFAULT_METHODS,
        "ablation": [],
        "workers": None,
        "out": "metrics",
        "lambda_out": None,
    }
    cfg = _merge_config(args, defaults)
    specs = _parse_method_list(cfg["estimators"])
    for ablation in cfg["ablation"] or []:
        specs.append(parse_estimator_spec(f"optimized[{ablation}]"))
    try:
        scenario = ScenarioConfig(
            scenario=str(cfg["scenario"]),
            n1=int(cfg["n1"]),
            n0=int(cfg["n0"]),
            beta=float(cfg["beta"]),
            seed=int(cfg["seed"]),
            p1=float(cfg["p1"]),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    workers = _resolve_workers(cfg["workers"])
    reps = int(cfg["reps"])
    if reps < 1:
        raise UsageError("--reps must be at least 1")

    metrics = run_monte_carlo(scenario, specs, reps, workers=workers)

    resolved = dict(cfg)
    resolved["estimators"] = [spec.label for spec in specs]
    resolved["ablation"] = list(cfg["ablation"] or [])
    resolved["workers"] = workers

    out_prefix = Path(str(cfg["out"]))
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    csv_path = out_prefix.with_suffix(".csv")
    csv_path.write_text(_metrics_csv(metrics, resolved), encoding="utf-8")
    _write_json(out_prefix.with_suffix(".json"), _metrics_json(metrics, resolved))
    if cfg["lambda_out"]:
        Path(cfg["lambda_out"]).write_text(export_lambda_distribution(metrics), encoding="utf-8")

    if any(row.failures == row.replication_count for row in metrics.rows):
        return EXIT_ESTIMATION
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench


def _time_combined(n1: int, n0: int, d: int, seed: int, repeats: int) -> list[float]:
    times = []
    for rep in range(repeats):
        ds = generate_bench_dataset(n1, n0, d, seed, rep)
        t0 = time.perf_counter()
        combined_tau(ds)
        times.append(time.perf_counter() - t0)
    return times


def _cmd_bench(args: argparse.Namespace) -> int:
    defaults = {
        "n1": 100,
        "n0": 500,
        "d": 2,
        "n0_grid": "500,1000,2000",
        "d_grid": "2,4,8",
        "repeats": 10,
        "seed": 0,
        "out": "bench.csv",
    }
    cfg = _merge_config(args, defaults)
    repeats = int(cfg["repeats"])
    if repeats < 1:
        raise UsageError("--repeats must be at least 1")

    def grid(text) -> list[int]:
        if isinstance(text, (list, tuple)):
            return [int(v) for v in text]
        return [int(tok) for tok in str(text).split(",") if tok.strip()]

    lines = [
        f"# ecborrow {__version__}",
        "# command: bench",
        f"# config: {_canonical_json(cfg)}",
        "sweep,value,n1,n0,d,repeats,median_s,min_s,max_s",
    ]
    for n0 in grid(cfg["n0_grid"]):
        times = _time_combined(int(cfg["n1"]), n0, int(cfg["d"]), int(cfg["seed"]), repeats)
        lines.append(
            f"n0,{n0},{cfg['n1']},{n0},{cfg['d']},{repeats},"
            f"{statistics.median(times)!r},{min(times)!r},{max(times)!r}"
        )
    for d in grid(cfg["d_grid"]):
        times = _time_combined(int(cfg["n1"]), int(cfg["n0"]), d, int(cfg["seed"]), repeats)
        lines.append(
            f"d,{d},{cfg['n1']},{cfg['n0']},{d},{repeats},"
            f"{statistics.median(times)!r},{min(times)!r},{max(times)!r}"
        )
    Path(str(cfg["out"])).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return EXIT_OK


# ---------------------------------------------------------------------------


def _write_json(path, payload) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def build_parser() -> _Parser:
    parser = _Parser(prog="ecborrow", description=__doc__)
    parser.add_argument("--version", action="version", version=f"ecborrow {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    est = sub.add_parser("estimate", help="estimate treatment effects from a CSV file")
    est.add_argument("--input")
    est.add_argument("--out")
    est.add_argument("--p1", type=float)
    est.add_argument("--methods")
    est.add_argument("--s-col", dest="s_col")
    est.add_argument("--a-col", dest="a_col")
    est.add_argument("--y-col", dest="y_col")
    est.add_argument("--covariates")
    est.add_argument("--level", type=float)
    est.add_argument("--allow-treated-external", dest="allow_treated_external", action="store_const", const=True)
    est.add_argument("--config")
    est.set_defaults(func=_cmd_estimate)

    simp = sub.add_parser("simulate", help="run a Monte Carlo scenario")
    simp.add_argument("--scenario")
    simp.add_argument("--n1", type=int)
    simp.add_argument("--n0", type=int)
    simp.add_argument("--beta", type=float)
    simp.add_argument("--seed", type=int)
    simp.add_argument("--p1", type=float)
    simp.add_argument("--reps", type=int)
    simp.add_argument("--estimators")
    simp.add_argument("--ablation", action="append")
    simp.add_argument("--workers", type=int)
    simp.add_argument("--out")
    simp.add_argument("--lambda-out", dest="lambda_out")
    simp.add_argument("--config")
    simp.set_defaults(func=_cmd_simulate)

    ben = sub.add_parser("bench", help="time the combined estimator over size sweeps")
    ben.add_argument("--n1", type=int)
    ben.add_argument("--n0", type=int)
    ben.add_argument("--d", type=int)
    ben.add_argument("--n0-grid", dest="n0_grid")
    ben.add_argument("--d-grid", dest="d_grid")
    ben.add_argument("--repeats", type=int)
    ben.add_argument("--seed", type=int)
    ben.add_argument("--out")
    ben.add_argument("--config")
    ben.set_defaults(func=_cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"ecborrow: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, KeyError) as exc:
        print(f"ecborrow: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except EcborrowError as exc:
        print(f"ecborrow: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION


if __name__ == "__main__":
    sys.exit(main())
