"""Data-generating processes and the Monte Carlo experiment harness.

Scenario tags:

* ``D1``/``D2`` follow explicit published generative formulas: nonlinear
  outcome surfaces with a source-gap knob (D1) and a quadratic surface
  with a covariate-shift knob (D2).
* ``A``/``B`` are artifact-defined concretizations flagged as such in all
  outputs: A is a correctly-specified linear world, B stacks D2's
  covariate shift (knob ``beta``) with a fixed 0.3 control-arm source gap
  so that both exchangeability and model specification fail.

Every replication owns an independent counter-based RNG substream derived
by hashing (seed, replication), so results are reproducible and identical
for any worker count.
"""
from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import TrialDataset
from .errors import EcborrowError, NoLambdaData
from .estimators import ESTIMATOR_METHODS, resolve_method, run_estimator

SCENARIO_TAGS = ("A", "B", "D1", "D2")
RNG_ALGORITHM = "philox4x64 with numpy SeedSequence entropy=(seed, replication)"
D1_ORACLE_SEED = 20260810
D1_ORACLE_DRAWS = 10**6

_ARTIFACT_DEFINED = {"A": True, "B": True, "D1": False, "D2": False}


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: str
    n1: int
    n0: int
    beta: float = 0.0
    seed: int = 0
    p1: float = 0.5

    def __post_init__(self):
        if self.scenario not in SCENARIO_TAGS:
            raise ValueError(f"unknown scenario {self.scenario!r}; expected one of {SCENARIO_TAGS}")
        if self.n1 < 4:
            raise ValueError("n1 must be at least 4")
        if self.n0 < 1:
            raise ValueError("n0 must be at least 1")
        if not 0.0 < self.p1 < 1.0:
            raise ValueError("p1 must lie in (0, 1)")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


@dataclass(frozen=True)
class DgpSpec:
    d: int
    sigma: float
    mu1: np.ndarray
    mu0: Callable[[float], np.ndarray]
    chol: np.ndarray
    b: Callable[[np.ndarray, np.ndarray, float], np.ndarray]
    m: Callable[[np.ndarray], np.ndarray]


def _correlated_cov(d: int, off_diagonal: float) -> np.ndarray:
    cov = np.full((d, d), off_diagonal)
    np.fill_diagonal(cov, 1.0)
    return cov


def _dgp_spec(scenario: str) -> DgpSpec:
    if scenario == "A":
        return DgpSpec(
            d=2,
            sigma=1.0,
            mu1=np.zeros(2),
            mu0=lambda beta: np.zeros(2),
            chol=np.eye(2),
            b=lambda x, s, beta: 1.0 + x[:, 0] + 0.5 * x[:, 1] + beta * s,
            m=lambda x: 2.0 + 0.5 * x[:, 0],
        )
    if scenario == "B":
        chol = np.linalg.cholesky(_correlated_cov(10, 1.0 / np.sqrt(10.0)))
        return DgpSpec(
            d=10,
            sigma=0.5,
            mu1=np.full(10, -2.0),
            mu0=lambda beta: np.full(10, -2.0 + beta),
            chol=chol,
            b=lambda x, s, beta: np.sum(x * x, axis=1) / 10.0 + 0.3 * s,
            m=lambda x: np.full(x.shape[0], 2.0),
        )
    if scenario == "D1":
        return DgpSpec(
            d=5,
            sigma=np.sqrt(10.0),
            mu1=np.zeros(5),
            mu0=lambda beta: np.full(5, 0.2),
            chol=np.eye(5),
            b=lambda x, s, beta: (
                102.0
                + beta * s
                + 5.0 * x[:, 0]
                - (2.0 * x[:, 1] + 2.0) ** 2
                + 3.0 * x[:, 3] ** 3
                - 25.0 * np.sin(5.0 * x[:, 4])
            ),
            m=lambda x: -4.0 * np.abs(x[:, 2]) - 2.0 * x[:, 4],
        )
    if scenario == "D2":
        chol = np.linalg.cholesky(_correlated_cov(10, 1.0 / np.sqrt(10.0)))
        return DgpSpec(
            d=10,
            sigma=0.5,
            mu1=np.full(10, -2.0),
            mu0=lambda beta: np.full(10, -2.0 + beta),
            chol=chol,
            b=lambda x, s, beta: np.sum(x * x, axis=1) / 10.0,
            m=lambda x: np.full(x.shape[0], 2.0),
        )
    raise ValueError(f"unknown scenario {scenario!r}")


def control_arm_source_gap(scenario: str, beta: float) -> float:
    """Exact mean-outcome gap between sources among controls at fixed X."""
    if scenario in ("A", "D1"):
        return beta
    if scenario == "B":
        return 0.3
    return 0.0


def replication_rng(seed: int, replication: int) -> np.random.Generator:
    """Counter-based substream for one replication; see RNG_ALGORITHM."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy=(seed, replication))))


_d1_tau_cache: dict[tuple[int, int], float] = {}


def _d1_tau_oracle(seed: int = D1_ORACLE_SEED, draws: int = D1_ORACLE_DRAWS) -> float:
    key = (seed, draws)
    if key not in _d1_tau_cache:
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy=(seed,))))
        z = rng.standard_normal((draws, 2))
        _d1_tau_cache[key] = float(np.mean(-4.0 * np.abs(z[:, 0]) - 2.0 * z[:, 1]))
    return _d1_tau_cache[key]


def tau_true(cfg: ScenarioConfig) -> float:
    """Treatment effect over the trial covariate law for a scenario.

    Closed form except for D1, which uses a one-off cached Monte Carlo
    oracle (seed recorded in every metrics file).
    """
    if cfg.scenario == "D1":
        return _d1_tau_oracle()
    return 2.0


def generate_scenario(cfg: ScenarioConfig, replication: int) -> tuple[TrialDataset, float]:
    """One composite dataset: n1 trial rows (randomized A), then n0 external rows.

    Draw order within the substream: treatment uniforms, trial covariate
    normals, external covariate normals, outcome noise.
    """
    spec = _dgp_spec(cfg.scenario)
    rng = replication_rng(cfg.seed, replication)
    n = cfg.n1 + cfg.n0

    a = np.zeros(n, dtype=np.int64)
    a[: cfg.n1] = (rng.random(cfg.n1) < cfg.p1).astype(np.int64)
    s = np.zeros(n, dtype=np.int64)
    s[: cfg.n1] = 1

    z1 = rng.standard_normal((cfg.n1, spec.d))
    z0 = rng.standard_normal((cfg.n0, spec.d))
    x = np.vstack([spec.mu1 + z1 @ spec.chol.T, spec.mu0(cfg.beta) + z0 @ spec.chol.T])
    noise = rng.standard_normal(n) * spec.sigma

    y = spec.b(x, s.astype(float), cfg.beta) + a * spec.m(x) + noise
    ds = TrialDataset(
        x=x,
        s=s,
        a=a,
        y=y,
        covariate_names=tuple(f"X{j + 1}" for j in range(spec.d)),
        p1=cfg.p1,
    )
    return ds, tau_true(cfg)


# ---------------------------------------------------------------------------
# Monte Carlo harness

_OPTION_KEYS = {
    "unadjusted": set(),
    "ipw": set(),
    "or": set(),
    "aipw_trial": set(),
    "optimized": {"unweighted_objective", "estimate_propensity"},
    "combined": {"unweighted_objective", "estimate_propensity"},
    "pooling": {"r", "g0_source"},
    "test_then_pool": {"alpha", "r"},
}


@dataclass(frozen=True)
class EstimatorSpec:
    label: str
    method: str
    options: tuple[tuple[str, object], ...] = ()

    def kwargs(self) -> dict:
        return dict(self.options)


def parse_estimator_spec(text: str) -> EstimatorSpec:
    """Parse 'name' or 'name[flag,key=value,...]' into an EstimatorSpec."""
    text = text.strip()
    if "[" in text:
        if not text.endswith("]"):
            raise ValueError(f"malformed estimator spec {text!r}")
        name, _, option_text = text[:-1].partition("[")
        tokens = [tok.strip() for tok in option_text.split(",") if tok.strip()]
    else:
        name, tokens = text, []
    method = resolve_method(name)
    options: list[tuple[str, object]] = []
    for token in tokens:
        if "=" in token:
            key, _, raw = token.partition("=")
            key = key.strip().replace("-", "_")
            value: object = raw.strip() if key == "g0_source" else float(raw)
        else:
            key, value = token.replace("-", "_"), True
        if key not in _OPTION_KEYS[method]:
            raise ValueError(f"option {token!r} is not valid for estimator {method!r}")
        options.append((key, value))
    return EstimatorSpec(label=text, method=method, options=tuple(options))


@dataclass(frozen=True)
class ReplicationRecord:
    replication: int
    label: str
    error: str | None
    tau: float = np.nan
    se: float = np.nan
    covered: bool = False
    lambda_: float = np.nan
    seconds: float = 0.0


@dataclass(frozen=True)
class MetricRow:
    estimator: str
    mean_abs_bias: float  # |mean(tau_hat) - tau_true| over successes
    empirical_variance: float
    coverage_rate: float
    mean_se: float
    replication_count: int
    failures: int
    wall_clock_seconds: float
    error_counts: dict = field(default_factory=dict)


@dataclass(frozen=True)
class MonteCarloMetrics:
    config: ScenarioConfig
    tau_true: float
    replications: int
    rows: tuple[MetricRow, ...]
    lambdas: tuple[tuple[int, str, float], ...]  # (replication, label, lambda)
    rng_algorithm: str
    d1_oracle: tuple[int, int] | None
    wall_clock_seconds: float
    artifact_defined_scenario: bool


def _run_replications(
    cfg: ScenarioConfig, specs: tuple[EstimatorSpec, ...], start: int, stop: int
) -> list[ReplicationRecord]:
    records: list[ReplicationRecord] = []
    for rep in range(start, stop):
        ds, truth = generate_scenario(cfg, rep)
        for spec in specs:
            t0 = time.perf_counter()
            try:
                report = run_estimator(spec.method, ds, **spec.kwargs())
            except (EcborrowError, np.linalg.LinAlgError, FloatingPointError) as exc:
                records.append(
                    ReplicationRecord(
                        replication=rep,
                        label=spec.label,
                        error=type(exc).__name__,
                        seconds=time.perf_counter() - t0,
                    )
                )
                continue
            records.append(
                ReplicationRecord(
                    replication=rep,
                    label=spec.label,
                    error=None,
                    tau=report.tau,
                    se=report.se,
                    covered=bool(report.ci[0] <= truth <= report.ci[1]),
                    lambda_=np.nan if report.lambda_ is None else report.lambda_,
                    seconds=time.perf_counter() - t0,
                )
            )
    return records


def run_monte_carlo(
    cfg: ScenarioConfig,
    estimators: Sequence[str | EstimatorSpec],
    reps: int,
    workers: int = 1,
) -> MonteCarloMetrics:
    """Run `reps` replications of every estimator and aggregate metrics.

    Estimator failures are recorded, never aborting the run. Workers only
    partition the replication range; records are re-ordered by
    replication index before a sequential aggregation pass, so metrics do
    not depend on the worker count.
    """
    if reps < 1:
        raise ValueError("reps must be at least 1")
    specs = tuple(
        spec if isinstance(spec, EstimatorSpec) else parse_estimator_spec(spec)
        for spec in estimators
    )
    if len({spec.label for spec in specs}) != len(specs):
        raise ValueError("estimator labels must be unique")

    start_time = time.perf_counter()
    workers = max(1, int(workers))
    if workers == 1:
        records = _run_replications(cfg, specs, 0, reps)
    else:
        chunk = max(1, -(-reps // (workers * 4)))
        bounds = [(lo, min(lo + chunk, reps)) for lo in range(0, reps, chunk)]
        records = []
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for part in pool.map(
                _run_replications,
                [cfg] * len(bounds),
                [specs] * len(bounds),
                [lo for lo, _ in bounds],
                [hi for _, hi in bounds],
            ):
                records.extend(part)
    records.sort(key=lambda r: (r.replication, _label_index(specs, r.label)))
    truth = tau_true(cfg)

    rows = []
    lambdas: list[tuple[int, str, float]] = []
    for spec in specs:
        mine = [r for r in records if r.label == spec.label]
        taus = np.array([r.tau for r in mine if r.error is None])
        ses = np.array([r.se for r in mine if r.error is None])
        covered = np.array([r.covered for r in mine if r.error is None], dtype=float)
        error_counts: dict[str, int] = {}
        for r in mine:
            if r.error is not None:
                error_counts[r.error] = error_counts.get(r.error, 0) + 1
        for r in mine:
            if r.error is None and np.isfinite(r.lambda_):
                lambdas.append((r.replication, spec.label, float(r.lambda_)))
        rows.append(
            MetricRow(
                estimator=spec.label,
                mean_abs_bias=float(abs(taus.mean() - truth)) if taus.size else float("nan"),
                empirical_variance=float(taus.var(ddof=1)) if taus.size > 1 else float("nan"),
                coverage_rate=float(covered.mean()) if covered.size else float("nan"),
                mean_se=float(ses.mean()) if ses.size else float("nan"),
                replication_count=reps,
                failures=sum(error_counts.values()),
                wall_clock_seconds=float(sum(r.seconds for r in mine)),
                error_counts=error_counts,
            )
        )

    return MonteCarloMetrics(
        config=cfg,
        tau_true=truth,
        replications=reps,
        rows=tuple(rows),
        lambdas=tuple(lambdas),
        rng_algorithm=RNG_ALGORITHM,
        d1_oracle=(D1_ORACLE_SEED, D1_ORACLE_DRAWS) if cfg.scenario == "D1" else None,
        wall_clock_seconds=time.perf_counter() - start_time,
        artifact_defined_scenario=_ARTIFACT_DEFINED[cfg.scenario],
    )


def _label_index(specs: tuple[EstimatorSpec, ...], label: str) -> int:
    for i, spec in enumerate(specs):
        if spec.label == label:
            return i
    return len(specs)


def generate_bench_dataset(n1: int, n0: int, d: int, seed: int, replication: int) -> TrialDataset:
    """Exchangeable linear dataset with configurable covariate dimension.

    Used by the timing benchmark, which sweeps n0 and d while holding the
    statistical structure fixed.
    """
    rng = replication_rng(seed, replication)
    n = n1 + n0
    a = np.zeros(n, dtype=np.int64)
    a[:n1] = (rng.random(n1) < 0.5).astype(np.int64)
    s = np.zeros(n, dtype=np.int64)
    s[:n1] = 1
    x = rng.standard_normal((n, d))
    coef = np.full(d, 0.5)
    y = 1.0 + x @ coef + a * 2.0 + rng.standard_normal(n)
    return TrialDataset(
        x=x,
        s=s,
        a=a,
        y=y,
        covariate_names=tuple(f"X{j + 1}" for j in range(d)),
        p1=0.5,
    )


def export_lambda_distribution(metrics: MonteCarloMetrics, label: str = "combined") -> str:
    """CSV text of per-replication mixing weights for one combined estimator."""
    lines = [
        f"{rep},{value!r}"
        for rep, row_label, value in metrics.lambdas
        if row_label == label
    ]
    if not lines:
        raise NoLambdaData(f"no mixing-weight draws recorded for estimator {label!r}")
    return "replication,lambda\n" + "\n".join(lines) + "\n"
