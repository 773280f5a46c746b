"""Stacked M-estimation: block-triangular solving and sandwich covariance.

A stack is an ordered list of named parameter blocks. Each block owns a
slice of the parameter vector, a vectorized per-observation estimating
function, and a closed-form solver (mean, weighted least squares, Newton
logistic, or plug-in average). Blocks declare which upstream blocks their
estimating function reads; the declared dependency order must be acyclic.

Solving walks the blocks in topological order, then verifies that the
averaged full stack vanishes at the assembled solution. Inference uses
the empirical sandwich: bread from central finite differences of the
averaged stack, meat from per-observation outer products.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .data import TrialDataset
from .errors import (
    BlockSolveFailed,
    EstimationError,
    NonFiniteDerivative,
    ResidualCheckFailed,
    SingularBread,
)

BREAD_CONDITION_LIMIT = 1e12
_JACOBIAN_STEP = 1e-6


@dataclass(frozen=True)
class StackData:
    """Dataset unpacked into the arrays estimating functions consume."""

    xt: np.ndarray  # (n, d+1) design with intercept column
    s: np.ndarray   # (n,) float 0/1
    a: np.ndarray   # (n,) float 0/1
    y: np.ndarray   # (n,)
    p1: float

    @classmethod
    def from_dataset(cls, ds: TrialDataset) -> "StackData":
        n = ds.n
        xt = np.hstack([np.ones((n, 1)), ds.x])
        return cls(xt=xt, s=ds.s.astype(float), a=ds.a.astype(float), y=ds.y, p1=ds.p1)

    @property
    def n(self) -> int:
        return self.xt.shape[0]


@dataclass(frozen=True)
class SolveOptions:
    tol: float = 1e-8
    max_iter: int = 100


Theta = Mapping[str, np.ndarray]


@dataclass(frozen=True)
class Block:
    """One named parameter block of a stack.

    ``values(data, theta)`` returns the (n, dim) per-observation
    estimating-function values; rows outside the block's conditioning set
    must evaluate to zero. ``solve(data, theta, options)`` returns the
    block estimate given upstream solutions. ``depends_on`` names every
    block whose parameters ``values`` reads.
    """

    name: str
    dim: int
    values: Callable[[StackData, Theta], np.ndarray]
    solve: Callable[[StackData, Theta, SolveOptions], np.ndarray]
    depends_on: tuple[str, ...] = ()


class EstimatingStack:
    """Ordered blocks with an acyclic dependency relation."""

    def __init__(self, blocks: Sequence[Block]):
        names = [b.name for b in blocks]
        if len(set(names)) != len(names):
            raise ValueError("block names must be unique")
        known = set(names)
        for b in blocks:
            missing = set(b.depends_on) - known
            if missing:
                raise ValueError(f"block {b.name!r} depends on unknown blocks {sorted(missing)}")
        self.blocks = list(blocks)
        self._by_name = {b.name: b for b in blocks}
        self.slices: dict[str, slice] = {}
        offset = 0
        for b in blocks:
            self.slices[b.name] = slice(offset, offset + b.dim)
            offset += b.dim
        self.dim = offset
        self.order = self._topological_order()

    def _topological_order(self) -> list[Block]:
        remaining = {b.name: set(b.depends_on) for b in self.blocks}
        ordered: list[Block] = []
        while remaining:
            ready = [name for name, deps in remaining.items() if not deps]
            if not ready:
                raise ValueError("block dependencies contain a cycle")
            # keep declaration order among ready blocks for determinism
            for b in self.blocks:
                if b.name in ready:
                    ordered.append(b)
                    del remaining[b.name]
            for deps in remaining.values():
                deps.difference_update(name for name in ready)
        return ordered

    def split(self, theta: np.ndarray) -> dict[str, np.ndarray]:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.dim,):
            raise ValueError(f"expected parameter vector of length {self.dim}")
        return {name: theta[sl] for name, sl in self.slices.items()}

    def join(self, theta: Theta) -> np.ndarray:
        return np.concatenate([np.atleast_1d(theta[b.name]) for b in self.blocks])

    def evaluate(self, data: StackData, theta: Theta) -> np.ndarray:
        """Per-observation stacked estimating-function values, shape (n, dim)."""
        out = np.empty((data.n, self.dim))
        for b in self.blocks:
            vals = np.asarray(b.values(data, theta), dtype=float)
            if vals.shape != (data.n, b.dim):
                raise ValueError(f"block {b.name!r} returned shape {vals.shape}")
            out[:, self.slices[b.name]] = vals
        return out

    def readers_of(self, name: str) -> list[Block]:
        """Blocks whose estimating functions read parameters of `name`."""
        return [b for b in self.blocks if b.name == name or name in b.depends_on]


@dataclass(frozen=True)
class StackSolution:
    """Labelled solution of a stack."""

    theta: np.ndarray
    slices: dict[str, slice]
    residual_norm: float

    def __getitem__(self, name: str) -> np.ndarray:
        return self.theta[self.slices[name]]

    def scalar(self, name: str) -> float:
        block = self[name]
        if block.shape != (1,):
            raise ValueError(f"block {name!r} is not scalar")
        return float(block[0])

    def as_dict(self) -> dict[str, np.ndarray]:
        return {name: self.theta[sl] for name, sl in self.slices.items()}


def solve_stack(
    stack: EstimatingStack,
    ds: TrialDataset | StackData,
    options: SolveOptions | None = None,
) -> StackSolution:
    """Solve blocks in dependency order, then verify the stacked residual.

    Raises BlockSolveFailed when a block solver fails (wrapping model
    errors) and ResidualCheckFailed when the assembled stack does not
    vanish at the block solutions, which signals a mis-declared stack.
    """
    options = options or SolveOptions()
    data = ds if isinstance(ds, StackData) else StackData.from_dataset(ds)
    theta: dict[str, np.ndarray] = {}
    for block in stack.order:
        try:
            estimate = np.atleast_1d(np.asarray(block.solve(data, theta, options), dtype=float))
        except EstimationError as exc:
            raise BlockSolveFailed(block.name, exc) from exc
        if estimate.shape != (block.dim,) or not np.all(np.isfinite(estimate)):
            raise BlockSolveFailed(
                block.name, EstimationError(f"solver returned invalid estimate {estimate!r}")
            )
        theta[block.name] = estimate
    residual = float(np.max(np.abs(stack.evaluate(data, theta).mean(axis=0))))
    if residual > options.tol:
        raise ResidualCheckFailed(
            f"averaged stack residual {residual:.3e} exceeds tolerance {options.tol:.1e}"
        )
    return StackSolution(theta=stack.join(theta), slices=dict(stack.slices), residual_norm=residual)


def numerical_jacobian(
    stack: EstimatingStack,
    ds: TrialDataset | StackData,
    theta: np.ndarray,
    use_structure: bool = True,
) -> np.ndarray:
    """Central finite differences of the averaged stack at theta.

    Per-coordinate step 1e-6 * max(1, |theta_j|). With ``use_structure``
    the declared block dependencies are used to skip entries that are
    identically zero; the dense mode recomputes everything and exists to
    cross-check the declarations.
    """
    data = ds if isinstance(ds, StackData) else StackData.from_dataset(ds)
    theta = np.asarray(theta, dtype=float)
    if not np.all(np.isfinite(theta)):
        raise NonFiniteDerivative("parameter vector must be finite")
    jac = np.zeros((stack.dim, stack.dim))

    def mean_values(blocks: Sequence[Block], point: np.ndarray) -> dict[str, np.ndarray]:
        split = stack.split(point)
        out = {}
        for b in blocks:
            vals = np.asarray(b.values(data, split), dtype=float)
            # summing in sorted order makes the mean independent of row order,
            # which keeps finite-difference noise permutation-invariant
            mean = np.sort(vals, axis=0).sum(axis=0) / data.n
            if not np.all(np.isfinite(mean)):
                raise NonFiniteDerivative(f"block {b.name!r} evaluated to non-finite values")
            out[b.name] = mean
        return out

    for owner in stack.blocks:
        targets = stack.readers_of(owner.name) if use_structure else stack.blocks
        for j in range(*stack.slices[owner.name].indices(stack.dim)):
            step = _JACOBIAN_STEP * max(1.0, abs(theta[j]))
            hi = theta.copy()
            hi[j] += step
            lo = theta.copy()
            lo[j] -= step
            upper = mean_values(targets, hi)
            lower = mean_values(targets, lo)
            for b in targets:
                jac[stack.slices[b.name], j] = (upper[b.name] - lower[b.name]) / (2.0 * step)
    return jac


@dataclass(frozen=True)
class SandwichResult:
    """Joint sandwich covariance A^-1 B A^-T / n with labelled access."""

    theta_hat: np.ndarray
    bread: np.ndarray
    meat: np.ndarray
    covariance: np.ndarray
    residual_norm: float
    slices: dict[str, slice]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.theta_hat[self.slices[name]]

    def scalar(self, name: str) -> float:
        return float(self.theta_hat[self.slices[name]][0])

    def variance(self, name: str) -> float:
        sl = self.slices[name]
        if sl.stop - sl.start != 1:
            raise ValueError(f"block {name!r} is not scalar; use block_covariance")
        return float(self.covariance[sl.start, sl.start])

    def covariance_entry(self, name_a: str, name_b: str) -> float:
        ia, ib = self.slices[name_a].start, self.slices[name_b].start
        return float(self.covariance[ia, ib])

    def block_covariance(self, names: Sequence[str]) -> np.ndarray:
        idx = np.concatenate([np.arange(*self.slices[n].indices(len(self.theta_hat))) for n in names])
        return self.covariance[np.ix_(idx, idx)]

    def se(self, name: str) -> float:
        return float(np.sqrt(self.variance(name)))


def sandwich_covariance(
    stack: EstimatingStack,
    ds: TrialDataset | StackData,
    solution: StackSolution,
    use_structure: bool = True,
) -> SandwichResult:
    """Empirical sandwich covariance at the stack solution."""
    data = ds if isinstance(ds, StackData) else StackData.from_dataset(ds)
    theta = solution.theta
    bread = -numerical_jacobian(stack, data, theta, use_structure=use_structure)
    cond = np.linalg.cond(bread)
    if not np.isfinite(cond) or cond > BREAD_CONDITION_LIMIT:
        raise SingularBread(f"bread matrix condition number {cond:.3g} exceeds 1e12")
    values = stack.evaluate(data, stack.split(theta))
    n = data.n
    meat = values.T @ values / n
    half = np.linalg.solve(bread, meat)
    cov = np.linalg.solve(bread, half.T).T / n
    cov = 0.5 * (cov + cov.T)
    return SandwichResult(
        theta_hat=theta,
        bread=bread,
        meat=meat,
        covariance=cov,
        residual_norm=solution.residual_norm,
        slices=dict(stack.slices),
    )
