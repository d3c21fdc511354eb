"""Block dual ascent for ``min_b f(b) + sum_i h_i(b)``.

``f`` is strictly convex and differentiable, each ``h_i`` is proper convex
(typically an indicator or a sum of entropies restricted to a constraint
set). The solvers keep one multiplier pair ``(lam_i, mu_i)`` per block:

* sequential: ``mu_i = sum_{j != i} lam_j``; ``b* = argmin f + h_i + b.mu_i``;
  ``lam_i = -mu_i - grad f(b*)``.
* parallel: every block solves ``argmin f/n + h_i + b.mu_i`` against the
  previous round, sets ``lam_i = -mu_i - grad f(b*)/n``, then
  ``mu_i = -lam_i + mean_j lam_j`` so that ``sum_i mu_i = 0``.

Block oracles solve their subproblem exactly; the caller supplies them.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol, Sequence

import numpy as np

from .errors import ConjugateUnavailable, NonFiniteValue, OracleFailure

logger = logging.getLogger(__name__)


class SmoothTerm(Protocol):
    def value(self, b: np.ndarray) -> float: ...

    def grad(self, b: np.ndarray) -> np.ndarray: ...

    def conjugate_min(self, v: np.ndarray, scale: float) -> float:
        """``min_b scale * f(b) + b.v``; raise :class:`ConjugateUnavailable` if unknown."""
        ...


class BlockTerm(Protocol):
    support: Optional[np.ndarray]

    def argmin(self, f: SmoothTerm, mu: np.ndarray, scale: float) -> np.ndarray: ...

    def in_domain(self, b: np.ndarray) -> bool: ...

    def conjugate(self, lam: np.ndarray) -> float: ...


@dataclass
class BlockProblem:
    dimension: int
    f: SmoothTerm
    blocks: Sequence[BlockTerm]
    primal: Optional[Callable[[np.ndarray], float]] = None
    """Objective used by the stopping rule; defaults to ``f``."""

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)

    def primal_value(self, b: np.ndarray) -> float:
        return self.primal(b) if self.primal is not None else self.f.value(b)


@dataclass
class DualState:
    lam: np.ndarray
    mu: np.ndarray
    iteration: int = 0

    @classmethod
    def zeros(cls, problem: BlockProblem) -> "DualState":
        shape = (problem.num_blocks, problem.dimension)
        return cls(np.zeros(shape), np.zeros(shape))


@dataclass
class EngineTrace:
    primal: list = field(default_factory=list)
    dual: list = field(default_factory=list)
    mu_sum: list = field(default_factory=list)
    block_argmins: list = field(default_factory=list)
    wall_time: float = 0.0


@dataclass
class EngineResult:
    b: np.ndarray
    state: DualState
    trace: EngineTrace
    converged: bool

    def optimality_residual(self, problem: BlockProblem) -> float:
        """``max |grad f(b) + sum_i lam_i|``."""
        return float(np.abs(problem.f.grad(self.b) + self.state.lam.sum(axis=0)).max())


def _checked(x, what):
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise NonFiniteValue(f"non-finite value in {what}")
    return x


def _solve_block(problem, i, mu, scale):
    block = problem.blocks[i]
    try:
        b = block.argmin(problem.f, mu, scale)
    except (ArithmeticError, ValueError) as exc:
        raise OracleFailure(f"block {i} argmin failed: {exc}") from exc
    b = _checked(b, f"argmin of block {i}")
    lam = _checked(-mu - scale * problem.f.grad(b), f"multiplier of block {i}")
    support = getattr(block, "support", None)
    if support is not None:
        # h_i does not depend on coordinates outside its support, where the
        # stationarity condition makes the multiplier vanish
        sparse = np.zeros_like(lam)
        sparse[support] = lam[support]
        lam = sparse
    return b, lam


def _fixed_sum(rows: np.ndarray) -> np.ndarray:
    """Sum of rows in fixed index order."""
    total = np.zeros(rows.shape[1:])
    for r in rows:
        total += r
    return total


def dual_value(problem: BlockProblem, state: DualState, mode: str = "sequential") -> float:
    """Fenchel dual objective at ``state``.

    Sequential: ``min_b (f(b) + b.sum(lam)) - sum_i h_i*(lam_i)``.
    Parallel: ``sum_i [min_b (f(b)/n + b.(lam_i + mu_i)) - h_i*(lam_i)]``, which
    is ``-inf`` unless ``sum_i mu_i = 0``.
    """
    conj = sum(problem.blocks[i].conjugate(state.lam[i]) for i in range(problem.num_blocks))
    if mode == "sequential":
        return problem.f.conjugate_min(_fixed_sum(state.lam), 1.0) - conj
    if mode == "parallel":
        n = problem.num_blocks
        inner = sum(problem.f.conjugate_min(state.lam[i] + state.mu[i], 1.0 / n)
                    for i in range(n))
        return inner - conj
    raise ValueError(f"unknown mode {mode!r}")


def _try_dual(problem, state, mode):
    try:
        return dual_value(problem, state, mode)
    except ConjugateUnavailable:
        return None


def run_sequential(problem: BlockProblem, max_sweeps: int = 10_000, stop_tol: float = 1e-5,
                   order: Optional[Sequence[int]] = None, track_dual: bool = True,
                   record_argmins: bool = False, state: Optional[DualState] = None) -> EngineResult:
    """Sequential block updates in ``order`` (default ascending) until the primal settles."""
    n = problem.num_blocks
    order = list(range(n)) if order is None else list(order)
    if sorted(order) != list(range(n)):
        raise ValueError("order must be a permutation of the block indices")
    state = DualState.zeros(problem) if state is None else state
    trace = EngineTrace()
    start = time.perf_counter()
    total = _fixed_sum(state.lam)
    b = None
    prev = None
    converged = False
    for sweep in range(max_sweeps):
        sweep_argmins = []
        for i in order:
            mu = total - state.lam[i]
            state.mu[i] = mu
            b, lam = _solve_block(problem, i, mu, 1.0)
            state.lam[i] = lam
            total = mu + lam
            if record_argmins:
                sweep_argmins.append((i, b.copy()))
            if track_dual:
                d = _try_dual(problem, state, "sequential")
                if d is None:
                    track_dual = False
                else:
                    trace.dual.append(d)
        # re-sum to keep rounding from accumulating in the running total
        total = _fixed_sum(state.lam)
        state.iteration = sweep + 1
        if record_argmins:
            trace.block_argmins.append(sweep_argmins)
        value = problem.primal_value(b)
        trace.primal.append(value)
        if prev is not None and abs(value - prev) <= stop_tol:
            converged = True
            break
        prev = value
    trace.wall_time = time.perf_counter() - start
    return EngineResult(b, state, trace, converged)


def run_parallel(problem: BlockProblem, max_rounds: int = 10_000, stop_tol: float = 1e-5,
                 track_dual: bool = True, record_argmins: bool = False,
                 state: Optional[DualState] = None) -> EngineResult:
    """Synchronous rounds; the returned ``b`` is the mean of the block argmins."""
    n = problem.num_blocks
    s = 1.0 / n
    state = DualState.zeros(problem) if state is None else state
    trace = EngineTrace()
    start = time.perf_counter()
    prev = None
    converged = False
    b = None
    for rnd in range(max_rounds):
        # every block reads the same snapshot of mu
        results = [_solve_block(problem, i, state.mu[i], s) for i in range(n)]
        argmins = np.array([r[0] for r in results])
        state.lam = np.array([r[1] for r in results])
        mean = _fixed_sum(state.lam) / n
        state.mu = mean[None, :] - state.lam
        state.iteration = rnd + 1
        trace.mu_sum.append(float(np.abs(_fixed_sum(state.mu)).max()))
        if record_argmins:
            trace.block_argmins.append(list(enumerate(argmins.copy())))
        if track_dual:
            d = _try_dual(problem, state, "parallel")
            if d is None:
                track_dual = False
            else:
                trace.dual.append(d)
        b = _fixed_sum(argmins) / n
        value = problem.primal_value(b)
        trace.primal.append(value)
        if prev is not None and abs(value - prev) <= stop_tol:
            converged = True
            break
        prev = value
    trace.wall_time = time.perf_counter() - start
    return EngineResult(b, state, trace, converged)


# ---------------------------------------------------------------------------
# simple oracles, handy for tests and for projection problems

class SquaredDistance:
    """``f(b) = 0.5 * ||b - p||^2``."""

    def __init__(self, p):
        self.p = np.asarray(p, dtype=float)

    def value(self, b):
        d = b - self.p
        return 0.5 * float(d @ d)

    def grad(self, b):
        return b - self.p

    def conjugate_min(self, v, scale):
        # minimiser b = p - v / scale
        return float(self.p @ v) - 0.5 * float(v @ v) / scale

    def argmin_linear(self, v, scale):
        return self.p - v / scale


class HalfspaceIndicator:
    """Indicator of ``{b : a.b <= beta}`` for a quadratic ``f`` (exact projection)."""

    support = None

    def __init__(self, a, beta):
        self.a = np.asarray(a, dtype=float)
        self.beta = float(beta)

    def in_domain(self, b, tol=1e-12):
        return float(self.a @ b) <= self.beta + tol

    def argmin(self, f, mu, scale):
        z = f.argmin_linear(mu, scale)
        excess = float(self.a @ z) - self.beta
        if excess <= 0:
            return z
        return z - excess * self.a / float(self.a @ self.a)

    def conjugate(self, lam, tol=1e-9):
        # support function: t * beta when lam = t * a with t >= 0
        t = float(lam @ self.a) / float(self.a @ self.a)
        if t < -tol or np.abs(lam - t * self.a).max(initial=0.0) > tol * (1 + np.abs(lam).max()):
            return np.inf
        return max(t, 0.0) * self.beta


class BoxIndicator:
    """Indicator of ``{lo <= b <= hi}`` for a quadratic ``f``."""

    support = None

    def __init__(self, lo, hi):
        self.lo = np.asarray(lo, dtype=float)
        self.hi = np.asarray(hi, dtype=float)

    def in_domain(self, b, tol=1e-12):
        return bool(np.all(b >= self.lo - tol) and np.all(b <= self.hi + tol))

    def argmin(self, f, mu, scale):
        return np.clip(f.argmin_linear(mu, scale), self.lo, self.hi)

    def conjugate(self, lam):
        return float(np.sum(np.where(lam > 0, lam * self.hi, lam * self.lo)))


class ZeroTerm:
    """``h(b) = 0`` everywhere."""

    support = None

    def in_domain(self, b):
        return True

    def argmin(self, f, mu, scale):
        return f.argmin_linear(mu, scale)

    def conjugate(self, lam, tol=1e-12):
        return 0.0 if np.abs(lam).max(initial=0.0) <= tol else np.inf
