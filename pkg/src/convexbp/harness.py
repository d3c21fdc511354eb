"""Experiment suites: grid and random-graph accuracy, grid timing; CSV output.

Seeds. Trial ``t`` of a run with master seed ``S`` builds its model from
``numpy.random.SeedSequence(S, spawn_key=(t,)).generate_state(1)[0]``. The
same trial seed is shared by every ``(d_f, d_o, mode, p)`` setting, so a trial
differs across settings only through the parameter scale (common random
numbers), which keeps trends across ``d_o`` smooth.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Iterable, Optional

import numpy as np

from .bp import sum_product_bp
from .convex_mp import BeliefSet, make_spec, run
from .counting import (EPS_POS, CountingNumbers, check_admissible, fit_convex_l2, fit_convex_maxent,
                       fit_trw, solve_admissible, trw_pairwise_counting)
from .errors import ConvexBPError, DidNotConverge, NonBinary
from .exact import brute_force_marginals, elimination_marginals, projected_minimize
from .factor_graph import FactorGraph, ising_grid, random_graph

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
METHODS = ("bp", "trw", "convex-l2", "convex-h")
CONVEX_METHODS = ("trw", "convex-l2", "convex-h")
SCHEDULES = ("seq", "par")

# Lower bound on c_a used by the experiment fits. Message passing slows down
# roughly in proportion to the smallest c_a, and convex-L2 drives every c_a on
# a loopy graph down to whatever bound it is given.
EXPERIMENT_EPS = 0.03


def l1_marginal_error(estimate: BeliefSet, exact: BeliefSet) -> float:
    """Mean over variables of ``|p_est(x_i = 1) - p_true(x_i = 1)|``."""
    if len(estimate.var) != len(exact.var):
        raise ValueError("belief sets cover different variables")
    total = 0.0
    for k, (a, b) in enumerate(zip(estimate.var, exact.var)):
        if a.shape != (2,) or b.shape != (2,):
            raise NonBinary(f"variable {k} is not binary")
        total += abs(float(a[1]) - float(b[1]))
    return total / len(exact.var)


def trial_seed(master: int, trial: int) -> int:
    return int(np.random.SeedSequence(master, spawn_key=(trial,)).generate_state(1)[0])


@dataclass
class ExperimentConfig:
    suite: str = "grid"
    n: int = 8
    sizes: list = field(default_factory=lambda: list(range(2, 11)))
    p: list = field(default_factory=lambda: [0.3, 0.5, 0.7])
    d_f: list = field(default_factory=lambda: [0.05, 1.0])
    d_o: list = field(default_factory=lambda: [round(0.2 * k, 1) for k in range(1, 21)])
    mode: list = field(default_factory=lambda: ["mixed", "attractive"])
    methods: list = field(default_factory=lambda: list(METHODS))
    schedule: list = field(default_factory=lambda: ["seq"])
    trials: int = 10
    seed: int = 0
    stop_tol: float = 1e-5
    max_iters: int = 10_000
    eps: float = EXPERIMENT_EPS
    record_time: bool = False
    out: Optional[str] = None

    def __post_init__(self):
        if self.suite not in ("grid", "random", "timing"):
            raise ValueError(f"unknown suite {self.suite!r}")
        if self.trials < 1:
            raise ValueError("trials must be at least 1")
        if not self.methods:
            raise ValueError("methods must be nonempty")
        for m in self.methods:
            if m not in METHODS:
                raise ValueError(f"unknown method {m!r}")
        for s in self.schedule:
            if s not in SCHEDULES:
                raise ValueError(f"unknown schedule {s!r}")
        for name in ("p", "d_f", "d_o", "mode", "schedule", "sizes"):
            if not getattr(self, name):
                raise ValueError(f"{name} must be nonempty")
        if self.suite == "timing":
            self.record_time = True


@dataclass
class ResultRow:
    suite: str
    trial: int
    seed: int
    method: str
    schedule: str
    n: int
    p: Optional[float]
    d_f: float
    d_o: float
    mode: str
    status: str
    l1_error: Optional[float]
    converged: Optional[bool]
    iterations: Optional[int]
    wall_time: Optional[float]
    free_energy: Optional[float]

    def __post_init__(self):
        if self.l1_error is not None and not 0.0 <= self.l1_error <= 1.0:
            raise ValueError(f"L1 error {self.l1_error} outside [0, 1]")


COLUMNS = ["schema"] + [f.name for f in fields(ResultRow)]


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else ""
    return str(v)


def rows_to_csv(rows: Iterable[ResultRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n", quoting=csv.QUOTE_MINIMAL)
    w.writerow(COLUMNS)
    for r in rows:
        w.writerow([str(SCHEMA_VERSION)] + [_cell(v) for v in asdict(r).values()])
    return buf.getvalue()


def write_csv(rows, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(rows_to_csv(rows))


def read_csv(path: str) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------

class CountingCache:
    """Counting-number fits keyed by graph structure, method and margin."""

    def __init__(self, eps: float):
        self.eps = eps
        self._cache = {}

    def get(self, graph: FactorGraph, method: str) -> CountingNumbers:
        key = (graph.structure_key(), method, self.eps)
        if key not in self._cache:
            self._cache[key] = fit_counting(graph, method, self.eps)
        return self._cache[key]


def fit_counting(graph: FactorGraph, method: str, eps: float) -> CountingNumbers:
    if method == "trw":
        # the targets are fixed; the split already maximises the smallest c_a
        return fit_trw(graph, EPS_POS)
    if method == "convex-l2":
        return fit_convex_l2(graph, eps=eps)
    if method == "convex-h":
        return fit_convex_maxent(graph, eps=eps)
    raise ValueError(f"no counting numbers for method {method!r}")


def _solve_rows(graph, exact, base, config, cache):
    """Rows for every requested method on one model."""
    out = []
    for method in config.methods:
        if method == "bp":
            start = time.perf_counter()
            beliefs, conv = sum_product_bp(graph, max_iters=config.max_iters)
            elapsed = time.perf_counter() - start
            err = l1_marginal_error(beliefs, exact) if exact is not None else None
            out.append(ResultRow(**base, method=method, schedule="flooding", status="ok",
                                 l1_error=err, converged=conv, iterations=None,
                                 wall_time=elapsed if config.record_time else None,
                                 free_energy=None))
            continue
        try:
            counting = cache.get(graph, method)
        except ConvexBPError as exc:
            for sch in config.schedule:
                out.append(_failed(base, method, sch, f"fit-error:{type(exc).__name__}"))
            continue
        admissible = check_admissible(graph, counting, tol=1e-8).admissible
        for sch in config.schedule:
            if not admissible:
                out.append(_failed(base, method, sch, "inadmissible"))
                continue
            spec = make_spec(graph, counting, check=False)
            try:
                res = run(spec, sch, stop_tol=config.stop_tol, max_iters=config.max_iters,
                          raise_on_cap=False)
            except ConvexBPError as exc:
                out.append(_failed(base, method, sch, f"error:{type(exc).__name__}"))
                continue
            err = l1_marginal_error(res.beliefs, exact) if exact is not None else None
            out.append(ResultRow(**base, method=method, schedule=sch, status="ok", l1_error=err,
                                 converged=res.converged, iterations=res.iterations,
                                 wall_time=res.trace.wall_time[-1] if config.record_time else None,
                                 free_energy=res.free_energy))
    return out


def _failed(base, method, schedule, status):
    return ResultRow(**base, method=method, schedule=schedule, status=status, l1_error=None,
                     converged=None, iterations=None, wall_time=None, free_energy=None)


def run_grid_suite(config: ExperimentConfig) -> list[ResultRow]:
    cache = CountingCache(config.eps)
    rows = []
    for d_f in config.d_f:
        for d_o in config.d_o:
            for mode in config.mode:
                for t in range(config.trials):
                    seed = trial_seed(config.seed, t)
                    graph = ising_grid(config.n, d_f, d_o, mode, seed)
                    exact = elimination_marginals(graph)
                    base = dict(suite="grid", trial=t, seed=seed, n=config.n, p=None,
                                d_f=d_f, d_o=d_o, mode=mode)
                    rows.extend(_solve_rows(graph, exact, base, config, cache))
    _finish(rows, config)
    return rows


def run_random_suite(config: ExperimentConfig) -> list[ResultRow]:
    cache = CountingCache(config.eps)
    rows = []
    for p in config.p:
        for d_f in config.d_f:
            for d_o in config.d_o:
                for mode in config.mode:
                    for t in range(config.trials):
                        seed = trial_seed(config.seed, t)
                        graph = random_graph(config.n, p, d_f, d_o, mode, seed)
                        exact, _ = brute_force_marginals(graph)
                        base = dict(suite="random", trial=t, seed=seed, n=config.n, p=p,
                                    d_f=d_f, d_o=d_o, mode=mode)
                        rows.extend(_solve_rows(graph, exact, base, config, cache))
    _finish(rows, config)
    return rows


def _warm_up():
    # load the compiled kernels before anything is timed
    g = ising_grid(2, 0.1, 0.1, "mixed", 0)
    spec = make_spec(g, solve_admissible(g, trw_pairwise_counting(g)), check=False)
    for sch in SCHEDULES:
        run(spec, sch, max_iters=2, raise_on_cap=False)


def run_timing_suite(config: ExperimentConfig) -> list[ResultRow]:
    """Wall time of message passing against projected gradient on ``n x n`` grids.

    Both stop when the free energy changes by at most ``stop_tol`` between
    iterations. Projected-gradient rows use schedule ``pg``.
    """
    _warm_up()
    cache = CountingCache(config.eps)
    rows = []
    d_f, d_o, mode = config.d_f[0], config.d_o[0], config.mode[0]
    for size in config.sizes:
        for t in range(config.trials):
            seed = trial_seed(config.seed, t)
            graph = ising_grid(size, d_f, d_o, mode, seed)
            exact = elimination_marginals(graph)
            base = dict(suite="timing", trial=t, seed=seed, n=size, p=None, d_f=d_f, d_o=d_o,
                        mode=mode)
            for method in config.methods:
                if method == "bp":
                    continue
                counting = cache.get(graph, method)
                spec = make_spec(graph, counting, check=False)
                for sch in config.schedule:
                    res = run(spec, sch, stop_tol=config.stop_tol, max_iters=config.max_iters,
                              raise_on_cap=False)
                    rows.append(ResultRow(**base, method=method, schedule=sch, status="ok",
                                          l1_error=l1_marginal_error(res.beliefs, exact),
                                          converged=res.converged, iterations=res.iterations,
                                          wall_time=res.trace.wall_time[-1],
                                          free_energy=res.free_energy))
                try:
                    pg = projected_minimize(spec, tol=config.stop_tol, criterion="primal",
                                            method="gradient", max_iter=config.max_iters,
                                            full=True)
                    converged = True
                except DidNotConverge as exc:
                    pg = exc.result
                    converged = False
                rows.append(ResultRow(**base, method=method, schedule="pg", status="ok",
                                      l1_error=l1_marginal_error(pg.beliefs, exact),
                                      converged=converged, iterations=pg.iterations,
                                      wall_time=pg.wall_time, free_energy=pg.free_energy))
    _finish(rows, config)
    return rows


SUITES = {"grid": run_grid_suite, "random": run_random_suite, "timing": run_timing_suite}


def run_suite(config: ExperimentConfig) -> list[ResultRow]:
    return SUITES[config.suite](config)


def _finish(rows, config):
    if config.out:
        write_csv(rows, config.out)


# ---------------------------------------------------------------------------
# aggregation

def mean_errors(rows, by=("method", "schedule", "mode", "d_f", "d_o")) -> dict:
    """Mean L1 error per group over rows with status ``ok`` and a finite error."""
    groups = {}
    for r in rows:
        if r.status != "ok" or r.l1_error is None:
            continue
        key = tuple(getattr(r, k) for k in by)
        groups.setdefault(key, []).append(r.l1_error)
    return {k: float(np.mean(v)) for k, v in sorted(groups.items(), key=lambda kv: str(kv[0]))}
