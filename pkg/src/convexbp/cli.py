"""Command line entry point: ``convexbp {grid,random,timing,solve,fit}``."""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from . import counting as cn
from .convex_mp import make_spec, run
from .errors import ConvexBPError, DidNotConverge, GraphError, ParseError
from .factor_graph import read_model
from .harness import EXPERIMENT_EPS, ExperimentConfig, rows_to_csv, run_suite

EXIT_OK, EXIT_INPUT, EXIT_NOT_CONVERGED = 0, 1, 2

FIT_METHODS = {
    "l2": cn.fit_convex_l2,
    "maxent": cn.fit_convex_maxent,
    "trw": cn.fit_trw,
    "bethe": cn.fit_bethe,
}


class InputError(Exception):
    pass


def _floats(text):
    return [float(t) for t in str(text).split(",") if t.strip()]


def _ints(text):
    return [int(t) for t in str(text).split(",") if t.strip()]


def _words(text):
    return [t.strip() for t in str(text).split(",") if t.strip()]


def read_config(path: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment; keys use flag names."""
    out = {}
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.lstrip("-").replace("-", "_")] = value
    return out


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="convexbp",
                                description="Convergent message passing for convex free energies.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key=value file with defaults for these flags")
        sp.add_argument("--tol", type=float, help="stop tolerance on the free energy (default 1e-5)")
        sp.add_argument("--max-iters", type=int, help="iteration cap (default 10000)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output path (default: stdout)")

    for name in ("grid", "random", "timing"):
        sp = sub.add_parser(name, help=f"run the {name} suite and write CSV")
        common(sp)
        sp.add_argument("--n", type=int, help="grid side or number of vertices")
        sp.add_argument("--sizes", help="comma-separated grid sides (timing suite)")
        sp.add_argument("--p", help="comma-separated edge probabilities (random suite)")
        sp.add_argument("--d-f", help="comma-separated field bounds")
        sp.add_argument("--d-o", help="comma-separated interaction bounds")
        sp.add_argument("--mode", help="comma-separated: mixed, attractive")
        sp.add_argument("--methods", help="comma-separated: bp, trw, convex-l2, convex-h")
        sp.add_argument("--schedule", help="comma-separated: seq, par")
        sp.add_argument("--trials", type=int)
        sp.add_argument("--eps", type=float, help=f"lower bound on c_a (default {EXPERIMENT_EPS})")
        sp.add_argument("--record-time", action="store_true", default=None,
                        help="fill the wall_time column (makes the CSV non-reproducible)")

    sp = sub.add_parser("solve", help="marginals of a model file")
    common(sp)
    sp.add_argument("--model")
    sp.add_argument("--counts", help="counting-number file; fitted with --method when absent")
    sp.add_argument("--method", choices=sorted(FIT_METHODS))
    sp.add_argument("--schedule", choices=["seq", "par"])
    sp.add_argument("--eps", type=float)

    sp = sub.add_parser("fit", help="fit counting numbers for a model file")
    common(sp)
    sp.add_argument("--model")
    sp.add_argument("--method", choices=sorted(FIT_METHODS))
    sp.add_argument("--eps", type=float)
    return p


def _merged(args) -> dict:
    values = read_config(args.config) if getattr(args, "config", None) else {}
    for k, v in vars(args).items():
        if v is not None and k not in ("config", "command", "verbose"):
            values[k] = v
    return values


def _get(values, key, conv, default):
    if key not in values:
        return default
    try:
        return conv(values[key])
    except (TypeError, ValueError):
        raise InputError(f"bad value for {key}: {values[key]!r}") from None


def _bool(v):
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(v)


def _emit(text: str, path):
    if path:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _suite(command, values) -> int:
    defaults = ExperimentConfig(suite=command)
    n_default = {"grid": 8, "random": 10, "timing": defaults.n}[command]
    cfg = ExperimentConfig(
        suite=command,
        n=_get(values, "n", int, n_default),
        sizes=_get(values, "sizes", _ints, defaults.sizes),
        p=_get(values, "p", _floats, defaults.p),
        d_f=_get(values, "d_f", _floats, defaults.d_f),
        d_o=_get(values, "d_o", _floats, defaults.d_o),
        mode=_get(values, "mode", _words, defaults.mode),
        methods=_get(values, "methods", _words, defaults.methods),
        schedule=_get(values, "schedule", _words, defaults.schedule),
        trials=_get(values, "trials", int, defaults.trials),
        seed=_get(values, "seed", int, defaults.seed),
        stop_tol=_get(values, "tol", float, defaults.stop_tol),
        max_iters=_get(values, "max_iters", int, defaults.max_iters),
        eps=_get(values, "eps", float, defaults.eps),
        record_time=_get(values, "record_time", _bool, False),
    )
    rows = run_suite(cfg)
    _emit(rows_to_csv(rows), values.get("out"))
    return EXIT_OK


def _load_model(values):
    path = values.get("model")
    if not path:
        raise InputError("--model is required")
    return read_model(path)


def _fit(values) -> int:
    graph = _load_model(values)
    method = _get(values, "method", str, "l2")
    if method not in FIT_METHODS:
        raise InputError(f"unknown method {method!r}")
    eps = _get(values, "eps", float, cn.EPS_POS)
    counting = FIT_METHODS[method](graph, eps=eps)
    _emit(cn.serialize_counts(graph, counting), values.get("out"))
    return EXIT_OK


def _solve(values) -> int:
    graph = _load_model(values)
    if values.get("counts"):
        counting = cn.read_counts(values["counts"], graph)
    else:
        method = _get(values, "method", str, "l2")
        if method not in FIT_METHODS:
            raise InputError(f"unknown method {method!r}")
        counting = FIT_METHODS[method](graph, eps=_get(values, "eps", float, cn.EPS_POS))
    schedule = _get(values, "schedule", str, "seq")
    if schedule not in ("seq", "par"):
        raise InputError(f"unknown schedule {schedule!r}")
    spec = make_spec(graph, counting)
    code = EXIT_OK
    try:
        res = run(spec, schedule, stop_tol=_get(values, "tol", float, 1e-5),
                  max_iters=_get(values, "max_iters", int, 10_000))
    except DidNotConverge as exc:
        res = exc.result
        code = EXIT_NOT_CONVERGED
        print(f"warning: {exc}", file=sys.stderr)
    lines = [f"# free_energy {res.free_energy!r} iterations {res.iterations} "
             f"converged {int(res.converged)}"]
    for i, b in enumerate(res.beliefs.var):
        lines.append(" ".join([str(i)] + [repr(float(x)) for x in np.asarray(b)]))
    _emit("\n".join(lines) + "\n", values.get("out"))
    return code


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad flags, which would read as non-convergence
        return EXIT_OK if exc.code in (0, None) else EXIT_INPUT
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        values = _merged(args)
        if args.command == "fit":
            return _fit(values)
        if args.command == "solve":
            return _solve(values)
        return _suite(args.command, values)
    except (InputError, ParseError, GraphError, OSError, ValueError, ConvexBPError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
