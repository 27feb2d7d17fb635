"""Command-line front end.

    pqsystem eigen   CONFIG [--dump-fields DIR]
    pqsystem curve   CONFIG {f,e,both} --r-grid A:B:N [--log] [-o FILE]
    pqsystem solve   CONFIG --lambda L --mu M [--out-dir DIR]
    pqsystem probe   CONFIG --lambda L --mu M
    pqsystem certify CONFIG

Configs are YAML documents with the keys ``p, q, alpha, beta, c1, c2,
domain: {dim, bounds}, resolution, weight: {default, pieces}``. Tables are
CSV with the run manifest in ``#`` comment lines; wall time goes to stderr
only, so identical manifests give identical bytes.

Exit codes: 0 computed (including "not found" and "no certificate region"),
2 usage or config error, 3 numerical non-convergence.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import __version__, gamma_e, gamma_f, nehari, plap
from .coupling import DiscreteProblem
from .mesh import write_field
from .problem import Domain, ProblemSpec, SpecError, Weight, WeightPiece, validate_spec

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NONCONVERGENCE = 3
JOBS_ENV = "PQSYSTEM_JOBS"

_TOP_KEYS = {"p", "q", "alpha", "beta", "c1", "c2", "domain", "resolution", "weight"}
_REQUIRED = {"p", "q", "alpha", "beta", "domain", "resolution"}


class ConfigError(Exception):
    """Config problem with the key path and (when known) the source line."""

    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        where = []
        if key:
            where.append(f"key '{key}'")
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.key = key
        self.line = line


# --- config loading ------------------------------------------------------------------


def _key_lines(node, prefix="", out=None) -> dict[str, int]:
    """Map dotted key paths of a composed YAML tree to 1-based source lines."""
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            path = f"{prefix}.{k.value}" if prefix else str(k.value)
            out[path] = k.start_mark.line + 1
            _key_lines(v, path, out)
    elif isinstance(node, yaml.SequenceNode):
        for i, item in enumerate(node.value):
            path = f"{prefix}[{i}]"
            out[path] = item.start_mark.line + 1
            _key_lines(item, path, out)
    return out


def _line_for(lines: dict[str, int], key: str) -> int | None:
    while key:
        if key in lines:
            return lines[key]
        key = key.rsplit(".", 1)[0] if "." in key else (key.rsplit("[", 1)[0] if "[" in key else "")
    return None


def _number(data, key, lines):
    v = data[key.split(".")[-1]] if isinstance(data, dict) else data
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"expected a number, got {v!r}", key, _line_for(lines, key))
    return v


def _point(value, key, dim, lines):
    if not isinstance(value, list) or len(value) != dim:
        raise ConfigError(f"expected a list of {dim} numbers", key, _line_for(lines, key))
    for i, x in enumerate(value):
        if isinstance(x, bool) or not isinstance(x, (int, float)):
            raise ConfigError(f"expected a number, got {x!r}", f"{key}[{i}]", _line_for(lines, key))
    return tuple(float(x) for x in value)


def parse_config(text: str) -> ProblemSpec:
    """Build and validate a :class:`ProblemSpec` from YAML text."""
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        raise ConfigError(f"YAML parse error: {exc.problem}", line=mark.line + 1 if mark else None) from None
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping")
    lines = _key_lines(root)
    for k in data:
        if k not in _TOP_KEYS:
            raise ConfigError("unknown key", str(k), _line_for(lines, str(k)))
    for k in sorted(_REQUIRED - data.keys()):
        raise ConfigError("missing required key", k)

    dom = data["domain"]
    if not isinstance(dom, dict) or "bounds" not in dom:
        raise ConfigError("expected a mapping with 'bounds'", "domain", _line_for(lines, "domain"))
    bounds = dom["bounds"]
    if not isinstance(bounds, list) or not bounds:
        raise ConfigError("expected a list of [lo, hi] pairs", "domain.bounds", _line_for(lines, "domain.bounds"))
    dim = dom.get("dim", len(bounds))
    if dim not in (1, 2) or dim != len(bounds):
        raise ConfigError(f"dim {dim!r} does not match {len(bounds)} bound pairs", "domain.dim", _line_for(lines, "domain"))
    pairs = [_point(b, f"domain.bounds[{i}]", 2, lines) for i, b in enumerate(bounds)]

    w = data.get("weight", {}) or {}
    if not isinstance(w, dict):
        raise ConfigError("expected a mapping", "weight", _line_for(lines, "weight"))
    for k in w:
        if k not in ("default", "pieces"):
            raise ConfigError("unknown key", f"weight.{k}", _line_for(lines, f"weight.{k}"))
    pieces = []
    for i, pc in enumerate(w.get("pieces", []) or []):
        key = f"weight.pieces[{i}]"
        if not isinstance(pc, dict) or set(pc) != {"lower", "upper", "value"}:
            raise ConfigError("expected keys lower, upper, value", key, _line_for(lines, key))
        val = pc["value"]
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise ConfigError(f"expected a number, got {val!r}", f"{key}.value", _line_for(lines, f"{key}.value"))
        pieces.append(WeightPiece(_point(pc["lower"], f"{key}.lower", dim, lines), _point(pc["upper"], f"{key}.upper", dim, lines), val))
    default = w.get("default", 0.0)
    if isinstance(default, bool) or not isinstance(default, (int, float)):
        raise ConfigError(f"expected a number, got {default!r}", "weight.default", _line_for(lines, "weight.default"))

    try:
        spec = ProblemSpec(
            p=data["p"],
            q=data["q"],
            alpha=data["alpha"],
            beta=data["beta"],
            c1=data.get("c1", 1.0),
            c2=data.get("c2", 1.0),
            domain=Domain(tuple(pairs)),
            weight=Weight(default, tuple(pieces)),
            resolution=data["resolution"],
        )
        validate_spec(spec)
    except SpecError as exc:
        raise ConfigError(str(exc).split(": ", 1)[-1], exc.key, _line_for(lines, exc.key)) from None
    return spec


def load_config(path) -> ProblemSpec:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}") from None
    return parse_config(text)


# --- grids and output ------------------------------------------------------------------


def parse_grid(text: str, log_spaced: bool) -> np.ndarray:
    """``a:b:n`` to ``n`` points from ``a`` to ``b`` (geometric with ``log_spaced``)."""
    try:
        a, b, n = text.split(":")
        a, b, n = float(a), float(b), int(n)
    except ValueError:
        raise ConfigError(f"r-grid must look like a:b:n, got {text!r}", "--r-grid") from None
    if n < 1:
        raise ConfigError("r-grid is empty", "--r-grid")
    if not (0 < a and math.isfinite(b)) or (n > 1 and not b > a):
        raise ConfigError("r-grid needs 0 < a < b", "--r-grid")
    grid = np.geomspace(a, b, n) if log_spaced else np.linspace(a, b, n)
    return grid


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def manifest(args, spec: ProblemSpec, extra: dict | None = None) -> list[str]:
    """Header lines; everything that determines the output and nothing else."""
    items = {
        "command": args.command,
        "config": str(args.config),
        "problem_hash": spec.digest(),
        "version": __version__,
        "seed": getattr(args, "seed", None),
        "tol": getattr(args, "tol", None),
    }
    items.update(extra or {})
    lines = [f"# {k}: {json.dumps(v, sort_keys=True)}" for k, v in items.items() if v is not None]
    lines.append(f"# problem: {json.dumps(spec.to_dict(), sort_keys=True)}")
    return lines


def _check_target(path: Path, force: bool):
    if path.exists() and not force:
        raise ConfigError(f"{path} exists; pass --force to overwrite", "--output")


def _write_table(path, header: list[str], columns: list[str], rows: list[list]):
    buf = io.StringIO()
    for line in header:
        buf.write(line + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(x) for x in row])
    if path is None:
        sys.stdout.write(buf.getvalue())
    else:
        Path(path).write_text(buf.getvalue())


def _jobs(args) -> int:
    if args.jobs is not None:
        return max(1, args.jobs)
    try:
        return max(1, int(os.environ.get(JOBS_ENV, "1")))
    except ValueError:
        raise ConfigError(f"{JOBS_ENV} must be an integer", JOBS_ENV) from None


def _need_regime(prob: DiscreteProblem):
    if not prob.report.sob_ok:
        raise ConfigError(
            f"exponents fail alpha/p + beta/q > 1 with subcritical growth (margin {prob.report.sob_margin:.6g})",
            "alpha",
        )


# --- commands --------------------------------------------------------------------------


def cmd_eigen(args, prob: DiscreteProblem) -> int:
    ep, eq = prob.eig_p, prob.eig_q
    print(f"problem_hash: {prob.spec.digest()}")
    print(f"lambda1: {ep.value!r}")
    print(f"mu1: {eq.value!r}")
    print(f"iterations_p: {ep.iterations}")
    print(f"iterations_q: {eq.iterations}")
    if args.dump_fields:
        out = Path(args.dump_fields)
        out.mkdir(parents=True, exist_ok=True)
        targets = [out / "phi1.txt", out / "psi1.txt"]
        for t in targets:
            _check_target(t, args.force)
        write_field(ep.fn, targets[0])
        write_field(eq.fn, targets[1])
        for t in targets:
            print(f"wrote: {t}")
    return EXIT_OK


def _curve_f(args, prob, grid):
    return gamma_f.trace_curve_f(grid, prob, tol=args.tol, seed=args.seed, n_starts=args.starts, jobs=_jobs(args))


def _curve_e(args, prob, grid, f_points=None):
    warm = None
    if f_points is not None and not args.no_solution_warm:
        warm = nehari.solution_warm_starts(grid, f_points, prob, seed=args.seed)
    return gamma_e.trace_curve_e(grid, prob, tol=args.tol, seed=args.seed, warm=warm)


def cmd_curve(args, prob: DiscreteProblem) -> int:
    _need_regime(prob)
    grid = parse_grid(args.r_grid, args.log)
    out = Path(args.output) if args.output else None
    if out is not None:
        _check_target(out, args.force)
    header = manifest(
        args,
        prob.spec,
        {"which": args.which, "r_grid": args.r_grid, "log": args.log, "starts": args.starts, "output": args.output},
    )
    if args.which == "f":
        pts = _curve_f(args, prob, grid)
        cols = ["r", "lambda_f", "mu_f", "kind", "feasibility_gap", "starts_used", "flags"]
        rows = [[p.r, p.value, p.mu_value, p.kind.value, p.feasibility_gap, p.starts_used, ";".join(p.flags)] for p in pts]
    elif args.which == "e":
        pts = _curve_e(args, prob, grid)
        cols = ["r", "lambda_e_lower", "mu_e_lower", "picone_upper", "argmin_component", "excluded_nodes", "flags"]
        rows = [_e_row(lo, cert) for lo, cert in pts]
    else:
        fpts = _curve_f(args, prob, grid)
        epts = _curve_e(args, prob, grid, fpts)
        cols = [
            "r",
            "lambda_f",
            "mu_f",
            "lambda_e_lower",
            "mu_e_lower",
            "picone_upper",
            "argmin_component",
            "excluded_nodes",
            "ordered",
            "flags",
        ]
        rows = []
        for f, (lo, cert) in zip(fpts, epts):
            ordered = f.value <= lo.value + 3 * args.tol * max(1.0, abs(lo.value))
            flags = sorted(set(f.flags) | set(lo.flags))
            e = _e_row(lo, cert)
            rows.append([f.r, f.value, f.mu_value, e[1], e[2], e[3], e[4], e[5], str(ordered).lower(), ";".join(flags)])
    _write_table(out, header, cols, rows)
    return EXIT_OK


def _e_row(lo, cert):
    return [
        lo.r,
        lo.value,
        lo.mu_value,
        cert.value if cert is not None else math.inf,
        lo.extra.get("argmin_component", ""),
        lo.extra.get("excluded_nodes", 0),
        ";".join(lo.flags),
    ]


def cmd_probe(args, prob: DiscreteProblem) -> int:
    res = nehari.nonexistence_probe(args.lam, args.mu, prob)
    print(f"verdict: {res.verdict.value}")
    print(f"reason: {res.reason}")
    return EXIT_OK


def cmd_certify(args, prob: DiscreteProblem) -> int:
    try:
        pb = gamma_e.picone_bound(prob)
    except ValueError as exc:
        print(f"verdict: {exc}")
        return EXIT_OK
    ok_p, ok_q = nehari.picone_applies(prob)
    print(f"lambda_bound: {pb.lambda_bound!r}")
    print(f"mu_bound: {pb.mu_bound!r}")
    print(f"box: {json.dumps([list(pb.box[0]), list(pb.box[1])])}")
    print(f"discrete_picone_valid: p={str(ok_p).lower()} q={str(ok_q).lower()}")
    return EXIT_OK


def cmd_solve(args, prob: DiscreteProblem) -> int:
    _need_regime(prob)
    probe = nehari.nonexistence_probe(args.lam, args.mu, prob)
    if probe.verdict is not nehari.Verdict.INCONCLUSIVE:
        print(f"verdict: {probe.verdict.value} (certificate)")
        print(f"reason: {probe.reason}")
        return EXIT_OK
    res = nehari.minimize_nehari(args.lam, args.mu, prob, tol=args.tol, n_starts=args.starts, seed=args.seed)
    if isinstance(res, nehari.NoSolutionFound):
        print("verdict: not found")
        print(f"reason: {res.reason}")
        diag = res.diagnostics
    else:
        print("verdict: solution")
        diag = res.diagnostics()
        sup = gamma_e.supersolution_check(res.u, res.v, args.lam, args.mu, prob) if args.lam > 0 else None
        if sup is not None:
            diag["supersolution_margin"] = sup.margin
    for k in sorted(diag):
        print(f"{k}: {_fmt(diag[k])}")
    if isinstance(res, nehari.SolveResult) and args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        target = out / "solution.csv"
        _check_target(target, args.force)
        header = manifest(args, prob.spec, {"lambda": args.lam, "mu": args.mu, "starts": args.starts})
        header += [f"# {k}: {json.dumps(diag[k])}" for k in sorted(diag)]
        coords = ["x"] if prob.mesh.dim == 1 else ["x", "y"]
        rows = [list(xy) + [a, b] for xy, a, b in zip(prob.mesh.nodes.tolist(), res.u.values, res.v.values)]
        _write_table(target, header, coords + ["u", "v"], rows)
        print(f"wrote: {target}")
    return EXIT_OK


# --- parser ------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pqsystem", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, solver=True, tol=1e-9):
        p.add_argument("config", help="problem config (YAML)")
        p.add_argument("--force", action="store_true", help="overwrite existing output files")
        if solver:
            p.add_argument("--tol", type=float, default=tol, help=f"solver tolerance (default {tol:g})")
            p.add_argument("--seed", type=int, default=0, help="seed of the multi-start schedule")

    p = sub.add_parser("eigen", help="first eigenvalues lambda1, mu1")
    common(p, solver=False)
    p.add_argument("--dump-fields", metavar="DIR", help="write phi1.txt and psi1.txt snapshots to DIR")

    p = sub.add_parser("curve", help="trace threshold / sup-inf curves over rays mu = r * lambda")
    common(p)
    p.add_argument("which", choices=["f", "e", "both"])
    p.add_argument("--r-grid", required=True, metavar="A:B:N", help="N ray slopes from A to B")
    p.add_argument("--log", action="store_true", help="log-spaced r grid")
    p.add_argument("-o", "--output", help="CSV path (stdout if omitted)")
    p.add_argument("--starts", type=int, default=6, help="multi-starts per ray (default 6)")
    p.add_argument("--jobs", type=int, default=None, help=f"worker processes (default ${JOBS_ENV} or 1)")
    p.add_argument(
        "--no-solution-warm", action="store_true", help="with 'both': skip Nehari solutions as sup-inf warm starts"
    )

    p = sub.add_parser("solve", help="nonnegative solution at (lambda, mu) by Nehari minimization")
    common(p, tol=1e-8)
    p.add_argument("--lambda", dest="lam", type=float, required=True)
    p.add_argument("--mu", type=float, required=True)
    p.add_argument("--starts", type=int, default=5, help="multi-starts (default 5)")
    p.add_argument("--out-dir", help="write solution.csv here")

    p = sub.add_parser("probe", help="nonexistence certificates at (lambda, mu)")
    common(p, solver=False)
    p.add_argument("--lambda", dest="lam", type=float, required=True)
    p.add_argument("--mu", type=float, required=True)

    p = sub.add_parser("certify", help="Picone upper bound from a box where f >= 0")
    common(p, solver=False)
    return parser


COMMANDS = {"eigen": cmd_eigen, "curve": cmd_curve, "solve": cmd_solve, "probe": cmd_probe, "certify": cmd_certify}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    start = time.perf_counter()
    try:
        spec = load_config(args.config)
        prob = DiscreteProblem(spec)
        code = COMMANDS[args.command](args, prob)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except plap.ConvergenceError as exc:
        print(f"error: no convergence: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    print(f"wall time: {time.perf_counter() - start:.3f} s", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
