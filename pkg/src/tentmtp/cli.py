"""Command-line front end emitting CSV.

Exit codes: 0 success, 2 parse or usage error, 3 numerical abort.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import re
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .driver import NumericalAbort, default_threads, l2_error_at_T, run
from .hypersys import SystemDefError, parse_system
from .mesh import (
    PETERSON_VARIANTS,
    MeshError,
    SpatialMesh,
    build_interval_mesh,
    build_peterson_mesh,
    build_uniform_square_mesh,
    mesh_to_json,
)
from .pitch import PitchError, build_tent_slab, check_slab, slab_statistics
from .steppers import StepperConfigError, kappa2, kappa_p0, parse_stepper, stability_factor
from .tentops import OperatorError, discretization

try:  # Python 3.11+
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10 only
    import tomli as tomllib

EXIT_OK, EXIT_PARSE, EXIT_NUMERIC = 0, 2, 3

CSV_COLUMNS = ["run_id", "system", "mesh", "n", "sigma", "p", "stepper", "s", "r", "h_max", "T", "l2_error", "wall_ms"]
EOC_FLOOR = 1e-9


class ParseError(ValueError):
    """Malformed command-line value; ``pos`` is the character offset of the problem."""

    def __init__(self, message: str, text: str = "", pos: int | None = None):
        where = f" at position {pos}" if pos is not None else ""
        super().__init__(f"{message}{where}: {text!r}" if text else message)
        self.pos = pos


# -- mesh and problem strings ---------------------------------------------------

_KV = re.compile(r"\s*([A-Za-z_]\w*)\s*=\s*([^,]*)")


def _parse_kv(text: str, offset: int) -> dict[str, tuple[str, int]]:
    out: dict[str, tuple[str, int]] = {}
    pos = 0
    while pos < len(text):
        m = _KV.match(text, pos)
        if not m:
            raise ParseError("expected key=value", text, offset + pos)
        out[m.group(1)] = (m.group(2).strip(), offset + m.start(2))
        pos = m.end()
        if pos < len(text):
            if text[pos] != ",":
                raise ParseError("expected ','", text, offset + pos)
            pos += 1
    return out


@dataclass(frozen=True)
class MeshSpec:
    kind: str
    n: int
    sigma: float | None = None
    diag: str = "NE"
    variant: str = "grid"
    text: str = ""

    def build(self) -> SpatialMesh:
        if self.kind == "interval":
            return build_interval_mesh(self.n)
        if self.kind == "square":
            return build_uniform_square_mesh(self.n, self.diag)
        return build_peterson_mesh(self.n, self.sigma, self.variant)

    def with_n(self, n: int) -> "MeshSpec":
        if re.search(r"\bn=\d+", self.text):
            text = re.sub(r"\bn=\d+", f"n={n}", self.text)
        else:
            kind, _, rest = self.text.partition(":")
            text = f"{kind}:n={n}" + (f",{rest}" if rest.strip() else "")
        return replace(self, n=n, text=text)


_MESH_KEYS = {"interval": {"n"}, "square": {"n", "diag"}, "peterson": {"n", "sigma", "variant"}}


def parse_mesh_spec(text: str, require_n: bool = True) -> MeshSpec:
    """``interval:n=64``, ``square:n=16,diag=NW``, ``peterson:n=32,sigma=0.75[,variant=layered]``."""
    kind, sep, rest = text.partition(":")
    kind = kind.strip()
    if kind not in _MESH_KEYS:
        raise ParseError(f"unknown mesh kind {kind!r}", text, 0)
    opts = _parse_kv(rest, len(kind) + len(sep))
    for key, (_, pos) in opts.items():
        if key not in _MESH_KEYS[kind]:
            raise ParseError(f"unknown option {key!r} for {kind} meshes", text, pos - len(key) - 1)

    def get(key, conv, default=None):
        if key not in opts:
            return default
        val, pos = opts[key]
        try:
            return conv(val)
        except ValueError:
            raise ParseError(f"bad value for {key}", text, pos) from None

    n = get("n", int)
    if n is None:
        if require_n:
            raise ParseError("missing n=", text, len(text))
        n = 0
    elif n < 1:
        raise ParseError("n must be positive", text, opts["n"][1])
    sigma = get("sigma", float)
    if kind == "peterson":
        if sigma is None:
            raise ParseError("peterson meshes need sigma=", text, len(text))
        if not 0.0 <= sigma <= 1.0:
            raise ParseError("sigma must lie in [0, 1]", text, opts["sigma"][1])
    variant = get("variant", str, "grid")
    if variant not in PETERSON_VARIANTS:
        raise ParseError(f"variant must be one of {PETERSON_VARIANTS}", text, opts["variant"][1])
    diag = get("diag", str, "NE").upper()
    if diag not in ("NE", "NW"):
        raise ParseError("diag must be NE or NW", text, opts["diag"][1])
    return MeshSpec(kind, n, sigma, diag, variant, text)


@dataclass(frozen=True)
class Problem:
    name: str
    initial: Callable
    boundary: Callable | None
    exact: Callable[[float], Callable] | None


def parse_problem(text: str, system: str, dim: int) -> Problem:
    """``xpow:k=2`` (advection with u0 = g = x1^k) or ``standing`` (1D wave)."""
    kind, sep, rest = text.partition(":")
    kind = kind.strip()
    if kind == "xpow":
        opts = _parse_kv(rest, len(kind) + len(sep))
        if set(opts) - {"k"}:
            raise ParseError("xpow accepts only k=", text, len(kind) + 1)
        try:
            k = int(opts.get("k", ("1", 0))[0])
        except ValueError:
            raise ParseError("bad value for k", text, opts["k"][1]) from None
        if not system.startswith("advection"):
            raise ParseError("xpow needs an advection system", text, 0)
        f = lambda x, k=k: x[:, 0] ** k  # noqa: E731
        return Problem(text, f, f, None)
    if kind == "standing":
        if rest.strip():
            raise ParseError("standing takes no options", text, len(kind) + 1)
        if not system.startswith("wave1d"):
            raise ParseError("standing wave needs the wave1d system", text, 0)
        return Problem(text, standing_wave(0.0), None, standing_wave)
    if kind == "zero":
        z = lambda x: np.zeros((len(x), 1 if system.startswith("advection") else dim + 1))  # noqa: E731
        return Problem(text, z, None, lambda t: z)
    raise ParseError(f"unknown problem {kind!r}", text, 0)


def standing_wave(t: float) -> Callable:
    """``(q, mu)`` for ``phi = sin(pi x) cos(pi t)`` with ``q = -phi_x`` and ``mu = phi_t``."""
    pi = np.pi

    def f(x):
        return np.column_stack([-pi * np.cos(pi * x[:, 0]) * np.cos(pi * t),
                                -pi * np.sin(pi * x[:, 0]) * np.sin(pi * t)])
    return f


def xpow_exact(problem: Problem, system) -> Callable[[float], Callable] | None:
    """Stationary exact solution; only valid when the velocity has no ``x1`` component."""
    if not problem.name.startswith("xpow"):
        return problem.exact
    b1 = float(system.Lj[0, 0, 0, 0])
    if abs(b1) > 1e-15:
        raise ParseError(f"xpow is stationary only for b1 = 0, got b1 = {b1:g}", problem.name)
    return lambda t: problem.initial


# -- configuration -----------------------------------------------------------------

DEFAULTS = {
    "mesh": None,
    "system": None,
    "problem": None,
    "p": 1,
    "stepper": "implicit1",
    "T": 1.0,
    "gamma": 0.9,
    "n_slabs": 1,
    "threads": None,
    "output": None,
    "seed": 0,
    "deterministic": False,
    "selection": "color",
}


def load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ParseError(f"cannot read config {path}: {exc}") from None
    doc = doc.get("run", doc)
    unknown = set(doc) - set(DEFAULTS) - {"n_list"}
    if unknown:
        raise ParseError(f"unknown config keys {sorted(unknown)}")
    return doc


def resolve(args: argparse.Namespace) -> dict:
    """Flags beat the TOML file, which beats the defaults."""
    cfg = dict(DEFAULTS)
    cfg.update(load_config(getattr(args, "config", None)))
    for key in list(DEFAULTS) + ["n_list"]:
        val = getattr(args, key, None)
        if val is not None and val is not False:
            cfg[key] = val
    if cfg.get("threads") is None:
        cfg["threads"] = default_threads()
    return cfg


def _default_system(mesh: SpatialMesh) -> str:
    return f"advection{mesh.dim}d"


def _default_problem(system: str, p: int) -> str:
    return "standing" if system.startswith("wave1d") else f"xpow:k={p + 1}"


def run_id(parts: dict) -> str:
    key = json.dumps(parts, sort_keys=True, default=str)
    return hashlib.sha1(key.encode()).hexdigest()[:10]


@dataclass
class RunOutcome:
    row: dict
    error: float


def single_run(cfg: dict, mesh_spec: MeshSpec) -> RunOutcome:
    mesh = mesh_spec.build()
    system_text = cfg["system"] or _default_system(mesh)
    p = int(cfg["p"])
    problem = parse_problem(cfg["problem"] or _default_problem(system_text, p), system_text, mesh.dim)
    stepper = parse_stepper(cfg["stepper"])
    sysdef = parse_system(system_text, mesh, problem.boundary)
    exact = xpow_exact(problem, sysdef)
    T = float(cfg["T"])
    n_slabs = int(cfg["n_slabs"])
    slab = build_tent_slab(mesh, sysdef, T / n_slabs, gamma=float(cfg["gamma"]), selection=cfg["selection"])
    res = run(mesh, sysdef, slab, p, stepper, problem.initial, n_slabs=n_slabs, threads=cfg["threads"],
              track_norms=False)
    err = l2_error_at_T(mesh, sysdef, res.solution, exact(T)) if exact else float("nan")
    s = stepper.s if stepper.kind == "sat" else ""
    r = stepper.subtents(p) if stepper.kind == "sat" else ""
    ident = {"system": system_text, "mesh": mesh_spec.text, "n": mesh_spec.n, "p": p, "stepper": stepper.label(), "T": T,
             "gamma": cfg["gamma"], "problem": problem.name, "n_slabs": n_slabs, "seed": cfg["seed"]}
    row = {
        "run_id": run_id(ident),
        "system": system_text,
        "mesh": mesh_spec.kind + ("" if mesh_spec.variant == "grid" else f"-{mesh_spec.variant}"),
        "n": mesh_spec.n,
        "sigma": "" if mesh_spec.sigma is None else f"{mesh_spec.sigma:g}",
        "p": p,
        "stepper": stepper.label(),
        "s": s,
        "r": r,
        "h_max": f"{mesh.h_max:.6e}",
        "T": f"{T:g}",
        "l2_error": f"{err:.6e}",
        "wall_ms": "0" if cfg["deterministic"] else f"{res.wall_ms:.1f}",
    }
    return RunOutcome(row, err)


def eoc(errors: list[float]) -> list[float | None]:
    """``log2(e(n) / e(2n))`` between consecutive rows; None when not meaningful."""
    out: list[float | None] = [None]
    for a, b in zip(errors, errors[1:]):
        ok = all(math.isfinite(x) and x > EOC_FLOOR for x in (a, b))
        out.append(math.log2(a / b) if ok else None)
    return out


def _write_csv(rows: list[dict], columns: list[str], path: str | None) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow(row)
    text = buf.getvalue()
    if path:
        Path(path).write_text(text)
    return text


# -- subcommands ------------------------------------------------------------------------

def cmd_mesh(args) -> int:
    spec = parse_mesh_spec(args.spec)
    mesh = spec.build()
    text = json.dumps(mesh_to_json(mesh))
    if args.output:
        Path(args.output).write_text(text)
        print(json.dumps(mesh.summary()))
    else:
        print(text)
    return EXIT_OK


def cmd_pitch(args) -> int:
    cfg = resolve(args)
    spec = parse_mesh_spec(cfg["mesh"] or "")
    mesh = spec.build()
    sysdef = parse_system(cfg["system"] or _default_system(mesh), mesh)
    slab = build_tent_slab(mesh, sysdef, float(cfg["T"]), gamma=float(cfg["gamma"]), selection=cfg["selection"])
    stats = slab_statistics(slab)
    rep = check_slab(slab)
    stats.update({"disjoint": rep.disjoint, "monotone": rep.monotone, "flat_ends": rep.flat_ends,
                  "progress": rep.progress})
    for key, val in stats.items():
        print(f"{key}: {val:.6g}" if isinstance(val, float) else f"{key}: {val}")
    if args.json:
        doc = dict(stats, fronts=[f.tolist() for f in slab.fronts])
        Path(args.json).write_text(json.dumps(doc))
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = resolve(args)
    spec = parse_mesh_spec(cfg["mesh"] or "")
    out = single_run(cfg, spec)
    sys.stdout.write(_write_csv([out.row], CSV_COLUMNS, cfg["output"]))
    return EXIT_OK


def _parse_n_list(text) -> list[int]:
    if isinstance(text, list):
        vals = [int(v) for v in text]
    else:
        try:
            vals = [int(v) for v in str(text).split(",") if v.strip()]
        except ValueError:
            raise ParseError("n list must be comma separated integers", str(text)) from None
    if len(vals) < 3 or vals != sorted(vals) or len(set(vals)) != len(vals):
        raise ParseError("n list needs at least 3 ascending entries", str(text))
    return vals


def cmd_convergence(args) -> int:
    cfg = resolve(args)
    spec = parse_mesh_spec(cfg["mesh"] or "", require_n=False)
    ns = _parse_n_list(cfg.get("n_list") or "8,16,32,64")
    rows, errors = [], []
    for n in ns:
        out = single_run(cfg, spec.with_n(n))
        rows.append(out.row)
        errors.append(out.error)
    rates = eoc(errors)
    rows[0]["eoc"] = ""
    for row, rate in zip(rows[1:], rates[1:]):
        row["eoc"] = "NA" if rate is None else f"{rate:.4f}"
    valid = [r for r in rates if r is not None]
    summary = {c: "" for c in CSV_COLUMNS}
    summary["run_id"] = "median"
    summary["eoc"] = f"{float(np.median(valid)):.4f}" if valid else "NA"
    rows.append(summary)
    sys.stdout.write(_write_csv(rows, CSV_COLUMNS + ["eoc"], cfg["output"]))
    return EXIT_OK


SCAN_COLUMNS = ["tent", "layer", "vertex", "h_v", "r", "sigma", "kappa", "kappa2"]


def cmd_stability_scan(args) -> int:
    cfg = resolve(args)
    spec = parse_mesh_spec(cfg["mesh"] or "")
    mesh = spec.build()
    sysdef = parse_system(cfg["system"] or _default_system(mesh), mesh)
    p = int(cfg["p"])
    stepper = parse_stepper(cfg["stepper"])
    slab = build_tent_slab(mesh, sysdef, float(cfg["T"]), gamma=float(cfg["gamma"]), selection=cfg["selection"])
    tents = list(slab.tents())
    if args.max_tents and len(tents) > args.max_tents:
        rng = np.random.default_rng(int(cfg["seed"]))
        idx = np.sort(rng.choice(len(tents), args.max_tents, replace=False))
        tents = [tents[i] for i in idx]
    disc = discretization(sysdef, p)
    hv = slab.vertex_h
    rows, sigmas = [], []
    for t in tents:
        ops = disc.tent_operators(t)
        want_kap = p == 0 and (args.kappa or args.r_from_kappa)
        kap = kappa_p0(ops, refine=args.r_from_kappa).value if want_kap else None
        k2 = kappa2(ops).value if args.kappa else None
        cfg_t = stepper
        if args.r_from_kappa and stepper.kind == "sat" and kap is not None:
            cfg_t = replace(stepper, r=max(1, math.ceil(kap)))
        sigma = stability_factor(ops, cfg_t, p)
        sigmas.append(sigma)
        rows.append({
            "tent": t.index, "layer": t.layer, "vertex": t.v, "h_v": f"{hv[t.v]:.6e}",
            "r": cfg_t.subtents(p) if cfg_t.kind == "sat" else "",
            "sigma": f"{sigma:.12f}",
            "kappa": "" if kap is None else f"{kap:.6e}",
            "kappa2": "" if k2 is None else f"{k2:.6e}",
        })
    sys.stdout.write(_write_csv(rows, SCAN_COLUMNS, cfg["output"]))
    s = np.array(sigmas)
    edges = [0.0, 1.0 + 1e-10, 1.01, 1.1, 2.0, np.inf]
    counts = np.histogram(s, bins=edges)[0]
    print(f"# tents={len(s)} sigma_max={s.max():.12f} sigma_median={np.median(s):.12f}", file=sys.stderr)
    labels = ["<=1+1e-10", "<=1.01", "<=1.1", "<=2", ">2"]
    print("# histogram " + " ".join(f"{lab}:{c}" for lab, c in zip(labels, counts)), file=sys.stderr)
    return EXIT_OK


# -- argument parsing ----------------------------------------------------------------------

def _common(parser: argparse.ArgumentParser, mesh_help: str = "mesh string, e.g. peterson:n=32,sigma=0.75"):
    parser.add_argument("--config", help="TOML file with defaults (flags take precedence)")
    parser.add_argument("--mesh", help=mesh_help)
    parser.add_argument("--system", help="advection2d[:b=0;1], wave1d:dirichlet, wave2d:robin:rho=1, ...")
    parser.add_argument("--T", type=float, help="final time")
    parser.add_argument("--gamma", type=float, help="causality fraction, hat_c = c / gamma")
    parser.add_argument("--selection", choices=["color", "local-min"], help="pitch vertex selection rule")
    parser.add_argument("--output", "-o", help="write CSV here as well as to stdout")
    parser.add_argument("--seed", type=int)


def _solver(parser: argparse.ArgumentParser):
    parser.add_argument("--p", type=int, help="polynomial degree")
    parser.add_argument("--stepper", help="implicit1 | explicit:q=4 | sat:s=3,r=4")
    parser.add_argument("--problem", help="xpow:k=2 | standing | zero")
    parser.add_argument("--n-slabs", dest="n_slabs", type=int, help="tile the slab this many times")
    parser.add_argument("--threads", type=int, help="worker cap (default: $TENTMTP_THREADS or 1)")
    parser.add_argument("--deterministic", action="store_true", help="zero the wall_ms column")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tentmtp", description="Mapped tent pitching solvers")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mesh", help="write a mesh as JSON")
    p.add_argument("spec", help="interval:n=4 | square:n=8,diag=NW | peterson:n=8,sigma=0.75")
    p.add_argument("--output", "-o")
    p.set_defaults(func=cmd_mesh)

    p = sub.add_parser("pitch", help="build a tent slab and print statistics")
    _common(p)
    p.add_argument("--json", help="dump statistics and fronts as JSON")
    p.set_defaults(func=cmd_pitch)

    p = sub.add_parser("run", help="one solve, one CSV row")
    _common(p)
    _solver(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("convergence", help="refinement study with EOC column")
    _common(p, "mesh family without n, e.g. peterson:sigma=0.75")
    _solver(p)
    p.add_argument("--n", dest="n_list", help="ascending comma separated n values")
    p.set_defaults(func=cmd_convergence)

    p = sub.add_parser("stability-scan", help="per-tent propagator norms")
    _common(p)
    _solver(p)
    p.add_argument("--kappa", action="store_true", help="also report kappa (p=0) and kappa2")
    p.add_argument("--r-from-kappa", action="store_true", help="SAT: use r = ceil(kappa) per tent")
    p.add_argument("--max-tents", type=int, default=0, help="sample this many tents (seeded)")
    p.set_defaults(func=cmd_stability_scan)
    return ap


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ParseError, StepperConfigError, SystemDefError, MeshError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (NumericalAbort, OperatorError, PitchError, np.linalg.LinAlgError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
