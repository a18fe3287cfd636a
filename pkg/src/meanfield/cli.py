"""Command-line front end: ``meanfield <subcommand> [--config FILE] [flags]``.

Every run is described by one JSON experiment config (file and/or flags,
flags win) that is validated against :data:`CONFIG_SCHEMA` before any
computation. Outputs are CSV (plus SVG with ``--plot``) and a
``manifest.json`` with the config hash, seed, versions and output hashes.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import platform
import sys
from pathlib import Path

import jsonschema
import numpy as np
import scipy

from . import __version__, _rng
from .dynamics import BlowUpError, PiecewiseConstantControl, TimeGrid, integrate
from .io import atomic_write, csv_text, svg_curves, svg_polylines
from .optimize import (
    OptimizerConfig,
    barycenter_reference,
    counterexample_demo,
    estimate_value,
    gamma_sweep,
)
from .relaxed import RelaxedControl, chatter
from .superposition import MarginalPath, extract_velocity, path_length_identity, superpose
from .system import make_attraction_system, make_barycenter_system, make_decoupled_system
from .transport import EmpiricalMeasure

SUBCOMMANDS = ("simulate", "optimize", "chatter", "superpose", "gamma", "barycenter")

_pos_int = {"type": "integer", "minimum": 1}
_pos_num = {"type": "number", "exclusiveMinimum": 0}
_points = {"type": "array", "minItems": 1, "items": {"type": "array", "minItems": 1, "items": {"type": "number"}}}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "meanfield experiment config",
    "type": "object",
    "required": ["subcommand"],
    "additionalProperties": False,
    "properties": {
        "subcommand": {"enum": list(SUBCOMMANDS)},
        "system": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "id": {"enum": ["barycenter", "attraction", "decoupled"]},
                "R": _pos_num,
                "strength": _pos_num,
                "p": {"type": "number", "minimum": 1},
                "running": {"enum": ["zero", "quadratic"]},
                "terminal": {"enum": ["zero", "quadratic"]},
            },
        },
        "N": _pos_int,
        "d": _pos_int,
        "K": _pos_int,
        "T": _pos_num,
        "seed": {"type": "integer", "minimum": 0},
        "substeps": _pos_int,
        "control": {"enum": ["zero", "random"]},
        "instance": {"enum": ["random", "singleton"]},
        "X0": _points,
        "nu": _points,
        "optimizer": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "starts": _pos_int,
                "max_iters": _pos_int,
                "step": _pos_num,
                "backtrack": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "fd_eps": _pos_num,
                "tol": _pos_num,
            },
        },
        "benchmark": {"enum": ["counterexample", "identical", "barycenter"]},
        "k": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 2}},
        "Ns": {"type": "array", "minItems": 1, "items": _pos_int},
        "m": _pos_int,
        "max_atoms": _pos_int,
        "input": {"type": "string"},
        "p": {"enum": [1, 2]},
        "output_dir": {"type": "string"},
        "plot": {"type": "boolean"},
    },
}

EXIT_CONFIG = 2
EXIT_NUMERIC = 3


class ConfigError(Exception):
    pass


def _locate(text: str, path) -> int | None:
    """Best-effort line number of the JSON key path inside ``text``."""
    pos, line = 0, None
    for key in path:
        if isinstance(key, int):
            continue
        idx = text.find(json.dumps(key), pos)
        if idx < 0:
            break
        pos = idx
        line = text.count("\n", 0, idx) + 1
    return line


def validate(config: dict, source: str = "<command line>", text: str | None = None) -> dict:
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(config), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        msgs = []
        for e in errors:
            loc = "/".join(map(str, e.absolute_path)) or "<root>"
            line = _locate(text, list(e.absolute_path)) if text is not None else None
            where = f"{source}:{line}" if line else source
            msgs.append(f"{where}: {loc}: {e.message}")
        raise ConfigError("\n".join(msgs))
    return config


def load_config(path) -> tuple[dict, str]:
    text = Path(path).read_text()
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: invalid JSON: {e.msg}") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}:1: config must be a JSON object")
    return cfg, text


def config_hash(config: dict) -> str:
    """SHA-256 of the canonical config; where outputs go does not change it."""
    body = {k: v for k, v in config.items() if k != "output_dir"}
    return hashlib.sha256(json.dumps(body, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


# --- subcommand runners: each returns {filename: text} -----------------------


def _grid(cfg) -> TimeGrid:
    return TimeGrid(float(cfg.get("T", 1.0)), int(cfg.get("K", 10)))


def _optimizer(cfg) -> OptimizerConfig:
    return OptimizerConfig(seed=int(cfg.get("seed", 0)), **cfg.get("optimizer", {}))


def _points(cfg, key, N, d, label):
    if key in cfg:
        pts = np.asarray(cfg[key], dtype=float)
        if pts.ndim != 2 or pts.shape != (N, d):
            raise ConfigError(f"<config>: {key}: expected {N} points of dimension {d}, got shape {pts.shape}")
        return pts
    return _rng.stream(int(cfg.get("seed", 0)), label).uniform(-1.0, 1.0, size=(N, d))


def _build_system(cfg, N, d):
    sysp = {"id": "attraction", **cfg.get("system", {})}
    R = float(sysp.get("R", 1.0))
    p = float(sysp.get("p", 2.0))
    if sysp["id"] == "barycenter":
        nu = EmpiricalMeasure(_points(cfg, "nu", N, d, "nu"))
        return make_barycenter_system(nu, R, p)
    if sysp["id"] == "attraction":
        return make_attraction_system(d, R, float(sysp.get("strength", 1.0)), p)
    return make_decoupled_system(d, R, sysp.get("running", "quadratic"), sysp.get("terminal", "zero"), p)


def _control_csv(control: PiecewiseConstantControl) -> str:
    def write(fh):
        import csv

        w = csv.writer(fh)
        w.writerow(["cell", "t_start", "particle"] + [f"u{j + 1}" for j in range(control.values.shape[2])])
        for k in range(control.grid.K):
            for i in range(control.N):
                w.writerow([k, repr(k * control.grid.h), i] + [repr(float(v)) for v in control.values[k, i]])

    return csv_text(write)


def _history_csv(report) -> str:
    def write(fh):
        import csv

        w = csv.writer(fh)
        w.writerow(["start", "iteration", "value", "stationarity"])
        for s, it, v, g in report.history_rows():
            w.writerow([s, it, repr(float(v)), repr(float(g))])

    return csv_text(write)


def _rows_csv(header, rows) -> str:
    def write(fh):
        import csv

        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])

    return csv_text(write)


def run_simulate(cfg):
    N, d = int(cfg.get("N", 8)), int(cfg.get("d", 2))
    system = _build_system(cfg, N, d)
    grid = _grid(cfg)
    X0 = _points(cfg, "X0", N, d, "X0")
    if cfg.get("control", "zero") == "zero":
        vals = np.broadcast_to(system.control_set.anchor(), (grid.K, N, system.m)).copy()
    else:
        vals = system.control_set.sample(_rng.stream(int(cfg.get("seed", 0)), "control"), (grid.K, N))
    ctrl = PiecewiseConstantControl(grid, vals, system.control_set)
    bundle = integrate(system, X0, ctrl, int(cfg.get("substeps", 4)))
    out = {"trajectory.csv": csv_text(bundle.to_csv)}
    if cfg.get("plot"):
        lines = [(grid.nodes, bundle.states[:, i, 0]) for i in range(N)]
        out["trajectory.svg"] = svg_polylines(lines, "t", "x1", "particle trajectories")
    return out, {}


def run_optimize(cfg):
    N, d = int(cfg.get("N", 8)), int(cfg.get("d", 2))
    system = _build_system(cfg, N, d)
    X0 = _points(cfg, "X0", N, d, "X0")
    rep = estimate_value(system, X0, _grid(cfg), _optimizer(cfg), int(cfg.get("substeps", 4)))
    rows = [[system.name, N, rep.value, int(rep.converged)]]
    out = {
        "report.csv": _rows_csv(["system", "N", "value", "converged"], rows),
        "history.csv": _history_csv(rep),
        "controls.csv": _control_csv(rep.control),
    }
    return out, {"optimizer_wall_time": rep.wall_time}


def run_barycenter(cfg):
    N, d = int(cfg.get("N", 20)), int(cfg.get("d", 2))
    seed = int(cfg.get("seed", 0))
    if cfg.get("instance", "singleton" if N == 1 else "random") == "singleton":
        if N != 1:
            raise ConfigError("<config>: instance 'singleton' needs N = 1")
        mu0 = EmpiricalMeasure(np.zeros((1, d)))
        nu = EmpiricalMeasure(np.eye(1, d))
    else:
        mu0 = EmpiricalMeasure(_points(cfg, "X0", N, d, "bary-mu0"))
        nu = EmpiricalMeasure(_points(cfg, "nu", N, d, "bary-nu"))
    grid = _grid(cfg)
    ref = barycenter_reference(mu0, nu, grid.T)
    R = float(cfg.get("system", {}).get("R", max(1.0, 1.01 * ref.required_radius)))
    system = make_barycenter_system(nu, R)
    rep = estimate_value(system, mu0.points, grid, _optimizer(cfg), int(cfg.get("substeps", 4)))
    rel = abs(rep.value - ref.value) / ref.value if ref.value > 0 else abs(rep.value)
    header = ["N", "value", "reference", "relative_error", "required_radius", "R", "converged"]
    rows = [[N, rep.value, ref.value, rel, ref.required_radius, R, int(rep.converged)]]
    out = {
        "report.csv": _rows_csv(header, rows),
        "history.csv": _history_csv(rep),
        "controls.csv": _control_csv(rep.control),
    }
    return out, {"optimizer_wall_time": rep.wall_time, "seed": seed}


def run_chatter(cfg):
    if "input" not in cfg or "m" not in cfg:
        raise ConfigError("<config>: chatter needs 'input' and 'm'")
    src = Path(cfg["input"])
    try:
        obj = json.loads(src.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{src}:{e.lineno}:{e.colno}: invalid JSON: {e.msg}") from None
    try:
        sigma = RelaxedControl.from_json(obj, cfg.get("max_atoms"))
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"{src}: invalid relaxed control: {e}") from None
    ctrl = chatter(sigma, int(cfg["m"]))
    return {"control.json": json.dumps(ctrl.to_json(), indent=1) + "\n"}, {}


def run_superpose(cfg):
    if "input" not in cfg:
        raise ConfigError("<config>: superpose needs 'input'")
    try:
        path = MarginalPath.from_csv(cfg["input"])
    except (ValueError, IndexError) as e:
        raise ConfigError(f"{cfg['input']}: {e}") from None
    eta = superpose(path, float(cfg.get("p", 1)))
    ident = path_length_identity(path, eta)
    out = {
        "curves.csv": csv_text(lambda fh: _curves(eta, fh)),
        "length_identity.csv": _rows_csv(["lhs", "rhs", "gap"], [[ident.lhs, ident.rhs, ident.gap]]),
    }
    if eta.vertices.shape[1] >= 3:
        vel = extract_velocity(eta)
        out["velocity_conflicts.csv"] = _rows_csv(
            ["t", "curves"], [[repr(float(eta.times[n])), " ".join(map(str, c))] for n, c in vel.conflicts]
        )
    if cfg.get("plot"):
        out["curves.svg"] = svg_curves(eta)
    return out, {}


def _curves(eta, fh):
    import csv

    w = csv.writer(fh)
    w.writerow(["curve", "t"] + [f"x{j + 1}" for j in range(eta.vertices.shape[2])])
    for i in range(eta.N):
        for t, x in zip(eta.times, eta.vertices[i]):
            w.writerow([i, repr(float(t))] + [repr(float(v)) for v in x])


def run_gamma(cfg):
    bench = cfg.get("benchmark", "counterexample")
    grid = TimeGrid(float(cfg.get("T", 1.0)), int(cfg.get("K", 4)))
    substeps = int(cfg.get("substeps", 1))
    R = float(cfg.get("system", {}).get("R", 1.0))
    if bench == "counterexample":
        Ns = [k * k for k in cfg.get("k", [4, 8, 16])]
    else:
        Ns = cfg.get("Ns", [4, 16, 64])
    table = gamma_sweep(bench, Ns, grid, _optimizer(cfg), R, substeps)
    out = {"gamma.csv": csv_text(table.to_csv)}
    timing = {f"runtime_N{r.N}": r.runtime for r in table.rows}
    if bench == "counterexample":
        diag = [counterexample_demo(k, grid, _optimizer(cfg), R, substeps) for k in cfg.get("k", [4, 8, 16])]
        out["splitting.csv"] = _rows_csv(["k", "N", "splitting"], [[r.k, r.N, r.splitting] for r in diag])
    if cfg.get("plot"):
        Nv = [r.N for r in table.rows]
        lines = [(Nv, [r.value for r in table.rows]), (Nv, [r.reference for r in table.rows])]
        out["gamma.svg"] = svg_polylines(lines, "N", "value", f"value vs N ({bench})", markers=True)
    return out, timing


RUNNERS = {
    "simulate": run_simulate,
    "optimize": run_optimize,
    "barycenter": run_barycenter,
    "chatter": run_chatter,
    "superpose": run_superpose,
    "gamma": run_gamma,
}


def run(config: dict, source: str = "<command line>", text: str | None = None) -> int:
    """Validate ``config``, run it and write its artifacts; returns the exit status."""
    try:
        validate(config, source, text)
        outputs, timing = RUNNERS[config["subcommand"]](config)
    except ConfigError as e:
        print(str(e), file=sys.stderr)
        return EXIT_CONFIG
    except BlowUpError as e:
        print(f"error: dynamics blew up: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as e:
        print(f"error: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        # constructor checks that the schema cannot express (shapes, p ranges, ...)
        print(f"{source}: invalid configuration: {e}", file=sys.stderr)
        return EXIT_CONFIG

    out_dir = Path(config.get("output_dir", "."))
    manifest = {
        "subcommand": config["subcommand"],
        "config": config,
        "config_hash": config_hash(config),
        "seed": int(config.get("seed", 0)),
        "versions": {
            "meanfield": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "outputs": {name: hashlib.sha256(body.encode()).hexdigest() for name, body in sorted(outputs.items())},
        "timing": timing,
    }
    for name, body in sorted(outputs.items()):
        atomic_write(out_dir / name, body)
    atomic_write(out_dir / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    for name in sorted(outputs):
        print(out_dir / name)
    return 0


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="meanfield",
        description=__doc__,
        epilog="Experiment config JSON schema:\n" + json.dumps(CONFIG_SCHEMA, indent=2)
        + "\n\nEnvironment: MEANFIELD_THREADS caps worker threads (default 1).",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)
    S = argparse.SUPPRESS

    def common(p):
        p.add_argument("--config", help="JSON experiment config; flags override its fields")
        p.add_argument("--out", dest="output_dir", default=S, help="output directory (default: .)")
        p.add_argument("--plot", action="store_true", default=S, help="also write SVG plots")
        p.add_argument("--seed", type=int, default=S)

    def dyn(p):
        p.add_argument("--system", dest="system_id", choices=["barycenter", "attraction", "decoupled"], default=S)
        p.add_argument("--R", type=float, default=S, help="control ball radius")
        p.add_argument("--strength", type=float, default=S)
        p.add_argument("--n", "--N", dest="N", type=int, default=S, help="particle count")
        p.add_argument("--d", type=int, default=S, help="state dimension")
        p.add_argument("--K", type=int, default=S, help="time cells")
        p.add_argument("--T", type=float, default=S, help="horizon")
        p.add_argument("--substeps", type=int, default=S, help="RK4 substeps per cell (default 4)")

    def opt(p):
        p.add_argument("--starts", type=int, default=S)
        p.add_argument("--max-iters", dest="max_iters", type=int, default=S)
        p.add_argument("--tol", type=float, default=S)

    p = sub.add_parser("simulate", help="integrate the particle system under a fixed control")
    common(p), dyn(p)
    p.add_argument("--control", choices=["zero", "random"], default=S)

    p = sub.add_parser("optimize", help="estimate the N-particle value function")
    common(p), dyn(p), opt(p)

    p = sub.add_parser("barycenter", help="barycenter benchmark against its closed form")
    common(p), dyn(p), opt(p)
    p.add_argument("--instance", choices=["random", "singleton"], default=S)

    p = sub.add_parser("chatter", help="relaxed-control JSON -> piecewise-constant control JSON")
    common(p)
    p.add_argument("--input", default=S, help="relaxed control JSON")
    p.add_argument("--m", type=int, default=S, help="subcells per cell")
    p.add_argument("--max-atoms", dest="max_atoms", type=int, default=S)

    p = sub.add_parser("superpose", help="reconstruct curves from a marginal-path CSV")
    common(p)
    p.add_argument("--input", default=S, help="CSV with columns t,slot,x1..xd")
    p.add_argument("--p", type=int, choices=[1, 2], default=S, help="matching exponent (default 1)")

    p = sub.add_parser("gamma", help="value convergence in the particle count")
    common(p), opt(p)
    p.add_argument("--benchmark", choices=["counterexample", "identical", "barycenter"], default=S)
    p.add_argument("--k", type=_int_list, default=S, help="grid sizes for the counterexample, e.g. 4,8,16")
    p.add_argument("--ns", dest="Ns", type=_int_list, default=S, help="particle counts for other benchmarks")
    p.add_argument("--K", type=int, default=S)
    p.add_argument("--T", type=float, default=S)
    p.add_argument("--R", type=float, default=S)
    p.add_argument("--substeps", type=int, default=S)
    return parser


_OPT_KEYS = ("starts", "max_iters", "tol")
_SYS_KEYS = {"system_id": "id", "R": "R", "strength": "strength"}


def main(argv=None) -> int:
    args = vars(build_parser().parse_args(argv))
    source, text = "<command line>", None
    config: dict = {}
    if args.get("config"):
        try:
            config, text = load_config(args["config"])
        except ConfigError as e:
            print(str(e), file=sys.stderr)
            return EXIT_CONFIG
        except OSError as e:
            print(f"error: cannot read config: {e}", file=sys.stderr)
            return EXIT_CONFIG
        source = args["config"]
    args.pop("config", None)
    config["subcommand"] = args.pop("subcommand")
    for key, dest in _SYS_KEYS.items():
        if key in args:
            config.setdefault("system", {})[dest] = args.pop(key)
    for key in _OPT_KEYS:
        if key in args:
            config.setdefault("optimizer", {})[key] = args.pop(key)
    config.update(args)
    return run(config, source, text)


if __name__ == "__main__":
    sys.exit(main())
