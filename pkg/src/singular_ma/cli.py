"""Command-line front end: ``singular-ma {solve,build-example,analyze}``.

Exit codes: 0 success, 2 configuration or input error, 3 solver did not
converge, 4 a check of the example failed.
"""
from __future__ import annotations

import argparse
import datetime
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

log = logging.getLogger("singular_ma")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_CHECK = 0, 2, 3, 4
COMMANDS = ("solve", "build-example", "analyze")


class ConfigError(Exception):
    pass


@dataclass
class ExperimentConfig:
    command: str = "solve"
    grid: dict = field(default_factory=lambda: {"shape": "box", "lo": [-1, -1], "hi": [1, 1], "counts": 65})
    solver: dict = field(default_factory=lambda: {"tol_residual": None, "max_iter": 200, "stencil_radius": 2,
                                                   "linear_solver": "auto"})
    problem: dict = field(default_factory=lambda: {"f": 1.0, "boundary": "quadratic"})
    example: dict = field(default_factory=lambda: {"K": 6, "C_bd": "auto", "kink": 1.0, "v_depth": 16,
                                                    "samples": 10000, "subsolution_samples": 10000,
                                                    "comparison_tol": None, "tol_line": None,
                                                    "tol_hbar": None})
    estimates: dict = field(default_factory=lambda: {"solution": "solution.magf", "sections": [],
                                                      "orlicz_p": [0.1, 1.0, 20.0], "etas": [0.1, 0.5, 1.0],
                                                      "cover_depth": 25, "probe_h": [], "date": None})
    out: str = "out"
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("configuration must be a JSON object")
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown configuration keys: {sorted(extra)}")
        cfg = cls()
        for key, val in d.items():
            cur = getattr(cfg, key)
            if isinstance(cur, dict):
                if not isinstance(val, dict):
                    raise ConfigError(f"'{key}' must be an object")
                merged = dict(cur)
                merged.update(val)
                val = merged
            setattr(cfg, key, val)
        if cfg.command not in COMMANDS:
            raise ConfigError(f"unknown command {cfg.command!r}")
        if not isinstance(cfg.seed, int) or not 0 <= cfg.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"malformed JSON at line {e.lineno}, column {e.colno}: {e.msg}") from e
        return cls.from_dict(data)


# ---------------------------------------------------------------------------
# helpers


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n", encoding="utf-8")


def write_manifest(out: Path) -> None:
    entries = {}
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            entries[p.relative_to(out).as_posix()] = hashlib.sha256(p.read_bytes()).hexdigest()
    _dump(out / "manifest.json", {"files": entries, "hash": "sha256"})


def build_grid(spec: dict):
    from .grid import GridSpec

    try:
        shape = spec.get("shape", "box")
        if shape == "box":
            return GridSpec.box(spec["lo"], spec["hi"], spec["counts"])
        if shape == "ball":
            return GridSpec.ball(int(spec["dim"]), int(spec["n"]), float(spec.get("radius", 1.0)))
        if shape == "cylinder":
            return GridSpec.cylinder(int(spec["n"]), float(spec.get("radius", 1.0)),
                                     float(spec.get("half_height", 1.0)), spec.get("nz"))
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"bad grid specification: {e}") from e
    raise ConfigError(f"unknown grid shape {shape!r}")


def _boundary_function(name: str, cfg: ExperimentConfig):
    import numpy as np

    if name == "quadratic":
        return lambda x: 0.5 * np.sum(x**2, axis=-1), (lambda x: 0.5 * np.sum(x**2, axis=-1))
    if name == "zero":
        return lambda x: np.zeros(len(x)), None
    if name == "cone":
        return lambda x: np.linalg.norm(x, axis=-1), None
    if name == "example":
        from .cantor import SpikeFunction, build_cantor
        from .example import boundary_phi

        ex = cfg.example
        C = ex.get("C_bd")
        if not isinstance(C, (int, float)):
            raise ConfigError("boundary 'example' in solve needs a numeric example.C_bd")
        depth = int(ex.get("v_depth") or 16)
        v = SpikeFunction(build_cantor(depth), depth, float(ex.get("kink", 1.0)))
        return lambda x: boundary_phi(x, float(C), v), None
    raise ConfigError(f"unknown boundary data {name!r}")


def _solver_kw(cfg: ExperimentConfig) -> dict:
    s = cfg.solver
    return {"tol_residual": s.get("tol_residual"), "max_iter": int(s.get("max_iter", 200)),
            "linear_solver": s.get("linear_solver", "auto")}


def _report_dict(report) -> dict:
    d = asdict(report)
    d.pop("seconds", None)  # wall time would break byte-identical outputs
    return d


# ---------------------------------------------------------------------------
# commands


def cmd_solve(cfg: ExperimentConfig, out: Path) -> int:
    import numpy as np

    from .solver import DirichletProblem, solve_dirichlet

    grid = build_grid(cfg.grid)
    phi, exact = _boundary_function(cfg.problem.get("boundary", "quadratic"), cfg)
    f = cfg.problem.get("f", 1.0)
    if not isinstance(f, (int, float)) or f <= 0:
        raise ConfigError("problem.f must be a positive number")
    problem = DirichletProblem.from_functions(grid, float(f), phi, int(cfg.solver.get("stencil_radius", 2)))
    u, report = solve_dirichlet(problem, **_solver_kw(cfg))
    u.to_magf(out / "solution.magf")
    rep = _report_dict(report)
    if exact is not None and float(f) == 1.0:
        err = float(np.nanmax(np.abs(u.values - np.where(grid.mask, exact(grid.coords), np.nan))))
        rep["max_error"] = err
        log.info("max nodal error against the exact solution: %.3e", err)
    rep["certified_convex"] = u.certified
    _dump(out / "report.json", rep)
    return EXIT_OK if report.converged else EXIT_SOLVER


def cmd_build_example(cfg: ExperimentConfig, out: Path) -> int:
    from .example import ExampleError, assemble_example

    grid = build_grid(cfg.grid)
    ex = cfg.example
    kw = {k: ex.get(k) for k in ("comparison_tol", "tol_line", "tol_hbar")}
    try:
        res = assemble_example(grid, int(ex.get("K", 6)), ex.get("C_bd", "auto"),
                               kink=float(ex.get("kink", 1.0)), v_depth=ex.get("v_depth"),
                               samples=int(ex.get("samples", 10000)),
                               subsolution_samples=int(ex.get("subsolution_samples", 10000)),
                               seed=cfg.seed, **_solver_kw(cfg), **kw)
    except ExampleError as e:
        _dump(out / "example-checks.json", {"failures": [e.check], "message": str(e)})
        print(f"check failed: {e.check}: {e}", file=sys.stderr)
        return EXIT_CHECK
    (out / "cantor.json").write_text(res.cantor.to_json() + "\n", encoding="utf-8")
    res.u.to_magf(out / "solution.magf")
    checks = res.checks.to_dict()
    checks["solver"].pop("seconds", None)
    _dump(out / "example-checks.json", checks)
    if not res.report.converged:
        print("check failed: solver", file=sys.stderr)
        return EXIT_SOLVER
    failed = res.checks.failures()
    if failed:
        print(f"check failed: {failed[0]}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def cmd_analyze(cfg: ExperimentConfig, out: Path, config_dir: Path) -> int:
    import numpy as np

    from . import estimates as est
    from .cantor import build_cantor
    from .grid import ConvexGridFunction
    from .sections import extract_section, maximal_height

    est_cfg = cfg.estimates
    path = Path(est_cfg.get("solution", "solution.magf"))
    if not path.is_absolute():
        path = config_dir / path
    if not path.is_file():
        print(f"missing solution file: {path}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        u = ConvexGridFunction.from_magf(path)
    except ValueError as e:
        raise ConfigError(f"unreadable solution file: {e}") from e
    g = u.grid
    records = []
    for item in est_cfg.get("sections", []):
        node = g.index_of(item["x"])
        mh = maximal_height(u, node)
        rec = {"node": list(node), "hbar": mh.hbar, "singular": mh.singular}
        for h in item.get("h", []):
            sec = extract_section(u, node, mh.slope, float(h))
            rec.setdefault("sections", []).append(sec.record(g, mh.hbar))
        records.append(rec)
    _dump(out / "sections.json", records)

    edir = out / "estimates"
    edir.mkdir(exist_ok=True)
    label = "x".join(str(c) for c in g.counts)
    date = est_cfg.get("date") or datetime.date.today().isoformat()
    lap = est.laplacian_field(u)
    region = est.ball_region(g)
    reports = [est.decay_report(u, region)]
    ps = sorted(float(p) for p in est_cfg.get("orlicz_p", []))
    reports.append(est.EstimateReport("orlicz", {"p": ps},
                                      [(p, v, v, v) for p in ps
                                       for v in [est.orlicz_integral(lap, p, g, region)]]))
    depth = int(est_cfg.get("cover_depth", 25))
    cantor = build_cantor(depth)
    cover = []
    for k in range(1, depth + 1):
        L = float(cantor.survivor_lengths[k])
        cover.append((k, est.covering_sum(np.full(2**k, L), 1.0, 15.0), 0.0, 0.0))
    reports.append(est.EstimateReport("cover_eta15", {"depth": depth},
                                      [(k, v, v, v) for k, v, _, _ in cover]))
    for item in est_cfg.get("probe_h", []):
        node = g.index_of(item["x"])
        mh = maximal_height(u, node)
        etas = tuple(est_cfg.get("etas", [0.1, 0.5, 1.0]))
        pr = est.prop_probe(u, node, float(item["h"]), mh.hbar, etas=etas)
        bench = list(pr.benchmarks.values())
        series = [(r, m, min(b[i] for b in bench), max(b[i] for b in bench))
                  for i, (r, m) in enumerate(zip(pr.radii, pr.mass))]
        inputs = {"x": item["x"], "h": item["h"], "hbar": mh.hbar}
        reports.append(est.EstimateReport(f"probe{len(reports)}", inputs, series))
    for rep in reports:
        (edir / rep.filename(label, date)).write_text(rep.to_csv(), encoding="utf-8")
        (edir / (rep.filename(label, date)[:-4] + ".json")).write_text(rep.to_json() + "\n", encoding="utf-8")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="singular-ma", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", type=Path, help="JSON configuration file")
    p.add_argument("--out", type=Path, help="output directory (overrides the config)")
    p.add_argument("--threads", type=int, default=None, help="threads for numerical kernels")
    p.add_argument("--seed", type=int, default=None, help="seed for randomized sampling")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _set_threads(n: int | None) -> None:
    if n is None:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _set_threads(args.threads)
    config_dir = Path.cwd()
    try:
        if args.config is not None:
            if not args.config.is_file():
                raise ConfigError(f"config file not found: {args.config}")
            cfg = ExperimentConfig.from_json(args.config.read_text(encoding="utf-8"))
            config_dir = args.config.resolve().parent
        else:
            cfg = ExperimentConfig()
        cfg.command = args.command
        if args.seed is not None:
            cfg = ExperimentConfig.from_dict({**cfg.to_dict(), "seed": args.seed})
        out = Path(args.out if args.out is not None else cfg.out)
        cfg.out = str(out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(cfg.to_json() + "\n", encoding="utf-8")
        if cfg.command == "solve":
            code = cmd_solve(cfg, out)
        elif cfg.command == "build-example":
            code = cmd_build_example(cfg, out)
        else:
            code = cmd_analyze(cfg, out, config_dir)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    write_manifest(out)
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
