"""Command-line front end: single solves, convergence studies and self-checks.

Exit codes
----------
0  success
1  a self-check or a study cell failed
2  unknown flag or malformed value
3  value out of range
4  I/O failure
5  Howard's iteration exceeded ``--max-iter``
6  missing command
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .controls import build_control_grid
from .experiments import PROBLEMS, ErrorReport, convergence_study, get_problem, solve_cell
from .mesh import coarse_mesh, refined_levels, write_mesh
from .selftest import run_selftest

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2
EXIT_RANGE = 3
EXIT_IO = 4
EXIT_MAXITER = 5
EXIT_NO_COMMAND = 6

COMMANDS = ("solve", "study", "selftest")
DEFAULT_M = (2.0, 4.0, 8.0, 16.0, 32.0, 64.0)
MAX_LEVEL = 8

logger = logging.getLogger("ma_bellman")


class ConfigError(Exception):
    def __init__(self, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.code = code


@dataclass
class RunConfig:
    command: str
    problem: str = "quartic"
    levels: list[int] = field(default_factory=lambda: [0])
    m_values: list[float] = field(default_factory=lambda: list(DEFAULT_M))
    n_angles: int = 64
    n_a: int = 33
    tol: float = 1e-6
    max_iter: int = 100
    out: Path | None = None
    solution_out: Path | None = None
    mesh_out: Path | None = None
    trace: Path | None = None

    def validate(self) -> "RunConfig":
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}", EXIT_USAGE)
        if self.problem not in PROBLEMS:
            raise ConfigError(
                f"unknown problem {self.problem!r}; choose from {', '.join(sorted(PROBLEMS))}"
            )
        if not (0.0 < self.tol <= 1e-2):
            raise ConfigError(f"tol={self.tol:g} outside (0, 1e-2]", EXIT_RANGE)
        if not self.levels or min(self.levels) < 0 or max(self.levels) > MAX_LEVEL:
            raise ConfigError(f"levels must lie in 0..{MAX_LEVEL}", EXIT_RANGE)
        if not self.m_values or any(not (1.0 <= m <= 128.0) for m in self.m_values):
            raise ConfigError("stencil factors m must lie in [1, 128]", EXIT_RANGE)
        if self.n_angles < 1:
            raise ConfigError("--angles must be at least 1", EXIT_RANGE)
        if self.n_a < 2:
            raise ConfigError("--na must be at least 2", EXIT_RANGE)
        if self.max_iter < 1:
            raise ConfigError("--max-iter must be at least 1", EXIT_RANGE)
        return self


# ---------------------------------------------------------------------------
# parsing


def parse_levels(text: str) -> list[int]:
    """``"a..b"`` (inclusive), ``"a,b,c"`` or a single integer."""
    text = text.strip()
    try:
        if ".." in text:
            lo, hi = text.split("..", 1)
            lo_i, hi_i = int(lo), int(hi)
            if hi_i < lo_i:
                raise ConfigError(f"empty level range {text!r}", EXIT_RANGE)
            return list(range(lo_i, hi_i + 1))
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"malformed level list {text!r}") from None


def parse_m_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"malformed m list {text!r}") from None


def read_config_file(path: Path) -> dict[str, str]:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}", EXIT_IO) from None
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}", EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(
        prog="ma-bellman",
        description="Monge-Ampere solver via policy iteration on a wide-stencil scheme.",
    )
    p.add_argument("command", nargs="?", help="one of: " + ", ".join(COMMANDS))
    p.add_argument("--problem", help="quartic or nonsmooth (default quartic)")
    p.add_argument("--level", help="refinement level for solve (default 0)")
    p.add_argument("--levels", help="levels for study, e.g. 0..3 or 0,2 (default 0..3)")
    p.add_argument("--m", help="comma-separated stencil factors (default 2,4,8,16,32,64)")
    p.add_argument("--angles", help="number of rotation angles (default 64)")
    p.add_argument("--na", help="number of eigenvalue splits in [0, 1/2] (default 33)")
    p.add_argument("--tol", help="step tolerance of Howard's iteration (default 1e-6)")
    p.add_argument("--max-iter", dest="max_iter", help="Howard iteration cap (default 100)")
    p.add_argument("--out", help="CSV of errors per (level, m)")
    p.add_argument("--solution-out", dest="solution_out", help="solve: nodal 'x y u' lines")
    p.add_argument("--mesh-out", dest="mesh_out", help="dump the finest mesh used")
    p.add_argument("--trace", help="solve: per-iteration CSV history")
    p.add_argument("--config", help="key=value file; command-line flags take precedence")
    p.add_argument("-v", "--verbose", action="count", default=0)
    return p


_KEYS = (
    "command problem level levels m angles na tol max_iter out solution_out mesh_out trace"
).split()


def parse_config(argv: list[str] | None = None) -> tuple[RunConfig, int]:
    """Merge the config file (if any) with flags; returns the config and verbosity."""
    args = build_parser().parse_args(argv)
    values: dict[str, str] = {}
    if args.config:
        values = read_config_file(Path(args.config))
        unknown = sorted(set(values) - set(_KEYS))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    for key in _KEYS:
        flag = getattr(args, key)
        if flag is not None:
            values[key] = flag
    command = values.get("command")
    if not command:
        raise ConfigError("missing command; choose from " + ", ".join(COMMANDS), EXIT_NO_COMMAND)

    def num(key, cast, default):
        if key not in values:
            return default
        try:
            return cast(values[key])
        except ValueError:
            raise ConfigError(f"malformed value for {key}: {values[key]!r}") from None

    def path(key):
        return Path(values[key]) if values.get(key) else None

    if command == "study":
        levels = parse_levels(values.get("levels", "0..3"))
    else:
        levels = [num("level", int, 0)]
    cfg = RunConfig(
        command=command,
        problem=values.get("problem", "quartic"),
        levels=levels,
        m_values=parse_m_list(values["m"]) if "m" in values else list(DEFAULT_M),
        n_angles=num("angles", int, 64),
        n_a=num("na", int, 33),
        tol=num("tol", float, 1e-6),
        max_iter=num("max_iter", int, 100),
        out=path("out"),
        solution_out=path("solution_out"),
        mesh_out=path("mesh_out"),
        trace=path("trace"),
    )
    if command == "solve" and "m" not in values:
        cfg.m_values = [DEFAULT_M[0]]
    if command == "solve" and len(cfg.m_values) != 1:
        raise ConfigError("solve takes a single stencil factor --m")
    return cfg.validate(), args.verbose


# ---------------------------------------------------------------------------
# commands


def _write(path: Path, text: str) -> None:
    try:
        path.write_text(text)
    except OSError as exc:
        raise ConfigError(f"cannot write {path}: {exc.strerror}", EXIT_IO) from None


def run_solve(cfg: RunConfig) -> int:
    spec = get_problem(cfg.problem)
    level, m = cfg.levels[0], cfg.m_values[0]
    mesh = refined_levels(coarse_mesh(), level)[level]
    grid = build_control_grid(cfg.n_angles, cfg.n_a)
    if cfg.mesh_out:
        try:
            write_mesh(mesh, cfg.mesh_out)
        except OSError as exc:
            raise ConfigError(f"cannot write {cfg.mesh_out}: {exc.strerror}", EXIT_IO) from None
    trace = None
    if cfg.trace:
        try:
            trace = open(cfg.trace, "w")
        except OSError as exc:
            raise ConfigError(f"cannot write {cfg.trace}: {exc.strerror}", EXIT_IO) from None
    try:
        cell, rep = solve_cell(mesh, level, m, spec, grid, cfg.tol, cfg.max_iter, trace=trace)
    finally:
        if trace is not None:
            trace.close()
    if rep is None:
        print(f"error: {cell.message}", file=sys.stderr)
        return EXIT_FAILED
    report = ErrorReport(spec.name, [cell], {level: mesh.h_avg})
    print(
        f"{spec.name} level={level} nodes={mesh.num_nodes} m={m:g}: "
        f"{rep.iterations} iterations, last step {rep.final_step:.2e}, "
        f"L2 {cell.l2_rel:.3e}, Linf {cell.linf_rel:.3e}, H1 {cell.h1_rel:.3e}"
    )
    if cfg.solution_out:
        rows = zip(mesh.points, rep.solution.values)
        lines = "".join(f"{x:.17g} {y:.17g} {u:.17g}\n" for (x, y), u in rows)
        _write(cfg.solution_out, lines)
    if not rep.converged:
        print(f"error: no convergence within {cfg.max_iter} iterations", file=sys.stderr)
        return EXIT_MAXITER
    if cfg.out:
        _write(cfg.out, report.to_csv())
    return EXIT_OK


def run_study(cfg: RunConfig) -> int:
    spec = get_problem(cfg.problem)
    grid = build_control_grid(cfg.n_angles, cfg.n_a)
    base = coarse_mesh()
    if cfg.mesh_out:
        try:
            write_mesh(refined_levels(base, max(cfg.levels))[-1], cfg.mesh_out)
        except OSError as exc:
            raise ConfigError(f"cannot write {cfg.mesh_out}: {exc.strerror}", EXIT_IO) from None

    def progress(c):
        state = "failed: " + c.message if c.failed else f"{c.iterations} it, Linf {c.linf_rel:.3e}"
        logger.info("level %d m %g: %s (%.1fs)", c.level, c.m, state, c.seconds)

    report = convergence_study(
        spec, cfg.levels, cfg.m_values, grid=grid, tol=cfg.tol, max_iter=cfg.max_iter,
        base=base, workers=None, progress=progress,
    )
    text = report.to_csv()
    if cfg.out:
        _write(cfg.out, text)
    else:
        sys.stdout.write(text)
    print(report.summary(), file=sys.stderr if cfg.out is None else sys.stdout)
    failed = [c for c in report.cells if c.failed]
    if any(c.message.startswith("no convergence") for c in failed):
        return EXIT_MAXITER
    return EXIT_FAILED if failed else EXIT_OK


def run_selftest_command(cfg: RunConfig) -> int:
    results = run_selftest()
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAILED


def run(cfg: RunConfig) -> int:
    """Execute ``cfg`` and return the process exit code."""
    handler = {"solve": run_solve, "study": run_study, "selftest": run_selftest_command}
    try:
        return handler[cfg.command](cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


def main(argv: list[str] | None = None) -> int:
    try:
        cfg, verbose = parse_config(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    logging.basicConfig(
        level=logging.WARNING - 10 * min(verbose, 2), format="%(levelname)s %(name)s: %(message)s"
    )
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
