"""Run configuration, the time loop and the command line interface."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from shallowflow import mms, postproc
from shallowflow.geometry import GridFormatError, Mesh, MeshError, build_mesh, compute_node_normals, load_bathymetry
from shallowflow.linalg import Precond, SolverError
from shallowflow.scaling import ScalingParams, scaled_viscosity
from shallowflow.stepper import (SECONDS_PER_MONTH, SECONDS_PER_YEAR, Operators, PhysicalParams, SimulationState,
                                 SolverSettings, advance, read_checkpoint, write_checkpoint)

logger = logging.getLogger("shallowflow")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


class ConfigError(ValueError):
    pass


class NumericalFailure(RuntimeError):
    def __init__(self, step: int, phase: str, cause: Exception):
        super().__init__(f"step {step} ({phase}): {cause}")
        self.step = step
        self.phase = phase


@dataclass
class Config:
    grid_path: Path
    nz: int = 8
    min_depth: float = 10.0
    surface_refinement: float = 1.0
    nu: tuple[float, float, float] = (1e8, 1e8, 2.5e2)
    epsilon: float | None = None
    lambda_: tuple[float, float, float] | None = None
    f: float = 1e-4
    rho0: float = 1025.0
    dt: float = SECONDS_PER_MONTH
    t_final: float = 100 * SECONDS_PER_YEAR
    max_steps: int | None = None
    velocity_tol: float = 1e-8
    pressure_tol: float = 1e-10
    mass_tol: float = 1e-12
    max_iter: int = 20000
    velocity_precond: Precond = Precond.IC0
    pressure_precond: Precond = Precond.DIAG
    projection: str = "laplacian"
    convection: bool = True
    extrapolate_explicit: bool = False
    reimpose_noslip_after_correction: bool = True
    output_every: int = 12
    checkpoint_every: int | None = None
    output_dir: Path = Path("output")
    slice_depths: tuple[float, ...] = (500.0,)
    seeds: tuple[tuple[float, float, float], ...] = ()
    trace_dt: float = 86400.0
    trace_t_max: float = 100 * SECONDS_PER_YEAR
    restart: Path | None = None

    def __post_init__(self):
        positive = ["surface_refinement", "dt", "rho0", "velocity_tol", "pressure_tol", "mass_tol",
                    "trace_dt"]
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.min_depth < 0:
            raise ConfigError("min_depth must be non-negative")
        if self.t_final < 0 or self.trace_t_max < 0:
            raise ConfigError("t_final and trace_t_max must be non-negative")
        if self.nz < 1:
            raise ConfigError("nz must be >= 1")
        if self.output_every < 1 or (self.checkpoint_every is not None and self.checkpoint_every < 1):
            raise ConfigError("output cadence must be >= 1")
        if self.max_steps is not None and self.max_steps < 0:
            raise ConfigError("max_steps must be non-negative")
        if len(self.nu) != 3 or min(self.nu) <= 0:
            raise ConfigError("nu must be 3 positive values")
        if (self.epsilon is None) != (self.lambda_ is None):
            raise ConfigError("epsilon and lambda must be given together")
        if self.epsilon is not None:
            try:
                ScalingParams(self.epsilon, self.lambda_)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        if self.projection not in ("laplacian", "consistent"):
            raise ConfigError(f"projection must be 'laplacian' or 'consistent', got {self.projection!r}")
        if any(d < 0 for d in self.slice_depths):
            raise ConfigError("slice_depths must be non-negative")

    @property
    def viscosity(self) -> tuple[float, float, float]:
        if self.epsilon is not None:
            return scaled_viscosity(self.epsilon, self.lambda_)
        return tuple(self.nu)

    def physical(self) -> PhysicalParams:
        return PhysicalParams(nu=self.viscosity, f=self.f, dt=self.dt, t_final=self.t_final,
                              wind_scale=1.0 / self.rho0)

    def solver(self) -> SolverSettings:
        return SolverSettings(velocity_tol=self.velocity_tol, pressure_tol=self.pressure_tol,
                              mass_tol=self.mass_tol, max_iter=self.max_iter,
                              velocity_precond=self.velocity_precond, pressure_precond=self.pressure_precond,
                              reimpose_noslip_after_correction=self.reimpose_noslip_after_correction,
                              extrapolate_explicit=self.extrapolate_explicit, convection=self.convection,
                              projection=self.projection)

    @property
    def n_steps(self) -> int:
        n = int(np.ceil(self.t_final / self.dt - 1e-9))
        return n if self.max_steps is None else min(n, self.max_steps)

    def mesh_meta(self) -> dict:
        return {"grid_path": str(self.grid_path), "nz": self.nz, "min_depth": self.min_depth,
                "surface_refinement": self.surface_refinement}


# -- parsing -------------------------------------------------------------------

def _bool(text: str) -> bool:
    t = text.lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(count: int | None):
    def conv(text: str):
        vals = tuple(float(v) for v in text.replace(",", " ").split())
        if count is not None and len(vals) != count:
            raise ValueError(f"expected {count} values, got {len(vals)}")
        return vals
    return conv


def _points(text: str):
    pts = []
    for chunk in text.split(";"):
        if chunk.strip():
            pts.append(_floats(3)(chunk))
    return tuple(pts)


def _optional(conv):
    return lambda text: None if text.lower() in ("", "none") else conv(text)


_CONVERTERS = {
    "grid_path": Path, "nz": int, "min_depth": float, "surface_refinement": float, "nu": _floats(3),
    "epsilon": _optional(float), "lambda": _optional(_floats(3)), "f": float, "rho0": float,
    "dt": float, "t_final": float, "max_steps": _optional(int), "velocity_tol": float,
    "pressure_tol": float, "mass_tol": float, "max_iter": int,
    "velocity_precond": lambda s: Precond(s.upper()), "pressure_precond": lambda s: Precond(s.upper()),
    "projection": str, "convection": _bool, "extrapolate_explicit": _bool,
    "reimpose_noslip_after_correction": _bool, "output_every": int, "checkpoint_every": _optional(int),
    "output_dir": Path, "slice_depths": _floats(None), "seeds": _points, "trace_dt": float,
    "trace_t_max": float, "restart": _optional(Path),
}


def parse_config(path) -> Config:
    """Read a flat ``key = value`` file; ``#`` starts a comment.

    Relative paths are resolved against the directory of the file.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _CONVERTERS:
            raise ConfigError(f"{path}:{lineno}: unknown key '{key}'")
        if key in values:
            raise ConfigError(f"{path}:{lineno}: duplicate key '{key}'")
        try:
            values[key] = _CONVERTERS[key](val)
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for '{key}': {exc}") from None
    if "grid_path" not in values:
        raise ConfigError(f"{path}: missing required key 'grid_path'")
    if "lambda" in values:
        values["lambda_"] = values.pop("lambda")
    for key in ("grid_path", "output_dir", "restart"):
        if values.get(key) is not None and not values[key].is_absolute():
            values[key] = (path.parent / values[key]).resolve()
    if "output_dir" not in values:
        values["output_dir"] = (path.parent / "output").resolve()
    return Config(**values)


# -- run -------------------------------------------------------------------------

@dataclass
class RunResult:
    state: SimulationState
    mesh: Mesh
    outputs: list[Path] = field(default_factory=list)
    history: list[dict] = field(default_factory=list)


def load_mesh(meta: dict):
    grid = load_bathymetry(meta["grid_path"])
    mesh = build_mesh(grid, int(meta["nz"]), float(meta["min_depth"]), float(meta["surface_refinement"]))
    compute_node_normals(mesh)
    return grid, mesh


def write_outputs(cfg: Config, mesh: Mesh, state: SimulationState) -> list[Path]:
    out = cfg.output_dir
    tag = f"{state.k:06d}"
    files = [postproc.write_vtk(mesh, state, out / f"state_{tag}.vtk")]
    for d in cfg.slice_depths:
        sl = postproc.depth_slice(mesh, state, d)
        files.append(postproc.write_slice_csv(sl, out / f"slice_{d:g}m_{tag}.csv"))
    if cfg.seeds:
        sampler = postproc.VelocitySampler(mesh, state.u_k)
        lines = [postproc.trace_streamline(sampler, s, cfg.trace_dt, cfg.trace_t_max) for s in cfg.seeds
                 if sampler.contains(np.asarray(s, float))]
        files.append(postproc.write_streamline_csv(lines, out / f"streamlines_{tag}.csv"))
    return files


def run(cfg: Config, stop_after: int | None = None) -> RunResult:
    """Integrate from rest (or from ``cfg.restart``) to t_final.

    ``stop_after`` ends the loop early at that step index, which is how
    restart tests produce an intermediate checkpoint.
    """
    grid, mesh = load_mesh(cfg.mesh_meta())
    params, settings = cfg.physical(), cfg.solver()
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    logger.info("mesh: %d hexahedra, %d velocity nodes, %d pressure nodes", mesh.n_elem, mesh.n_q2, mesh.n_q1)
    t0 = time.perf_counter()
    ops = Operators(mesh, params, grid, settings)
    logger.info("operators assembled in %.2f s", time.perf_counter() - t0)
    meta = cfg.mesh_meta()
    if cfg.restart is not None:
        state, saved = read_checkpoint(cfg.restart)
        if state.u_k.size != 3 * mesh.n_q2 or state.p_k.size != mesh.n_q1:
            raise ConfigError(f"restart file {cfg.restart} does not match the mesh")
        logger.info("restarting from %s at k=%d t=%.6g", cfg.restart, state.k, state.t)
    else:
        state = SimulationState.at_rest(mesh)
    result = RunResult(state, mesh)
    n_steps = cfg.n_steps if stop_after is None else min(cfg.n_steps, stop_after)
    ckpt_every = cfg.checkpoint_every or cfg.output_every
    while state.k < n_steps:
        try:
            state = advance(state, ops, params)
        except SolverError as exc:
            raise NumericalFailure(state.k + 1, "bootstrap" if state.k == 0 else "step", exc) from exc
        if not (np.all(np.isfinite(state.u_k)) and np.all(np.isfinite(state.p_k))):
            raise NumericalFailure(state.k, "step", FloatingPointError("non-finite field"))
        info = state.info
        logger.info("k=%d t=%.6e it(u,p,m)=(%d,%d,%d) |Bu|=%.3e E=%.6e", state.k, state.t,
                    info.velocity_iterations, info.pressure_iterations, info.mass_iterations,
                    info.divergence, info.kinetic_energy)
        result.history.append({"k": state.k, "t": state.t, **dataclasses.asdict(info)})
        last = state.k == n_steps
        if state.k % cfg.output_every == 0 or last:
            result.outputs += write_outputs(cfg, mesh, state)
        if state.k % ckpt_every == 0 or last:
            path = cfg.output_dir / f"checkpoint_{state.k:06d}.bin"
            write_checkpoint(path, state, meta)
            result.outputs.append(path)
    result.state = state
    return result


def run_mms(mode: str, csv_path=None) -> mms.ConvergenceReport:
    if mode == "spatial":
        report = mms.spatial_study()
    elif mode == "temporal":
        report = mms.temporal_study()
    else:
        raise ConfigError(f"unknown MMS mode {mode!r}")
    if csv_path is not None:
        report.to_csv(csv_path)
    return report


def trace_from_checkpoint(path, seeds: np.ndarray, dt_trace: float, t_max: float):
    state, meta = read_checkpoint(path)
    if "grid_path" not in meta:
        raise ConfigError(f"{path}: checkpoint carries no mesh description")
    _, mesh = load_mesh(meta)
    sampler = postproc.VelocitySampler(mesh, state.u_k)
    return [postproc.trace_streamline(sampler, s, dt_trace, t_max) for s in seeds]


# -- command line ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="shallowflow", description="Wind-driven shallow-basin Navier-Stokes solver")
    p.add_argument("--threads", type=int, default=None, help="numba worker threads")
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="integrate a basin from a config file")
    r.add_argument("config")
    r.add_argument("--max-steps", type=int, default=None)
    m = sub.add_parser("mms", help="manufactured-solution convergence study")
    m.add_argument("--mode", choices=["spatial", "temporal"], required=True)
    m.add_argument("--csv", default=None)
    t = sub.add_parser("trace", help="streamlines on a checkpointed velocity field")
    t.add_argument("checkpoint")
    t.add_argument("--seeds", required=True, help="CSV with x,y,z columns")
    t.add_argument("--dt", type=float, default=86400.0)
    t.add_argument("--t-max", type=float, default=100 * SECONDS_PER_YEAR)
    t.add_argument("--out", default="streamlines.csv")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if args.threads is not None:
        import numba

        numba.set_num_threads(max(1, min(args.threads, numba.config.NUMBA_NUM_THREADS)))
    try:
        if args.command == "run":
            cfg = parse_config(args.config)
            if args.max_steps is not None:
                cfg = dataclasses.replace(cfg, max_steps=args.max_steps)
            res = run(cfg)
            logger.info("finished at k=%d t=%.6e; %d files written", res.state.k, res.state.t, len(res.outputs))
        elif args.command == "mms":
            print(run_mms(args.mode, args.csv).format())
        elif args.command == "trace":
            lines = trace_from_checkpoint(args.checkpoint, postproc.read_seeds(args.seeds), args.dt, args.t_max)
            postproc.write_streamline_csv(lines, args.out)
            for i, sl in enumerate(lines):
                print(f"line {i}: travel time {sl.travel_time:.6e} s, length {sl.length:.6e} m ({sl.reason})")
    except (ConfigError, GridFormatError, MeshError, FileNotFoundError) as exc:
        logger.error("%s", exc)
        return EXIT_CONFIG
    except (NumericalFailure, SolverError, FloatingPointError) as exc:
        logger.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    except ValueError as exc:
        logger.error("%s", exc)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
