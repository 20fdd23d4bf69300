"""BDF2 velocity-correction projection scheme on the Q2/Q1 spaces.

One step from (u^k, u^{k-1}, p^k):

1. prediction: (3/(2 dt) M + K) u~ = M (2 u^k - u^{k-1}/2)/dt - N(u^k)
   - C u^k + B^T p^k + wind, with u~ in the constrained space W_h;
2. increment: the zero-mean Poisson problem A q = -(3/(2 dt)) B u~;
3. update: p^{k+1} = p^k + q and M u^{k+1} = M u~ - (2 dt/3) G q in U_h.

The first step uses backward Euler (coefficients 1/dt) to produce u^1, p^1.
"""
from __future__ import annotations

import logging
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.sparse as sp

from shallowflow import fem
from shallowflow.constraints import VelocityConstraints, make_zero_mean_system
from shallowflow.geometry import BathymetryGrid, Mesh
from shallowflow.linalg import (Precond, as_csr, Preconditioner, SolverError, SolverReport, pcg_solve,
                                solve_pressure_system)

logger = logging.getLogger(__name__)

SECONDS_PER_MONTH = 2.592e6  # 30 days
SECONDS_PER_YEAR = 12 * SECONDS_PER_MONTH


@dataclass(frozen=True)
class PhysicalParams:
    nu: tuple[float, float, float] = (1e8, 1e8, 2.5e2)  # m^2/s
    f: float = 0.0  # 2*omega_3 [1/s]
    dt: float = SECONDS_PER_MONTH
    t_final: float = 100 * SECONDS_PER_YEAR
    wind_scale: float = 1.0  # multiplies raster tensions (1/rho0 for N/m^2 input)
    scaled_tension: tuple[float, float] | None = None  # informational, see scaling.py

    def __post_init__(self):
        nu = tuple(float(v) for v in self.nu)
        if len(nu) != 3 or min(nu) <= 0:
            raise ValueError(f"viscosity must be 3 positive values, got {self.nu}")
        object.__setattr__(self, "nu", nu)
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.t_final < 0:
            raise ValueError("t_final must be non-negative")


@dataclass(frozen=True)
class SolverSettings:
    velocity_tol: float = 1e-8
    pressure_tol: float = 1e-10
    mass_tol: float = 1e-12
    max_iter: int = 20000
    velocity_precond: Precond = Precond.IC0
    pressure_precond: Precond = Precond.DIAG
    reimpose_noslip_after_correction: bool = True
    extrapolate_explicit: bool = False  # 2u^k - u^{k-1} in explicit terms (off by default)
    convection: bool = True
    # "laplacian": Q1 Poisson problem for q plus a Q2 mass projection (default);
    # "consistent": q from B P M_L^{-1} B^T, which makes B u^{k+1} = 0 up to the solver tolerance
    projection: str = "laplacian"

    def __post_init__(self):
        if self.projection not in ("laplacian", "consistent"):
            raise ValueError(f"unknown projection {self.projection!r}")
        for name in ("velocity_tol", "pressure_tol", "mass_tol"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass
class StepInfo:
    velocity_iterations: int = 0
    pressure_iterations: int = 0
    mass_iterations: int = 0
    divergence: float = 0.0  # ||B u^{k+1}||_2
    kinetic_energy: float = 0.0  # 0.5 u^T M u
    multiplier: float = 0.0


@dataclass
class SimulationState:
    u_k: np.ndarray
    u_km1: np.ndarray
    p_k: np.ndarray
    u_tilde: np.ndarray
    q: np.ndarray
    k: int = 0
    t: float = 0.0
    info: StepInfo | None = field(default=None, compare=False)

    @classmethod
    def at_rest(cls, mesh: Mesh) -> "SimulationState":
        nu, npr = 3 * mesh.n_q2, mesh.n_q1
        return cls(np.zeros(nu), np.zeros(nu), np.zeros(npr), np.zeros(nu), np.zeros(npr))

    def copy(self) -> "SimulationState":
        return replace(self, u_k=self.u_k.copy(), u_km1=self.u_km1.copy(), p_k=self.p_k.copy(),
                       u_tilde=self.u_tilde.copy(), q=self.q.copy())


class _ConstrainedSystem:
    def __init__(self, A, cons: VelocityConstraints, precond: Precond):
        self.A, _ = cons.apply(A)
        self.cons = cons
        self.precond = Preconditioner(self.A, precond)

    def solve(self, b, x0, tol, max_iter, what):
        w, rep = pcg_solve(self.A, self.cons.rhs(b), self.precond, tol=tol, max_iter=max_iter,
                           x0=self.cons.to_local(x0))
        if not rep.converged:
            raise SolverError(f"{what} solve did not converge in {rep.iterations} iterations "
                              f"(residual {rep.final_residual:.3e})")
        return self.cons.recover(w), rep


class Operators:
    """Time-invariant matrices and factorizations for one mesh and parameter set.

    ``forcing(t)`` is an optional extra load vector added to the prediction
    right-hand side (manufactured-solution hook; zero in production runs).
    ``traction(t)`` overrides the raster wind load when given.
    """

    def __init__(self, mesh: Mesh, params: PhysicalParams, grid: BathymetryGrid | None = None,
                 settings: SolverSettings = SolverSettings(),
                 forcing: Callable[[float], np.ndarray] | None = None,
                 traction: Callable[[float], np.ndarray] | None = None):
        self.mesh = mesh
        self.params = params
        self.settings = settings
        self.forcing = forcing
        self.traction_fn = traction
        self.M = fem.assemble_mass(mesh, "Q2", vector=True)
        self.K = fem.assemble_anisotropic_stiffness(mesh, params.nu)
        self.C = fem.assemble_coriolis(mesh, params.f)
        self.B = fem.assemble_divergence_coupling(mesh)
        self.BT = self.B.T.tocsr()
        self.G = fem.assemble_gradient(mesh)
        self.m_p = fem.lumped_mass(mesh, "Q1")
        if grid is not None and traction is None:
            self.wind = fem.assemble_surface_traction(mesh, grid, params.wind_scale)
        else:
            self.wind = np.zeros(3 * mesh.n_q2)
        self.w_cons = VelocityConstraints(mesh, noslip=True)
        if settings.reimpose_noslip_after_correction:
            self.u_cons = self.w_cons
        else:
            self.u_cons = VelocityConstraints(mesh, noslip=False)
        if settings.projection == "consistent":
            ml = np.repeat(fem.lumped_mass(mesh, "Q2"), 3)
            self.corrector = (self.u_cons.projector() @ sp.diags(1.0 / ml) @ self.BT).tocsr()
            P = self.B @ self.corrector
            self.A_p = as_csr(0.5 * (P + P.T))
        else:
            self.corrector = None
            self.A_p = fem.assemble_pressure_laplacian(mesh)
        self.aug = make_zero_mean_system(self.A_p, self.m_p)
        self.p_precond = Preconditioner(self.A_p, settings.pressure_precond)
        dt = params.dt
        self._bdf2 = _ConstrainedSystem(1.5 / dt * self.M + self.K, self.w_cons, settings.velocity_precond)
        self._bdf1 = None
        self._mass = _ConstrainedSystem(self.M, self.u_cons, settings.velocity_precond)

    @property
    def bdf1(self) -> _ConstrainedSystem:
        if self._bdf1 is None:
            self._bdf1 = _ConstrainedSystem(self.M / self.params.dt + self.K, self.w_cons,
                                            self.settings.velocity_precond)
        return self._bdf1

    def surface_load(self, t: float) -> np.ndarray:
        # wind tension is time-constant unless a traction hook is supplied
        if self.traction_fn is not None:
            return self.traction_fn(t)
        return self.wind

    def explicit_terms(self, u: np.ndarray) -> np.ndarray:
        out = self.C @ u
        if self.settings.convection:
            out += fem.assemble_convection(self.mesh, u)
        return out

    def kinetic_energy(self, u: np.ndarray) -> float:
        return 0.5 * float(u @ (self.M @ u))


def predict_velocity(state: SimulationState, ops: Operators, params: PhysicalParams,
                     first_order: bool = False):
    """Prediction u~^{k+1} in W_h; returns (u_tilde, SolverReport)."""
    dt = params.dt
    t_new = state.t + dt
    if first_order:
        b = ops.M @ state.u_k / dt
        u_star = state.u_k
        system = ops.bdf1
    else:
        b = ops.M @ (2.0 * state.u_k - 0.5 * state.u_km1) / dt
        u_star = 2.0 * state.u_k - state.u_km1 if ops.settings.extrapolate_explicit else state.u_k
        system = ops._bdf2
    b -= ops.explicit_terms(u_star)
    b += ops.BT @ state.p_k
    b += ops.surface_load(t_new)
    if ops.forcing is not None:
        b += ops.forcing(t_new)
    s = ops.settings
    return system.solve(b, state.u_k, s.velocity_tol, s.max_iter, "velocity prediction")


def pressure_correction(u_tilde: np.ndarray, ops: Operators, params: PhysicalParams,
                        coefficient: float | None = None):
    """Zero-mean increment q with A q = -coefficient * B u~ (default 3/(2 dt))."""
    coefficient = 1.5 / params.dt if coefficient is None else coefficient
    g = -coefficient * (ops.B @ u_tilde)
    rhs = np.append(g, 0.0)
    s = ops.settings
    return solve_pressure_system(ops.aug, rhs, tol=s.pressure_tol, max_iter=s.max_iter,
                                 precond=ops.p_precond)


def update_pressure_velocity(state: SimulationState, u_tilde: np.ndarray, q: np.ndarray,
                             ops: Operators, params: PhysicalParams,
                             coefficient: float | None = None):
    """p^{k+1} = p^k + q and the mass projection of u~ - grad q / coefficient.

    With the consistent projection the velocity update is the explicit
    u~ + P M_L^{-1} B^T q / coefficient instead. Returns (new state, mass-solve report).
    """
    coefficient = 1.5 / params.dt if coefficient is None else coefficient
    p_new = state.p_k + q
    if ops.corrector is not None:
        u_new, rep = u_tilde + (ops.corrector @ q) / coefficient, SolverReport(0, 0.0, True)
    elif np.any(q):
        b = ops.M @ u_tilde - (ops.G @ q) / coefficient
        u_new, rep = ops._mass.solve(b, u_tilde, ops.settings.mass_tol, ops.settings.max_iter,
                                     "velocity correction")
    else:
        u_new, rep = u_tilde.copy(), SolverReport(0, 0.0, True)
    new = SimulationState(u_k=u_new, u_km1=state.u_k.copy(), p_k=p_new,
                          u_tilde=u_tilde, q=q, k=state.k + 1, t=state.t + params.dt)
    return new, rep


def _advance(state, ops, params, first_order):
    coefficient = (1.0 if first_order else 1.5) / params.dt
    u_tilde, vrep = predict_velocity(state, ops, params, first_order=first_order)
    q, mu, prep = pressure_correction(u_tilde, ops, params, coefficient)
    new, mrep = update_pressure_velocity(state, u_tilde, q, ops, params, coefficient)
    new.info = StepInfo(vrep.iterations, prep.iterations, mrep.iterations,
                        float(np.linalg.norm(ops.B @ new.u_k)), ops.kinetic_energy(new.u_k), float(mu))
    return new


def bootstrap(state: SimulationState, ops: Operators, params: PhysicalParams) -> SimulationState:
    """Backward-Euler first step from k = 0 to k = 1."""
    if state.k != 0:
        raise ValueError("bootstrap expects the initial state (k = 0)")
    return _advance(state, ops, params, first_order=True)


def step(state: SimulationState, ops: Operators, params: PhysicalParams) -> SimulationState:
    """One BDF2 projection step (k >= 1)."""
    if state.k < 1:
        raise ValueError("step needs k >= 1; call bootstrap first")
    return _advance(state, ops, params, first_order=False)


def advance(state: SimulationState, ops: Operators, params: PhysicalParams) -> SimulationState:
    return bootstrap(state, ops, params) if state.k == 0 else step(state, ops, params)


# -- checkpoints -----------------------------------------------------------------

_MAGIC = b"SHFLCKPT"
_VERSION = 1


def write_checkpoint(path, state: SimulationState, meta: dict | None = None) -> None:
    """Binary dump of (k, t, u_k, u_km1, p_k) behind a versioned header.

    Layout (little endian): magic[8], uint32 version, uint32 meta length,
    meta JSON, int64 k, float64 t, int64 n_u, int64 n_p, then the float64
    arrays u_k, u_km1, p_k.
    """
    blob = json.dumps(meta or {}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<qdqq", state.k, state.t, state.u_k.size, state.p_k.size))
        for arr in (state.u_k, state.u_km1, state.p_k):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_checkpoint(path) -> tuple[SimulationState, dict]:
    data = Path(path).read_bytes()
    if data[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, mlen = struct.unpack_from("<II", data, 8)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    meta = json.loads(data[off:off + mlen].decode())
    off += mlen
    k, t, n_u, n_p = struct.unpack_from("<qdqq", data, off)
    off += 32
    arrays = []
    for n in (n_u, n_u, n_p):
        arrays.append(np.frombuffer(data, dtype="<f8", count=n, offset=off).astype(float))
        off += 8 * n
    u_k, u_km1, p_k = arrays
    state = SimulationState(u_k, u_km1, p_k, u_k.copy(), np.zeros(n_p), k=k, t=t)
    return state, meta
