"""Aspect-ratio scaling of the viscosity and wind, and a hydrostatic diagnostic.

For a basin of depth h = eps * d the anisotropic tensor is
nu = (lambda1, lambda2, eps^2 lambda3) and the surface tension in scaled
variables is Theta = theta / eps.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from shallowflow import fem
from shallowflow.geometry import FaceTag, Mesh, box_mesh
from shallowflow.stepper import (SECONDS_PER_MONTH, SECONDS_PER_YEAR, Operators, PhysicalParams,
                                 SimulationState, SolverSettings, advance)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScalingParams:
    epsilon: float
    lambda_: tuple[float, float, float]
    theta: tuple[float, float] = (0.0, 0.0)
    f: float = 0.0
    dt: float = SECONDS_PER_MONTH
    t_final: float = 100 * SECONDS_PER_YEAR

    def __post_init__(self):
        if not (0.0 < self.epsilon <= 1.0):
            raise ValueError(f"epsilon must lie in (0, 1], got {self.epsilon}")
        lam = tuple(float(v) for v in self.lambda_)
        if len(lam) != 3 or min(lam) <= 0:
            raise ValueError("lambda must be 3 positive values")
        object.__setattr__(self, "lambda_", lam)


def scaled_viscosity(epsilon: float, lambda_) -> tuple[float, float, float]:
    l1, l2, l3 = lambda_
    return (float(l1), float(l2), float(epsilon) ** 2 * float(l3))


def make_scaled_params(s: ScalingParams, wind_scale: float = 1.0) -> PhysicalParams:
    """PhysicalParams with nu = (l1, l2, eps^2 l3); Theta = theta/eps is recorded."""
    if s.epsilon <= 0:
        raise ValueError("epsilon must be positive")
    tension = (s.theta[0] / s.epsilon, s.theta[1] / s.epsilon)
    return PhysicalParams(nu=scaled_viscosity(s.epsilon, s.lambda_), f=s.f, dt=s.dt,
                          t_final=s.t_final, wind_scale=wind_scale, scaled_tension=tension)


def hydrostatic_residual(state: SimulationState | np.ndarray, mesh: Mesh) -> float:
    """||dp/dx3|| / ||grad p|| in L2 over the domain, 0 when grad p vanishes."""
    p = state.p_k if isinstance(state, SimulationState) else np.asarray(state, float)
    geo = fem.element_geometry(mesh)
    g = np.einsum("eqaj,ea->eqj", geo.grad1, p[mesh.q1_dofs])
    sq = np.einsum("eq,eqj->j", geo.wdet, g * g)
    total = sq.sum()
    if total <= 0.0:
        return 0.0
    return float(np.sqrt(min(sq[2] / total, 1.0)))


@dataclass
class HydrostaticPoint:
    epsilon: float
    residual: float
    steps: int
    kinetic_energy: float


def wind_driven_basin(epsilon: float, n: int = 6, nz: int = 3, lambda_=(1.0, 1.0, 1.0),
                      big_theta: float = 1.0, f: float = 0.0, dt: float = 0.25, steps: int = 40,
                      settings: SolverSettings | None = None) -> tuple[Mesh, SimulationState]:
    """Unit-square basin of depth eps driven by a zonal wind theta = eps * Theta.

    The wind profile is -cos(pi y) so the basin spins up a single gyre; the
    run is long enough (in units of the horizontal diffusion time) to reach
    a near-steady state.
    """
    s = ScalingParams(epsilon, lambda_, (epsilon * big_theta, 0.0), f=f, dt=dt, t_final=dt * steps)
    params = make_scaled_params(s)
    _, mesh = box_mesh(n, n, nz, 1.0, 1.0, epsilon, land_ring=False)
    settings = settings or SolverSettings(velocity_tol=1e-10, pressure_tol=1e-10, mass_tol=1e-12,
                                          convection=False)
    theta = s.theta[0]
    wind = fem.assemble_face_load(
        mesh, [FaceTag.SURFACE],
        lambda pts, nrm: np.stack([-theta * np.cos(np.pi * pts[..., 1]), 0 * pts[..., 0], 0 * pts[..., 0]], -1))

    ops = Operators(mesh, params, None, settings, traction=lambda t: wind)
    state = SimulationState.at_rest(mesh)
    for _ in range(steps):
        state = advance(state, ops, params)
    return mesh, state


def hydrostatic_trend(epsilons=(1.0, 0.3, 0.1), **kwargs) -> list[HydrostaticPoint]:
    out = []
    for eps in epsilons:
        mesh, state = wind_driven_basin(eps, **kwargs)
        r = hydrostatic_residual(state, mesh)
        out.append(HydrostaticPoint(eps, r, state.k, state.info.kinetic_energy))
        logger.info("eps = %g: hydrostatic residual %.4e", eps, r)
    return out
