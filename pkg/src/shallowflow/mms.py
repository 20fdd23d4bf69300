"""Manufactured solutions and convergence studies.

Closed-form derivatives are written out by hand; ``tests/test_mms.py``
re-derives every one of them with sympy.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from shallowflow import fem
from shallowflow.constraints import VelocityConstraints
from shallowflow.geometry import FaceTag, box_mesh
from shallowflow.linalg import pcg_solve, Preconditioner, Precond
from shallowflow.stepper import Operators, PhysicalParams, SimulationState, SolverSettings, advance

logger = logging.getLogger(__name__)

PI = np.pi


def _traction(grad_u, p, nu, normals):
    """sum_j nu_j n_j d_j u - p n at face points."""
    nu = np.asarray(nu, float)
    t = np.einsum("...cj,j,...j->...c", grad_u, nu, normals)
    if p is not None:
        t = t - p[..., None] * normals
    return t


class TrigDiffusion:
    """Smooth steady field on [0,1]^2 x [-H,0] for the vector diffusion problem.

    u1 = sin(pi x) cos(pi y) c(z), u2 = cos(pi x) sin(pi y) c(z),
    u3 = cos(pi x) cos(pi y) s(z), with c(z) = sin(pi (z+H)/(2H)) and
    s(z) = -4 z (z+H) / H^2. It vanishes on the seabed, has u.n = 0 and zero
    tangential normal-derivative on the lateral walls, and u3 = 0 at z = 0.
    """

    def __init__(self, depth: float = 0.5):
        self.H = depth

    def _parts(self, x):
        X, Y, Z = x[..., 0], x[..., 1], x[..., 2]
        H = self.H
        kc = PI / (2 * H)
        sx, cx = np.sin(PI * X), np.cos(PI * X)
        sy, cy = np.sin(PI * Y), np.cos(PI * Y)
        c, dc = np.sin(kc * (Z + H)), kc * np.cos(kc * (Z + H))
        s, ds = -4 * Z * (Z + H) / H**2, -4 * (2 * Z + H) / H**2
        return sx, cx, sy, cy, c, dc, s, ds, kc, -8 / H**2

    def velocity(self, x):
        sx, cx, sy, cy, c, dc, s, ds, kc, ks = self._parts(x)
        return np.stack([sx * cy * c, cx * sy * c, cx * cy * s], axis=-1)

    def grad(self, x):
        sx, cx, sy, cy, c, dc, s, ds, kc, ks = self._parts(x)
        g = np.empty(x.shape[:-1] + (3, 3))
        g[..., 0, :] = np.stack([PI * cx * cy * c, -PI * sx * sy * c, sx * cy * dc], -1)
        g[..., 1, :] = np.stack([-PI * sx * sy * c, PI * cx * cy * c, cx * sy * dc], -1)
        g[..., 2, :] = np.stack([-PI * sx * cy * s, -PI * cx * sy * s, cx * cy * ds], -1)
        return g

    def forcing(self, x, nu):
        """-Delta_nu u."""
        sx, cx, sy, cy, c, dc, s, ds, kc, dds = self._parts(x)
        n1, n2, n3 = nu
        u = self.velocity(x)
        lap = np.empty_like(u)
        lap[..., 0] = -(n1 * PI**2 + n2 * PI**2 + n3 * kc**2) * u[..., 0]
        lap[..., 1] = -(n1 * PI**2 + n2 * PI**2 + n3 * kc**2) * u[..., 1]
        lap[..., 2] = -(n1 * PI**2 + n2 * PI**2) * u[..., 2] + n3 * cx * cy * dds
        return -lap


class PolynomialGyre:
    """Divergence-free field that lies in the Q2/Q1 spaces on [0,1]^2 x [-1,0].

    u = g(t) U, p = g(t) P with stream function x(1-x) y(1-y) times (1+z):
    U = (x(1-x)(1-2y)(1+z), -(1-2x) y(1-y)(1+z), 0), P = (x-1/2)(y-1/2),
    g(t) = sin(omega t), so u(0) = 0.
    """

    def __init__(self, omega: float = 2.0, amplitude: float = 1.0):
        self.omega = omega
        self.amp = amplitude

    def g(self, t):
        return self.amp * np.sin(self.omega * t)

    def dg(self, t):
        return self.amp * self.omega * np.cos(self.omega * t)

    def U(self, x):
        X, Y, Z = x[..., 0], x[..., 1], x[..., 2]
        h = 1 + Z
        return np.stack([X * (1 - X) * (1 - 2 * Y) * h, -(1 - 2 * X) * Y * (1 - Y) * h, 0 * X], -1)

    def gradU(self, x):
        X, Y, Z = x[..., 0], x[..., 1], x[..., 2]
        h = 1 + Z
        z0 = 0 * X
        g = np.empty(x.shape[:-1] + (3, 3))
        g[..., 0, :] = np.stack([(1 - 2 * X) * (1 - 2 * Y) * h, -2 * X * (1 - X) * h,
                                 X * (1 - X) * (1 - 2 * Y)], -1)
        g[..., 1, :] = np.stack([2 * Y * (1 - Y) * h, -(1 - 2 * X) * (1 - 2 * Y) * h,
                                 -(1 - 2 * X) * Y * (1 - Y)], -1)
        g[..., 2, :] = np.stack([z0, z0, z0], -1)
        return g

    def lapU(self, x, nu):
        X, Y, Z = x[..., 0], x[..., 1], x[..., 2]
        h = 1 + Z
        return np.stack([-2 * nu[0] * (1 - 2 * Y) * h, 2 * nu[1] * (1 - 2 * X) * h, 0 * X], -1)

    def P(self, x):
        return (x[..., 0] - 0.5) * (x[..., 1] - 0.5)

    def gradP(self, x):
        X, Y = x[..., 0], x[..., 1]
        return np.stack([Y - 0.5, X - 0.5, 0 * X], -1)

    def velocity(self, x, t):
        return self.g(t) * self.U(x)

    def pressure(self, x, t):
        return self.g(t) * self.P(x)

    def forcing(self, x, t, nu, f=0.0, convection=True):
        """u_t + (u.grad)u - Delta_nu u + 2 omega x u + grad p."""
        g = self.g(t)
        U = self.U(x)
        F = self.dg(t) * U - g * self.lapU(x, nu) + g * self.gradP(x)
        if convection:
            F = F + g * g * np.einsum("...j,...cj->...c", U, self.gradU(x))
        if f:
            F = F + g * f * np.stack([-U[..., 1], U[..., 0], 0 * U[..., 0]], -1)
        return F

    def traction(self, points, normals, t, nu):
        return self.g(t) * _traction(self.gradU(points), self.P(points), nu, normals)


@dataclass
class ConvergenceRow:
    level: int
    h: float
    dt: float
    velocity_error: float
    pressure_error: float = float("nan")
    velocity_order: float = float("nan")
    pressure_order: float = float("nan")


@dataclass
class ConvergenceReport:
    mode: str
    rows: list[ConvergenceRow] = field(default_factory=list)

    def orders(self) -> list[float]:
        return [r.velocity_order for r in self.rows[1:]]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["level", "h", "dt", "velocity_l2", "pressure_l2", "velocity_order", "pressure_order"])
            for r in self.rows:
                w.writerow([r.level, repr(r.h), repr(r.dt), repr(r.velocity_error), repr(r.pressure_error),
                            repr(r.velocity_order), repr(r.pressure_order)])

    def format(self) -> str:
        lines = [f"{self.mode} convergence", f"{'h':>10} {'dt':>10} {'|e_u|':>12} {'order':>7} {'|e_p|':>12} {'order':>7}"]
        for r in self.rows:
            lines.append(f"{r.h:10.4g} {r.dt:10.4g} {r.velocity_error:12.4e} {r.velocity_order:7.3f} "
                         f"{r.pressure_error:12.4e} {r.pressure_order:7.3f}")
        return "\n".join(lines)


def _fill_orders(rows: list[ConvergenceRow], by: str) -> None:
    for prev, row in zip(rows, rows[1:]):
        ratio = getattr(prev, by) / getattr(row, by)
        row.velocity_order = float(np.log(prev.velocity_error / row.velocity_error) / np.log(ratio))
        if np.isfinite(row.pressure_error) and row.pressure_error > 0:
            row.pressure_order = float(np.log(prev.pressure_error / row.pressure_error) / np.log(ratio))


def solve_steady_diffusion(n: int, nu=(1.0, 1.0, 0.1), depth: float = 0.5, nz: int | None = None,
                           tol: float = 1e-12):
    """Vector diffusion K u = F with all strong conditions, on an n x n x n/2 mesh."""
    sol = TrigDiffusion(depth)
    nz = max(1, n // 2) if nz is None else nz
    grid, mesh = box_mesh(n, n, nz, 1.0, 1.0, depth)
    K = fem.assemble_anisotropic_stiffness(mesh, nu)
    b = fem.assemble_volume_load(mesh, lambda x: sol.forcing(x, nu))
    b += fem.assemble_face_load(mesh, [FaceTag.SURFACE, FaceTag.LATERAL_SLIP],
                                lambda pts, nrm: _traction(sol.grad(pts), None, nu, nrm))
    cons = VelocityConstraints(mesh)
    Kc, bc = cons.apply(K, b)
    w, rep = pcg_solve(Kc, bc, Preconditioner(Kc, Precond.IC0), tol=tol)
    u = cons.recover(w)
    return mesh, u, sol, rep


def spatial_study(levels=(2, 4, 8), nu=(1.0, 1.0, 0.1), depth: float = 0.5) -> ConvergenceReport:
    """h-refinement of the steady Q2 diffusion problem (finest n x n x n/2)."""
    report = ConvergenceReport("spatial")
    for lev, n in enumerate(levels):
        mesh, u, sol, _ = solve_steady_diffusion(n, nu, depth)
        err = fem.l2_error(mesh, u, sol.velocity)
        report.rows.append(ConvergenceRow(lev, 1.0 / n, float("nan"), err))
        logger.info("spatial level n=%d: |e_u| = %.4e", n, err)
    _fill_orders(report.rows, "h")
    return report


def run_gyre(n_steps: int, T: float = 1.0, n: int = 4, nz: int = 2, nu=(1.0, 1.0, 1.0), f: float = 0.0,
             convection: bool = False, settings: SolverSettings | None = None,
             solution: PolynomialGyre | None = None, states: list | None = None):
    """Integrate the polynomial gyre to time T with the projection scheme."""
    sol = solution or PolynomialGyre()
    _, mesh = box_mesh(n, n, nz, 1.0, 1.0, 1.0)
    dt = T / n_steps
    params = PhysicalParams(nu=nu, f=f, dt=dt, t_final=T)
    settings = settings or SolverSettings(velocity_tol=1e-13, pressure_tol=1e-13, mass_tol=1e-13,
                                          convection=convection)

    def forcing(t):
        return fem.assemble_volume_load(mesh, lambda x: sol.forcing(x, t, nu, f, settings.convection))

    def traction(t):
        return fem.assemble_face_load(mesh, [FaceTag.SURFACE, FaceTag.LATERAL_SLIP],
                                      lambda pts, nrm: sol.traction(pts, nrm, t, nu))

    ops = Operators(mesh, params, None, settings, forcing=forcing, traction=traction)
    state = SimulationState.at_rest(mesh)
    for _ in range(n_steps):
        state = advance(state, ops, params)
        if states is not None:
            states.append(state)
    return mesh, state, sol, ops


def temporal_study(divisions=(8, 16, 32), T: float = 1.0, n: int = 4, nz: int = 2,
                   nu=(0.1, 0.1, 0.02), f: float = 0.0, convection: bool = False,
                   extrapolate: bool = False) -> ConvergenceReport:
    """dt-refinement on the polynomial gyre; spatial error is zero by construction.

    The reported error is the maximum over all time levels of the L2 error,
    which is less sensitive to the phase of g(t) at T than the final value.
    """
    report = ConvergenceReport("temporal")
    settings = SolverSettings(velocity_tol=1e-13, pressure_tol=1e-13, mass_tol=1e-13,
                              convection=convection, extrapolate_explicit=extrapolate)
    for lev, m in enumerate(divisions):
        states: list = []
        mesh, _, sol, _ = run_gyre(m, T, n, nz, nu, f, convection, settings, states=states)
        eu = max(fem.l2_error(mesh, s.u_k, lambda x, t=s.t: sol.velocity(x, t)) for s in states)
        ep = max(fem.l2_error_q1(mesh, s.p_k, lambda x, t=s.t: sol.pressure(x, t)) for s in states)
        report.rows.append(ConvergenceRow(lev, 1.0 / n, T / m, eu, ep))
        logger.info("temporal level dt=T/%d: |e_u| = %.4e |e_p| = %.4e", m, eu, ep)
    _fill_orders(report.rows, "dt")
    return report
