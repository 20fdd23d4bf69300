"""Field export, depth slices, point sampling and streamline tracing."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numba
import numpy as np

from shallowflow import fem
from shallowflow.geometry import Mesh
from shallowflow.stepper import SimulationState

# VTK hexahedron vertex order in terms of the local a + 2b + 4c numbering
_VTK_HEX = np.array([0, 1, 3, 2, 4, 5, 7, 6])
_VERTEX_IN_Q2 = np.array([2 * a + 6 * b + 18 * c for c in (0, 1) for b in (0, 1) for a in (0, 1)])


def q1_velocity(mesh: Mesh, u: np.ndarray) -> np.ndarray:
    """Velocity restricted to the geometry vertices, shape (n_q1, 3)."""
    out = np.zeros((mesh.n_q1, 3))
    out[mesh.hexes.ravel()] = u.reshape(-1, 3)[mesh.q2_dofs[:, _VERTEX_IN_Q2].ravel()]
    return out


def write_vtk(mesh: Mesh, state: SimulationState, path, title: str = "shallowflow") -> Path:
    """Legacy ASCII VTK 3.0 unstructured grid with velocity and pressure."""
    path = Path(path)
    vel = q1_velocity(mesh, state.u_k)
    lines = ["# vtk DataFile Version 3.0", f"{title} k={state.k} t={state.t!r}", "ASCII",
             "DATASET UNSTRUCTURED_GRID", f"POINTS {mesh.n_q1} double"]
    lines += [f"{x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.nodes + 0.0]
    cells = mesh.hexes[:, _VTK_HEX]
    lines.append(f"CELLS {mesh.n_elem} {9 * mesh.n_elem}")
    lines += ["8 " + " ".join(map(str, c)) for c in cells]
    lines.append(f"CELL_TYPES {mesh.n_elem}")
    lines += ["12"] * mesh.n_elem
    lines += [f"POINT_DATA {mesh.n_q1}", "VECTORS velocity double"]
    lines += [f"{a:.17g} {b:.17g} {c:.17g}" for a, b, c in vel]
    lines += ["SCALARS pressure double 1", "LOOKUP_TABLE default"]
    lines += [f"{v:.17g}" for v in state.p_k]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_vtk_point_data(path) -> dict[str, np.ndarray]:
    """Parse the POINTS and POINT_DATA arrays back from a file written above."""
    tokens = Path(path).read_text().split("\n")
    out: dict[str, np.ndarray] = {}
    i = 0
    while i < len(tokens):
        head = tokens[i].split()
        if head and head[0] == "POINTS":
            n = int(head[1])
            out["points"] = np.array([[float(v) for v in tokens[i + 1 + r].split()] for r in range(n)])
            i += n
        elif head and head[0] == "POINT_DATA":
            n = int(head[1])
        elif head and head[0] == "VECTORS":
            out[head[1]] = np.array([[float(v) for v in tokens[i + 1 + r].split()] for r in range(n)])
            i += n
        elif head and head[0] == "SCALARS":
            out[head[1]] = np.array([float(tokens[i + 2 + r]) for r in range(n)])
            i += n + 1
        i += 1
    return out


@numba.njit(cache=True)
def _sample(pts, x0, y0, dx, dy, column_elem, vdepth, levels, q2_dofs, u, out):
    nx, ny = column_elem.shape
    nz = len(levels) - 1
    tol = 1e-12
    for p in range(pts.shape[0]):
        out[p, :] = np.nan
        fx = (pts[p, 0] - x0) / dx
        fy = (pts[p, 1] - y0) / dy
        if fx < -tol or fx > nx + tol or fy < -tol or fy > ny + tol:
            continue
        i = min(max(int(np.floor(fx)), 0), nx - 1)
        j = min(max(int(np.floor(fy)), 0), ny - 1)
        e0 = column_elem[i, j]
        if e0 < 0:
            continue
        s_, t_ = fx - i, fy - j
        h = ((1 - s_) * (1 - t_) * vdepth[i, j] + s_ * (1 - t_) * vdepth[i + 1, j]
             + (1 - s_) * t_ * vdepth[i, j + 1] + s_ * t_ * vdepth[i + 1, j + 1])
        if h <= 0:
            continue
        frac = -pts[p, 2] / h
        if frac < -tol or frac > 1 + tol:
            continue
        frac = min(max(frac, 0.0), 1.0)
        k = 0
        while k < nz - 1 and levels[k + 1] <= frac:
            k += 1
        xi = (min(max(2 * s_ - 1, -1.0), 1.0), min(max(2 * t_ - 1, -1.0), 1.0),
              min(max(1 - 2 * (frac - levels[k]) / (levels[k + 1] - levels[k]), -1.0), 1.0))
        L = np.empty((3, 3))
        for d in range(3):
            x = xi[d]
            L[d, 0] = 0.5 * x * (x - 1)
            L[d, 1] = 1 - x * x
            L[d, 2] = 0.5 * x * (x + 1)
        e = e0 + k
        acc0 = acc1 = acc2 = 0.0
        for c in range(3):
            for b in range(3):
                for a in range(3):
                    w = L[0, a] * L[1, b] * L[2, c]
                    node = q2_dofs[e, a + 3 * b + 9 * c]
                    acc0 += w * u[node, 0]
                    acc1 += w * u[node, 1]
                    acc2 += w * u[node, 2]
        out[p, 0] = acc0
        out[p, 1] = acc1
        out[p, 2] = acc2


class VelocitySampler:
    """Evaluate a Q2 velocity field at arbitrary points; NaN outside the domain.

    Point location is O(1): the plan position gives the column through the
    structured raster and the fraction of local depth gives the layer.
    """

    def __init__(self, mesh: Mesh, u: np.ndarray):
        self.mesh = mesh
        self.u = np.ascontiguousarray(np.asarray(u, float).reshape(-1, 3))
        self._args = (float(mesh.origin[0]), float(mesh.origin[1]), float(mesh.spacing[0]),
                      float(mesh.spacing[1]), np.ascontiguousarray(mesh.column_elem, dtype=np.int64),
                      np.ascontiguousarray(mesh.vertex_depth, dtype=float),
                      np.ascontiguousarray(mesh.levels, dtype=float),
                      np.ascontiguousarray(mesh.q2_dofs, dtype=np.int64))

    def __call__(self, points) -> np.ndarray:
        pts = np.ascontiguousarray(np.atleast_2d(np.asarray(points, float)))
        out = np.empty((len(pts), 3))
        _sample(pts, *self._args, self.u, out)
        return out

    def contains(self, point) -> bool:
        return bool(np.isfinite(self(point)[0, 0]))


@dataclass
class DepthSlice:
    depth: float
    x: np.ndarray
    y: np.ndarray
    u1: np.ndarray  # NaN where the column is shallower than ``depth``
    u2: np.ndarray

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.u1)


def depth_slice(mesh: Mesh, state: SimulationState | np.ndarray, depth: float) -> DepthSlice:
    """Horizontal velocity on the plane x3 = -depth at the Q2 plan nodes."""
    if depth < 0:
        raise ValueError("depth must be non-negative")
    u = state.u_k if isinstance(state, SimulationState) else state
    top = np.isclose(mesh.q2_coords[:, 2], 0.0, atol=0.0)
    plan = np.unique(np.round(mesh.q2_coords[top, :2], 12), axis=0)
    h = mesh.depth_at(plan[:, 0], plan[:, 1])
    pts = np.column_stack([plan, np.full(len(plan), -float(depth))])
    vals = np.full((len(plan), 3), np.nan)
    ok = h >= depth
    if ok.any():
        # points on the seabed or between columns still locate into a wet column
        vals[ok] = VelocitySampler(mesh, u)(pts[ok])
    return DepthSlice(float(depth), plan[:, 0], plan[:, 1], vals[:, 0], vals[:, 1])


@dataclass
class Streamline:
    points: np.ndarray  # (n, 3)
    times: np.ndarray  # (n,) cumulative travel time
    velocities: np.ndarray  # (n, 3)
    reason: str  # "t_max", "exit" or "stagnation"

    @property
    def travel_time(self) -> float:
        return float(self.times[-1])

    @property
    def length(self) -> float:
        return float(np.linalg.norm(np.diff(self.points, axis=0), axis=1).sum())


def trace_streamline(sampler: Callable, seed, dt_trace: float, t_max: float) -> Streamline:
    """Classical RK4 on a frozen field from ``seed`` until t_max or domain exit.

    ``sampler`` maps points (n, 3) to velocities (n, 3) and returns NaN for
    points outside the domain.
    """
    if dt_trace <= 0 or t_max < 0:
        raise ValueError("dt_trace must be positive and t_max non-negative")
    x = np.asarray(seed, float).reshape(3)

    def vel(p):
        v = np.asarray(sampler(p[None, :]), float).reshape(3)
        return v if np.all(np.isfinite(v)) else None

    v = vel(x)
    if v is None:
        raise ValueError(f"seed {x.tolist()} is outside the domain")
    pts, times, vels = [x.copy()], [0.0], [v]
    reason = "t_max"
    n_steps = int(np.ceil(t_max / dt_trace - 1e-12))
    if t_max > 0:
        n_steps = max(n_steps, 1)
    for n in range(n_steps):
        if not np.any(v):
            reason = "stagnation"
            break
        h = min(dt_trace, t_max - n * dt_trace)
        k1 = v
        k2 = vel(x + 0.5 * h * k1)
        k3 = vel(x + 0.5 * h * k2) if k2 is not None else None
        k4 = vel(x + h * k3) if k3 is not None else None
        if k4 is None:
            reason = "exit"
            break
        x_new = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        v_new = vel(x_new)
        if v_new is None:
            reason = "exit"
            break
        x, v = x_new, v_new
        t = (n + 1) * dt_trace if n + 1 < n_steps else float(t_max)
        pts.append(x.copy())
        times.append(t)
        vels.append(v)
    return Streamline(np.array(pts), np.array(times), np.array(vels), reason)


def section_fluxes(mesh: Mesh, u: np.ndarray, axis: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Net volume flux and absolute flux through every vertical raster line.

    For axis 0 the sections are the planes x = x_i, i = 0..nx; the integral of
    u.e_x (resp. |u.e_x|) is taken with 3x3 Gauss points on the element faces
    lying in the plane.
    """
    nx, ny = mesh.grid_shape
    n_lines = (nx if axis == 0 else ny) + 1
    lo_face, hi_face = (0, 1) if axis == 0 else (2, 3)
    ue = u.reshape(-1, 3)
    net, absolute = np.zeros(n_lines), np.zeros(n_lines)
    wet = mesh.column_elem >= 0
    for line in range(n_lines):
        faces = []
        for other in range(ny if axis == 0 else nx):
            ij_hi = (line, other) if axis == 0 else (other, line)
            ij_lo = (line - 1, other) if axis == 0 else (other, line - 1)
            if line < n_lines - 1 and wet[ij_hi]:
                e0, face = mesh.column_elem[ij_hi], lo_face
            elif line > 0 and wet[ij_lo]:
                e0, face = mesh.column_elem[ij_lo], hi_face
            else:
                continue
            faces += [(e0 + k, face) for k in range(mesh.nz)]
        if not faces:
            continue
        fq = fem.face_quadrature(mesh, np.array(faces))
        uq = np.einsum("fqa,fac->fqc", fq.N2, ue[mesh.q2_dofs[fq.elements]])
        # the faces lie in the plane, so u.e_axis is the flux density along +axis
        un = uq[..., axis]
        net[line] = np.einsum("fq,fq->", fq.weights, un)
        absolute[line] = np.einsum("fq,fq->", fq.weights, np.abs(un))
    return net, absolute


def write_slice_csv(sl: DepthSlice, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "u1", "u2"])
        for row in zip(sl.x, sl.y, sl.u1, sl.u2):
            w.writerow(["" if not np.isfinite(v) else repr(float(v)) for v in row])
    return path


def write_streamline_csv(lines: list[Streamline], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["line", "x", "y", "z", "u1", "u2", "u3", "t"])
        for idx, sl in enumerate(lines):
            for p, v, t in zip(sl.points, sl.velocities, sl.times):
                w.writerow([idx, *map(repr, map(float, p)), *map(repr, map(float, v)), repr(float(t))])
    return path


def read_seeds(path) -> np.ndarray:
    """Seed points from a CSV with columns x, y, z (header optional)."""
    rows = []
    with open(path) as fh:
        for rec in csv.reader(fh):
            if not rec or rec[0].strip().startswith("#"):
                continue
            try:
                rows.append([float(v) for v in rec[:3]])
            except ValueError:
                if rows:
                    raise
    if not rows:
        raise ValueError(f"{path}: no seed points")
    return np.array(rows)
