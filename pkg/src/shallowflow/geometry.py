"""Bathymetry rasters and the extruded hexahedral mesh of a shallow basin.

The mesh is a terrain-following extrusion: every wet raster cell becomes a
column of ``nz`` hexahedra running from the flat surface ``x3 = 0`` down to
the local depth. Velocity lives on the triquadratic (Q2) node lattice,
pressure and geometry on the trilinear (Q1) lattice.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

logger = logging.getLogger(__name__)


class MeshError(ValueError):
    pass


class GridFormatError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class FaceTag(enum.IntEnum):
    SURFACE = 1  # Gamma_s: wind traction, u3 = 0
    BOTTOM_NOSLIP = 2  # Gamma_0: seabed and coastline, u = 0
    LATERAL_SLIP = 3  # Gamma_1: open-ocean cut, u.n = 0


@dataclass
class BathymetryGrid:
    """Cell-centred raster of depths [m] and wind tensions [N/m^2].

    ``depth[i, j]`` is the depth of the cell spanning
    ``[x_origin + i*dx, x_origin + (i+1)*dx] x [y_origin + j*dy, ...]``.
    A depth of 0 marks land.
    """

    nx: int
    ny: int
    x_origin: float
    y_origin: float
    dx: float
    dy: float
    depth: np.ndarray
    tau_x: np.ndarray
    tau_y: np.ndarray

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=float)
        self.tau_x = np.asarray(self.tau_x, dtype=float)
        self.tau_y = np.asarray(self.tau_y, dtype=float)
        if self.nx < 1 or self.ny < 1:
            raise GridFormatError("nx and ny must be positive")
        if self.dx <= 0 or self.dy <= 0:
            raise GridFormatError("dx and dy must be positive")
        shape = (self.nx, self.ny)
        for name in ("depth", "tau_x", "tau_y"):
            if getattr(self, name).shape != shape:
                raise GridFormatError(
                    f"shape mismatch: {name} has shape {getattr(self, name).shape}, expected {shape}"
                )
        if np.any(self.depth < 0):
            raise GridFormatError("negative depth")
        if not np.any(self.depth > 0):
            raise GridFormatError("grid has no wet cell")

    @property
    def land(self) -> np.ndarray:
        return self.depth <= 0.0

    @property
    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        xc = self.x_origin + (np.arange(self.nx) + 0.5) * self.dx
        yc = self.y_origin + (np.arange(self.ny) + 0.5) * self.dy
        return xc, yc

    def wind_at(self, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Bilinear interpolation of the tension rasters between cell centres.

        Points outside the ring of cell centres are clamped to the nearest
        centre line, so the first/last half cell carries a constant value.
        """
        fx = np.clip((np.asarray(x, float) - self.x_origin) / self.dx - 0.5, 0.0, self.nx - 1)
        fy = np.clip((np.asarray(y, float) - self.y_origin) / self.dy - 0.5, 0.0, self.ny - 1)
        i0 = np.minimum(np.floor(fx).astype(int), max(self.nx - 2, 0))
        j0 = np.minimum(np.floor(fy).astype(int), max(self.ny - 2, 0))
        i1 = np.minimum(i0 + 1, self.nx - 1)
        j1 = np.minimum(j0 + 1, self.ny - 1)
        sx = fx - i0
        sy = fy - j0

        def interp(a):
            return ((1 - sx) * (1 - sy) * a[i0, j0] + sx * (1 - sy) * a[i1, j0]
                    + (1 - sx) * sy * a[i0, j1] + sx * sy * a[i1, j1])

        return interp(self.tau_x), interp(self.tau_y)

    @classmethod
    def uniform(cls, nx, ny, dx, dy, depth, tau_x=0.0, tau_y=0.0, x_origin=0.0, y_origin=0.0):
        full = np.full((nx, ny), 1.0)
        return cls(nx, ny, x_origin, y_origin, dx, dy, full * depth, full * tau_x, full * tau_y)


def load_bathymetry(path) -> BathymetryGrid:
    """Read the ASCII grid format.

    Layout (``#`` starts a comment line)::

        nx ny
        x_origin y_origin dx dy
        depth tau_x tau_y      # nx*ny rows, i outer, j inner
    """
    path = Path(path)
    records: list[tuple[int, list[str]]] = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            text = raw.split("#", 1)[0].strip()
            if text:
                records.append((lineno, text.split()))
    if len(records) < 2:
        raise GridFormatError("missing header lines", line=len(records) + 1)

    def numbers(rec, count, kind):
        lineno, tokens = rec
        if len(tokens) != count:
            raise GridFormatError(f"expected {count} values, found {len(tokens)}", line=lineno)
        try:
            return [kind(t) for t in tokens]
        except ValueError:
            raise GridFormatError(f"cannot parse {' '.join(tokens)!r}", line=lineno) from None

    nx, ny = numbers(records[0], 2, int)
    x0, y0, dx, dy = numbers(records[1], 4, float)
    if nx < 1 or ny < 1:
        raise GridFormatError("nx and ny must be positive", line=records[0][0])
    if dx <= 0 or dy <= 0:
        raise GridFormatError("dx and dy must be positive", line=records[1][0])
    rows = records[2:]
    if len(rows) != nx * ny:
        where = rows[-1][0] if rows else records[1][0]
        raise GridFormatError(f"shape mismatch: expected {nx * ny} data rows, found {len(rows)}", line=where)
    data = np.empty((nx * ny, 3))
    for n, rec in enumerate(rows):
        values = numbers(rec, 3, float)
        if values[0] < 0:
            raise GridFormatError("negative depth", line=rec[0])
        data[n] = values
    data = data.reshape(nx, ny, 3)
    return BathymetryGrid(nx, ny, x0, y0, dx, dy, data[..., 0], data[..., 1], data[..., 2])


def save_bathymetry(grid: BathymetryGrid, path) -> None:
    with open(path, "w") as fh:
        fh.write("# depth tau_x tau_y, i outer j inner\n")
        fh.write(f"{grid.nx} {grid.ny}\n")
        fh.write(f"{grid.x_origin:.17g} {grid.y_origin:.17g} {grid.dx:.17g} {grid.dy:.17g}\n")
        for i in range(grid.nx):
            for j in range(grid.ny):
                fh.write(f"{grid.depth[i, j]:.17g} {grid.tau_x[i, j]:.17g} {grid.tau_y[i, j]:.17g}\n")


# Local numbering: Q2 node (a, b, c) in {0,1,2}^3 -> a + 3b + 9c at reference
# point (a-1, b-1, c-1); Q1 node (a, b, c) in {0,1}^3 -> a + 2b + 4c.
# c = 0 is the lower (deeper) side of a hexahedron.
Q2_LOCAL = np.array([(a, b, c) for c in range(3) for b in range(3) for a in range(3)])
Q1_LOCAL = np.array([(a, b, c) for c in range(2) for b in range(2) for a in range(2)])

# face id -> (axis, side) of the reference cube
FACE_AXIS_SIDE = ((0, 0), (0, 1), (1, 0), (1, 1), (2, 0), (2, 1))


def _face_local_nodes(order: int) -> np.ndarray:
    local = Q2_LOCAL if order == 2 else Q1_LOCAL
    out = []
    for axis, side in FACE_AXIS_SIDE:
        out.append(np.flatnonzero(local[:, axis] == side * order))
    return np.array(out)


Q2_FACE_NODES = _face_local_nodes(2)  # (6, 9)
Q1_FACE_NODES = _face_local_nodes(1)  # (6, 4)


@dataclass
class Mesh:
    """Extruded hexahedral mesh with Q1/Q2 dof maps and boundary tags.

    ``nodes``/``hexes`` describe the trilinear geometry, which coincides with
    the Q1 pressure space (``q1_dofs is hexes``). ``q2_coords`` holds the
    coordinates of the velocity nodes.
    """

    nodes: np.ndarray  # (n_q1, 3)
    hexes: np.ndarray  # (n_elem, 8)
    q2_coords: np.ndarray  # (n_q2, 3)
    q2_dofs: np.ndarray  # (n_elem, 27)
    boundary_faces: np.ndarray  # (n_bf, 2): element, local face id
    face_tags: np.ndarray  # (n_bf,) FaceTag values
    # structured bookkeeping used for point location and slicing
    grid_shape: tuple[int, int]
    origin: tuple[float, float]
    spacing: tuple[float, float]
    nz: int
    levels: np.ndarray  # (nz+1,) fraction of local depth, 0 at surface
    vertex_depth: np.ndarray  # (nx+1, ny+1)
    column_elem: np.ndarray  # (nx, ny) first element of the column or -1
    node_normals: dict[int, np.ndarray] = field(default_factory=dict)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def q1_dofs(self) -> np.ndarray:
        return self.hexes

    @property
    def n_elem(self) -> int:
        return len(self.hexes)

    @property
    def n_q1(self) -> int:
        return len(self.nodes)

    @property
    def n_q2(self) -> int:
        return len(self.q2_coords)

    def faces_with(self, tag: FaceTag) -> np.ndarray:
        return self.boundary_faces[self.face_tags == tag]

    def tag_nodes(self, tag: FaceTag) -> np.ndarray:
        """Sorted Q2 node indices lying on faces carrying ``tag``."""
        faces = self.faces_with(tag)
        if len(faces) == 0:
            return np.zeros(0, dtype=int)
        local = Q2_FACE_NODES[faces[:, 1]]
        return np.unique(self.q2_dofs[faces[:, 0, None], local])

    def face_area_vectors(self) -> np.ndarray:
        """Outward area vectors of all boundary faces (3x3 Gauss on each face)."""
        from shallowflow.fem import face_quadrature

        fq = face_quadrature(self, self.boundary_faces)
        return np.einsum("fq,fqi->fi", fq.weights, fq.normals)

    def depth_at(self, x, y):
        """Bilinear column depth at plan position(s) (x, y)."""
        fx = (np.asarray(x, float) - self.origin[0]) / self.spacing[0]
        fy = (np.asarray(y, float) - self.origin[1]) / self.spacing[1]
        nx, ny = self.grid_shape
        i = np.clip(np.floor(fx).astype(int), 0, nx - 1)
        j = np.clip(np.floor(fy).astype(int), 0, ny - 1)
        s, t = fx - i, fy - j
        h = self.vertex_depth
        return ((1 - s) * (1 - t) * h[i, j] + s * (1 - t) * h[i + 1, j]
                + (1 - s) * t * h[i, j + 1] + s * t * h[i + 1, j + 1])


def _level_fractions(nz: int, refinement: float) -> np.ndarray:
    if refinement <= 0:
        raise MeshError("surface refinement ratio must be positive")
    if refinement == 1.0:
        return np.linspace(0.0, 1.0, nz + 1)
    thickness = refinement ** np.arange(nz)
    s = np.concatenate([[0.0], np.cumsum(thickness)])
    return s / s[-1]


def build_mesh(grid: BathymetryGrid, nz: int, min_depth: float = 10.0,
               surface_refinement: float = 1.0) -> Mesh:
    """Extrude one column of ``nz`` hexahedra below every wet cell.

    Cells shallower than ``min_depth`` become land. ``surface_refinement`` is
    the thickness ratio between consecutive layers going down (1 = uniform,
    >1 concentrates layers near the surface).
    """
    if nz < 1:
        raise MeshError("nz must be >= 1")
    nx, ny = grid.nx, grid.ny
    wet = grid.depth >= max(min_depth, np.finfo(float).tiny)
    if not wet.any():
        raise MeshError(f"no cell deeper than min_depth={min_depth}")
    labels, count = ndimage.label(wet)
    if count > 1:
        raise MeshError(f"disconnected wet region ({count} components)")

    # vertex depth: mean of the adjacent wet cells
    hsum = np.zeros((nx + 1, ny + 1))
    hcnt = np.zeros((nx + 1, ny + 1))
    dw = np.where(wet, grid.depth, 0.0)
    for di in (0, 1):
        for dj in (0, 1):
            hsum[di:di + nx, dj:dj + ny] += dw
            hcnt[di:di + nx, dj:dj + ny] += wet
    vertex_depth = np.divide(hsum, hcnt, out=np.zeros_like(hsum), where=hcnt > 0)
    levels = _level_fractions(nz, surface_refinement)

    cols = np.argwhere(wet)  # lexicographic (i, j)
    ncol = len(cols)
    column_elem = -np.ones((nx, ny), dtype=int)
    column_elem[cols[:, 0], cols[:, 1]] = np.arange(ncol) * nz
    n_elem = ncol * nz

    # lattice indices of every local node of every element
    ci = np.repeat(cols[:, 0], nz)
    cj = np.repeat(cols[:, 1], nz)
    ck = np.tile(np.arange(nz), ncol)
    NJ, NK = 2 * ny + 1, 2 * nz + 1
    I2 = 2 * ci[:, None] + Q2_LOCAL[None, :, 0]
    J2 = 2 * cj[:, None] + Q2_LOCAL[None, :, 1]
    K2 = 2 * ck[:, None] + 2 - Q2_LOCAL[None, :, 2]
    flat2 = (I2 * NJ + J2) * NK + K2
    used2, q2_dofs = np.unique(flat2, return_inverse=True)
    q2_dofs = q2_dofs.reshape(n_elem, 27)

    I1 = 2 * (ci[:, None] + Q1_LOCAL[None, :, 0])
    J1 = 2 * (cj[:, None] + Q1_LOCAL[None, :, 1])
    K1 = 2 * (ck[:, None] + 1 - Q1_LOCAL[None, :, 2])
    flat1 = (I1 * NJ + J1) * NK + K1
    used1, hexes = np.unique(flat1, return_inverse=True)
    hexes = hexes.reshape(n_elem, 8)

    def lattice_coords(flat):
        K = flat % NK
        J = (flat // NK) % NJ
        I = flat // (NK * NJ)
        x = grid.x_origin + 0.5 * I * grid.dx
        y = grid.y_origin + 0.5 * J * grid.dy
        # depth at half-lattice points is the bilinear mean of vertex depths
        h = 0.25 * (vertex_depth[I // 2, J // 2] + vertex_depth[(I + 1) // 2, J // 2]
                    + vertex_depth[I // 2, (J + 1) // 2] + vertex_depth[(I + 1) // 2, (J + 1) // 2])
        s = 0.5 * (levels[K // 2] + levels[(K + 1) // 2])
        return np.column_stack([x, y, -s * h])

    nodes = lattice_coords(used1)
    q2_coords = lattice_coords(used2)

    # boundary faces
    bf_elem, bf_face, bf_tag = [], [], []
    top = ck == 0
    bottom = ck == nz - 1
    e_all = np.arange(n_elem)
    bf_elem += [e_all[top], e_all[bottom]]
    bf_face += [np.full(top.sum(), 5), np.full(bottom.sum(), 4)]
    bf_tag += [np.full(top.sum(), FaceTag.SURFACE), np.full(bottom.sum(), FaceTag.BOTTOM_NOSLIP)]
    for face, (di, dj) in enumerate(((-1, 0), (1, 0), (0, -1), (0, 1))):
        ni, nj = ci + di, cj + dj
        outside = (ni < 0) | (ni >= nx) | (nj < 0) | (nj >= ny)
        inside_land = np.zeros(n_elem, dtype=bool)
        ok = ~outside
        inside_land[ok] = ~wet[ni[ok], nj[ok]]
        for mask, tag in ((outside, FaceTag.LATERAL_SLIP), (inside_land, FaceTag.BOTTOM_NOSLIP)):
            bf_elem.append(e_all[mask])
            bf_face.append(np.full(mask.sum(), face))
            bf_tag.append(np.full(mask.sum(), tag))
    boundary_faces = np.column_stack([np.concatenate(bf_elem), np.concatenate(bf_face)]).astype(int)
    face_tags = np.concatenate(bf_tag).astype(int)
    order = np.lexsort((boundary_faces[:, 1], boundary_faces[:, 0]))

    mesh = Mesh(
        nodes=nodes, hexes=hexes, q2_coords=q2_coords, q2_dofs=q2_dofs,
        boundary_faces=boundary_faces[order], face_tags=face_tags[order],
        grid_shape=(nx, ny), origin=(grid.x_origin, grid.y_origin), spacing=(grid.dx, grid.dy),
        nz=nz, levels=levels, vertex_depth=vertex_depth, column_elem=column_elem,
    )
    _check_jacobians(mesh)
    logger.debug("mesh: %d hexes, %d Q2 nodes, %d Q1 nodes", n_elem, mesh.n_q2, mesh.n_q1)
    return mesh


def _check_jacobians(mesh: Mesh, rel_tol: float = 1e-10) -> None:
    from shallowflow.fem import element_geometry

    geo = element_geometry(mesh)
    ext = np.ptp(mesh.nodes[mesh.hexes], axis=1)  # (n_elem, 3) bounding box
    scale = np.prod(ext, axis=1) / 8.0
    ratio = geo.detJ.min(axis=1) / scale
    if np.any(ratio <= rel_tol):
        bad = int(np.argmin(ratio))
        raise MeshError(f"degenerate Jacobian in element {bad} (relative det {ratio[bad]:.3e})")


def box_mesh(nx: int, ny: int, nz: int, lx: float = 1.0, ly: float = 1.0, depth: float = 1.0,
             tau_x: float = 0.0, tau_y: float = 0.0, land_ring: bool = False) -> tuple[BathymetryGrid, Mesh]:
    """Flat-bottom rectangular basin ``[0,lx] x [0,ly] x [-depth, 0]``.

    With ``land_ring`` a one-cell land border is added outside the box so the
    lateral walls become no-slip coast instead of open-ocean cuts.
    """
    dx, dy = lx / nx, ly / ny
    if land_ring:
        grid = BathymetryGrid.uniform(nx + 2, ny + 2, dx, dy, depth, tau_x, tau_y, -dx, -dy)
        grid.depth[[0, -1], :] = 0.0
        grid.depth[:, [0, -1]] = 0.0
    else:
        grid = BathymetryGrid.uniform(nx, ny, dx, dy, depth, tau_x, tau_y)
    mesh = build_mesh(grid, nz, min_depth=0.0)
    compute_node_normals(mesh)
    return grid, mesh


def _nodal_face_normals(mesh: Mesh, tags) -> dict[int, np.ndarray]:
    """Area-weighted sum of outward face normals at Q2 nodes of ``tags`` faces.

    Every face adds its full area vector to each of its 9 nodes.
    """
    from shallowflow.fem import face_quadrature

    mask = np.isin(mesh.face_tags, [int(t) for t in tags])
    faces = mesh.boundary_faces[mask]
    acc: dict[int, np.ndarray] = {}
    if len(faces) == 0:
        return acc
    fq = face_quadrature(mesh, faces)
    for f, (e, lf) in enumerate(faces):
        local = Q2_FACE_NODES[lf]
        area_vec = fq.weights[f] @ fq.normals[f]
        for a in local:
            node = int(mesh.q2_dofs[e, a])
            acc[node] = acc.get(node, 0.0) + area_vec
    return acc


def compute_node_normals(mesh: Mesh) -> Mesh:
    """Unit outward normals at Q2 nodes of LATERAL_SLIP faces.

    Nodes also touching a BOTTOM_NOSLIP face get no normal: the no-slip
    condition overrides the slip condition there.
    """
    raw = _nodal_face_normals(mesh, [FaceTag.LATERAL_SLIP])
    noslip = set(mesh.tag_nodes(FaceTag.BOTTOM_NOSLIP).tolist())
    normals = {}
    for node, vec in sorted(raw.items()):
        if node in noslip:
            continue
        norm = np.linalg.norm(vec)
        if norm <= 1e-12 * max(mesh.spacing) ** 2:
            raise MeshError(f"zero averaged normal at node {node} (opposing slip faces)")
        normals[node] = vec / norm
    mesh.node_normals = normals
    return mesh


def boundary_normals(mesh: Mesh) -> dict[int, np.ndarray]:
    """Averaged unit normals over Gamma_0 and Gamma_1 faces (surface excluded)."""
    raw = _nodal_face_normals(mesh, [FaceTag.BOTTOM_NOSLIP, FaceTag.LATERAL_SLIP])
    out = {}
    for node, vec in sorted(raw.items()):
        norm = np.linalg.norm(vec)
        if norm > 0:
            out[node] = vec / norm
    return out
