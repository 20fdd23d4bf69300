"""Q1/Q2 hexahedral elements, Gauss quadrature and operator assembly.

Velocity dofs are interleaved: component ``c`` of Q2 node ``n`` is dof
``3*n + c``. All element loops are vectorised over elements; global
matrices are summed from COO triplets into ``scipy.sparse.csr_matrix``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from shallowflow.geometry import FACE_AXIS_SIDE, Q1_LOCAL, Q2_LOCAL, BathymetryGrid, FaceTag, Mesh, MeshError

CsrMatrix = sp.csr_matrix

_GAUSS_1D = {
    2: (np.array([-1.0, 1.0]) / np.sqrt(3.0), np.array([1.0, 1.0])),
    3: (np.array([-np.sqrt(0.6), 0.0, np.sqrt(0.6)]), np.array([5.0, 8.0, 5.0]) / 9.0),
}


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray  # (n, dim) in [-1, 1]^dim
    weights: np.ndarray  # (n,)


def quadrature_rule(order: int, dim: int = 3) -> QuadratureRule:
    """Tensor Gauss-Legendre rule with ``order`` points per direction."""
    if order not in _GAUSS_1D:
        raise ValueError(f"unsupported quadrature order {order}; use 2 or 3")
    x, w = _GAUSS_1D[order]
    grids = np.meshgrid(*([x] * dim), indexing="ij")
    wgrids = np.meshgrid(*([w] * dim), indexing="ij")
    # first coordinate varies fastest
    pts = np.column_stack([g.transpose().ravel() for g in grids])
    wts = np.prod([g.transpose().ravel() for g in wgrids], axis=0)
    return QuadratureRule(pts, wts)


def _lagrange_1d(nodes: np.ndarray, x: np.ndarray):
    """Values and derivatives of the 1D Lagrange basis on ``nodes`` at ``x``."""
    x = np.asarray(x, float)
    n = len(nodes)
    val = np.ones((len(x), n))
    der = np.zeros((len(x), n))
    for i in range(n):
        others = [j for j in range(n) if j != i]
        denom = np.prod([nodes[i] - nodes[j] for j in others])
        for j in others:
            val[:, i] *= x - nodes[j]
        for k in others:
            term = np.ones(len(x))
            for j in others:
                if j != k:
                    term *= x - nodes[j]
            der[:, i] += term
        val[:, i] /= denom
        der[:, i] /= denom
    return val, der


@dataclass(frozen=True)
class ReferenceElement:
    kind: str  # "Q1" or "Q2"

    @property
    def degree(self) -> int:
        return 1 if self.kind == "Q1" else 2

    @property
    def n_basis(self) -> int:
        return (self.degree + 1) ** 3

    @property
    def local(self) -> np.ndarray:
        return Q1_LOCAL if self.kind == "Q1" else Q2_LOCAL

    @property
    def node_points(self) -> np.ndarray:
        return -1.0 + 2.0 * self.local / self.degree

    def _factors(self, xi):
        xi = np.atleast_2d(np.asarray(xi, float))
        nodes1d = np.linspace(-1.0, 1.0, self.degree + 1)
        return [_lagrange_1d(nodes1d, xi[:, d]) for d in range(3)]

    def eval(self, xi) -> np.ndarray:
        """Basis values, shape (n_points, n_basis)."""
        f = self._factors(xi)
        a, b, c = self.local.T
        return f[0][0][:, a] * f[1][0][:, b] * f[2][0][:, c]

    def grad(self, xi) -> np.ndarray:
        """Reference gradients, shape (n_points, n_basis, 3)."""
        f = self._factors(xi)
        a, b, c = self.local.T
        v0, d0 = f[0][0][:, a], f[0][1][:, a]
        v1, d1 = f[1][0][:, b], f[1][1][:, b]
        v2, d2 = f[2][0][:, c], f[2][1][:, c]
        return np.stack([d0 * v1 * v2, v0 * d1 * v2, v0 * v1 * d2], axis=-1)


Q1 = ReferenceElement("Q1")
Q2 = ReferenceElement("Q2")


def q2_basis(xi):
    return Q2.eval(xi)


@dataclass
class ElementGeometry:
    weights: np.ndarray  # (nq,)
    N1: np.ndarray  # (nq, 8)
    N2: np.ndarray  # (nq, 27)
    detJ: np.ndarray  # (ne, nq)
    wdet: np.ndarray  # (ne, nq)
    grad1: np.ndarray  # (ne, nq, 8, 3) physical gradients
    grad2: np.ndarray  # (ne, nq, 27, 3)
    xq: np.ndarray  # (ne, nq, 3) physical quadrature points


def _jacobian(X: np.ndarray, dN1: np.ndarray):
    """J[e,q,i,j] = dx_i/dxi_j for vertex coords X (ne, 8, 3)."""
    return np.einsum("eai,qaj->eqij", X, dN1)


def geometry_from_vertices(X: np.ndarray, order: int = 3) -> ElementGeometry:
    """Quadrature data for hexahedra with vertex coordinates ``X`` (ne, 8, 3)."""
    rule = quadrature_rule(order)
    N1 = Q1.eval(rule.points)
    N2 = Q2.eval(rule.points)
    dN1 = Q1.grad(rule.points)
    dN2 = Q2.grad(rule.points)
    J = _jacobian(X, dN1)
    detJ = np.linalg.det(J)
    if np.any(detJ <= 0):
        raise MeshError("non-positive Jacobian determinant")
    invJ = np.linalg.inv(J)
    grad1 = np.einsum("eqji,qaj->eqai", invJ, dN1)
    grad2 = np.einsum("eqji,qaj->eqai", invJ, dN2)
    xq = np.einsum("qa,eai->eqi", N1, X)
    return ElementGeometry(rule.weights, N1, N2, detJ, detJ * rule.weights, grad1, grad2, xq)


def element_geometry(mesh: Mesh) -> ElementGeometry:
    geo = mesh._cache.get("geometry")
    if geo is None:
        geo = geometry_from_vertices(mesh.nodes[mesh.hexes])
        mesh._cache["geometry"] = geo
    return geo


@dataclass
class FaceQuadrature:
    elements: np.ndarray  # (nf,)
    weights: np.ndarray  # (nf, nq) reference weights times |area density|
    normals: np.ndarray  # (nf, nq, 3) unit outward normals
    points: np.ndarray  # (nf, nq, 3)
    N2: np.ndarray  # (nf, nq, 27)


def face_quadrature(mesh: Mesh, faces: np.ndarray, order: int = 3) -> FaceQuadrature:
    """3x3 Gauss rule on boundary faces given as (element, local face) rows."""
    faces = np.asarray(faces, dtype=int).reshape(-1, 2)
    rule2 = quadrature_rule(order, dim=2)
    nq = len(rule2.weights)
    nf = len(faces)
    weights = np.zeros((nf, nq))
    normals = np.zeros((nf, nq, 3))
    points = np.zeros((nf, nq, 3))
    N2 = np.zeros((nf, nq, 27))
    for lf, (axis, side) in enumerate(FACE_AXIS_SIDE):
        sel = np.flatnonzero(faces[:, 1] == lf)
        if len(sel) == 0:
            continue
        free = [d for d in range(3) if d != axis]
        xi = np.zeros((nq, 3))
        xi[:, axis] = 2.0 * side - 1.0
        xi[:, free[0]] = rule2.points[:, 0]
        xi[:, free[1]] = rule2.points[:, 1]
        n_ref = np.zeros(3)
        n_ref[axis] = 2.0 * side - 1.0
        X = mesh.nodes[mesh.hexes[faces[sel, 0]]]
        J = _jacobian(X, Q1.grad(xi))
        # cofactor(J) n_ref = det(J) J^{-T} n_ref is the outward area density
        cof = np.linalg.det(J)[..., None, None] * np.swapaxes(np.linalg.inv(J), -1, -2)
        avec = cof @ n_ref
        dA = np.linalg.norm(avec, axis=-1)
        weights[sel] = dA * rule2.weights
        normals[sel] = avec / dA[..., None]
        points[sel] = np.einsum("qa,eai->eqi", Q1.eval(xi), X)
        N2[sel] = Q2.eval(xi)
    return FaceQuadrature(faces[:, 0], weights, normals, points, N2)


# -- scatter helpers ---------------------------------------------------------

def _scatter(rows: np.ndarray, cols: np.ndarray, vals: np.ndarray, shape) -> CsrMatrix:
    """Sum element blocks vals[e, a, b] into a CSR matrix at (rows[e,a], cols[e,b])."""
    ne, na = rows.shape
    nb = cols.shape[1]
    r = np.broadcast_to(rows[:, :, None], (ne, na, nb)).ravel()
    c = np.broadcast_to(cols[:, None, :], (ne, na, nb)).ravel()
    A = sp.coo_matrix((vals.ravel(), (r, c)), shape=shape).tocsr()
    A.sum_duplicates()
    A.sort_indices()
    return A


def _vector_dofs(q2: np.ndarray) -> np.ndarray:
    """(ne, 27) node map -> (ne, 81) interleaved dof map, local order (a, c)."""
    return (3 * q2[:, :, None] + np.arange(3)).reshape(len(q2), -1)


def _vector_block(Ke: np.ndarray) -> np.ndarray:
    """Scalar element block (ne, n, n) -> componentwise block (ne, 3n, 3n)."""
    ne, n, _ = Ke.shape
    out = np.zeros((ne, n, 3, n, 3))
    for c in range(3):
        out[:, :, c, :, c] = Ke
    return out.reshape(ne, 3 * n, 3 * n)


def _symmetrize(Ke: np.ndarray) -> np.ndarray:
    return 0.5 * (Ke + np.swapaxes(Ke, 1, 2))


def _scatter_vector(dofs: np.ndarray, vals: np.ndarray, n: int) -> np.ndarray:
    return np.bincount(dofs.ravel(), weights=vals.ravel(), minlength=n)


# -- element blocks (exposed for oracle tests) --------------------------------

def element_mass(geo: ElementGeometry, space: str) -> np.ndarray:
    N = geo.N1 if space == "Q1" else geo.N2
    return _symmetrize(np.einsum("eq,qa,qb->eab", geo.wdet, N, N))


def element_stiffness(geo: ElementGeometry, nu, space: str = "Q2") -> np.ndarray:
    G = geo.grad1 if space == "Q1" else geo.grad2
    nu = np.asarray(nu, float)
    return _symmetrize(np.einsum("eq,eqai,i,eqbi->eab", geo.wdet, G, nu, G))


def element_divergence(geo: ElementGeometry) -> np.ndarray:
    """B_e[e, a, (b, c)] = int phi_a^Q1 d_c phi_b^Q2."""
    Be = np.einsum("eq,qa,eqbc->eabc", geo.wdet, geo.N1, geo.grad2)
    return Be.reshape(Be.shape[0], 8, 81)


def element_gradient(geo: ElementGeometry) -> np.ndarray:
    """G_e[e, (b, c), a] = int phi_b^Q2 d_c phi_a^Q1."""
    Ge = np.einsum("eq,qb,eqac->ebca", geo.wdet, geo.N2, geo.grad1)
    return Ge.reshape(Ge.shape[0], 81, 8)


# -- global operators ----------------------------------------------------------

def assemble_mass(mesh: Mesh, space: str = "Q2", vector: bool = False) -> CsrMatrix:
    """Consistent mass matrix of the Q1 or Q2 space (3-component if ``vector``)."""
    if space not in ("Q1", "Q2"):
        raise ValueError(f"unknown space {space!r}")
    if vector and space != "Q2":
        raise ValueError("vector mass is only defined on the Q2 velocity space")
    geo = element_geometry(mesh)
    Me = element_mass(geo, space)
    if space == "Q1":
        return _scatter(mesh.hexes, mesh.hexes, Me, (mesh.n_q1, mesh.n_q1))
    if not vector:
        return _scatter(mesh.q2_dofs, mesh.q2_dofs, Me, (mesh.n_q2, mesh.n_q2))
    dofs = _vector_dofs(mesh.q2_dofs)
    n = 3 * mesh.n_q2
    return _scatter(dofs, dofs, _vector_block(Me), (n, n))


def lumped_mass(mesh: Mesh, space: str = "Q1") -> np.ndarray:
    """Row sums of the scalar mass matrix (positive for Q1 and tensor Q2)."""
    M = assemble_mass(mesh, space)
    return np.asarray(M.sum(axis=1)).ravel()


def assemble_anisotropic_stiffness(mesh: Mesh, nu) -> CsrMatrix:
    """Vector stiffness int sum_j nu_j d_j u_c d_j v_c over the Q2 space."""
    nu = np.asarray(nu, float)
    if nu.shape != (3,) or np.any(nu <= 0):
        raise ValueError(f"viscosity must be 3 positive values, got {nu}")
    geo = element_geometry(mesh)
    Ke = element_stiffness(geo, nu)
    dofs = _vector_dofs(mesh.q2_dofs)
    n = 3 * mesh.n_q2
    return _scatter(dofs, dofs, _vector_block(Ke), (n, n))


def assemble_pressure_laplacian(mesh: Mesh) -> CsrMatrix:
    geo = element_geometry(mesh)
    Ke = element_stiffness(geo, (1.0, 1.0, 1.0), space="Q1")
    return _scatter(mesh.hexes, mesh.hexes, Ke, (mesh.n_q1, mesh.n_q1))


def assemble_divergence_coupling(mesh: Mesh) -> CsrMatrix:
    """B with (B u)_a = int phi_a div u; shape (n_q1, 3 n_q2)."""
    geo = element_geometry(mesh)
    return _scatter(mesh.hexes, _vector_dofs(mesh.q2_dofs), element_divergence(geo),
                    (mesh.n_q1, 3 * mesh.n_q2))


def assemble_gradient(mesh: Mesh) -> CsrMatrix:
    """G with v^T G q = int grad q . v; shape (3 n_q2, n_q1)."""
    geo = element_geometry(mesh)
    return _scatter(_vector_dofs(mesh.q2_dofs), mesh.hexes, element_gradient(geo),
                    (3 * mesh.n_q2, mesh.n_q1))


def assemble_coriolis(mesh: Mesh, f: float) -> CsrMatrix:
    """C with v^T C u = int 2 (omega x u) . v, omega = (0, 0, f/2)."""
    geo = element_geometry(mesh)
    Me = element_mass(geo, "Q2")
    ne = len(Me)
    block = np.zeros((ne, 27, 3, 27, 3))
    block[:, :, 0, :, 1] = -f * Me
    block[:, :, 1, :, 0] = f * Me
    dofs = _vector_dofs(mesh.q2_dofs)
    n = 3 * mesh.n_q2
    C = _scatter(dofs, dofs, block.reshape(ne, 81, 81), (n, n))
    C.eliminate_zeros()
    return C


def assemble_convection(mesh: Mesh, u: np.ndarray) -> np.ndarray:
    """r with r . v = int ((u . grad) u) . v for the Q2 field ``u``."""
    u = np.asarray(u, float)
    if u.shape != (3 * mesh.n_q2,):
        raise ValueError(f"velocity vector has size {u.size}, expected {3 * mesh.n_q2}")
    geo = element_geometry(mesh)
    ue = u.reshape(-1, 3)[mesh.q2_dofs]  # (ne, 27, 3)
    uq = np.einsum("qa,eac->eqc", geo.N2, ue)
    gradu = np.einsum("eqai,eac->eqci", geo.grad2, ue)
    conv = np.einsum("eqi,eqci->eqc", uq, gradu)
    re = np.einsum("eq,qa,eqc->eac", geo.wdet, geo.N2, conv)
    return _scatter_vector(_vector_dofs(mesh.q2_dofs), re.reshape(len(re), -1), 3 * mesh.n_q2)


def assemble_volume_load(mesh: Mesh, func) -> np.ndarray:
    """r with r . v = int f . v; ``func`` maps points (..., 3) to values (..., 3)."""
    geo = element_geometry(mesh)
    fq = np.asarray(func(geo.xq), float)
    re = np.einsum("eq,qa,eqc->eac", geo.wdet, geo.N2, fq)
    return _scatter_vector(_vector_dofs(mesh.q2_dofs), re.reshape(len(re), -1), 3 * mesh.n_q2)


def assemble_face_load(mesh: Mesh, tags, func) -> np.ndarray:
    """r with r . v = int_Gamma g . v over faces carrying any of ``tags``.

    ``func(points, normals)`` returns the traction g at face quadrature points.
    """
    mask = np.isin(mesh.face_tags, [int(t) for t in tags])
    faces = mesh.boundary_faces[mask]
    n = 3 * mesh.n_q2
    if len(faces) == 0:
        return np.zeros(n)
    fq = face_quadrature(mesh, faces)
    g = np.asarray(func(fq.points, fq.normals), float)
    re = np.einsum("fq,fqa,fqc->fac", fq.weights, fq.N2, g)
    dofs = _vector_dofs(mesh.q2_dofs[fq.elements])
    return _scatter_vector(dofs, re.reshape(len(re), -1), n)


def assemble_surface_traction(mesh: Mesh, grid: BathymetryGrid, scale: float = 1.0) -> np.ndarray:
    """Wind load int_Gamma_s (theta_1 v_1 + theta_2 v_2) ds.

    ``theta`` is the raster tension, bilinearly interpolated, times ``scale``
    (e.g. 1/rho0 to turn N/m^2 into kinematic units).
    """
    if not np.any(mesh.face_tags == FaceTag.SURFACE):
        raise MeshError("mesh has no SURFACE faces")

    def wind(points, normals):
        tx, ty = grid.wind_at(points[..., 0], points[..., 1])
        return scale * np.stack([tx, ty, np.zeros_like(tx)], axis=-1)

    return assemble_face_load(mesh, [FaceTag.SURFACE], wind)


def interpolate_q2(mesh: Mesh, func) -> np.ndarray:
    """Nodal interpolant of a vector field as an interleaved dof vector."""
    return np.asarray(func(mesh.q2_coords), float).reshape(-1)


def interpolate_q1(mesh: Mesh, func) -> np.ndarray:
    return np.asarray(func(mesh.nodes), float).reshape(-1)


def l2_error(mesh: Mesh, u: np.ndarray, exact) -> float:
    """L2 norm of (u_h - exact) using the 27-point rule."""
    geo = element_geometry(mesh)
    ue = u.reshape(-1, 3)[mesh.q2_dofs]
    uq = np.einsum("qa,eac->eqc", geo.N2, ue)
    diff = uq - np.asarray(exact(geo.xq), float)
    return float(np.sqrt(np.einsum("eq,eqc,eqc->", geo.wdet, diff, diff)))


def l2_error_q1(mesh: Mesh, p: np.ndarray, exact) -> float:
    geo = element_geometry(mesh)
    pq = np.einsum("qa,ea->eq", geo.N1, p[mesh.hexes])
    diff = pq - np.asarray(exact(geo.xq), float)
    return float(np.sqrt(np.einsum("eq,eq->", geo.wdet, diff * diff)))
