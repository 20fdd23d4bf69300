"""Strong boundary conditions on the velocity and the zero-mean pressure system.

Slip nodes are handled by rotating their three velocity dofs into a local
(normal, tangent, tangent) frame and eliminating the normal one, so every
constrained system stays symmetric positive definite.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from shallowflow.geometry import FaceTag, Mesh, MeshError, boundary_normals
from shallowflow.linalg import as_csr


def apply_dirichlet(A: sp.csr_matrix, b: np.ndarray, dofs) -> tuple[sp.csr_matrix, np.ndarray]:
    """Homogeneous symmetric elimination of ``dofs``.

    Rows and columns of the constrained dofs are zeroed, their diagonal set
    to 1 and their right-hand side entries set to 0.
    """
    dofs = np.unique(np.asarray(dofs, dtype=int).ravel())
    n = A.shape[0]
    if len(dofs) and (dofs[0] < 0 or dofs[-1] >= n):
        raise IndexError(f"constrained dof out of range [0, {n})")
    b = np.array(b, dtype=float)
    if len(dofs) == 0:
        return as_csr(A), b
    keep = np.ones(n)
    keep[dofs] = 0.0
    D = sp.diags(keep)
    out = as_csr(D @ A @ D + sp.diags(1.0 - keep))
    out.eliminate_zeros()
    b[dofs] = 0.0
    return out, b


def local_frame(normal: np.ndarray) -> np.ndarray:
    """Orthonormal matrix with columns (n, t1, t2); t2 = e3 for horizontal n."""
    n = np.asarray(normal, float)
    n = n / np.linalg.norm(n)
    if abs(n[2]) < 1e-12:
        t1 = np.array([-n[1], n[0], 0.0])
        t1 /= np.linalg.norm(t1)
        t2 = np.cross(n, t1)  # e3 when n is exactly horizontal
    else:
        e = np.eye(3)[np.argmin(np.abs(n))]
        t1 = np.cross(n, e)
        t1 /= np.linalg.norm(t1)
        t2 = np.cross(n, t1)
    return np.column_stack([n, t1, t2])


@dataclass
class Rotation:
    """Block-diagonal orthogonal change of basis u = Q w."""

    Q: sp.csr_matrix
    nodes: np.ndarray
    normal_dofs: np.ndarray  # dof 3*node in the rotated basis

    def to_cartesian(self, w: np.ndarray) -> np.ndarray:
        return self.Q @ w

    def to_local(self, u: np.ndarray) -> np.ndarray:
        return self.Q.T @ u


def make_rotation(n_dofs: int, normals: dict[int, np.ndarray]) -> Rotation:
    nodes = np.array(sorted(normals), dtype=int)
    rows, cols, vals = [], [], []
    rotated = np.zeros(n_dofs // 3, dtype=bool)
    rotated[nodes] = True
    plain = np.flatnonzero(~np.repeat(rotated, 3))
    rows.append(plain)
    cols.append(plain)
    vals.append(np.ones(len(plain)))
    for node in nodes:
        R = local_frame(normals[node])
        base = 3 * node
        r, c = np.meshgrid(np.arange(3), np.arange(3), indexing="ij")
        rows.append(base + r.ravel())
        cols.append(base + c.ravel())
        vals.append(R.ravel())
    Q = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n_dofs, n_dofs))
    Q.sort_indices()
    return Rotation(Q, nodes, 3 * nodes)


def _rotate(A: sp.csr_matrix, b: np.ndarray, rot: Rotation):
    if len(rot.nodes) == 0:
        return as_csr(A), np.array(b, dtype=float)
    Ar = rot.Q.T @ A @ rot.Q
    Ar = as_csr(0.5 * (Ar + Ar.T))
    return Ar, rot.Q.T @ np.asarray(b, float)


def apply_slip(A: sp.csr_matrix, b: np.ndarray, mesh: Mesh):
    """Rotate slip-node dofs to (n, t1, t2) and eliminate the normal component.

    Returns ``(A_rot, b_rot, rotation)``; the solution of the modified system
    is mapped back with ``rotation.to_cartesian``.
    """
    if mesh.node_normals is None:
        raise MeshError("node normals missing; call compute_node_normals first")
    slip_nodes = mesh.tag_nodes(FaceTag.LATERAL_SLIP)
    noslip = set(mesh.tag_nodes(FaceTag.BOTTOM_NOSLIP).tolist())
    missing = [n for n in slip_nodes.tolist() if n not in noslip and n not in mesh.node_normals]
    if missing:
        raise MeshError(f"missing normal at slip node {missing[0]}")
    rot = make_rotation(A.shape[0], mesh.node_normals)
    Ar, br = _rotate(A, b, rot)
    Ar, br = apply_dirichlet(Ar, br, rot.normal_dofs)
    return Ar, br, rot


def make_zero_mean_system(A: sp.csr_matrix, m: np.ndarray) -> sp.csr_matrix:
    """Border A with the zero-mean functional: [[A, m], [m^T, 0]]."""
    m = np.asarray(m, dtype=float)
    if np.any(m <= 0):
        raise ValueError("zero-mean functional needs strictly positive weights")
    col = sp.csr_matrix(m[:, None])
    aug = sp.bmat([[A, col], [col.T, None]], format="csr")
    aug.sort_indices()
    return aug


class VelocityConstraints:
    """All strong velocity conditions of one boundary-condition set.

    ``noslip=True``: u = 0 on Gamma_0, u.n = 0 on Gamma_1, u3 = 0 on Gamma_s.
    ``noslip=False``: only u.n = 0 on Gamma_0 and Gamma_1 (plus u3 = 0 on
    Gamma_s), the set of the corrected-velocity space.
    Precedence where tags meet: Gamma_0 > Gamma_1 > Gamma_s.
    """

    def __init__(self, mesh: Mesh, noslip: bool = True):
        n = 3 * mesh.n_q2
        surface = mesh.tag_nodes(FaceTag.SURFACE)
        if noslip:
            bottom = mesh.tag_nodes(FaceTag.BOTTOM_NOSLIP)
            normals = dict(mesh.node_normals)
            fixed = [(3 * bottom[:, None] + np.arange(3)).ravel()]
        else:
            bottom = np.zeros(0, dtype=int)
            normals = boundary_normals(mesh)
            fixed = []
        self.rotation = make_rotation(n, normals)
        fixed.append(self.rotation.normal_dofs)
        fixed.append(3 * np.setdiff1d(surface, bottom) + 2)
        self.fixed = np.unique(np.concatenate(fixed)).astype(int)
        self.n = n
        self.noslip = noslip
        self._mask = np.ones(n)
        self._mask[self.fixed] = 0.0

    def apply(self, A: sp.csr_matrix, b: np.ndarray | None = None):
        """Constrained (rotated) system; ``b`` may be omitted."""
        b = np.zeros(A.shape[0]) if b is None else b
        Ar, br = _rotate(A, b, self.rotation)
        return apply_dirichlet(Ar, br, self.fixed)

    def rhs(self, b: np.ndarray) -> np.ndarray:
        """Right-hand side transform matching ``apply`` (homogeneous data)."""
        br = self.rotation.to_local(b) if len(self.rotation.nodes) else np.array(b, float)
        br[self.fixed] = 0.0
        return br

    def recover(self, w: np.ndarray) -> np.ndarray:
        return self.rotation.to_cartesian(w) if len(self.rotation.nodes) else w

    def project(self, u: np.ndarray) -> np.ndarray:
        """Remove the constrained components of a Cartesian field."""
        return self.recover(self._mask * self.rotation.to_local(u))

    def to_local(self, u: np.ndarray) -> np.ndarray:
        return self.rotation.to_local(u)

    def projector(self) -> sp.csr_matrix:
        """Orthogonal projector Q diag(mask) Q^T onto the constrained space."""
        Q = self.rotation.Q
        return as_csr(Q @ sp.diags(self._mask) @ Q.T)
