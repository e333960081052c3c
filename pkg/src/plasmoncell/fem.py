"""Bilinear (Q1) finite elements on the unit-cell mesh.

Assembly is vectorized over cells: integrand callbacks receive arrays of
per-cell data and return stacked local matrices, which are scattered into a
sparsity pattern computed once per :class:`DofMap`.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import Mesh, interface_faces

__all__ = [
    "CellGeometry",
    "ControlSpace",
    "DofMap",
    "Factorization",
    "SolverError",
    "SparseSystem",
    "assemble",
    "cell_geometry",
    "h1_riesz_solve",
    "quadrature_rules",
    "shape_functions",
    "solve",
]


class SolverError(RuntimeError):
    def __init__(self, message: str, condition: float | None = None):
        self.condition = condition
        if condition is not None:
            message = f"{message} (condition estimate {condition:.3e})"
        super().__init__(message)


# ---------------------------------------------------------------------------
# reference element


def quadrature_rules():
    """2x2 Gauss rule on [0,1]^2 and 2-point Gauss rule on [0,1].

    Returns ``(vol_points, vol_weights, face_points, face_weights)``.
    """
    g = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])
    xi, eta = np.meshgrid(g, g, indexing="ij")
    vol_points = np.stack([xi.ravel(), eta.ravel()], axis=1)
    vol_weights = np.full(4, 0.25)
    return vol_points, vol_weights, g.copy(), np.full(2, 0.5)


def shape_functions(points: np.ndarray):
    """Q1 shape values ``(nq, 4)`` and reference gradients ``(nq, 4, 2)``.

    Local vertex order is counterclockwise starting at (0, 0).
    """
    x, y = points[:, 0], points[:, 1]
    N = np.stack([(1 - x) * (1 - y), x * (1 - y), x * y, (1 - x) * y], axis=1)
    dN = np.empty((len(points), 4, 2))
    dN[:, 0] = np.stack([-(1 - y), -(1 - x)], axis=1)
    dN[:, 1] = np.stack([(1 - y), -x], axis=1)
    dN[:, 2] = np.stack([y, x], axis=1)
    dN[:, 3] = np.stack([-y, (1 - x)], axis=1)
    return N, dN


@dataclass(frozen=True)
class CellGeometry:
    """Quadrature data of the fixed reference mesh.

    ``grad`` holds the gradients of the four cell shape functions with
    respect to the reference-configuration coordinates.
    """

    points: np.ndarray  # (M, 4, 2)
    weights: np.ndarray  # (M, 4) = detJ * w
    values: np.ndarray  # (4, 4) shape values at quadrature points
    grad: np.ndarray  # (M, 4q, 4n, 2)


def cell_geometry(mesh: Mesh) -> CellGeometry:
    if "cellgeom" in mesh._cache:
        return mesh._cache["cellgeom"]
    qp, qw, _, _ = quadrature_rules()
    N, dN = shape_functions(qp)
    X = mesh.vertices[mesh.cells]  # (M, 4, 2)
    # jac[c, q, i, j] = d x_i / d xi_j
    jac = np.einsum("cni,qnj->cqij", X, dN)
    det = jac[..., 0, 0] * jac[..., 1, 1] - jac[..., 0, 1] * jac[..., 1, 0]
    if det.min() <= 0:
        raise ValueError("mesh has a cell with non-positive Jacobian at a quadrature point")
    inv = np.empty_like(jac)
    inv[..., 0, 0] = jac[..., 1, 1] / det
    inv[..., 1, 1] = jac[..., 0, 0] / det
    inv[..., 0, 1] = -jac[..., 0, 1] / det
    inv[..., 1, 0] = -jac[..., 1, 0] / det
    grad = np.einsum("qnk,cqki->cqni", dN, inv)
    points = np.einsum("qn,cni->cqi", N, X)
    geom = CellGeometry(points, det * qw[None, :], N, grad)
    mesh._cache["cellgeom"] = geom
    return geom


# ---------------------------------------------------------------------------
# degrees of freedom


class DofMap:
    """Vertex to degree-of-freedom numbering with constraints applied.

    ``mode="periodic"`` identifies periodic partners (corners collapse to a
    single dof); ``mode="zero-boundary"`` removes every boundary vertex.
    ``pin_vertex`` additionally removes the dof of one vertex, which fixes
    the value there to zero.  Removed vertices map to -1.
    """

    def __init__(self, mesh: Mesh, mode: str = "periodic", components: int = 1, pin_vertex: int | None = None):
        if mode not in ("periodic", "zero-boundary"):
            raise ValueError(f"unknown dof mode {mode!r}")
        self.mesh = mesh
        self.mode = mode
        self.components = components
        nv = mesh.n_vertices
        if mode == "periodic":
            parent = np.arange(nv)

            def find(i):
                while parent[i] != i:
                    parent[i] = parent[parent[i]]
                    i = parent[i]
                return i

            for s, m in mesh.periodic_pairs.tolist():
                rs, rm = find(s), find(m)
                if rs != rm:
                    lo, hi = min(rs, rm), max(rs, rm)
                    parent[hi] = lo
            roots = np.array([find(i) for i in range(nv)])
            keep = roots == np.arange(nv)
            if pin_vertex is not None:
                keep[roots[pin_vertex]] = False
            node = np.full(nv, -1)
            node[keep] = np.arange(keep.sum())
            vertex_node = node[roots]
        else:
            free = np.ones(nv, dtype=bool)
            free[mesh.boundary_vertices()] = False
            if pin_vertex is not None:
                free[pin_vertex] = False
            vertex_node = np.full(nv, -1)
            vertex_node[free] = np.arange(free.sum())
        self.vertex_node = vertex_node
        self.n_nodes = int(vertex_node.max()) + 1 if (vertex_node >= 0).any() else 0
        self.pin_vertex = pin_vertex

    @property
    def n_dofs(self) -> int:
        return self.n_nodes * self.components

    def vertex_dofs(self) -> np.ndarray:
        """``(n_vertices, components)`` array of dof indices (-1 if removed)."""
        c = self.components
        base = self.vertex_node[:, None] * c + np.arange(c)[None, :]
        return np.where(self.vertex_node[:, None] >= 0, base, -1)

    def to_vertices(self, x: np.ndarray) -> np.ndarray:
        """Expand a dof vector to vertex values, zero at removed vertices."""
        x = np.asarray(x)
        out = np.zeros((self.mesh.n_vertices, self.components) + x.shape[1:], dtype=x.dtype)
        vd = self.vertex_dofs()
        mask = vd >= 0
        out[mask] = x[vd[mask]]
        return out if self.components > 1 else out[:, 0]

    def from_vertices(self, values: np.ndarray) -> np.ndarray:
        """Restrict vertex values to the dof vector (values at removed vertices are dropped)."""
        values = np.asarray(values)
        if self.components == 1 and values.ndim == 1:
            values = values[:, None]
        vd = self.vertex_dofs()
        out = np.zeros((self.n_dofs,) + values.shape[2:], dtype=values.dtype)
        mask = vd >= 0
        out[vd[mask]] = values[mask]
        return out

    @cached_property
    def cell_dofs(self) -> np.ndarray:
        """``(M, 4*components)`` local-to-global dof table, node-major."""
        vd = self.vertex_dofs()[self.mesh.cells]  # (M, 4, c)
        return vd.reshape(len(self.mesh.cells), -1)

    def _pattern(self, local_dofs: np.ndarray):
        key = ("pattern", local_dofs.shape, local_dofs.tobytes())
        cache = self.__dict__.setdefault("_patterns", {})
        if key not in cache:
            m, k = local_dofs.shape
            rows = np.repeat(local_dofs, k, axis=1).ravel()
            cols = np.tile(local_dofs, (1, k)).ravel()
            keep = (rows >= 0) & (cols >= 0)
            lin = rows[keep].astype(np.int64) * self.n_dofs + cols[keep]
            uniq, inv = np.unique(lin, return_inverse=True)
            r, c = np.divmod(uniq, self.n_dofs)
            indptr = np.searchsorted(r, np.arange(self.n_dofs + 1))
            cache[key] = (keep, inv, c.astype(np.int32), indptr.astype(np.int32), len(uniq))
        return cache[key]

    def scatter_matrix(self, local: np.ndarray, local_dofs: np.ndarray | None = None) -> sp.csr_matrix:
        """Sum stacked local matrices ``(E, k, k)`` into a CSR matrix."""
        if local_dofs is None:
            local_dofs = self.cell_dofs
        if local.shape != (local_dofs.shape[0], local_dofs.shape[1], local_dofs.shape[1]):
            raise ValueError(f"local matrix shape {local.shape} does not match dof table {local_dofs.shape}")
        keep, inv, cols, indptr, nnz = self._pattern(local_dofs)
        vals = local.reshape(-1)[keep]
        if np.iscomplexobj(vals):
            data = np.bincount(inv, vals.real, nnz) + 1j * np.bincount(inv, vals.imag, nnz)
        else:
            data = np.bincount(inv, vals, nnz)
        return sp.csr_matrix((data, cols, indptr), shape=(self.n_dofs, self.n_dofs))

    def scatter_vector(self, local: np.ndarray, local_dofs: np.ndarray | None = None) -> np.ndarray:
        """Sum stacked local vectors ``(E, k)`` or ``(E, k, r)`` into global vectors."""
        if local_dofs is None:
            local_dofs = self.cell_dofs
        if local.shape[:2] != local_dofs.shape:
            raise ValueError(f"local vector shape {local.shape} does not match dof table {local_dofs.shape}")
        extra = local.shape[2:]
        flat = local.reshape(local.shape[0] * local.shape[1], -1)
        idx = local_dofs.ravel()
        keep = idx >= 0
        out = np.zeros((self.n_dofs, flat.shape[1]), dtype=local.dtype)
        np.add.at(out, idx[keep], flat[keep])
        return out.reshape((self.n_dofs,) + extra)


# ---------------------------------------------------------------------------
# assembly and solves


@dataclass
class SparseSystem:
    matrix: sp.csr_matrix
    rhs: np.ndarray
    symmetric: bool = False

    def __post_init__(self):
        n, m = self.matrix.shape
        if n != m or self.rhs.shape[0] != n:
            raise ValueError("inconsistent system dimensions")


def assemble(mesh: Mesh, dofmap: DofMap, cell_matrix=None, cell_vector=None, face_matrix=None, face_vector=None, symmetric=False) -> SparseSystem:
    """Assemble a global system from vectorized integrand callbacks.

    ``cell_matrix(geom)`` returns ``(M, 4c, 4c)`` local matrices,
    ``cell_vector(geom)`` returns ``(M, 4c)`` or ``(M, 4c, r)``.
    ``face_matrix(frame)`` / ``face_vector(frame)`` do the same for the
    interface faces with 2 endpoints ordered along the tangent.
    """
    geom = cell_geometry(mesh)
    n = dofmap.n_dofs
    A = sp.csr_matrix((n, n))
    b = None
    if cell_matrix is not None:
        A = A + dofmap.scatter_matrix(cell_matrix(geom))
    if cell_vector is not None:
        b = dofmap.scatter_vector(cell_vector(geom))
    if face_matrix is not None or face_vector is not None:
        frame = interface_faces(mesh)
        fd = face_dofs(dofmap, frame)
        if face_matrix is not None:
            A = A + dofmap.scatter_matrix(face_matrix(frame), fd)
        if face_vector is not None:
            fb = dofmap.scatter_vector(face_vector(frame), fd)
            b = fb if b is None else b + fb
    if b is None:
        b = np.zeros(n)
    return SparseSystem(A.tocsr(), b, symmetric)


def face_dofs(dofmap: DofMap, frame) -> np.ndarray:
    vd = dofmap.vertex_dofs()[frame.endpoints]  # (P, 2, c)
    return vd.reshape(len(frame.endpoints), -1)


class Factorization:
    """Sparse LU factorization reused for several right-hand sides."""

    def __init__(self, matrix: sp.spmatrix):
        self.matrix = matrix.tocsc()
        try:
            self.lu = spla.splu(self.matrix)
        except RuntimeError as exc:
            raise SolverError(f"factorization failed: {exc}", np.inf) from None
        d = np.abs(self.lu.U.diagonal())
        self.condition = float(d.max() / d.min()) if d.min() > 0 else np.inf
        if not np.isfinite(self.condition) or self.condition > 1e14:
            raise SolverError("matrix is singular to working precision", self.condition)

    def solve(self, rhs: np.ndarray, trans: str = "N", check: bool = True) -> np.ndarray:
        x = self.lu.solve(np.ascontiguousarray(rhs), trans=trans)
        if check:
            A = self.matrix if trans == "N" else (self.matrix.T if trans == "T" else self.matrix.conj().T)
            r = np.linalg.norm(A @ x - rhs)
            nb = np.linalg.norm(rhs)
            if nb > 0 and r / nb > 1e-10:
                raise SolverError(f"relative residual {r / nb:.2e} exceeds 1e-10", self.condition)
        return x


def solve(system: SparseSystem) -> np.ndarray:
    """Direct sparse solve with a residual check."""
    rhs = system.rhs
    if rhs.dtype.kind != "c" and system.matrix.dtype.kind == "c":
        rhs = rhs.astype(complex)
    return Factorization(system.matrix).solve(rhs)


def stiffness_matrix(mesh: Mesh, dofmap: DofMap, weight: np.ndarray | None = None) -> sp.csr_matrix:
    """Component-wise Laplace matrix ``sum_K w_K (grad u, grad v)_K``."""
    geom = cell_geometry(mesh)
    local = np.einsum("cqai,cqbi,cq->cab", geom.grad, geom.grad, geom.weights)
    if weight is not None:
        local = local * weight[:, None, None]
    c = dofmap.components
    if c > 1:
        local = np.einsum("cab,ij->caibj", local, np.eye(c)).reshape(len(local), 4 * c, 4 * c)
    return dofmap.scatter_matrix(local)


def mass_matrix(mesh: Mesh, dofmap: DofMap) -> sp.csr_matrix:
    geom = cell_geometry(mesh)
    local = np.einsum("qa,qb,cq->cab", geom.values, geom.values, geom.weights)
    c = dofmap.components
    if c > 1:
        local = np.einsum("cab,ij->caibj", local, np.eye(c)).reshape(len(local), 4 * c, 4 * c)
    return dofmap.scatter_matrix(local)


class ControlSpace:
    """Vector-valued Q1 fields with zero boundary values and the H^1_0 inner product.

    Vectors are flat dof arrays (node-major, 2 components per node).
    """

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        self.dofmap = DofMap(mesh, "zero-boundary", components=2)
        self.stiffness = stiffness_matrix(mesh, self.dofmap)
        self._lu = Factorization(self.stiffness)

    @property
    def n_dofs(self) -> int:
        return self.dofmap.n_dofs

    def inner(self, a: np.ndarray, b: np.ndarray) -> float:
        """``(grad a, grad b)`` over the unit cell."""
        return float(a @ (self.stiffness @ b))

    def norm(self, a: np.ndarray) -> float:
        return float(np.sqrt(max(self.inner(a, a), 0.0)))

    def riesz(self, functional: np.ndarray) -> np.ndarray:
        """Solve ``(grad x, grad v) = functional[v]`` for all admissible v."""
        if not np.any(functional):
            return np.zeros(self.n_dofs)
        return self._lu.solve(functional)

    def to_vertices(self, x: np.ndarray) -> np.ndarray:
        return self.dofmap.to_vertices(x)

    def from_vertices(self, q: np.ndarray) -> np.ndarray:
        return self.dofmap.from_vertices(q)


def h1_riesz_solve(space: ControlSpace, rhs: np.ndarray) -> np.ndarray:
    return space.riesz(rhs)
