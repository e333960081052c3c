"""Deformed cell problem in reference coordinates and the effective tensor.

For corrector ``i`` the weak form reads, for all periodic test functions phi,

    int eps_hat (F^T e_i + grad chi_i) . grad phi
      + kappa * sum_faces (1/s) (v_i + D chi_i / L) D phi = 0,

where ``kappa = -sigma / (i omega)``, ``v = F tau`` on an interface face of
reference length ``L``, ``s = |v|`` and ``D`` is the difference of endpoint
values along the tangent.  Q1 traces are linear on a face, so every face
integrand is constant and the face rule is exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .fem import DofMap, Factorization, SparseSystem, cell_geometry, face_dofs, shape_functions
from .geometry import LOCAL_FACES, Mesh, interface_faces
from .kinematics import (
    DegenerateDeformationError,
    MaterialParameters,
    adjugate,
    det2,
    deformation_gradient,
    transformed_permittivity,
)

__all__ = [
    "CellKinematics",
    "CellProblem",
    "CellSystem",
    "CorrectorField",
    "EffectiveTensor",
    "assemble_cell_system",
    "effective_tensor",
    "solve_correctors",
]

PIN_VERTEX = 0


@dataclass(frozen=True)
class EffectiveTensor:
    value: np.ndarray  # 2x2 complex

    def misfit(self, target: np.ndarray) -> float:
        """``0.5 * ||eps_eff - target||_Fr^2``."""
        return 0.5 * float(np.sum(np.abs(self.value - target) ** 2))

    def distance(self, target: np.ndarray) -> float:
        """``||eps_eff - target||_Fr``."""
        return float(np.sqrt(np.sum(np.abs(self.value - target) ** 2)))

    def relative_deviation(self, target: np.ndarray) -> float:
        return self.distance(target) / float(np.sqrt(np.sum(np.abs(target) ** 2)))

    def deviation_percent(self, target: np.ndarray) -> float:
        """Deviation as tabulated in the experiments: ``100 * ||eps_eff - target||_Fr``."""
        return 100.0 * self.distance(target)


@dataclass
class CellKinematics:
    """Deformation data for one control ``q`` on one mesh."""

    q: np.ndarray  # (n_vertices, 2)
    F: np.ndarray  # (M, 4, 2, 2)
    J: np.ndarray  # (M, 4)
    adj: np.ndarray  # (M, 4, 2, 2)
    eps_hat: np.ndarray | None  # (M, 4, 2, 2) complex, None if degenerate
    v: np.ndarray  # (P, 2) F tau on interface faces
    s: np.ndarray  # (P,) |F tau|

    @property
    def min_J(self) -> float:
        return float(self.J.min())

    @property
    def admissible(self) -> bool:
        return self.eps_hat is not None


@dataclass
class CellSystem:
    """Pinned periodic system with two right-hand sides."""

    system: SparseSystem
    kin: CellKinematics
    factorization: Factorization | None = None

    @property
    def matrix(self):
        return self.system.matrix

    @property
    def rhs(self):
        return self.system.rhs


@dataclass
class CorrectorField:
    """Nodal values ``(n_vertices, 2)`` of both correctors and their dof vector."""

    values: np.ndarray
    dofs: np.ndarray


class CellProblem:
    """Caches geometry and sparsity data for repeated solves on one mesh."""

    def __init__(self, mesh: Mesh, material: MaterialParameters, pin_vertex: int = PIN_VERTEX):
        self.mesh = mesh
        self.material = material
        self.dofmap = DofMap(mesh, "periodic", 1, pin_vertex=pin_vertex)
        self.geom = cell_geometry(mesh)
        self.frame = interface_faces(mesh)
        self.face_dofs = face_dofs(self.dofmap, self.frame)
        self.kappa = material.surface_coefficient

    # -- kinematics ---------------------------------------------------------

    def kinematics(self, q: np.ndarray | None = None) -> CellKinematics:
        nv = self.mesh.n_vertices
        q = np.zeros((nv, 2)) if q is None else np.asarray(q, dtype=float).reshape(nv, 2)
        grad_q = np.einsum("cni,cqnj->cqij", q[self.mesh.cells], self.geom.grad)
        state = deformation_gradient(grad_q)
        e0, e1 = self.frame.endpoints[:, 0], self.frame.endpoints[:, 1]
        v = self.frame.tangent + (q[e1] - q[e0]) / self.frame.length[:, None]
        s = np.linalg.norm(v, axis=1)
        eps_hat = None
        if state.J.min() > 0 and s.min() >= 1e-12:
            eps_hat = transformed_permittivity(self.material.eps, state)
        return CellKinematics(q, state.F, state.J, adjugate(state.F), eps_hat, v, s)

    # -- assembly -------------------------------------------------------------

    def assemble(self, q: np.ndarray | None = None, kin: CellKinematics | None = None) -> CellSystem:
        kin = self.kinematics(q) if kin is None else kin
        if not kin.admissible:
            raise DegenerateDeformationError(f"deformation is not admissible (min J = {kin.min_J:.3e})")
        g = self.geom
        A_loc = np.einsum("cqai,cqij,cqbj,cq->cab", g.grad, kin.eps_hat, g.grad, g.weights)
        # eps_hat F^T e_i = adj eps e_i
        force = np.einsum("cqij,jk->cqik", kin.adj, self.material.eps)
        b_loc = -np.einsum("cqai,cqik,cq->cak", g.grad, force, g.weights)
        A = self.dofmap.scatter_matrix(A_loc)
        b = self.dofmap.scatter_vector(b_loc)

        c = self.kappa / (kin.s * self.frame.length)
        ones = np.array([[1.0, -1.0], [-1.0, 1.0]])
        A = A + self.dofmap.scatter_matrix(c[:, None, None] * ones, self.face_dofs)
        fv = (self.kappa / kin.s)[:, None] * kin.v  # (P, 2) per corrector
        face_b = np.stack([fv, -fv], axis=1)  # endpoint 0 gets +, endpoint 1 gets -
        b = b + self.dofmap.scatter_vector(face_b, self.face_dofs)
        return CellSystem(SparseSystem(A.tocsr(), b, symmetric=True), kin)

    def solve(self, cs: CellSystem) -> CorrectorField:
        if cs.factorization is None:
            cs.factorization = Factorization(cs.matrix)
        x = cs.factorization.solve(cs.rhs.astype(complex))
        return CorrectorField(self.dofmap.to_vertices(x), x)

    # -- outputs ----------------------------------------------------------------

    def corrector_gradients(self, chi: np.ndarray) -> np.ndarray:
        """``(M, 4, 2, 2)`` array: [cell, qp, corrector, direction]."""
        return np.einsum("cnk,cqni->cqki", chi[self.mesh.cells], self.geom.grad)

    def face_differences(self, chi: np.ndarray) -> np.ndarray:
        e = self.frame.endpoints
        return chi[e[:, 1]] - chi[e[:, 0]]

    def effective_tensor(self, kin: CellKinematics, chi: np.ndarray) -> EffectiveTensor:
        """Effective tensor from nodal corrector values ``chi`` of shape ``(n_vertices, 2)``."""
        U = self.volume_fields(kin, chi)  # (M, 4, 2 corrector, 2 dir) = F^T e_j + grad chi_j
        eps_eff = np.einsum("cqid,cqde,cqje,cq->ij", U.conj(), kin.eps_hat, U, self.geom.weights)
        T = self.face_fields(kin, chi)  # (P, 2)
        w = self.kappa * self.frame.length / kin.s
        eps_eff = eps_eff + np.einsum("fi,fj,f->ij", T.conj(), T, w)
        return EffectiveTensor(eps_eff)

    def volume_fields(self, kin: CellKinematics, chi: np.ndarray) -> np.ndarray:
        # (F^T e_j)_d = F[j, d]
        return kin.F.astype(complex) + self.corrector_gradients(chi)

    def face_fields(self, kin: CellKinematics, chi: np.ndarray) -> np.ndarray:
        """Tangential components ``v_j + D chi_j / L`` on every face."""
        return kin.v + self.face_differences(chi) / self.frame.length[:, None]

    # -- diagnostics used by the property tests ---------------------------------

    def energy_norm_sq(self, chi: np.ndarray) -> float:
        """``||grad chi||^2 + (1/omega) ||tau . grad chi||^2_interface`` over both correctors."""
        G = self.corrector_gradients(chi)
        vol = float(np.einsum("cqki,cq->", np.abs(G) ** 2, self.geom.weights))
        D = self.face_differences(chi) / self.frame.length[:, None]
        surf = float(np.sum(np.abs(D) ** 2 * self.frame.length[:, None]))
        return vol + surf / self.material.omega

    def a_priori_rhs(self, kin: CellKinematics) -> float:
        """Right side of the a priori estimate without its constant."""
        w = self.geom.weights
        eps_sup = np.linalg.norm(kin.eps_hat, ord=2, axis=(-2, -1)).max()
        F_vol = float(np.einsum("cqij,cq->", kin.F**2, w))
        sigma_sup = float(np.max(np.abs(self.material.sigma / kin.s)))
        Ff = self.face_deformation_gradients(kin.q)
        F_surf = float(np.sum(np.sum(Ff**2, axis=(-2, -1)) * self.frame.quad_weights))
        return eps_sup**2 * F_vol + sigma_sup**2 * F_surf / self.material.omega

    def face_deformation_gradients(self, q: np.ndarray) -> np.ndarray:
        """``F`` at the face quadrature points, traced from the inner cell: ``(P, 2, 2, 2)``."""
        gradN, _ = _face_cell_gradients(self.mesh, self.frame)
        cells = self.frame.faces[:, 0]
        grad_q = np.einsum("fni,fqnj->fqij", q[self.mesh.cells[cells]], gradN)
        return grad_q + np.eye(2)


def _face_cell_gradients(mesh: Mesh, frame):
    """Shape gradients of the inner cell at the two Gauss points of each face.

    Returns ``(gradN, points)`` with ``gradN`` of shape ``(P, 2, 4, 2)``;
    quadrature points are ordered along the face tangent.
    """
    key = "face_cell_gradients"
    if key in mesh._cache:
        return mesh._cache[key]
    corners = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    g = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])
    P = len(frame.faces)
    gradN = np.empty((P, 2, 4, 2))
    pts = np.empty((P, 2, 2))
    for f, (c, lf) in enumerate(frame.faces.tolist()):
        a, b = LOCAL_FACES[lf]
        va, vb = mesh.cells[c, a], mesh.cells[c, b]
        if (va, vb) != tuple(frame.endpoints[f]):
            a, b = b, a
        xi = corners[a][None, :] + g[:, None] * (corners[b] - corners[a])[None, :]
        _, dN = shape_functions(xi)
        X = mesh.vertices[mesh.cells[c]]
        jac = np.einsum("ni,qnj->qij", X, dN)
        gradN[f] = np.einsum("qnk,qki->qni", dN, np.linalg.inv(jac))
        pts[f] = np.einsum("qn,ni->qi", shape_functions(xi)[0], X)
    mesh._cache[key] = (gradN, pts)
    return gradN, pts


# ---------------------------------------------------------------------------
# module-level operations


def assemble_cell_system(mesh: Mesh, q: np.ndarray | None, material: MaterialParameters) -> CellSystem:
    return CellProblem(mesh, material).assemble(q)


def solve_correctors(problem: CellProblem, system: CellSystem) -> CorrectorField:
    return problem.solve(system)


def effective_tensor(mesh: Mesh, q: np.ndarray | None, material: MaterialParameters, chi: CorrectorField | None = None) -> EffectiveTensor:
    """Effective permittivity for deformation ``q``; solves for the correctors if not given."""
    problem = CellProblem(mesh, material)
    kin = problem.kinematics(q)
    if chi is None:
        chi = problem.solve(problem.assemble(kin=kin))
    if not kin.admissible:
        raise DegenerateDeformationError(f"deformation is not admissible (min J = {kin.min_J:.3e})")
    return problem.effective_tensor(kin, chi.values)


def assemble_pullback_system(problem: CellProblem, q: np.ndarray) -> SparseSystem:
    """Assemble the untransformed pullback form with explicit tangents and Nanson scaling.

    Only used to cross-check :meth:`CellProblem.assemble`.
    """
    mesh, g, mat = problem.mesh, problem.geom, problem.material
    kin = problem.kinematics(q)
    Finv_T = np.swapaxes(np.linalg.inv(kin.F), -1, -2)
    # volume: eps (e_i + F^-T grad chi) . (F^-T grad phi) J
    Gphi = np.einsum("cqij,cqnj->cqni", Finv_T, g.grad)
    A_loc = np.einsum("cqai,ij,cqbj,cq,cq->cab", Gphi, mat.eps, Gphi, kin.J, g.weights)
    b_loc = -np.einsum("cqai,ik,cq,cq->cak", Gphi, mat.eps, kin.J, g.weights)
    A = problem.dofmap.scatter_matrix(A_loc.astype(complex))
    b = problem.dofmap.scatter_vector(b_loc.astype(complex))

    frame = problem.frame
    gradN, _ = _face_cell_gradients(mesh, frame)
    Ff = problem.face_deformation_gradients(kin.q)  # (P, 2, 2, 2)
    Ff_inv_T = np.swapaxes(np.linalg.inv(Ff), -1, -2)
    Jf = det2(Ff)
    tau = np.einsum("fqij,fj->fqi", Ff, frame.tangent)
    tau = tau / np.linalg.norm(tau, axis=-1, keepdims=True)
    nscale = np.linalg.norm(np.einsum("fqij,fj->fqi", Ff_inv_T, frame.normal), axis=-1)
    # tangential projections tau tau^T (.)
    cells = frame.faces[:, 0]
    Gp = np.einsum("fqij,fqnj->fqni", Ff_inv_T, gradN)  # F^-T grad phi_n
    tGp = np.einsum("fqi,fqni->fqn", tau, Gp)
    w = -mat.sigma / (1j * mat.omega) * nscale * Jf * frame.quad_weights
    Af = np.einsum("fqa,fqb,fq->fab", tGp, tGp, w)
    bf = -np.einsum("fqa,fqk,fq->fak", tGp, tau, w)
    cell_dofs = problem.dofmap.cell_dofs[cells]
    A = A + problem.dofmap.scatter_matrix(Af, cell_dofs)
    b = b + problem.dofmap.scatter_vector(bf, cell_dofs)
    return SparseSystem(sp.csr_matrix(A), b, symmetric=True)
