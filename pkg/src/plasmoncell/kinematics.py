"""Deformation-induced quantities at quadrature points.

All functions broadcast over leading axes: ``F`` has shape ``(..., 2, 2)``.
The adjugate ``adj(F) = J F^{-1}`` is linear in ``F``, which keeps the
transformed permittivity ``adj(F) eps adj(F)^T / J`` and all of its
derivatives free of explicit inverses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fem import shape_functions
from .geometry import Mesh

# adj(E_mn) for the elementary matrices E_mn, indexed [m, n]
ADJ_ELEMENTARY = np.zeros((2, 2, 2, 2))
ADJ_ELEMENTARY[0, 0] = [[0, 0], [0, 1]]
ADJ_ELEMENTARY[0, 1] = [[0, -1], [0, 0]]
ADJ_ELEMENTARY[1, 0] = [[0, 0], [-1, 0]]
ADJ_ELEMENTARY[1, 1] = [[1, 0], [0, 0]]


class DegenerateDeformationError(ValueError):
    """The deformation folds the cell (J <= 0) or collapses an interface face."""


def drude_sigma(omega: float, omega_p: float, tau: float) -> complex:
    """Drude surface conductivity ``i omega_p / (omega + i / tau)``."""
    if omega <= 0 or tau <= 0:
        raise ValueError("omega and tau must be positive")
    return 1j * omega_p / (omega + 1j / tau)


@dataclass(frozen=True)
class MaterialParameters:
    eps: np.ndarray = None  # 2x2 complex, defaults to identity
    omega: float = 0.3
    omega_p: float = 4 / 137
    tau: float = 100.0

    def __post_init__(self):
        eps = np.eye(2, dtype=complex) if self.eps is None else np.asarray(self.eps, dtype=complex)
        if eps.shape != (2, 2):
            raise ValueError("eps must be a 2x2 matrix")
        if not np.allclose(eps, eps.T, rtol=0, atol=1e-14):
            raise ValueError("eps must be symmetric")
        if np.linalg.eigvalsh(eps.imag).min() < -1e-14:
            raise ValueError("Im(eps) must be positive semidefinite")
        if self.omega <= 0 or self.tau <= 0 or self.omega_p < 0:
            raise ValueError("require omega > 0, tau > 0, omega_p >= 0")
        object.__setattr__(self, "eps", eps)

    @property
    def sigma(self) -> complex:
        return drude_sigma(self.omega, self.omega_p, self.tau)

    @property
    def surface_coefficient(self) -> complex:
        """``-sigma / (i omega)``, the factor in front of the interface integrals."""
        return -self.sigma / (1j * self.omega)


def adjugate(F: np.ndarray) -> np.ndarray:
    A = np.empty_like(F)
    A[..., 0, 0] = F[..., 1, 1]
    A[..., 1, 1] = F[..., 0, 0]
    A[..., 0, 1] = -F[..., 0, 1]
    A[..., 1, 0] = -F[..., 1, 0]
    return A


def det2(F: np.ndarray) -> np.ndarray:
    return F[..., 0, 0] * F[..., 1, 1] - F[..., 0, 1] * F[..., 1, 0]


@dataclass(frozen=True)
class TransformState:
    """``F = I + grad q`` and derived quantities at a set of points."""

    F: np.ndarray
    J: np.ndarray
    Finv: np.ndarray

    @property
    def adj(self) -> np.ndarray:
        return adjugate(self.F)

    def tangent_stretch(self, tangent: np.ndarray) -> np.ndarray:
        """``|F tau|``."""
        return np.linalg.norm(np.einsum("...ij,...j->...i", self.F, tangent), axis=-1)

    def normal_scaling(self, normal: np.ndarray) -> np.ndarray:
        """``|F^{-T} nu|``."""
        return np.linalg.norm(np.einsum("...ji,...j->...i", self.Finv, normal), axis=-1)


def deformation_gradient(grad_q: np.ndarray) -> TransformState:
    """Transform state from the displacement gradient ``(grad q)_ij = d q_i / d y_j``."""
    grad_q = np.asarray(grad_q, dtype=float)
    F = grad_q + np.eye(2)
    J = det2(F)
    with np.errstate(divide="ignore", invalid="ignore"):
        Finv = adjugate(F) / J[..., None, None]
    return TransformState(F, J, Finv)


def deformation_gradient_at(mesh: Mesh, q: np.ndarray, cell: int, xi: np.ndarray) -> TransformState:
    """Transform state at reference point ``xi`` in [0,1]^2 of one cell.

    ``q`` holds nodal displacement values ``(n_vertices, 2)``.
    """
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    _, dN = shape_functions(xi)
    X = mesh.vertices[mesh.cells[cell]]
    jac = np.einsum("ni,qnj->qij", X, dN)
    gradN = np.einsum("qnk,qki->qni", dN, np.linalg.inv(jac))
    grad_q = np.einsum("ni,qnj->qij", q[mesh.cells[cell]], gradN)
    return deformation_gradient(grad_q[0] if len(xi) == 1 else grad_q)


def transformed_permittivity(eps: np.ndarray, state: TransformState) -> np.ndarray:
    """``F^{-1} eps F^{-T} J``, computed as ``adj eps adj^T / J``."""
    J = np.asarray(state.J)
    if np.any(J <= 0):
        raise DegenerateDeformationError(f"non-positive Jacobian determinant (min {J.min():.3e})")
    A = state.adj
    return np.einsum("...ij,jk,...lk->...il", A, eps, A) / J[..., None, None]


def transformed_conductivity(sigma: complex, state: TransformState, tangent: np.ndarray, normal: np.ndarray | None = None, explicit: bool = False):
    """Scalar surface coefficient for a single tangent direction in 2D.

    With ``explicit=True`` the coefficient is evaluated as
    ``sigma |F^{-T} nu| J / |F tau|^2``; otherwise via the equivalent
    ``sigma / |F tau|``.
    """
    J = np.asarray(state.J)
    if np.any(J <= 0):
        raise DegenerateDeformationError(f"non-positive Jacobian determinant (min {J.min():.3e})")
    s = state.tangent_stretch(tangent)
    if np.any(s < 1e-12):
        raise DegenerateDeformationError("interface face collapsed (|F tau| < 1e-12)")
    if explicit:
        if normal is None:
            raise ValueError("explicit evaluation needs the normal")
        return sigma * state.normal_scaling(normal) * J / s**2
    return sigma / s


@dataclass(frozen=True)
class TransformDerivatives:
    dF: np.ndarray
    dJ: np.ndarray
    dFinv: np.ndarray
    dadj: np.ndarray
    deps_hat: np.ndarray | None = None
    dstretch: np.ndarray | None = None
    dnormal_scaling: np.ndarray | None = None
    dsigma_hat: np.ndarray | None = None


def directional_derivatives(state: TransformState, H: np.ndarray, eps: np.ndarray | None = None, sigma: complex | None = None, tangent=None, normal=None) -> TransformDerivatives:
    """Derivatives of the transform quantities in the direction ``H = grad dq``."""
    H = np.asarray(H, dtype=float)
    F, J, Finv = state.F, state.J, state.Finv
    if np.any(J <= 0):
        raise DegenerateDeformationError("non-positive Jacobian determinant")
    dJ = np.einsum("...ij,...ji->...", state.adj, H)
    dFinv = -np.einsum("...ij,...jk,...kl->...il", Finv, H, Finv)
    dadj = adjugate(H)
    deps = None
    if eps is not None:
        A = state.adj
        deps = (
            np.einsum("...ij,jk,...lk->...il", dadj, eps, A)
            + np.einsum("...ij,jk,...lk->...il", A, eps, dadj)
        ) / J[..., None, None] - transformed_permittivity(eps, state) * (dJ / J)[..., None, None]
    dstretch = dnscale = dsig = None
    if tangent is not None:
        Ft = np.einsum("...ij,...j->...i", F, tangent)
        Ht = np.einsum("...ij,...j->...i", H, tangent)
        s = np.linalg.norm(Ft, axis=-1)
        dstretch = np.einsum("...i,...i->...", Ft, Ht) / s
        if sigma is not None:
            dsig = -sigma * dstretch / s**2
    if normal is not None:
        g = np.einsum("...ji,...j->...i", Finv, normal)
        dg = np.einsum("...ji,...j->...i", dFinv, normal)
        dnscale = np.einsum("...i,...i->...", g, dg) / np.linalg.norm(g, axis=-1)
    return TransformDerivatives(H, dJ, dFinv, dadj, deps, dstretch, dnscale, dsig)
