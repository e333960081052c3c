"""Regularized cost, adjoint equation and shape derivative.

The cost of a deformation ``q`` is

    0.5 ||eps_eff - target||_Fr^2 + (alpha/2) int w_h |grad q|^2 + beta int P(J)

and its derivative is the exact derivative of this discrete functional:
the corrector is treated as a pair of real fields (real and imaginary part),
so the adjoint matrix is the transpose of the real block form of the state
matrix, i.e. ``conj(A)`` for the complex symmetric ``A``.

Derivatives with respect to ``F = I + grad q`` are accumulated per
quadrature point as 2x2 arrays ``dL/dF`` and then contracted with the shape
gradients, so every term is differentiated at the same points where it is
evaluated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cellproblem import CellKinematics, CellProblem, CellSystem, CorrectorField, EffectiveTensor
from .fem import ControlSpace, Factorization
from .geometry import Mesh, cell_diameter
from .kinematics import ADJ_ELEMENTARY, MaterialParameters

__all__ = [
    "AdjointField",
    "CostBreakdown",
    "CostConfig",
    "CostEvaluator",
    "State",
    "evaluate_cost",
    "interface_weight",
    "penalty_density",
    "penalty_derivative",
    "riesz_gradient",
    "shape_derivative",
    "solve_adjoint",
]


@dataclass(frozen=True)
class CostConfig:
    target: np.ndarray
    alpha: float = 1e-3
    alpha_sigma: float = 10.0
    beta: float = 0.1

    def __post_init__(self):
        target = np.asarray(self.target, dtype=complex)
        if target.shape != (2, 2) or not np.all(np.isfinite(target)):
            raise ValueError("target must be a finite 2x2 matrix")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.alpha_sigma < 0 or self.beta < 0:
            raise ValueError("alpha_sigma and beta must be non-negative")
        object.__setattr__(self, "target", target)

    def with_beta(self, beta: float) -> "CostConfig":
        return CostConfig(self.target, self.alpha, self.alpha_sigma, beta)


@dataclass(frozen=True)
class CostBreakdown:
    misfit: float
    tikhonov: float
    penalty: float
    total: float
    deviation_percent: float
    relative_deviation_percent: float
    min_J: float

    @property
    def admissible(self) -> bool:
        return np.isfinite(self.total)


def penalty_density(J):
    """Barrier density: ``(J-1)^2/2`` for J >= 1, ``(J-1)^2/(4J)`` on (0, 1), inf otherwise."""
    J = np.asarray(J, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        low = 0.5 * (J - 1) ** 2 / (np.abs(J) + J)
    out = np.where(J >= 1, 0.5 * (J - 1) ** 2, np.where(J > 0, low, np.inf))
    return out if out.ndim else float(out)


def penalty_derivative(J):
    J = np.asarray(J, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        low = (J * J - 1) / (4 * J * J)
    out = np.where(J >= 1, J - 1, np.where(J > 0, low, np.nan))
    return out if out.ndim else float(out)


def interface_weight(mesh: Mesh, alpha_sigma: float) -> np.ndarray:
    """Per-cell Tikhonov weight ``1 + alpha_sigma / diam K`` on interface cells, else 1."""
    w = np.ones(mesh.n_cells)
    mask = mesh.interface_cells()
    w[mask] += alpha_sigma / cell_diameter(mesh, np.flatnonzero(mask))
    return w


@dataclass
class AdjointField:
    values: np.ndarray  # (n_vertices, 2) complex
    dofs: np.ndarray


@dataclass
class State:
    """Everything known about one control iterate."""

    q: np.ndarray  # control dof vector
    kin: CellKinematics
    breakdown: CostBreakdown
    system: CellSystem | None = None
    chi: CorrectorField | None = None
    eps_eff: EffectiveTensor | None = None

    @property
    def total(self) -> float:
        return self.breakdown.total


class CostEvaluator:
    """Evaluates the reduced cost and its gradient for one mesh and material."""

    def __init__(self, mesh: Mesh, material: MaterialParameters, config: CostConfig, control: ControlSpace | None = None):
        self.mesh = mesh
        self.material = material
        self.problem = CellProblem(mesh, material)
        self.control = ControlSpace(mesh) if control is None else control
        self.config = config

    @property
    def config(self) -> CostConfig:
        return self._config

    @config.setter
    def config(self, config: CostConfig):
        self._config = config
        self.weight = interface_weight(self.mesh, config.alpha_sigma)

    def set_beta(self, beta: float):
        self.config = self.config.with_beta(beta)

    # -- cost ------------------------------------------------------------------

    def vertex_field(self, q: np.ndarray | None) -> np.ndarray:
        if q is None:
            return np.zeros((self.mesh.n_vertices, 2))
        return self.control.to_vertices(q)

    def regularization(self, kin: CellKinematics) -> tuple[float, float]:
        g = self.problem.geom
        G = kin.F - np.eye(2)
        tik = 0.5 * self.config.alpha * float(np.einsum("cqij,cq,c->", G * G, g.weights, self.weight))
        if kin.min_J <= 0:
            return tik, np.inf
        pen = self.config.beta * float(np.sum(penalty_density(kin.J) * g.weights))
        return tik, pen

    def state(self, q: np.ndarray | None = None) -> State:
        """Solve the cell problem for control dofs ``q`` and evaluate the cost."""
        if q is None:
            q = np.zeros(self.control.n_dofs)
        kin = self.problem.kinematics(self.vertex_field(q))
        tik, pen = self.regularization(kin)
        if not kin.admissible or not np.isfinite(pen):
            bd = CostBreakdown(np.inf, tik, np.inf, np.inf, np.inf, np.inf, kin.min_J)
            return State(q, kin, bd)
        cs = self.problem.assemble(kin=kin)
        chi = self.problem.solve(cs)
        eff = self.problem.effective_tensor(kin, chi.values)
        return State(q, kin, self.breakdown(kin, eff, tik, pen), cs, chi, eff)

    def breakdown(self, kin, eff: EffectiveTensor, tik: float, pen: float) -> CostBreakdown:
        t = self.config.target
        mis = eff.misfit(t)
        return CostBreakdown(
            misfit=mis,
            tikhonov=tik,
            penalty=pen,
            total=mis + tik + pen,
            deviation_percent=eff.deviation_percent(t),
            relative_deviation_percent=100.0 * eff.relative_deviation(t),
            min_J=kin.min_J,
        )

    def cost(self, q: np.ndarray) -> float:
        return self.state(q).total

    def misfit_of_state(self, st: State, chi_dofs: np.ndarray) -> float:
        """Misfit as a function of the corrector dofs at fixed ``q`` (for derivative checks)."""
        chi = self.problem.dofmap.to_vertices(chi_dofs)
        return self.problem.effective_tensor(st.kin, chi).misfit(self.config.target)

    # -- adjoint ---------------------------------------------------------------

    def _delta(self, st: State) -> np.ndarray:
        return st.eps_eff.value - self.config.target

    def misfit_state_gradient(self, st: State) -> np.ndarray:
        """``dM/dRe(chi) + i dM/dIm(chi)`` on the pinned periodic dofs, shape ``(n, 2)``."""
        P, kin, chi = self.problem, st.kin, st.chi.values
        cD = self._delta(st).conj()  # c_ij = conj(Delta_ij)
        U = P.volume_fields(kin, chi)  # (M, 4, j, d)
        T = P.face_fields(kin, chi)  # (P, j)
        # sum_j c_mj U_j  and  sum_i c_im conj(U_i)
        V1 = np.einsum("mj,cqjd->cqmd", cD, U)
        V2 = np.einsum("im,cqid->cqmd", cD, U.conj())
        T1 = np.einsum("mj,fj->fm", cD, T)
        T2 = np.einsum("im,fi->fm", cD, T.conj())
        return self._load(kin, V1, T1) + self._load(kin, V2, T2).conj()

    def _load(self, kin, V, T) -> np.ndarray:
        """``l(V)_k = int grad phi_k . eps_hat V + kappa sum_f T D phi_k / s`` for 2 fields."""
        g, P = self.problem.geom, self.problem
        vol = np.einsum("cqai,cqij,cqmj,cq->cam", g.grad, kin.eps_hat, V, g.weights)
        out = P.dofmap.scatter_vector(vol)
        fw = (P.kappa / kin.s)[:, None] * T  # (P, m)
        out = out + P.dofmap.scatter_vector(np.stack([-fw, fw], axis=1), P.face_dofs)
        return out

    def adjoint(self, st: State) -> AdjointField:
        g = self.misfit_state_gradient(st)
        if st.system.factorization is None:
            st.system.factorization = Factorization(st.system.matrix)
        if not np.any(g):
            z = np.zeros_like(g)
        else:
            z = st.system.factorization.solve(g.conj()).conj()
        return AdjointField(self.problem.dofmap.to_vertices(z), z)

    # -- shape derivative ------------------------------------------------------

    def shape_derivative(self, st: State, z: AdjointField | None = None) -> np.ndarray:
        """Derivative of the reduced cost as a functional on the control dofs."""
        if not st.breakdown.admissible:
            raise ValueError("shape derivative requested at an inadmissible deformation")
        if z is None:
            z = self.adjoint(st)
        P, kin, g = self.problem, st.kin, self.problem.geom
        chi, zv = st.chi.values, z.values
        eps = self.material.eps
        c = self._delta(st).conj()

        U = P.volume_fields(kin, chi)  # (M,4,j,d)
        Ub = U.conj()
        Gz = P.corrector_gradients(zv).conj()  # conj grad z_i
        E = kin.eps_hat
        EU = np.einsum("cqde,cqje->cqjd", E, U)
        EUb = np.einsum("cqde,cqie->cqid", E, Ub)
        EGz = np.einsum("cqde,cqie->cqid", E, Gz)

        dLdF = np.zeros(kin.F.shape)
        A, J = kin.adj, kin.J
        for m in range(2):
            for n in range(2):
                Amn = ADJ_ELEMENTARY[m, n]
                dJ = A[..., n, m]
                dE = (
                    np.einsum("ij,jk,cqlk->cqil", Amn, eps, A)
                    + np.einsum("cqij,jk,lk->cqil", A, eps, Amn)
                ) / J[..., None, None] - E * (dJ / J)[..., None, None]
                quad = np.einsum("cqid,cqde,cqje->cqij", Ub, dE, U)
                mis = (
                    np.einsum("j,cqj->cq", c[m, :], EU[..., n])
                    + np.einsum("i,cqi->cq", c[:, m], EUb[..., n])
                    + np.einsum("ij,cqij->cq", c, quad)
                )
                res = np.einsum("cqid,cqde,cqie->cq", Gz, dE, U) + EGz[:, :, m, n]
                dLdF[..., m, n] = (mis - res).real
        beta = self.config.beta
        if beta:
            dLdF += beta * penalty_derivative(J)[..., None, None] * np.swapaxes(A, -1, -2)
        dLdF += self.config.alpha * self.weight[:, None, None, None] * (kin.F - np.eye(2))

        local = np.einsum("cqmn,cqan,cq->cam", dLdF, g.grad, g.weights)
        G = np.zeros((self.mesh.n_vertices, 2))
        np.add.at(G, self.mesh.cells.ravel(), local.reshape(-1, 2))

        # interface faces
        L = P.frame.length
        v, s = kin.v, kin.s
        T = P.face_fields(kin, chi)
        Tb = T.conj()
        Dz = P.face_differences(zv).conj()
        kap = P.kappa
        hTT = np.einsum("ij,fi,fj->f", c, Tb, T)
        dh = kap * L[:, None] * (
            -(v / s[:, None] ** 3) * hTT[:, None]
            + (np.einsum("kj,fj->fk", c, T) + np.einsum("ik,fi->fk", c, Tb)) / s[:, None]
        )
        rT = np.einsum("fi,fi->f", Dz, T)
        dr = kap * (-(v / s[:, None] ** 3) * rT[:, None] + Dz / s[:, None])
        gface = (dh - dr).real / L[:, None]
        e = P.frame.endpoints
        np.add.at(G, e[:, 1], gface)
        np.add.at(G, e[:, 0], -gface)
        return self.control.from_vertices(G)

    def gradient(self, st: State) -> tuple[np.ndarray, np.ndarray]:
        """Dual derivative and its H^1_0 Riesz representative."""
        dual = self.shape_derivative(st)
        return dual, self.control.riesz(dual)


# ---------------------------------------------------------------------------
# module-level operations


def evaluate_cost(mesh: Mesh, q: np.ndarray | None, material: MaterialParameters, config: CostConfig) -> CostBreakdown:
    """Cost breakdown for control dofs ``q`` (state solved internally)."""
    return CostEvaluator(mesh, material, config).state(q).breakdown


def solve_adjoint(evaluator: CostEvaluator, st: State) -> AdjointField:
    return evaluator.adjoint(st)


def shape_derivative(evaluator: CostEvaluator, st: State, z: AdjointField | None = None) -> np.ndarray:
    return evaluator.shape_derivative(st, z)


def riesz_gradient(control: ControlSpace, functional: np.ndarray) -> np.ndarray:
    return control.riesz(functional)
