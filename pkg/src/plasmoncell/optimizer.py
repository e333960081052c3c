"""Damped inverse BFGS with Armijo backtracking and penalty continuation.

All vectors are Riesz representatives in the H^1_0 control space; inner
products are the unweighted ``(grad a, grad b)``.  The initial inverse
Hessian acts as ``v / alpha`` on such vectors, which together with the Riesz
map amounts to ``(1/alpha) (-Laplace)^{-1}`` on the dual derivative.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .cellproblem import EffectiveTensor
from .cost import CostConfig, CostEvaluator, State
from .geometry import Mesh
from .kinematics import MaterialParameters

__all__ = [
    "BfgsHistory",
    "HistoryCorruptionError",
    "IterationRecord",
    "LineSearchError",
    "OptimizationResult",
    "StageSchedule",
    "armijo_search",
    "bfgs_apply",
    "damping_theta",
    "optimize",
]

log = logging.getLogger(__name__)

DAMPING_THRESHOLD = 0.2
ZERO_GRADIENT = 1e-12


class HistoryCorruptionError(ArithmeticError):
    """A stored curvature scalar is not positive."""


class LineSearchError(RuntimeError):
    def __init__(self, message: str, last_step: float, slope: float, value: float):
        super().__init__(message)
        self.last_step = last_step
        self.slope = slope
        self.value = value


@dataclass
class _Pair:
    s_hat: np.ndarray
    b: np.ndarray
    y: np.ndarray
    rho: float  # (y, s_hat)
    sigma: float  # (s_hat - b, y)


@dataclass
class BfgsHistory:
    """Stored pairs of the damped inverse update.

    Parameters
    ----------
    alpha : float
        Tikhonov weight; the initial operator is ``v / alpha``.
    inner : callable
        Inner product ``inner(a, b)`` of the control space.
    cap : int, optional
        Keep only the most recent ``cap`` pairs. ``None`` keeps all.
    """

    alpha: float
    inner: Callable[[np.ndarray, np.ndarray], float]
    cap: int | None = None
    pairs: list = field(default_factory=list)

    def __len__(self):
        return len(self.pairs)

    def apply(self, v: np.ndarray) -> np.ndarray:
        return bfgs_apply(self, v)

    def update(self, s: np.ndarray, y: np.ndarray) -> float:
        """Add the pair ``(s, y)`` with damping; returns theta."""
        b = self.apply(y)
        theta, s_hat = damping_theta(y, s, b, self.inner)
        rho = self.inner(y, s_hat)
        if not rho > 0:
            raise HistoryCorruptionError(f"non-positive curvature (y, s_hat) = {rho:.3e}")
        self.pairs.append(_Pair(s_hat, b, np.asarray(y), rho, self.inner(s_hat - b, y)))
        if self.cap is not None and len(self.pairs) > self.cap:
            del self.pairs[0]
        return theta


def damping_theta(y, s, By, inner=None):
    """Damping factor and damped step ``theta s + (1 - theta) B y``."""
    inner = np.dot if inner is None else inner
    yBy = inner(y, By)
    if not yBy > 0:
        raise HistoryCorruptionError(f"(y, By) = {yBy:.3e} is not positive")
    ys = inner(y, s)
    if ys >= DAMPING_THRESHOLD * yBy:
        theta = 1.0
    else:
        theta = (1 - DAMPING_THRESHOLD) * yBy / (yBy - ys)
    return theta, theta * np.asarray(s) + (1 - theta) * np.asarray(By)


def bfgs_apply(history: BfgsHistory, v: np.ndarray) -> np.ndarray:
    """Apply the current inverse Hessian approximation to ``v``."""
    out = np.asarray(v, dtype=float) / history.alpha
    for p in history.pairs:
        if not p.rho > 0:
            raise HistoryCorruptionError(f"stored curvature {p.rho:.3e} is not positive")
        ss = history.inner(p.s_hat, v)
        d = p.s_hat - p.b
        out = out + (d * ss + p.s_hat * history.inner(d, v)) / p.rho - (p.sigma / p.rho**2) * ss * p.s_hat
    return out


def armijo_search(q, p, evaluate, value: float, slope: float, beta_ls: float = 0.5, gamma: float = 0.01, min_step: float = 1e-12):
    """Backtracking until ``c(q + lam p) <= value + gamma lam slope``.

    ``evaluate`` maps a point to either a float or an object with a
    ``total`` attribute; non-finite values (folded cells) are rejected.
    Returns ``(lam, result)``.
    """
    if not 0 < beta_ls < 1 or not 0 < gamma < 0.5:
        raise ValueError("require 0 < beta_ls < 1 and 0 < gamma < 1/2")
    if not slope < 0:
        raise LineSearchError(f"not a descent direction (slope {slope:.3e})", 0.0, slope, value)
    lam = 1.0
    while lam >= min_step:
        res = evaluate(q + lam * p)
        c = float(getattr(res, "total", res))
        if np.isfinite(c) and c <= value + gamma * lam * slope:
            return lam, res
        lam *= beta_ls
    raise LineSearchError(f"step length underflow below {min_step:g}", lam / beta_ls, slope, value)


@dataclass(frozen=True)
class StageSchedule:
    """Ordered ``(steps, beta)`` stages; ``steps=None`` runs until convergence."""

    stages: tuple

    def __post_init__(self):
        stages = tuple((None if n is None else int(n), float(b)) for n, b in self.stages)
        if not stages:
            raise ValueError("schedule needs at least one stage")
        for i, (n, b) in enumerate(stages):
            if not b > 0:
                raise ValueError("stage beta must be positive")
            if n is None and i != len(stages) - 1:
                raise ValueError("only the last stage may be open-ended")
            if n is not None and n < 0:
                raise ValueError("stage step counts must be non-negative")
        object.__setattr__(self, "stages", stages)

    @classmethod
    def single(cls, beta: float) -> "StageSchedule":
        return cls(((None, beta),))


@dataclass
class IterationRecord:
    step: int
    stage: int
    beta: float
    total: float
    misfit: float
    tikhonov: float
    penalty: float
    deviation_percent: float
    relative_deviation_percent: float
    optimality: float
    step_length: float
    theta: float
    min_J: float
    slope: float

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class OptimizationResult:
    q: np.ndarray
    eps_eff: EffectiveTensor
    records: list
    converged: bool
    line_search_failed: bool
    history: BfgsHistory
    wall_time: float
    message: str = ""

    @property
    def steps(self) -> int:
        return self.records[-1].step if self.records else 0


def optimize(
    mesh: Mesh,
    material: MaterialParameters,
    config: CostConfig,
    schedule: StageSchedule | None = None,
    tol: float = 1e-4,
    max_steps: int = 500,
    beta_ls: float = 0.5,
    gamma: float = 0.01,
    history_cap: int | None = None,
    q0: np.ndarray | None = None,
    evaluator: CostEvaluator | None = None,
    callback: Callable | None = None,
) -> OptimizationResult:
    """Minimize the regularized cost over mesh deformations.

    Parameters
    ----------
    schedule : StageSchedule, optional
        Penalty continuation; defaults to a single stage with ``config.beta``.
    tol : float
        Stop when ``||dc_n|| / ||dc_0|| < tol`` (``dc_0`` re-anchored per stage).
    callback : callable, optional
        Called as ``callback(record, state)`` after every accepted iterate.
    """
    t0 = time.perf_counter()
    stages = ((None, config.beta),) if schedule is None else schedule.stages
    ev = CostEvaluator(mesh, material, config) if evaluator is None else evaluator
    ev.set_beta(stages[0][1])
    space = ev.control
    hist = BfgsHistory(config.alpha, space.inner, history_cap)
    q = np.zeros(space.n_dofs) if q0 is None else np.asarray(q0, dtype=float).copy()

    records: list[IterationRecord] = []
    converged = failed = False
    message = ""
    step = 0

    st = ev.state(q)
    if not st.breakdown.admissible:
        raise ValueError("initial deformation is not admissible")

    def record(stage, st, opt, lam, theta, slope):
        b = st.breakdown
        r = IterationRecord(step, stage, ev.config.beta, b.total, b.misfit, b.tikhonov, b.penalty,
                            b.deviation_percent, b.relative_deviation_percent, opt, lam, theta, b.min_J, slope)
        records.append(r)
        log.info("step %d beta %.3g cost %.6e dev %.3f%% opt %.3e lam %.3g", step, r.beta, r.total, r.deviation_percent, opt, lam)
        if callback is not None:
            callback(r, st)

    for stage, (n_stage, beta) in enumerate(stages):
        if stage > 0:
            ev.set_beta(beta)
            st = ev.state(q)
        _, dc = ev.gradient(st)
        norm0 = space.norm(dc)
        opt = 1.0
        record(stage, st, opt, 0.0, 1.0, 0.0)
        if norm0 < ZERO_GRADIENT:
            converged = True
            message = "gradient vanishes at the start of the stage"
            if n_stage is None:
                break
            continue
        taken = 0
        converged = False
        while step < max_steps and (n_stage is None or taken < n_stage):
            p = -hist.apply(dc)
            slope = space.inner(dc, p)
            if not slope < 0:
                log.warning("quasi-Newton direction is not descent; falling back to scaled gradient")
                p = -dc / config.alpha
                slope = space.inner(dc, p)
            try:
                lam, st_new = armijo_search(q, p, ev.state, st.total, slope, beta_ls, gamma)
            except LineSearchError as exc:
                failed = True
                message = str(exc)
                break
            _, dc_new = ev.gradient(st_new)
            theta = hist.update(lam * p, dc_new - dc)
            q, st, dc = st_new.q, st_new, dc_new
            step += 1
            taken += 1
            opt = space.norm(dc) / norm0
            record(stage, st, opt, lam, theta, slope)
            if opt < tol:
                converged = True
                break
        if failed or step >= max_steps:
            break
        if n_stage is None:
            break

    return OptimizationResult(q, st.eps_eff, records, converged, failed, hist, time.perf_counter() - t0, message)
