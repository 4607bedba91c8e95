#!/usr/bin/env python3
"""
Design-dependent Bayesian inversion for the Robin field m.

Only the active sensors of a design enter the likelihood. MAP points are found
by inexact Gauss-Newton-CG with Armijo backtracking; derivatives come from
adjoint and incremental (state, adjoint) solves. The Gaussian posterior at the
MAP point is represented through the dominant generalized eigenpairs of the
Gauss-Newton Hessian against the prior precision.

Gradients and Hessian actions are dual vectors: <g, dm> is a plain dot product.
"""

import logging
from dataclasses import dataclass, field
from typing import Iterable, Optional, Tuple

import numpy as np
import scipy.linalg as sla

from config import Config
from forward_bae import ErrorModel, ForwardModel
from mesh_fem import AssembledSystem, Field
from numkit import ContractViolation, EigPairs, cg_solve, lanczos_eigs
from prior import GaussianFieldPrior

logger = logging.getLogger(__name__)


@dataclass
class Design:
    """Binary sensor selection over n_s candidates"""
    w: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.w)
        if w.ndim != 1 or not np.all((w == 0) | (w == 1)):
            raise ValueError("design weights must be a 1D vector of zeros and ones")
        self.w = w.astype(np.int8)

    @classmethod
    def from_indices(cls, indices: Iterable[int], n_s: int) -> 'Design':
        w = np.zeros(n_s, dtype=np.int8)
        indices = list(indices)
        if any(i < 0 or i >= n_s for i in indices):
            raise ValueError(f"sensor index out of range [0, {n_s}): {indices}")
        w[indices] = 1
        return cls(w)

    @classmethod
    def empty(cls, n_s: int) -> 'Design':
        return cls(np.zeros(n_s, dtype=np.int8))

    @classmethod
    def full(cls, n_s: int) -> 'Design':
        return cls(np.ones(n_s, dtype=np.int8))

    @property
    def active(self) -> np.ndarray:
        return np.flatnonzero(self.w)

    @property
    def n_act(self) -> int:
        return int(self.w.sum())

    @property
    def n_s(self) -> int:
        return self.w.shape[0]

    def with_sensor(self, j: int) -> 'Design':
        w = self.w.copy()
        w[j] = 1
        return Design(w)


@dataclass
class RestrictedLikelihood:
    """Total-error model restricted to the active sensors of a design"""
    design: Design
    error_model: ErrorModel
    eps0_w: np.ndarray
    Gamma_nu_w: np.ndarray
    _factor: Optional[tuple] = field(default=None, repr=False)

    @property
    def n_act(self) -> int:
        return self.design.n_act

    def solve_w(self, r_w: np.ndarray) -> np.ndarray:
        """Gamma_nu_w^-1 r_w"""
        if self.n_act == 0:
            return np.zeros(0)
        return sla.cho_solve(self._factor, r_w)

    def weight(self, r: np.ndarray) -> np.ndarray:
        """Sigma(w) r = P_w^T Gamma_nu_w^-1 P_w r for a full-length residual"""
        out = np.zeros(self.design.n_s)
        out[self.design.active] = self.solve_w(r[self.design.active])
        return out

    def Sigma(self) -> np.ndarray:
        """Dense Sigma(w) (n_s x n_s)"""
        return np.column_stack([self.weight(e) for e in np.eye(self.design.n_s)])

    def misfit(self, r: np.ndarray) -> float:
        """0.5 r_w^T Gamma_nu_w^-1 r_w for the full-length residual r"""
        r_w = r[self.design.active]
        return 0.5 * float(r_w @ self.solve_w(r_w))


def restrict(error_model: ErrorModel, design: Design) -> RestrictedLikelihood:
    """Select the active rows/columns of the total-error model and factorize them"""
    if design.n_s != error_model.n_s:
        raise ValueError(f"design has {design.n_s} sensors, error model has {error_model.n_s}")
    active = design.active
    Gamma_w = error_model.Gamma_nu[np.ix_(active, active)]
    factor = None
    if len(active):
        try:
            factor = sla.cho_factor(Gamma_w)
        except np.linalg.LinAlgError as e:
            raise ContractViolation(f"restricted total-error covariance is not SPD: {e}")
    return RestrictedLikelihood(design, error_model, error_model.eps0[active].copy(), Gamma_w, factor)


@dataclass
class Linearization:
    """State (and adjoint, when data were given) at a fixed parameter"""
    m: np.ndarray
    system: AssembledSystem
    u: np.ndarray
    residual: Optional[np.ndarray] = None
    p: Optional[np.ndarray] = None


@dataclass
class MapResult:
    m_map: Field
    iterations: int
    final_gradient_norm: float
    cost_terms: Tuple[float, float]
    converged: bool
    initial_gradient_norm: float = 0.0
    reference_gradient_norm: float = 0.0
    linearization: Optional[Linearization] = field(default=None, repr=False)


@dataclass
class LowRankPosterior:
    """Gaussian posterior at a MAP point with generalized eigenpairs (H s = lam P s)"""
    map: MapResult
    eigpairs: EigPairs
    rank_used: int
    prior: GaussianFieldPrior = field(repr=False)

    def _weights(self) -> np.ndarray:
        lam = self.eigpairs.values
        return lam / (1.0 + lam)

    def trace_reduction(self) -> float:
        """sum_k lam_k / (1 + lam_k) s_k^T M s_k"""
        S = self.eigpairs.vectors
        if S.shape[1] == 0:
            return 0.0
        norms = np.einsum('ik,ik->k', S, self.prior.M @ S)
        return float(self._weights() @ norms)

    def posterior_trace(self) -> float:
        """tr(C_post M) through the low-rank update of the prior trace"""
        return self.prior.trace() - self.trace_reduction()

    def pointwise_posterior_variance(self) -> Field:
        S = self.eigpairs.vectors
        reduction = (S ** 2) @ self._weights() if S.shape[1] else 0.0
        return Field(self.prior.support, self.prior.pointwise_variance().values - reduction)


class BayesianInversion:
    """Negative log-posterior of m for one restricted likelihood"""

    def __init__(self, forward: ForwardModel, prior: GaussianFieldPrior, rl: RestrictedLikelihood):
        if rl.design.n_s != forward.n_s:
            raise ValueError(f"design has {rl.design.n_s} sensors, forward model has {forward.n_s}")
        self.forward = forward
        self.prior = prior
        self.rl = rl
        self.B = forward.sensors.B
        self.m_pr = prior.mean.values

    @staticmethod
    def _values(m) -> np.ndarray:
        return m.values if isinstance(m, Field) else np.asarray(m, dtype=float)

    def _check_data(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if y.shape != (self.forward.n_s,):
            raise ValueError(f"data needs {self.forward.n_s} entries, got shape {y.shape}")
        return y

    def linearize(self, m, y: Optional[np.ndarray] = None) -> Linearization:
        """Solve the state at m and, with data, the adjoint"""
        m = self._values(m)
        system = self.forward.system(m)
        u = self.forward.state(system)
        lin = Linearization(m=m, system=system, u=u)
        if y is not None and self.rl.n_act > 0:
            y = self._check_data(y)
            lin.residual = self.B @ u + self.rl.error_model.eps0 - y
            lin.p = system.solve(-(self.B.T @ self.rl.weight(lin.residual)), tag='adjoint')
        return lin

    def _prior_cost(self, m: np.ndarray) -> float:
        dm = m - self.m_pr
        return 0.5 * self.prior.cm_inner(dm, dm)

    def misfit(self, m, y: np.ndarray) -> float:
        """Data misfit only"""
        if self.rl.n_act == 0:
            return 0.0
        y = self._check_data(y)
        u = self.forward.state(self.forward.system(self._values(m)))
        return self.rl.misfit(self.B @ u + self.rl.error_model.eps0 - y)

    def cost(self, m, y: np.ndarray) -> Tuple[float, float]:
        """(misfit, prior) terms of the negative log-posterior"""
        m = self._values(m)
        return self.misfit(m, y), self._prior_cost(m)

    def _gradient_from(self, lin: Linearization) -> np.ndarray:
        g = self.prior.precision_dual(lin.m - self.m_pr)
        if lin.p is not None:
            g = g + lin.system.robin_gradient(lin.u, lin.p)
        return g

    def gradient(self, m, y: np.ndarray) -> np.ndarray:
        """Dual gradient: P (m - m_pr) + int_{Gamma_R} e^m u p psi_j"""
        return self._gradient_from(self.linearize(m, y))

    def gn_hessian_apply(self, lin: Linearization, dm: np.ndarray,
                         include_prior: bool = False) -> np.ndarray:
        """Gauss-Newton misfit Hessian action (plus prior precision if requested)"""
        dm = self._values(dm)
        out = self.prior.precision_dual(dm) if include_prior else np.zeros_like(dm)
        if self.rl.n_act == 0:
            return out
        system = lin.system
        u_hat = system.solve(-system.robin_derivative_action(dm, lin.u), tag='incremental-state')
        p_hat = system.solve(-(self.B.T @ self.rl.weight(self.B @ u_hat)), tag='incremental-adjoint')
        return out + system.robin_gradient(lin.u, p_hat)

    def gradient_norm(self, g: np.ndarray) -> float:
        """Prior-preconditioned norm sqrt(g^T C g)"""
        return float(np.sqrt(max(g @ self.prior.covariance_dual(g), 0.0)))

    def reference_gradient_norm(self, y: np.ndarray) -> float:
        """Gradient norm at the prior mean; fixes the GN tolerance for every start point"""
        return self.gradient_norm(self._gradient_from(self.linearize(self.m_pr, self._check_data(y))))

    def solve_map(self, y: np.ndarray, init=None, g_ref: Optional[float] = None) -> MapResult:
        """Inexact Gauss-Newton-CG with Armijo backtracking.

        Stops when |g| <= max(GN_ATOL, GN_RTOL * g_ref), where g_ref is the
        gradient norm at the prior mean (computed when not given), so warm and
        cold starts share one stopping rule.
        """
        y = self._check_data(y)
        m = self.m_pr.copy() if init is None else self._values(init).copy()
        if m.shape != self.m_pr.shape:
            raise ValueError(f"initial guess needs {self.m_pr.shape[0]} values, got {m.shape}")

        lin = self.linearize(m, y)
        misfit = self.rl.misfit(lin.residual) if lin.residual is not None else 0.0
        cost = misfit + self._prior_cost(m)
        g = self._gradient_from(lin)
        g_norm = g0_norm = self.gradient_norm(g)
        if g_ref is None:
            g_ref = g0_norm if init is None else self.reference_gradient_norm(y)
        tol = max(Config.GN_ATOL, Config.GN_RTOL * g_ref)
        max_inner = self.rl.n_act + 10

        iterations = 0
        converged = g_norm <= tol
        while not converged and iterations < Config.GN_MAXITER:
            forcing = min(0.5, np.sqrt(g_norm / g_ref)) if g_ref > 0 else 0.5
            hessian = lambda x, lin=lin: self.gn_hessian_apply(lin, x, include_prior=True)
            step = cg_solve(hessian, -g, precond=self.prior.covariance_dual, rtol=forcing,
                            maxiter=max_inner, tag='gn-cg', strict=False)
            descent = float(g @ step)

            alpha, accepted = 1.0, False
            for _ in range(Config.MAX_BACKTRACKS):
                m_trial = m + alpha * step
                lin_trial = self.linearize(m_trial, y)
                misfit_trial = self.rl.misfit(lin_trial.residual) if lin_trial.residual is not None else 0.0
                cost_trial = misfit_trial + self._prior_cost(m_trial)
                if cost_trial <= cost + Config.ARMIJO_C * alpha * descent:
                    accepted = True
                    break
                alpha *= Config.BACKTRACK_FACTOR
            if not accepted:
                # predicted decrease below cost round-off: m is optimal to working precision
                converged = abs(descent) <= Config.STALL_RTOL * max(abs(cost), 1.0)
                log = logger.debug if converged else logger.warning
                log(f"Line search stalled at GN iteration {iterations} "
                    f"(cost {cost:.6e}, |g| {g_norm:.3e}, predicted decrease {abs(descent):.3e})")
                break

            m, lin, cost, misfit = m_trial, lin_trial, cost_trial, misfit_trial
            g = self._gradient_from(lin)
            g_norm = self.gradient_norm(g)
            iterations += 1
            logger.debug(f"GN {iterations}: cost={cost:.6e}, |g|={g_norm:.3e}, alpha={alpha:g}")
            converged = g_norm <= tol

        if not converged:
            logger.warning(f"MAP solve stopped after {iterations} iterations with "
                           f"|g|={g_norm:.3e} > {tol:.3e}")
        return MapResult(
            m_map=Field(self.prior.support, m),
            iterations=iterations,
            final_gradient_norm=g_norm,
            cost_terms=(misfit, cost - misfit),
            converged=converged,
            initial_gradient_norm=g0_norm,
            reference_gradient_norm=g_ref,
            linearization=lin,
        )

    def posterior_lowrank(self, map_result: MapResult, r: Optional[int] = None) -> LowRankPosterior:
        """Top-r generalized eigenpairs of (H, P) at the MAP point"""
        r = self.rl.n_act if r is None else r
        if r < 0:
            raise ValueError(f"rank must be nonnegative, got {r}")
        n = self.m_pr.shape[0]
        r = min(r, n)
        lin = map_result.linearization
        if lin is None or not np.array_equal(lin.m, map_result.m_map.values):
            lin = self.linearize(map_result.m_map)

        if r == 0 or self.rl.n_act == 0:
            pairs = EigPairs(values=np.zeros(0), vectors=np.zeros((n, 0)))
        else:
            pairs = lanczos_eigs(
                lambda x: self.prior.covariance_dual(self.gn_hessian_apply(lin, x)),
                k=r, dim_hint=n, inner=self.prior.precision_dual, tol=1e-10)
            pairs.values = np.clip(pairs.values, 0.0, None)
        rank_used = int(np.count_nonzero(pairs.values > 0))
        return LowRankPosterior(map=map_result, eigpairs=pairs, rank_used=rank_used, prior=self.prior)


def posterior_trace(posterior: LowRankPosterior) -> float:
    return posterior.posterior_trace()


def pointwise_posterior_variance(posterior: LowRankPosterior) -> Field:
    return posterior.pointwise_posterior_variance()
