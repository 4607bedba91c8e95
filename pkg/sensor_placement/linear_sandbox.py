"""
Finite-dimensional linear model y = S m + T xi + eta with closed-form posteriors.

Dense algebra only; used as an exact oracle for the approximation-error
statistics, the marginalization identity and the two trace estimators.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
import scipy.linalg as sla

from numkit import cg_solve, random_stream

logger = logging.getLogger(__name__)


@dataclass
class LinearModel:
    S: np.ndarray
    T: np.ndarray
    C_pr: np.ndarray
    C_xi: np.ndarray
    m_pr: np.ndarray
    xi_bar: np.ndarray
    sigma2: float

    def __post_init__(self):
        d, n = self.S.shape
        if self.T.shape[0] != d:
            raise ValueError(f"T has {self.T.shape[0]} rows, S has {d}")
        p = self.T.shape[1]
        if self.C_pr.shape != (n, n) or self.C_xi.shape != (p, p):
            raise ValueError("covariance blocks do not match the operator dimensions")
        if self.m_pr.shape != (n,) or self.xi_bar.shape != (p,):
            raise ValueError("mean vectors do not match the operator dimensions")
        if self.sigma2 <= 0:
            raise ValueError(f"sigma2 must be positive, got {self.sigma2}")
        for name, C in (('C_pr', self.C_pr), ('C_xi', self.C_xi)):
            if C.size and np.any(np.linalg.eigvalsh(0.5 * (C + C.T)) <= 0):
                raise ValueError(f"{name} must be symmetric positive definite")

    @property
    def dims(self) -> Tuple[int, int, int]:
        return self.S.shape[0], self.S.shape[1], self.T.shape[1]

    def error_covariance(self) -> np.ndarray:
        """T C_xi T^T"""
        return self.T @ self.C_xi @ self.T.T

    def total_covariance(self) -> np.ndarray:
        """T C_xi T^T + sigma^2 I"""
        return self.error_covariance() + self.sigma2 * np.eye(self.dims[0])


def random_spd(n: int, rng: np.random.Generator, low: float = 1e-3, high: float = 1.0) -> np.ndarray:
    """Q diag(lam) Q^T with a log-uniform spectrum in [low, high]"""
    if n == 0:
        return np.zeros((0, 0))
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    lam = np.exp(rng.uniform(np.log(low), np.log(high), size=n))
    C = (Q * lam) @ Q.T
    return 0.5 * (C + C.T)


def random_linear_model(rng: np.random.Generator, d: int = 6, n: int = 4, p: int = 3,
                        sigma2: float = 1e-2) -> LinearModel:
    return LinearModel(
        S=rng.standard_normal((d, n)),
        T=rng.standard_normal((d, p)),
        C_pr=random_spd(n, rng),
        C_xi=random_spd(p, rng),
        m_pr=rng.standard_normal(n),
        xi_bar=rng.standard_normal(p),
        sigma2=sigma2,
    )


def offset_eps0(model: LinearModel, xi_nominal: np.ndarray) -> np.ndarray:
    """Approximation-error mean when F freezes xi at a value other than its mean"""
    return model.T @ (model.xi_bar - np.asarray(xi_nominal, dtype=float))


def analytic_posterior_cov(model: LinearModel) -> np.ndarray:
    """(S^T (T C_xi T^T + sigma^2 I)^-1 S + C_pr^-1)^-1"""
    G = np.linalg.inv(model.total_covariance())
    H = model.S.T @ G @ model.S + np.linalg.inv(model.C_pr)
    return np.linalg.inv(0.5 * (H + H.T))


def analytic_posterior_mean(model: LinearModel, y: np.ndarray,
                            xi_nominal: Optional[np.ndarray] = None) -> np.ndarray:
    """Posterior mean under the total-error likelihood"""
    xi_nominal = model.xi_bar if xi_nominal is None else xi_nominal
    eps0 = offset_eps0(model, xi_nominal)
    residual = y - model.S @ model.m_pr - model.T @ xi_nominal - eps0
    G = np.linalg.inv(model.total_covariance())
    return model.m_pr + analytic_posterior_cov(model) @ (model.S.T @ G @ residual)


def sandbox_map(model: LinearModel, y: np.ndarray) -> np.ndarray:
    """One prior-preconditioned Gauss-Newton-CG step from m_pr (exact for linear models)"""
    G = np.linalg.inv(model.total_covariance())
    P = np.linalg.inv(model.C_pr)
    hessian = model.S.T @ G @ model.S + P
    g = -(model.S.T @ G @ (y - model.S @ model.m_pr - model.T @ model.xi_bar))
    step = cg_solve(hessian, -g, precond=model.C_pr, rtol=1e-12, tag='sandbox')
    return model.m_pr + step


def marginal_posterior_cov(model: LinearModel) -> np.ndarray:
    """[C_pr^-1 + S^T Gn^-1 S - S^T Gn^-1 T (C_xi^-1 + T^T Gn^-1 T)^-1 T^T Gn^-1 S]^-1"""
    d, n, p = model.dims
    Gn_inv = np.eye(d) / model.sigma2
    H = np.linalg.inv(model.C_pr) + model.S.T @ Gn_inv @ model.S
    if p:
        inner = np.linalg.inv(model.C_xi) + model.T.T @ Gn_inv @ model.T
        coupling = model.S.T @ Gn_inv @ model.T
        H = H - coupling @ np.linalg.solve(inner, coupling.T)
    return np.linalg.inv(0.5 * (H + H.T))


def smw_check(model: LinearModel, relative: bool = False) -> float:
    """Max-norm deviation between (T C_xi T^T + s2 I)^-1 and its Woodbury expansion.

    relative=True divides by max|inverse|, whose entries grow like 1/s2.
    """
    d, _, p = model.dims
    direct = np.linalg.inv(model.total_covariance())
    woodbury = np.eye(d) / model.sigma2
    if p:
        inner = np.linalg.inv(model.C_xi) + model.T.T @ model.T / model.sigma2
        woodbury = woodbury - model.T @ np.linalg.solve(inner, model.T.T) / model.sigma2 ** 2
    deviation = float(np.max(np.abs(direct - woodbury)))
    return deviation / float(np.max(np.abs(direct))) if relative else deviation


def error_spectrum_report(model: LinearModel) -> Tuple[np.ndarray, np.ndarray]:
    """Eigenvalues of T C_xi T^T (descending) and per-sensor total variances"""
    lam, V = np.linalg.eigh(model.error_covariance())
    order = np.argsort(lam)[::-1]
    lam, V = np.clip(lam[order], 0.0, None), V[:, order]
    variances = (V ** 2) @ (lam + model.sigma2)
    return lam, variances


def conjugate_update_samples(model: LinearModel, y: np.ndarray, n: int, seed: int) -> np.ndarray:
    """Posterior samples by perturbing prior draws with the Kalman-type update"""
    d, n_m, p = model.dims
    Gamma = model.total_covariance()
    gain = model.C_pr @ model.S.T @ np.linalg.inv(model.S @ model.C_pr @ model.S.T + Gamma)
    L_pr = np.linalg.cholesky(model.C_pr)
    L_nu = np.linalg.cholesky(Gamma)
    samples = np.empty((n, n_m))
    for i in range(n):
        stream = random_stream(seed, 'sandbox-posterior', i)
        m = model.m_pr + L_pr @ stream.standard_normal(n_m)
        y_sim = model.S @ m + model.T @ model.xi_bar + L_nu @ stream.standard_normal(d)
        samples[i] = m + gain @ (y - y_sim)
    return samples


def quadratic_form_trace_check(C: np.ndarray, K: np.ndarray, n_tr: int, seed: int) -> Dict[str, float]:
    """Dense tr(CK), tr(C^1/2 K C^1/2) and the sample mean of z^T K z, z ~ N(0, C)"""
    C_half = np.real(sla.sqrtm(C))
    L = np.linalg.cholesky(C)
    values = np.empty(n_tr)
    for j in range(n_tr):
        z = L @ random_stream(seed, 'sandbox-trace', j).standard_normal(C.shape[0])
        values[j] = z @ K @ z
    return {
        'trace_CK': float(np.trace(C @ K)),
        'trace_sqrt': float(np.trace(C_half @ K @ C_half)),
        'estimate': float(values.mean()),
        'std_error': float(values.std(ddof=1) / np.sqrt(n_tr)) if n_tr > 1 else float('inf'),
    }


def lowrank_trace_identity(C: np.ndarray, A: np.ndarray) -> Tuple[float, float]:
    """(tr(C (I + A)^-1), tr(C) - sum_k lam_k/(1+lam_k) |C^1/2 v_k|^2) for symmetric PSD A"""
    n = C.shape[0]
    direct = float(np.trace(C @ np.linalg.inv(np.eye(n) + A)))
    lam, V = np.linalg.eigh(0.5 * (A + A.T))
    lam = np.clip(lam, 0.0, None)
    norms = np.einsum('ik,ik->k', V, C @ V)
    return direct, float(np.trace(C) - (lam / (1.0 + lam)) @ norms)


def sandbox_checks(n_instances: int = 20, seed: int = 0) -> List[Dict[str, object]]:
    """Run every dense identity on random instances; one row per identity"""
    rows = {
        'smw': [],
        'smw_relative': [],
        'marginal_vs_bae_posterior': [],
        'trace_identity': [],
        'lowrank_trace_identity': [],
    }
    for k in range(n_instances):
        rng = random_stream(seed, 'sandbox-instance', k)
        model = random_linear_model(rng, d=int(rng.integers(3, 13)), n=int(rng.integers(2, 8)),
                                    p=int(rng.integers(1, 6)))
        rows['smw'].append(smw_check(model))
        rows['smw_relative'].append(smw_check(model, relative=True))
        diff = analytic_posterior_cov(model) - marginal_posterior_cov(model)
        rows['marginal_vs_bae_posterior'].append(
            float(np.linalg.norm(diff) / np.linalg.norm(analytic_posterior_cov(model))))
        n = model.dims[1]
        C, K = random_spd(n, rng), random_spd(n, rng)
        check = quadratic_form_trace_check(C, K, 2, seed)
        rows['trace_identity'].append(abs(check['trace_CK'] - check['trace_sqrt']) / abs(check['trace_CK']))
        lhs, rhs = lowrank_trace_identity(C, random_spd(n, rng, high=10.0))
        rows['lowrank_trace_identity'].append(abs(lhs - rhs) / abs(lhs))

    table = []
    for name, deviations in rows.items():
        worst = float(np.max(deviations))
        table.append({'check': name, 'max_deviation': worst, 'passed': worst <= 1e-10})
        logger.info(f"{name}: max deviation {worst:.3e} ({'ok' if worst <= 1e-10 else 'FAILED'})")
    return table
