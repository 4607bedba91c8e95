#!/usr/bin/env python3
"""
Forward Models and Approximation Error Statistics

The accurate parameter-to-observable map G(m, xi) solves the state problem for
both uncertain fields; the approximate map F(m) = G(m, xi_bar) freezes xi at its
prior mean. The approximation error eps = G(m, xi) - F(m) is summarized by a
Monte Carlo mean and covariance, and folded with the measurement noise into the
total-error model nu ~ N(eps0, Gamma_eps + sigma^2 I).
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple, Union

import numpy as np

from mesh_fem import (AssembledSystem, Field, Mesh, SensorGrid, assemble,
                      boundary_source, observe)
from numkit import gaussian_vector, parallel_map, random_stream
from prior import GaussianFieldPrior

logger = logging.getLogger(__name__)

Parameter = Union[Field, np.ndarray]


@dataclass
class ErrorModel:
    """Total-error statistics nu ~ N(eps0, Gamma_eps + sigma^2 I)"""
    eps0: np.ndarray
    Gamma_eps: np.ndarray
    sigma: float
    n_mc_used: int = 0
    seed: Optional[int] = None
    Gamma_nu: np.ndarray = field(init=False)

    def __post_init__(self):
        self.eps0 = np.asarray(self.eps0, dtype=float)
        self.Gamma_eps = np.atleast_2d(np.asarray(self.Gamma_eps, dtype=float))
        n = self.eps0.shape[0]
        if self.Gamma_eps.shape != (n, n):
            raise ValueError(f"Gamma_eps shape {self.Gamma_eps.shape} does not match eps0 length {n}")
        if self.sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        self.Gamma_nu = self.Gamma_eps + self.Gamma_noise

    @classmethod
    def from_total(cls, eps0: np.ndarray, Gamma_nu: np.ndarray, sigma: float,
                   n_mc_used: int = 0, seed: Optional[int] = None) -> 'ErrorModel':
        """Rebuild from a stored Gamma_nu (the noise block is removed again)"""
        Gamma_nu = np.atleast_2d(np.asarray(Gamma_nu, dtype=float))
        model = cls(eps0, Gamma_nu - sigma ** 2 * np.eye(Gamma_nu.shape[0]), sigma, n_mc_used, seed)
        model.Gamma_nu = Gamma_nu
        return model

    @property
    def n_s(self) -> int:
        return self.eps0.shape[0]

    @property
    def Gamma_noise(self) -> np.ndarray:
        return self.sigma ** 2 * np.eye(self.n_s)

    def marginal_std(self) -> np.ndarray:
        """Per-sensor standard deviation of the approximation error"""
        return np.sqrt(np.clip(np.diag(self.Gamma_eps), 0.0, None))

    def correlation(self) -> np.ndarray:
        """Correlation matrix of the approximation error (zero rows for zero variance)"""
        std = self.marginal_std()
        scale = np.where(std > 0, std, 1.0)
        corr = self.Gamma_eps / np.outer(scale, scale)
        corr[std == 0, :] = 0.0
        corr[:, std == 0] = 0.0
        return corr

    def max_offdiag_correlation(self) -> float:
        corr = self.correlation()
        if self.n_s < 2:
            return 0.0
        return float(np.max(corr[~np.eye(self.n_s, dtype=bool)]))


@dataclass
class TrainingSample:
    """One draw (m_i, xi_i, eta_i) and its data y_i = G(m_i, xi_i) + eta_i"""
    index: int
    m: Parameter
    xi: Parameter
    eta: np.ndarray
    y: np.ndarray


@dataclass
class TrainingSet:
    samples: List[TrainingSample]
    purpose: str
    master_seed: int

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]


class ForwardModel:
    """PDE-based observables G(m, xi) and F(m) with the priors of both fields"""

    def __init__(self, mesh: Mesh, sensors: SensorGrid, m_prior: GaussianFieldPrior,
                 xi_prior: GaussianFieldPrior, sigma: float = 1e-3,
                 h: Callable = boundary_source):
        self.mesh = mesh
        self.sensors = sensors
        self.m_prior = m_prior
        self.xi_prior = xi_prior
        self.sigma = float(sigma)
        self.rhs = mesh.neumann_load(h)
        self.xi_bar = xi_prior.mean
        # the nominal stiffness is reused for every approximate-model assembly
        self._nominal_stiffness = mesh.volume.stiffness(
            np.exp(mesh.volume.to_quadrature(self.xi_bar.values)))

    @property
    def n_s(self) -> int:
        return self.sensors.n_s

    @property
    def n_m(self) -> int:
        return self.mesh.n_bottom

    def system(self, m: Parameter, xi: Optional[Parameter] = None) -> AssembledSystem:
        """Assembled state operator; xi=None selects the nominal xi_bar"""
        if xi is None:
            return assemble(self.mesh, self.xi_bar, m, stiffness=self._nominal_stiffness)
        return assemble(self.mesh, xi, m)

    def state(self, system: AssembledSystem) -> np.ndarray:
        return system.solve(self.rhs, tag='state')

    def forward_full(self, m: Parameter, xi: Parameter) -> np.ndarray:
        """G(m, xi): observations of the state for both fields"""
        return observe(self.state(self.system(m, xi)), self.sensors)

    def forward_approx(self, m: Parameter) -> np.ndarray:
        """F(m) = G(m, xi_bar)"""
        return observe(self.state(self.system(m)), self.sensors)

    def draw(self, master_seed: int, purpose: str, index: int) -> Tuple[Field, Field]:
        """Independent prior draws (m_i, xi_i) from per-index streams"""
        m = self.m_prior.sample(random_stream(master_seed, f'{purpose}-m', index))
        xi = self.xi_prior.sample(random_stream(master_seed, f'{purpose}-xi', index))
        return m, xi


@dataclass
class LinearObservation:
    """Observation matrix standing in for the sensor grid of a linear model"""
    B: np.ndarray

    @property
    def n_s(self) -> int:
        return self.B.shape[0]


@dataclass
class LinearState:
    """Identity state system u = m, so the Gauss-Newton solver runs on a linear model unchanged"""
    m: np.ndarray

    def solve(self, rhs: np.ndarray, tag: str = 'state') -> np.ndarray:
        return np.array(rhs, dtype=float)

    def robin_derivative_action(self, dm: np.ndarray, u: np.ndarray) -> np.ndarray:
        return -np.asarray(dm, dtype=float)

    def robin_gradient(self, u: np.ndarray, p: np.ndarray) -> np.ndarray:
        return -np.asarray(p, dtype=float)


class LinearSandboxAdapter:
    """Presents a linear model y = S m + T xi + eta with the ForwardModel interface"""

    def __init__(self, model, xi_nominal: Optional[np.ndarray] = None):
        self.model = model
        self.sigma = float(np.sqrt(model.sigma2))
        self.xi_bar = model.xi_bar if xi_nominal is None else np.asarray(xi_nominal, dtype=float)
        self._L_pr = np.linalg.cholesky(model.C_pr)
        self._L_xi = np.linalg.cholesky(model.C_xi) if model.C_xi.size else np.zeros((0, 0))
        self.sensors = LinearObservation(model.S)

    @property
    def n_s(self) -> int:
        return self.model.S.shape[0]

    def forward_full(self, m: np.ndarray, xi: np.ndarray) -> np.ndarray:
        return self.model.S @ m + self.model.T @ xi

    def forward_approx(self, m: np.ndarray) -> np.ndarray:
        return self.forward_full(m, self.xi_bar)

    def draw(self, master_seed: int, purpose: str, index: int) -> Tuple[np.ndarray, np.ndarray]:
        m_stream = random_stream(master_seed, f'{purpose}-m', index)
        xi_stream = random_stream(master_seed, f'{purpose}-xi', index)
        m = self.model.m_pr + self._L_pr @ gaussian_vector(m_stream, self._L_pr.shape[0])
        xi = self.model.xi_bar + self._L_xi @ gaussian_vector(xi_stream, self._L_xi.shape[0])
        return m, xi

    def system(self, m: Parameter, xi: Optional[Parameter] = None) -> LinearState:
        return LinearState(np.asarray(m.values if isinstance(m, Field) else m, dtype=float))

    def state(self, system: LinearState) -> np.ndarray:
        return system.m.copy()

    def inversion_error_model(self) -> ErrorModel:
        """Total-error model for the state-only observation S m: the T xi term becomes the offset"""
        model = self.model
        return ErrorModel(model.T @ model.xi_bar, model.T @ model.C_xi @ model.T.T, self.sigma)


def repair_psd(matrix: np.ndarray) -> Tuple[np.ndarray, int]:
    """Symmetrize and clip negative eigenvalues; returns the number clipped"""
    sym = 0.5 * (matrix + matrix.T)
    if sym.shape[0] == 0:
        return sym, 0
    values, vectors = np.linalg.eigh(sym)
    negative = values < 0.0
    if not np.any(negative):
        return sym, 0
    values[negative] = 0.0
    repaired = (vectors * values) @ vectors.T
    return 0.5 * (repaired + repaired.T), int(negative.sum())


def estimate_bae(model, n_mc: int, master_seed: int, workers: Optional[int] = None,
                 show_progress: bool = True) -> ErrorModel:
    """Monte Carlo mean and unbiased covariance of eps = G(m, xi) - F(m)"""
    if not isinstance(n_mc, (int, np.integer)) or n_mc < 2:
        raise ValueError(f"n_mc must be an integer >= 2, got {n_mc}")

    def error_sample(i: int) -> np.ndarray:
        m, xi = model.draw(master_seed, 'bae', i)
        return model.forward_full(m, xi) - model.forward_approx(m)

    logger.info(f"Sampling approximation error: n_mc={n_mc}, seed={master_seed}")
    errors = np.array(parallel_map(error_sample, n_mc, workers, desc='BAE samples',
                                   show_progress=show_progress))

    eps0 = errors.mean(axis=0)
    centered = errors - eps0
    Gamma_eps = centered.T @ centered / (n_mc - 1)
    Gamma_eps, clipped = repair_psd(Gamma_eps)
    if clipped:
        logger.debug(f"Clipped {clipped} negative eigenvalues of the sample covariance")

    error_model = ErrorModel(eps0, Gamma_eps, model.sigma, n_mc_used=n_mc, seed=master_seed)
    logger.info(f"Approximation error: max|eps0|={np.max(np.abs(eps0)):.3e}, "
                f"max std={np.max(error_model.marginal_std()):.3e}, sigma={model.sigma:.1e}")
    return error_model


def make_training_set(model, n_d: int, master_seed: int, reuse_bae_samples: bool = False,
                      purpose: str = 'training') -> TrainingSet:
    """n_d triples (m_i, xi_i, eta_i) with data y_i = G(m_i, xi_i) + eta_i"""
    if not isinstance(n_d, (int, np.integer)) or n_d < 1:
        raise ValueError(f"n_d must be a positive integer, got {n_d}")
    draw_purpose = 'bae' if reuse_bae_samples else purpose
    samples = []
    for i in range(n_d):
        m, xi = model.draw(master_seed, draw_purpose, i)
        eta = model.sigma * gaussian_vector(random_stream(master_seed, f'{purpose}-noise', i), model.n_s)
        y = model.forward_full(m, xi) + eta
        samples.append(TrainingSample(index=i, m=m, xi=xi, eta=eta, y=y))
    logger.debug(f"Drew {n_d} '{purpose}' samples (parameter stream '{draw_purpose}')")
    return TrainingSet(samples=samples, purpose=purpose, master_seed=master_seed)
