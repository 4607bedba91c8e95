"""
Gaussian priors for the Robin field m on the bottom face and the conductivity
field xi in the volume.

Both are squared-inverse Laplacian-like measures: with A the discretization of
-div(Theta grad .) + gamma . plus a Robin term beta on the domain boundary and M
the mass matrix, the coefficient covariance is C = A^-1 M A^-1.
"""

import logging
import threading
from typing import Optional, Union

import numpy as np
import scipy.sparse as sp

from config import RunConfig, ConfigError
from mesh_fem import Field, Mesh, StructuredGrid
from numkit import SparseSymOp, gaussian_vector

logger = logging.getLogger(__name__)

# Robin coefficient denominator that damps boundary variance inflation
ROBIN_DENOMINATOR = 1.42

FieldLike = Union[Field, np.ndarray]


class GaussianFieldPrior:
    """Gaussian measure N(mean, A^-1 M A^-1) on the nodal space of a grid"""

    def __init__(self, grid: StructuredGrid, support: str, mean: Field,
                 Theta: np.ndarray, gamma: float, robin_beta: float):
        if gamma <= 0:
            raise ValueError(f"gamma must be positive, got {gamma}")
        if robin_beta < 0:
            raise ValueError(f"robin_beta must be nonnegative, got {robin_beta}")
        Theta = np.atleast_2d(np.asarray(Theta, dtype=float))
        if Theta.shape != (grid.dim, grid.dim) or np.any(np.linalg.eigvalsh(Theta) <= 0):
            raise ValueError(f"Theta must be a symmetric positive {grid.dim}x{grid.dim} tensor")

        self.grid = grid
        self.support = support
        self.mean = mean
        self.Theta = Theta
        self.gamma = float(gamma)
        self.robin_beta = float(robin_beta)

        M = grid.mass()
        A = grid.stiffness(tensor=Theta) + self.gamma * M
        if self.robin_beta > 0:
            A = A + self.robin_beta * grid.boundary_mass()
        try:
            self.A_op = SparseSymOp(A, tag=f'prior-{support}', factorize=True)
            self.M_op = SparseSymOp(M, tag=f'mass-{support}', factorize=True)
        except RuntimeError as e:
            raise ConfigError(f"prior operator on {support} could not be factorized: {e}")
        self.G = grid.sqrt_mass()

        self._lock = threading.Lock()
        self._dense_cov = None

    @property
    def dimension(self) -> int:
        return self.grid.n_nodes

    @property
    def M(self) -> sp.csc_matrix:
        return self.M_op.matrix

    @property
    def white_noise_size(self) -> int:
        """Number of standard normal draws consumed by one sample"""
        return self.G.shape[1]

    def _values(self, f: FieldLike) -> np.ndarray:
        if isinstance(f, Field):
            if f.support != self.support:
                raise ValueError(f"expected a {self.support} field, got {f.support}")
            f = f.values
        f = np.asarray(f, dtype=float)
        if f.shape != (self.dimension,):
            raise ValueError(f"{self.support} field needs {self.dimension} values, got shape {f.shape}")
        return f

    def _like(self, template: FieldLike, values: np.ndarray) -> FieldLike:
        return Field(self.support, values) if isinstance(template, Field) else values

    # coefficient-space kernels (dual vectors in, dual vectors out where noted)

    def covariance_dual(self, g: np.ndarray, tag: str = 'prior') -> np.ndarray:
        """C g = A^-1 M A^-1 g for a dual (mass-weighted) vector g"""
        return self.A_op.solve(self.M @ self.A_op.solve(g, tag=tag), tag=tag)

    def precision_dual(self, x: np.ndarray, tag: str = 'prior') -> np.ndarray:
        """P x = A M^-1 A x, the dual vector of the Cameron-Martin form"""
        return self.A_op @ self.M_op.solve(self.A_op @ x, tag=f'mass-{self.support}')

    # field-space operations

    def sample(self, stream: np.random.Generator) -> Field:
        """mean + A^-1 G z with z standard normal and G G^T = M"""
        z = gaussian_vector(stream, self.white_noise_size)
        return Field(self.support, self.mean.values + self.A_op.solve(self.G @ z, tag='prior-sample'))

    def apply_cov(self, f: FieldLike) -> FieldLike:
        """Covariance operator on fields, A^-1 M A^-1 M f (self-adjoint in the M product)"""
        values = self._values(f)
        return self._like(f, self.covariance_dual(self.M @ values))

    def apply_precision(self, f: FieldLike) -> FieldLike:
        """Inverse of apply_cov: M^-1 A M^-1 A f"""
        values = self._values(f)
        return self._like(f, self.M_op.solve(self.precision_dual(values), tag=f'mass-{self.support}'))

    def cm_inner(self, a: FieldLike, b: FieldLike) -> float:
        """Cameron-Martin inner product (A a)^T M^-1 (A b)"""
        Aa = self.A_op @ self._values(a)
        Ab = self.A_op @ self._values(b)
        return float(Aa @ self.M_op.solve(Ab, tag=f'mass-{self.support}'))

    # dense diagnostics

    def _covariance(self) -> np.ndarray:
        with self._lock:
            if self._dense_cov is None:
                A_inv = self.A_op.solve(np.eye(self.dimension), tag='prior-dense')
                self._dense_cov = A_inv @ (self.M @ A_inv)
                self._dense_cov = 0.5 * (self._dense_cov + self._dense_cov.T)
            return self._dense_cov

    def covariance_matrix(self) -> np.ndarray:
        """Dense C = A^-1 M A^-1"""
        return self._covariance().copy()

    def precision_matrix(self) -> np.ndarray:
        """Dense P = A M^-1 A"""
        A = self.A_op.toarray()
        return A @ self.M_op.solve(A, tag=f'mass-{self.support}')

    def pointwise_variance(self) -> Field:
        """Exact diagonal of the covariance matrix"""
        return Field(self.support, np.diag(self._covariance()).copy())

    def trace(self) -> float:
        """Operator trace tr(C M)"""
        return float(np.sum(self._covariance() * self.M.toarray()))


def default_robin_beta(diffusion: float, reaction: float) -> float:
    """sqrt(theta * gamma) / 1.42"""
    return float(np.sqrt(diffusion * reaction) / ROBIN_DENOMINATOR)


def make_m_prior(mesh: Mesh, run: Optional[RunConfig] = None) -> GaussianFieldPrior:
    """Prior on the bottom face: mean 1, Theta = theta I_2, gamma = alpha"""
    run = run or RunConfig()
    beta = run.m_robin_beta if run.m_robin_beta >= 0 else default_robin_beta(run.theta, run.alpha)
    prior = GaussianFieldPrior(
        grid=mesh.bottom,
        support='bottom',
        mean=Field.constant(mesh, 'bottom', run.m_mean),
        Theta=run.theta * np.eye(2),
        gamma=run.alpha,
        robin_beta=beta,
    )
    logger.debug(f"m prior: theta={run.theta}, alpha={run.alpha}, robin_beta={beta:.4f}")
    return prior


def make_xi_prior(mesh: Mesh, run: Optional[RunConfig] = None) -> GaussianFieldPrior:
    """Prior in the volume: mean 0, anisotropic Theta with short z correlation"""
    run = run or RunConfig()
    Theta = np.diag(run.Theta_diag)
    beta = run.xi_robin_beta if run.xi_robin_beta >= 0 else default_robin_beta(min(run.Theta_diag), run.gamma)
    prior = GaussianFieldPrior(
        grid=mesh.volume,
        support='volume',
        mean=Field.constant(mesh, 'volume', run.xi_mean),
        Theta=Theta,
        gamma=run.gamma,
        robin_beta=beta,
    )
    logger.debug(f"xi prior: Theta={run.Theta_diag}, gamma={run.gamma}, robin_beta={beta:.4f}")
    return prior
