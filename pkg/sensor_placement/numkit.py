"""
Numerical kernels shared by every stage of the pipeline.

Sparse symmetric operators with cached factorizations, preconditioned conjugate
gradients, a fully reorthogonalized Lanczos eigensolver, counter-based random
streams and the global PDE-solve ledger.
"""

import hashlib
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Union

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from tqdm import tqdm

from config import Config

logger = logging.getLogger(__name__)

Operator = Union['SparseSymOp', sp.spmatrix, np.ndarray, Callable[[np.ndarray], np.ndarray]]


class ConvergenceError(RuntimeError):
    """An iterative method hit its iteration limit"""

    def __init__(self, message: str, iterations: int, residual_norm: float):
        super().__init__(f"{message} (iterations={iterations}, residual={residual_norm:.3e})")
        self.iterations = iterations
        self.residual_norm = residual_norm


class ContractViolation(RuntimeError):
    """An operator broke a structural assumption (e.g. self-adjointness)"""


class SolveLedger:
    """Thread-safe counter of linear solves, keyed by operator tag"""

    def __init__(self):
        self._lock = threading.Lock()
        self._counts: Dict[str, int] = {}

    def record(self, tag: str, n: int = 1):
        with self._lock:
            self._counts[tag] = self._counts.get(tag, 0) + n

    def counts(self) -> Dict[str, int]:
        with self._lock:
            return dict(self._counts)

    def total(self) -> int:
        with self._lock:
            return sum(self._counts.values())

    def reset(self):
        with self._lock:
            self._counts = {}


SOLVE_LEDGER = SolveLedger()


class SparseSymOp:
    """Immutable symmetric sparse matrix with an optional sparse LU factorization"""

    def __init__(self, matrix, tag: str = 'generic', factorize: bool = False):
        self.matrix = sp.csc_matrix(matrix, dtype=float)
        if self.matrix.shape[0] != self.matrix.shape[1]:
            raise ValueError(f"SparseSymOp needs a square matrix, got {self.matrix.shape}")
        self.tag = tag
        self._lock = threading.Lock()
        self._lu = spla.splu(self.matrix) if factorize else None

    @property
    def dimension(self) -> int:
        return self.matrix.shape[0]

    @property
    def shape(self):
        return self.matrix.shape

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return self.matrix @ x

    def __matmul__(self, x):
        return self.matrix @ x

    def symmetry_error(self) -> float:
        """Relative max-norm asymmetry |A - A^T| / |A|"""
        diff = abs(self.matrix - self.matrix.T).max()
        scale = abs(self.matrix).max()
        return float(diff / scale) if scale > 0 else float(diff)

    def solve(self, b: np.ndarray, tag: Optional[str] = None) -> np.ndarray:
        """Direct solve with the cached factorization (counted in the ledger)"""
        if self._lu is None:
            raise ValueError(f"operator '{self.tag}' was built without a factorization")
        with self._lock:
            x = self._lu.solve(np.asarray(b, dtype=float))
        SOLVE_LEDGER.record(tag or self.tag)
        return x

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()


@dataclass
class CGResult:
    x: np.ndarray
    iterations: int
    residual_norm: float
    converged: bool


@dataclass
class EigPairs:
    """Eigenpairs sorted by non-increasing value; vectors stored column-wise"""
    values: np.ndarray
    vectors: np.ndarray
    residuals: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self):
        return len(self.values)


def _as_apply(op: Operator) -> Callable[[np.ndarray], np.ndarray]:
    if isinstance(op, SparseSymOp):
        return op.matvec
    if sp.issparse(op) or isinstance(op, np.ndarray):
        return lambda x: op @ x
    if isinstance(op, spla.LinearOperator):
        return op.matvec
    return op


def cg_solve(A: Operator, b: np.ndarray, precond: Optional[Operator] = None,
             rtol: float = None, maxiter: int = None, x0: Optional[np.ndarray] = None,
             tag: Optional[str] = None, return_info: bool = False, strict: bool = True):
    """Preconditioned conjugate gradients for a symmetric positive definite A.

    Stops when the Euclidean residual satisfies |Ax - b| <= rtol |b|. With
    strict=True, reaching maxiter raises ConvergenceError; otherwise the last
    iterate is returned with converged=False (inexact Newton inner solves).
    """
    rtol = Config.CG_RTOL if rtol is None else rtol
    if not 0.0 < rtol < 1.0:
        raise ValueError(f"rtol must lie in (0, 1), got {rtol}")
    b = np.asarray(b, dtype=float)
    n = b.shape[0]
    maxiter = Config.CG_MAXITER if maxiter is None else maxiter
    apply_A = _as_apply(A)
    apply_P = _as_apply(precond) if precond is not None else None

    SOLVE_LEDGER.record(tag or getattr(A, 'tag', 'cg'))

    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r = b - apply_A(x) if x0 is not None else b.copy()
    b_norm = np.linalg.norm(b)
    target = rtol * b_norm
    res_norm = np.linalg.norm(r)

    if b_norm == 0.0:
        result = CGResult(np.zeros(n), 0, 0.0, True)
        return result if return_info else result.x

    z = apply_P(r) if apply_P else r
    d = z.copy()
    rz = r @ z
    iterations = 0
    while res_norm > target:
        if iterations >= maxiter:
            if strict:
                raise ConvergenceError("CG did not converge", iterations, res_norm)
            logger.debug(f"CG stopped at maxiter={maxiter}, residual {res_norm:.3e}")
            result = CGResult(x, iterations, res_norm, False)
            return result if return_info else result.x
        Ad = apply_A(d)
        dAd = d @ Ad
        if dAd <= 0.0:
            if strict:
                raise ContractViolation(f"CG met non-positive curvature {dAd:.3e}")
            break
        step = rz / dAd
        x += step * d
        r -= step * Ad
        res_norm = np.linalg.norm(r)
        iterations += 1
        z = apply_P(r) if apply_P else r
        rz_new = r @ z
        d = z + (rz_new / rz) * d
        rz = rz_new

    result = CGResult(x, iterations, res_norm, res_norm <= target)
    return result if return_info else result.x


def random_stream(master_seed: int, purpose: str, index: int = 0) -> np.random.Generator:
    """Counter-based stream keyed by (master seed, purpose label, sample index)"""
    label_key = int.from_bytes(hashlib.sha256(purpose.encode('utf-8')).digest()[:8], 'little')
    seq = np.random.SeedSequence([int(master_seed) & 0xFFFFFFFF, label_key & 0xFFFFFFFF,
                                  label_key >> 32, int(index)])
    return np.random.Generator(np.random.Philox(seq))


def gaussian_vector(stream: np.random.Generator, n: int) -> np.ndarray:
    """n i.i.d. standard normal draws from the given stream"""
    return stream.standard_normal(n)


def lanczos_eigs(apply_A: Callable[[np.ndarray], np.ndarray], k: int, dim_hint: int,
                 inner: Optional[Callable[[np.ndarray], np.ndarray]] = None,
                 tol: float = 1e-10, max_steps: int = None, seed: int = 0,
                 check_symmetry: bool = True) -> EigPairs:
    """Top-k eigenpairs of an operator self-adjoint in the inner product <x, By>.

    `inner` applies B (identity when None). Full reorthogonalization is used
    throughout; on breakdown the Krylov space is restarted with a fresh vector
    orthogonal to the current basis, so rank-deficient operators return exact
    zero eigenvalues instead of stalling.
    """
    if k < 1 or k > dim_hint:
        raise ValueError(f"need 1 <= k <= dim_hint, got k={k}, dim_hint={dim_hint}")
    apply_B = inner if inner is not None else (lambda x: x)
    max_steps = dim_hint if max_steps is None else min(max_steps, dim_hint)
    max_steps = max(max_steps, k)
    stream = random_stream(seed, 'lanczos-start')

    if check_symmetry:
        _probe_symmetry(apply_A, apply_B, dim_hint, stream)

    Q = np.zeros((dim_hint, max_steps))
    BQ = np.zeros((dim_hint, max_steps))
    alphas = np.zeros(max_steps)
    betas = np.zeros(max_steps)

    def b_normalize(v):
        for _ in range(2):
            v = v - Q[:, :j] @ (BQ[:, :j].T @ v)
        Bv = apply_B(v)
        norm = np.sqrt(max(v @ Bv, 0.0))
        return v, Bv, norm

    j = 0
    v, Bv, norm = b_normalize(gaussian_vector(stream, dim_hint))
    q, Bq = v / norm, Bv / norm
    scale = 0.0
    values = vectors = resid = None

    while j < max_steps:
        Q[:, j], BQ[:, j] = q, Bq
        w = apply_A(q)
        alphas[j] = w @ Bq
        j += 1
        # full reorthogonalization against the B-orthonormal basis
        for _ in range(2):
            w = w - Q[:, :j] @ (BQ[:, :j].T @ w)
        Bw = apply_B(w)
        beta = np.sqrt(max(w @ Bw, 0.0))
        scale = max(scale, abs(alphas[j - 1]), beta)

        T = np.diag(alphas[:j]) + np.diag(betas[:j - 1], 1) + np.diag(betas[:j - 1], -1)
        theta, Y = np.linalg.eigh(T)
        order = np.argsort(theta)[::-1]
        theta, Y = theta[order], Y[:, order]
        resid = abs(beta * Y[j - 1, :])

        if j >= k and np.all(resid[:k] <= tol * max(scale, 1.0)):
            values, vectors = theta, Q[:, :j] @ Y
            break
        if j == max_steps:
            values, vectors = theta, Q[:, :j] @ Y
            break

        if beta <= 1e-12 * max(scale, 1.0):
            # invariant subspace found: restart orthogonal to the basis
            betas[j - 1] = 0.0
            v, Bv, norm = b_normalize(gaussian_vector(stream, dim_hint))
            if norm == 0.0:
                values, vectors = theta, Q[:, :j] @ Y
                break
            q, Bq = v / norm, Bv / norm
        else:
            betas[j - 1] = beta
            q, Bq = w / beta, Bw / beta

    n_keep = min(k, len(values))
    values = values[:n_keep].copy()
    vectors = vectors[:, :n_keep].copy()
    resid = resid[:n_keep].copy()

    lam_max = values[0] if n_keep else 0.0
    small = values < Config.EIG_TRUNCATION * max(lam_max, 0.0)
    values[small] = 0.0
    logger.debug(f"Lanczos: {j} steps for k={k}, top eigenvalue {lam_max:.4e}")
    return EigPairs(values=values, vectors=vectors, residuals=resid)


def _probe_symmetry(apply_A, apply_B, n, stream):
    """Raise ContractViolation when <Av, w>_B and <v, Aw>_B disagree"""
    v = gaussian_vector(stream, n)
    w = gaussian_vector(stream, n)
    Av, Aw = apply_A(v), apply_A(w)
    lhs = Av @ apply_B(w)
    rhs = v @ apply_B(Aw)
    scale = np.sqrt(abs(Av @ apply_B(Av)) * abs(w @ apply_B(w))) + \
        np.sqrt(abs(Aw @ apply_B(Aw)) * abs(v @ apply_B(v)))
    if abs(lhs - rhs) > 1e-8 * max(scale, 1e-300):
        raise ContractViolation(
            f"operator is not self-adjoint: <Av,w>={lhs:.6e} vs <v,Aw>={rhs:.6e}")


def dense_spd_solve(A: np.ndarray, b: np.ndarray, tag: str = 'dense') -> np.ndarray:
    """Cholesky solve for small dense SPD systems used by the oracles"""
    SOLVE_LEDGER.record(tag)
    return sla.cho_solve(sla.cho_factor(A), b)


def parallel_map(fn: Callable[[int], object], n: int, workers: Optional[int] = None,
                 desc: Optional[str] = None, show_progress: bool = True) -> list:
    """fn(0..n-1) over a thread pool; results are returned in index order"""
    workers = Config.resolved_workers(workers)
    disable = not show_progress or desc is None
    if workers == 1 or n <= 1:
        return [fn(i) for i in tqdm(range(n), desc=desc, disable=disable)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(tqdm(pool.map(fn, range(n)), total=n, desc=desc, disable=disable))

