#!/usr/bin/env python3
"""
Structured Finite Element Module

Trilinear hexahedral discretization of the thin slab domain with tagged boundary
faces, assembly of the elliptic state operator (e^xi diffusion in the volume,
e^m Robin term on the bottom face, Neumann source on the top face), state solves
and pointwise observation at the candidate sensor sites.

Mesh conventions:
- Node numbering is lexicographic with x fastest, then y, then z.
- Element corner c has local bits (c & 1, c >> 1 & 1, c >> 2 & 1) along x, y, z.
- Faces: bottom (z=0) is the Robin boundary, top (z=Lz) carries the Neumann
  source and the sensors, the four side faces are homogeneous Dirichlet.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Sequence, Union

import numpy as np
import scipy.sparse as sp

from config import Config
from numkit import SparseSymOp, cg_solve

logger = logging.getLogger(__name__)

_GAUSS = np.array([-1.0, 1.0]) / np.sqrt(3.0)

FACE_TAGS = {
    'bottom': 'R',
    'top': 'N',
    'x0': 'D',
    'x1': 'D',
    'y0': 'D',
    'y1': 'D',
}


class StructuredGrid:
    """Tensor-product grid of Q1 elements in 1, 2 or 3 dimensions.

    Holds the reference shape functions at the 2-point Gauss points and
    assembles mass, stiffness and load terms with coefficients given at the
    quadrature points of every element.
    """

    def __init__(self, shape: Sequence[int], lengths: Sequence[float]):
        self.shape = tuple(int(n) for n in shape)
        self.lengths = tuple(float(L) for L in lengths)
        if any(n < 1 for n in self.shape):
            raise ValueError(f"element counts must be positive, got {self.shape}")
        self.dim = len(self.shape)
        self.h = np.array(self.lengths) / np.array(self.shape)
        self.node_shape = tuple(n + 1 for n in self.shape)
        self.n_nodes = int(np.prod(self.node_shape))
        self.n_elements = int(np.prod(self.shape))

        self.strides = np.cumprod((1,) + self.node_shape[:-1])
        n_corners = 2 ** self.dim
        self.corner_bits = np.array([[(c >> k) & 1 for k in range(self.dim)]
                                     for c in range(n_corners)])
        corner_offsets = self.corner_bits @ self.strides

        element_index = np.array([idx.ravel(order='F') for idx in np.indices(self.shape)])
        base = self.strides @ element_index
        self.connectivity = base[:, None] + corner_offsets[None, :]
        self.element_origin = (element_index.T * self.h)

        # reference quadrature: tensor product of 2-point Gauss rules
        q_bits = self.corner_bits
        self.ref_points = _GAUSS[q_bits]
        self.detJ = float(np.prod(self.h / 2.0))
        self.N_q = self.shape_values(self.ref_points)
        self.dN_q = self._shape_gradients(self.ref_points)

    def shape_values(self, ref: np.ndarray) -> np.ndarray:
        """Q1 shape functions at reference points in [-1, 1]^d, shape (n_pts, 2^d)"""
        ref = np.atleast_2d(ref)
        signs = 2 * self.corner_bits - 1
        factors = (1.0 + ref[:, None, :] * signs[None, :, :]) / 2.0
        return np.prod(factors, axis=2)

    def _shape_gradients(self, ref: np.ndarray) -> np.ndarray:
        """Physical gradients of the shape functions, shape (n_pts, d, 2^d)"""
        signs = 2 * self.corner_bits - 1
        factors = (1.0 + ref[:, None, :] * signs[None, :, :]) / 2.0
        grads = np.empty((ref.shape[0], self.dim, signs.shape[0]))
        for k in range(self.dim):
            others = np.prod(np.delete(factors, k, axis=2), axis=2)
            grads[:, k, :] = others * signs[None, :, k] / 2.0 * (2.0 / self.h[k])
        return grads

    def node_coordinates(self) -> np.ndarray:
        idx = np.array([i.ravel(order='F') for i in np.indices(self.node_shape)])
        return (idx.T * self.h).astype(float)

    def quadrature_points(self) -> np.ndarray:
        """Physical Gauss point coordinates, shape (n_elements, n_q, d)"""
        offsets = (self.ref_points + 1.0) / 2.0 * self.h
        return self.element_origin[:, None, :] + offsets[None, :, :]

    def to_quadrature(self, nodal: np.ndarray) -> np.ndarray:
        """Interpolate nodal values to the Gauss points, shape (n_elements, n_q)"""
        return nodal[self.connectivity] @ self.N_q.T

    def locate(self, points: np.ndarray):
        """Element index and reference coordinates of physical points"""
        points = np.atleast_2d(points)
        tol = 1e-12 * max(self.lengths)
        if np.any(points < -tol) or np.any(points > np.array(self.lengths) + tol):
            raise ValueError("point outside the grid domain")
        t = points / self.h
        cells = np.clip(np.floor(t).astype(int), 0, np.array(self.shape) - 1)
        local = 2.0 * (t - cells) - 1.0
        element = cells @ (np.cumprod((1,) + self.shape[:-1]))
        return element, np.clip(local, -1.0, 1.0)

    def _scatter(self, blocks: np.ndarray) -> sp.csr_matrix:
        rows = np.repeat(self.connectivity[:, :, None], blocks.shape[2], axis=2)
        cols = np.repeat(self.connectivity[:, None, :], blocks.shape[1], axis=1)
        return sp.coo_matrix((blocks.ravel(), (rows.ravel(), cols.ravel())),
                             shape=(self.n_nodes, self.n_nodes)).tocsr()

    def mass(self, coeff_q: Optional[np.ndarray] = None) -> sp.csr_matrix:
        """Weighted mass matrix int(c phi_a phi_b)"""
        c = np.ones((self.n_elements, len(self.N_q))) if coeff_q is None else coeff_q
        local = np.einsum('qa,qb->qab', self.N_q, self.N_q) * self.detJ
        return self._scatter(np.einsum('eq,qab->eab', c, local))

    def stiffness(self, coeff_q: Optional[np.ndarray] = None,
                  tensor: Optional[np.ndarray] = None) -> sp.csr_matrix:
        """Weighted stiffness matrix int(c Theta grad phi_a . grad phi_b)"""
        c = np.ones((self.n_elements, len(self.N_q))) if coeff_q is None else coeff_q
        Theta = np.eye(self.dim) if tensor is None else np.asarray(tensor, dtype=float)
        local = np.einsum('qia,ij,qjb->qab', self.dN_q, Theta, self.dN_q) * self.detJ
        return self._scatter(np.einsum('eq,qab->eab', c, local))

    def load(self, values_q: np.ndarray) -> np.ndarray:
        """Load vector int(f phi_a) for f given at the Gauss points"""
        contrib = values_q @ self.N_q * self.detJ
        return np.bincount(self.connectivity.ravel(), weights=contrib.ravel(),
                           minlength=self.n_nodes)

    def boundary_facets(self):
        """Yield (facet grid, volume node indices) for the 2*dim boundary facets"""
        if self.dim < 2:
            raise ValueError("boundary facets need a grid of dimension >= 2")
        for k in range(self.dim):
            axes = [a for a in range(self.dim) if a != k]
            facet = StructuredGrid([self.shape[a] for a in axes], [self.lengths[a] for a in axes])
            idx = [i.ravel(order='F') for i in np.indices(facet.node_shape)]
            base = sum(self.strides[a] * idx[n] for n, a in enumerate(axes))
            for side in (0, self.shape[k]):
                yield facet, base + self.strides[k] * side

    def boundary_mass(self) -> sp.csr_matrix:
        """Mass matrix of the whole boundary, int_{dOmega} phi_a phi_b"""
        total = sp.csr_matrix((self.n_nodes, self.n_nodes))
        for facet, nodes in self.boundary_facets():
            P = sp.csr_matrix((np.ones(len(nodes)), (nodes, np.arange(len(nodes)))),
                              shape=(self.n_nodes, facet.n_nodes))
            total = total + P @ facet.mass() @ P.T
        return total.tocsr()

    def sqrt_mass(self) -> sp.csr_matrix:
        """Factor G with G G^T equal to the consistent mass matrix.

        Columns correspond to Gauss points: G[a, (e, q)] = phi_a(x_eq) sqrt(w_eq).
        """
        n_q = len(self.N_q)
        data = np.broadcast_to(self.N_q * np.sqrt(self.detJ), (self.n_elements, n_q, self.N_q.shape[1]))
        rows = np.broadcast_to(self.connectivity[:, None, :], data.shape)
        cols = np.broadcast_to(np.arange(self.n_elements * n_q).reshape(self.n_elements, n_q, 1), data.shape)
        return sp.coo_matrix((data.ravel(), (rows.ravel(), cols.ravel())),
                             shape=(self.n_nodes, self.n_elements * n_q)).tocsr()


@dataclass(frozen=True)
class BoundaryFace:
    """A face of the box as a 2D grid plus its node map into the volume"""
    name: str
    tag: str
    grid: StructuredGrid
    nodes: np.ndarray

    def prolongation(self, n_volume: int) -> sp.csr_matrix:
        """Sparse map from face nodal vectors into volume nodal vectors"""
        n = self.grid.n_nodes
        return sp.csr_matrix((np.ones(n), (self.nodes, np.arange(n))), shape=(n_volume, n))


class Mesh:
    """Box [0,Lx]x[0,Ly]x[0,Lz] discretized by nx*ny*nz trilinear hexahedra"""

    def __init__(self, nx: int, ny: int, nz: int, Lx: float = 1.0, Ly: float = 1.0, Lz: float = 0.01):
        self.nx, self.ny, self.nz = nx, ny, nz
        self.Lx, self.Ly, self.Lz = Lx, Ly, Lz
        self.volume = StructuredGrid((nx, ny, nz), (Lx, Ly, Lz))
        self.faces: Dict[str, BoundaryFace] = self._build_faces()
        self.bottom = self.faces['bottom'].grid

        side_nodes = [self.faces[name].nodes for name, tag in FACE_TAGS.items() if tag == 'D']
        self.dirichlet_dofs = np.unique(np.concatenate(side_nodes))
        self.free_mask = np.ones(self.n_nodes)
        self.free_mask[self.dirichlet_dofs] = 0.0

        self.M_vol = self.volume.mass()
        self.M_bdry = self.bottom.mass()
        self._bottom_P = self.faces['bottom'].prolongation(self.n_nodes)
        self._top_P = self.faces['top'].prolongation(self.n_nodes)

    @property
    def n_nodes(self) -> int:
        return self.volume.n_nodes

    @property
    def n_bottom(self) -> int:
        return self.bottom.n_nodes

    @property
    def node_coordinates(self) -> np.ndarray:
        return self.volume.node_coordinates()

    def _build_faces(self) -> Dict[str, BoundaryFace]:
        # boundary_facets yields the low/high side per axis: x, then y, then z
        names = ('x0', 'x1', 'y0', 'y1', 'bottom', 'top')
        return {name: BoundaryFace(name, FACE_TAGS[name], grid, np.asarray(nodes))
                for name, (grid, nodes) in zip(names, self.volume.boundary_facets())}

    def face_tag_counts(self) -> Dict[str, int]:
        """Number of exterior quads per tag"""
        counts: Dict[str, int] = {}
        for f in self.faces.values():
            counts[f.tag] = counts.get(f.tag, 0) + f.grid.n_elements
        return counts

    def eliminate(self, matrix: sp.spmatrix) -> sp.csr_matrix:
        """Zero Dirichlet rows/columns and put ones on their diagonal"""
        D = sp.diags(self.free_mask)
        return (D @ matrix @ D + sp.diags(1.0 - self.free_mask)).tocsr()

    def neumann_load(self, h: Union[Callable, np.ndarray]) -> np.ndarray:
        """Volume load vector of the top-face flux h (callable h(x, y) or Gauss values)"""
        top = self.faces['top'].grid
        if callable(h):
            pts = top.quadrature_points()
            values = h(pts[..., 0], pts[..., 1])
            values = np.broadcast_to(values, pts.shape[:2]).astype(float)
        else:
            values = np.asarray(h, dtype=float)
        return self._top_P @ top.load(values)

    def robin_mass(self, coeff_q: np.ndarray) -> sp.csr_matrix:
        """Bottom-face mass with Gauss-point weights, embedded in the volume"""
        P = self._bottom_P
        return (P @ self.bottom.mass(coeff_q) @ P.T).tocsr()

    def bottom_load(self, values_q: np.ndarray) -> np.ndarray:
        """int_{Gamma_R} f psi_j for f at bottom Gauss points (bottom nodal vector)"""
        return self.bottom.load(values_q)

    def bottom_trace_q(self, u: np.ndarray) -> np.ndarray:
        """Values of a volume field at the bottom-face Gauss points"""
        return self.bottom.to_quadrature(u[self.faces['bottom'].nodes])


@dataclass
class Field:
    """Nodal values of a scalar function on the volume or on the bottom face"""
    support: str
    values: np.ndarray

    def __post_init__(self):
        if self.support not in ('volume', 'bottom'):
            raise ValueError(f"unknown support {self.support!r}")
        self.values = np.asarray(self.values, dtype=float)

    def _check(self, other: 'Field'):
        if not isinstance(other, Field) or other.support != self.support:
            raise ValueError("field arithmetic needs two fields with the same support")

    def __add__(self, other):
        self._check(other)
        return Field(self.support, self.values + other.values)

    def __sub__(self, other):
        self._check(other)
        return Field(self.support, self.values - other.values)

    def __mul__(self, scalar: float):
        return Field(self.support, self.values * float(scalar))

    __rmul__ = __mul__

    def copy(self) -> 'Field':
        return Field(self.support, self.values.copy())

    @classmethod
    def constant(cls, mesh: Mesh, support: str, value: float) -> 'Field':
        n = mesh.n_nodes if support == 'volume' else mesh.n_bottom
        return cls(support, np.full(n, float(value)))


def field_coordinates(mesh: Mesh, support: str) -> np.ndarray:
    """Node coordinates (n, 3) of a field support; bottom nodes get z = 0"""
    if support == 'volume':
        return mesh.node_coordinates
    if support == 'bottom':
        xy = mesh.bottom.node_coordinates()
        return np.column_stack([xy, np.zeros(xy.shape[0])])
    raise ValueError(f"unknown support {support!r}")


def _values(f, support: str, n: int) -> np.ndarray:
    if isinstance(f, Field):
        if f.support != support:
            raise ValueError(f"expected a {support} field, got {f.support}")
        values = f.values
    else:
        values = np.asarray(f, dtype=float)
    if values.shape != (n,):
        raise ValueError(f"{support} field needs {n} values, got shape {values.shape}")
    return values


@dataclass
class AssembledSystem:
    """State operator for fixed (xi, m) with its Dirichlet-eliminated factorization"""
    mesh: Mesh
    K: SparseSymOp
    R: SparseSymOp
    M_vol: sp.csr_matrix
    M_bdry: sp.csr_matrix
    dirichlet_dofs: np.ndarray
    operator: SparseSymOp
    exp_m_q: np.ndarray

    def solve(self, rhs: np.ndarray, tag: str = 'state') -> np.ndarray:
        """Solve the eliminated system; Dirichlet entries of the result are zero"""
        b = rhs * self.mesh.free_mask
        if Config.PDE_SOLVER == 'cg':
            x = cg_solve(self.operator, b, precond=_jacobi(self.operator), tag=tag)
        else:
            x = self.operator.solve(b, tag=tag)
        x[self.dirichlet_dofs] = 0.0
        return x

    def robin_derivative_action(self, dm: np.ndarray, u: np.ndarray) -> np.ndarray:
        """(dR/dm . dm) u as a volume vector: int e^m dm u phi_a over Gamma_R"""
        dm_q = self.mesh.bottom.to_quadrature(dm)
        return self.mesh.robin_mass(self.exp_m_q * dm_q) @ u

    def robin_gradient(self, u: np.ndarray, p: np.ndarray) -> np.ndarray:
        """Bottom dual vector int e^m u p psi_j (derivative of p^T R(m) u)"""
        uq = self.mesh.bottom_trace_q(u)
        pq = self.mesh.bottom_trace_q(p)
        return self.mesh.bottom_load(self.exp_m_q * uq * pq)


def _jacobi(op: SparseSymOp):
    inv_diag = 1.0 / op.matrix.diagonal()
    return lambda r: inv_diag * r


def build_box_mesh(nx: int, ny: int, nz: int) -> Mesh:
    """Slab [0,1]^2 x [0,0.01] with tagged faces"""
    for name, n, low in (('nx', nx, 2), ('ny', ny, 2), ('nz', nz, 1)):
        if not isinstance(n, (int, np.integer)) or n < low:
            raise ValueError(f"{name} must be an integer >= {low}, got {n}")
    mesh = Mesh(int(nx), int(ny), int(nz))
    logger.debug(f"Built {nx}x{ny}x{nz} mesh: {mesh.n_nodes} nodes, {mesh.n_bottom} Robin nodes")
    return mesh


def assemble(mesh: Mesh, xi: Union[Field, np.ndarray], m: Union[Field, np.ndarray],
             stiffness: Optional[sp.csr_matrix] = None) -> AssembledSystem:
    """Assemble e^xi diffusion plus e^m Robin term and factorize the eliminated sum.

    A precomputed `stiffness` for the same xi may be passed to skip the volume
    assembly (the nominal model reuses it for every m).
    """
    m_values = _values(m, 'bottom', mesh.n_bottom)
    if stiffness is None:
        xi_values = _values(xi, 'volume', mesh.n_nodes)
        stiffness = mesh.volume.stiffness(np.exp(mesh.volume.to_quadrature(xi_values)))
    exp_m_q = np.exp(mesh.bottom.to_quadrature(m_values))
    robin = mesh.robin_mass(exp_m_q)
    operator = mesh.eliminate(stiffness + robin)
    return AssembledSystem(
        mesh=mesh,
        K=SparseSymOp(stiffness, tag='stiffness'),
        R=SparseSymOp(robin, tag='robin'),
        M_vol=mesh.M_vol,
        M_bdry=mesh.M_bdry,
        dirichlet_dofs=mesh.dirichlet_dofs,
        operator=SparseSymOp(operator, tag='state', factorize=Config.PDE_SOLVER != 'cg'),
        exp_m_q=exp_m_q,
    )


def boundary_source(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Top-face flux h(x) = 1 + sin(4 pi |x - (1, 1)|)"""
    return 1.0 + np.sin(4.0 * np.pi * np.sqrt((x - 1.0) ** 2 + (y - 1.0) ** 2))


def solve_state(system: AssembledSystem, h: Union[Callable, np.ndarray] = boundary_source) -> Field:
    """State u with flux h on the top face; u = 0 on the Dirichlet faces"""
    rhs = system.mesh.neumann_load(h)
    return Field('volume', system.solve(rhs, tag='state'))


class SensorGrid:
    """Sensor sites on the top face and their trilinear observation matrix"""

    def __init__(self, mesh: Mesh, points: np.ndarray):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if points.shape[1] != 3:
            raise ValueError(f"sensor points need 3 coordinates, got shape {points.shape}")
        lengths = np.array([mesh.Lx, mesh.Ly, mesh.Lz])
        if np.any(points < 0.0) or np.any(points > lengths * (1 + 1e-12)):
            raise ValueError("sensor outside the domain")
        if np.any(np.abs(points[:, 2] - mesh.Lz) > 1e-9 * mesh.Lz):
            raise ValueError("sensors must lie on the top face")
        self.mesh = mesh
        self.points = points
        element, local = mesh.volume.locate(points)
        weights = mesh.volume.shape_values(local)
        nodes = mesh.volume.connectivity[element]
        rows = np.repeat(np.arange(len(points)), nodes.shape[1])
        self.B = sp.csr_matrix((weights.ravel(), (rows, nodes.ravel())),
                               shape=(len(points), mesh.n_nodes))
        self.B.eliminate_zeros()

    @property
    def n_s(self) -> int:
        return self.points.shape[0]


def regular_sensor_grid(mesh: Mesh, per_side: int = 10, margin: float = 0.05) -> SensorGrid:
    """per_side x per_side sensors on the top face, x index fastest"""
    xs = np.linspace(margin, mesh.Lx - margin, per_side)
    ys = np.linspace(margin, mesh.Ly - margin, per_side)
    X, Y = np.meshgrid(xs, ys)
    points = np.column_stack([X.ravel(), Y.ravel(), np.full(X.size, mesh.Lz)])
    return SensorGrid(mesh, points)


def observe(u: Union[Field, np.ndarray], sensors: SensorGrid) -> np.ndarray:
    """Trilinear interpolation of u at the sensor sites"""
    return sensors.B @ _values(u, 'volume', sensors.mesh.n_nodes)


def adjoint_of_observe(r: np.ndarray, sensors: SensorGrid) -> Field:
    """Exact transpose of observe: volume right-hand side B^T r"""
    r = np.asarray(r, dtype=float)
    if r.shape != (sensors.n_s,):
        raise ValueError(f"expected {sensors.n_s} sensor values, got shape {r.shape}")
    return Field('volume', sensors.B.T @ r)
