"""Uniform grids, boundary-layer index partitions and Hamiltonian blocks.

The interior vector is always stored with the boundary layer (Gamma) first,
followed by the remaining interior nodes, both in lexicographic order.  The
restriction onto Gamma is therefore a prefix slice.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Stencil",
    "get_stencil",
    "STENCIL_WEIGHTS",
    "Grid",
    "IndexPartition",
    "HamiltonianBlocks",
    "LatticeError",
    "build_grid",
    "partition",
    "assemble_blocks",
]


class LatticeError(ValueError):
    pass


# Second-derivative weights c_0..c_p (symmetric); divide by h**2 when applied.
STENCIL_WEIGHTS: dict[str, tuple[Fraction, ...]] = {
    "fd3": (Fraction(-2), Fraction(1)),
    "fd5": (Fraction(-5, 2), Fraction(4, 3), Fraction(-1, 12)),
    "fd7": (Fraction(-49, 18), Fraction(3, 2), Fraction(-3, 20), Fraction(1, 90)),
    # centre weight is negative; a positive 205/72 would break sum(c) == 0
    "fd9": (
        Fraction(-205, 72),
        Fraction(8, 5),
        Fraction(-1, 5),
        Fraction(8, 315),
        Fraction(-1, 560),
    ),
}


@dataclass(frozen=True)
class Stencil:
    """Symmetric central second-derivative stencil.

    ``coeffs`` holds c_{-p} .. c_{p}; the discrete kinetic operator along one
    axis is ``kinetic_prefactor * sum_k c_k psi_{j+k} / h**2``.
    """

    name: str
    half_width: int
    coeffs: tuple[float, ...]
    kinetic_prefactor: float = -0.5

    def __post_init__(self):
        p = self.half_width
        c = np.asarray(self.coeffs, dtype=float)
        if p < 1 or c.shape != (2 * p + 1,):
            raise LatticeError(f"stencil {self.name!r}: need 2p+1 coefficients, p >= 1")
        if not np.allclose(c, c[::-1], rtol=0, atol=1e-15):
            raise LatticeError(f"stencil {self.name!r} is not symmetric")
        if abs(c.sum()) > 1e-12:
            raise LatticeError(f"stencil {self.name!r}: coefficients sum to {c.sum():.3e}, not 0")
        k = np.arange(-p, p + 1)
        # exact on x**2: sum c_k k^2 == 2
        if abs(np.dot(c, k**2) - 2.0) > 1e-12:
            raise LatticeError(f"stencil {self.name!r} is not a consistent second derivative")

    @property
    def offsets(self) -> np.ndarray:
        return np.arange(-self.half_width, self.half_width + 1)

    def c(self, k: int) -> float:
        return self.coeffs[k + self.half_width]

    def symbol(self, theta: np.ndarray) -> np.ndarray:
        """Fourier symbol sum_k c_k exp(i k theta) (real, <= 0)."""
        theta = np.asarray(theta, dtype=float)
        out = np.full(theta.shape, self.coeffs[self.half_width], dtype=float)
        for k in range(1, self.half_width + 1):
            out += 2.0 * self.c(k) * np.cos(k * theta)
        return out

    def with_prefactor(self, kinetic_prefactor: float) -> "Stencil":
        return Stencil(self.name, self.half_width, self.coeffs, float(kinetic_prefactor))

    def key(self) -> str:
        return f"{self.name}:{self.kinetic_prefactor!r}"


def get_stencil(name: str, kinetic_prefactor: float = -0.5) -> Stencil:
    try:
        half = STENCIL_WEIGHTS[name]
    except KeyError:
        raise LatticeError(f"unknown stencil {name!r}; choose from {sorted(STENCIL_WEIGHTS)}") from None
    full = tuple(float(w) for w in half[:0:-1]) + tuple(float(w) for w in half)
    return Stencil(name, len(half) - 1, full, float(kinetic_prefactor))


@dataclass(frozen=True)
class Grid:
    dim: int
    lo: tuple[float, ...]
    hi: tuple[float, ...]
    h: float
    n: tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.n))

    def axis(self, a: int) -> np.ndarray:
        return self.lo[a] + self.h * np.arange(self.n[a])

    def multi_indices(self) -> np.ndarray:
        """All node multi-indices in lexicographic (C) order, shape (size, dim)."""
        grids = np.meshgrid(*[np.arange(m) for m in self.n], indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1)

    def ravel(self, multi: np.ndarray) -> np.ndarray:
        return np.ravel_multi_index(tuple(np.asarray(multi).T), self.n)

    def unravel(self, linear: np.ndarray) -> np.ndarray:
        return np.stack(np.unravel_index(np.asarray(linear), self.n), axis=-1)

    def coords(self, multi: np.ndarray) -> np.ndarray:
        """Physical coordinates of (possibly exterior) integer multi-indices."""
        return np.asarray(self.lo) + self.h * np.asarray(multi, dtype=float)

    def points(self) -> np.ndarray:
        return self.coords(self.multi_indices())


def build_grid(dim: int, box, h: float, stencil: Stencil | None = None) -> Grid:
    """Uniform grid on a box that includes both end points of every axis.

    ``box`` is either one ``(lo, hi)`` pair used for all axes or a sequence of
    ``dim`` pairs.
    """
    if dim not in (1, 3):
        raise LatticeError(f"dim must be 1 or 3, got {dim}")
    if h <= 0:
        raise LatticeError(f"grid spacing must be positive, got {h}")
    box = np.asarray(box, dtype=float)
    if box.shape == (2,):
        box = np.tile(box, (dim, 1))
    if box.shape != (dim, 2):
        raise LatticeError(f"box must be (lo, hi) or {dim} such pairs")
    n = []
    for a, (lo, hi) in enumerate(box):
        if not hi > lo:
            raise LatticeError(f"axis {a}: box_hi={hi} must exceed box_lo={lo}")
        q = (hi - lo) / h
        resid = abs(q - round(q))
        if resid > 1e-9:
            raise LatticeError(
                f"axis {a}: box length {hi - lo} is not a multiple of h={h} (residual {resid:.3e})"
            )
        n.append(int(round(q)) + 1)
    if stencil is not None and min(n) < stencil.half_width:
        raise LatticeError(f"{min(n)} points per axis is fewer than the stencil half-width")
    return Grid(dim, tuple(box[:, 0]), tuple(box[:, 1]), float(h), tuple(n))


@dataclass(frozen=True, eq=False)
class IndexPartition:
    """Interior / boundary-layer (Gamma) / exterior-layer (Sigma) index sets.

    ``order[k]`` is the grid linear index stored at interior position ``k``;
    positions ``0 .. n_gamma-1`` are Gamma.  ``sigma_multi`` lists the exterior
    multi-indices (outside ``[0, n)`` on at least one axis) of Sigma.
    """

    grid: Grid
    half_width: int
    open_faces: tuple[tuple[bool, bool], ...]
    order: np.ndarray
    position: np.ndarray
    n_gamma: int
    sigma_multi: np.ndarray

    @property
    def n_interior(self) -> int:
        return int(self.order.size)

    @property
    def n_sigma(self) -> int:
        return int(self.sigma_multi.shape[0])

    @property
    def interior_ids(self) -> np.ndarray:
        return self.order

    @property
    def gamma_ids(self) -> np.ndarray:
        return self.order[: self.n_gamma]

    @property
    def gamma_multi(self) -> np.ndarray:
        return self.grid.unravel(self.gamma_ids)

    @property
    def E(self) -> sp.csr_matrix:
        m = self.n_gamma
        return sp.csr_matrix(
            (np.ones(m), (np.arange(m), np.arange(m))), shape=(m, self.n_interior)
        )

    def restrict(self, v: np.ndarray) -> np.ndarray:
        return v[: self.n_gamma]

    def extend(self, g: np.ndarray) -> np.ndarray:
        """E^T g: zero-padded interior vector (works column-wise for 2-D input)."""
        out = np.zeros((self.n_interior,) + g.shape[1:], dtype=np.result_type(g, float))
        out[: self.n_gamma] = g
        return out

    def to_interior(self, field_grid: np.ndarray) -> np.ndarray:
        """Grid-ordered field (any shape with ``size`` leading entries) -> interior order."""
        arr = np.asarray(field_grid)
        g = self.grid
        if arr.shape[: g.dim] == g.n:
            arr = arr.reshape((g.size,) + arr.shape[g.dim:])
        elif arr.shape[0] != g.size:
            raise LatticeError(f"field of shape {arr.shape} does not match grid {g.n}")
        return arr[self.order]

    def to_grid(self, v: np.ndarray) -> np.ndarray:
        """Interior-ordered vector -> array shaped like the grid."""
        out = np.empty((self.grid.size,) + v.shape[1:], dtype=v.dtype)
        out[self.order] = v
        return out.reshape(self.grid.n + v.shape[1:])

    def fingerprint(self, stencil: Stencil) -> str:
        g = self.grid
        text = repr((g.dim, g.lo, g.hi, g.h, g.n, stencil.key(), stencil.coeffs, self.open_faces))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def _normalise_faces(dim: int, open_faces) -> tuple[tuple[bool, bool], ...]:
    if open_faces is None:
        return tuple((True, True) for _ in range(dim))
    faces = tuple((bool(lo), bool(hi)) for lo, hi in open_faces)
    if len(faces) != dim:
        raise LatticeError(f"open_faces needs {dim} (low, high) pairs")
    return faces


def partition(grid: Grid, stencil: Stencil, open_faces=None) -> IndexPartition:
    """Split the grid into Gamma (interior nodes coupled to the exterior) and the rest.

    ``open_faces`` gives ``(low_open, high_open)`` per axis; a closed face is a
    homogeneous Dirichlet wall and contributes nothing to Gamma or Sigma.
    """
    p = stencil.half_width
    if p < 1:
        raise LatticeError("stencil half-width must be >= 1")
    faces = _normalise_faces(grid.dim, open_faces)
    for a, m in enumerate(grid.n):
        if any(faces[a]) and m < 2 * p:
            raise LatticeError(
                f"axis {a}: {m} interior points is thinner than 2p={2 * p}; boundary layers overlap"
            )
    multi = grid.multi_indices()
    is_gamma = np.zeros(grid.size, dtype=bool)
    sigma = []
    for a in range(grid.dim):
        low_open, high_open = faces[a]
        for k in range(1, p + 1):
            for sign, is_open in ((-1, low_open), (1, high_open)):
                if not is_open:
                    continue
                nb = multi.copy()
                nb[:, a] += sign * k
                out = nb[:, a] < 0 if sign < 0 else nb[:, a] >= grid.n[a]
                is_gamma |= out
                sigma.append(nb[out])
    if sigma:
        sigma_multi = np.unique(np.concatenate(sigma, axis=0), axis=0)
    else:
        sigma_multi = np.zeros((0, grid.dim), dtype=int)
    linear = np.arange(grid.size)
    order = np.concatenate([linear[is_gamma], linear[~is_gamma]])
    position = np.empty_like(order)
    position[order] = np.arange(order.size)
    return IndexPartition(
        grid=grid,
        half_width=p,
        open_faces=faces,
        order=order,
        position=position,
        n_gamma=int(is_gamma.sum()),
        sigma_multi=sigma_multi.astype(np.int64),
    )


@dataclass(frozen=True, eq=False)
class HamiltonianBlocks:
    """Sparse blocks of the semi-discrete Hamiltonian, interior ordering.

    ``T_II`` is the kinetic interior block and ``V`` the (mutable in the
    nonlinear models, hence kept separate) interior potential; the exterior is
    potential free.
    """

    grid: Grid
    partition: IndexPartition
    stencil: Stencil
    T_II: sp.csr_matrix
    H_GS: sp.csr_matrix
    V: np.ndarray = field(repr=False)

    @property
    def H_II(self) -> sp.csr_matrix:
        return (self.T_II + sp.diags(self.V)).tocsr()

    @property
    def H_SG(self) -> sp.csr_matrix:
        return self.H_GS.T.tocsr()

    @property
    def exterior_stencil(self) -> Stencil:
        return self.stencil

    def with_potential(self, V: np.ndarray) -> "HamiltonianBlocks":
        V = np.asarray(V, dtype=float)
        if V.shape != (self.partition.n_interior,):
            raise LatticeError("potential must live on the interior nodes")
        return HamiltonianBlocks(self.grid, self.partition, self.stencil, self.T_II, self.H_GS, V)

    def coupling_gram(self) -> np.ndarray:
        """Dense H_{Gamma,Sigma} H_{Sigma,Gamma} (real symmetric, PSD)."""
        return (self.H_GS @ self.H_SG).toarray()


def assemble_blocks(
    grid: Grid,
    part: IndexPartition,
    stencil: Stencil,
    V: np.ndarray | float | None = None,
    exterior_potential: float = 0.0,
) -> HamiltonianBlocks:
    """Assemble H_II, H_{Gamma,Sigma} for ``kinetic_prefactor * D2 + diag(V)``.

    ``V`` is given in grid (lexicographic) order.
    """
    if exterior_potential != 0.0:
        raise LatticeError(
            f"exterior potential {exterior_potential} requested; the DtN construction needs a "
            "potential-free exterior"
        )
    p = stencil.half_width
    if p != part.half_width:
        raise LatticeError("partition was built for a different stencil width")
    scale = stencil.kinetic_prefactor / grid.h**2
    multi = grid.multi_indices()
    lin = np.arange(grid.size)

    rows, cols, vals = [], [], []
    rows.append(lin)
    cols.append(lin)
    vals.append(np.full(grid.size, grid.dim * stencil.c(0) * scale))
    for a in range(grid.dim):
        for k in range(-p, p + 1):
            if k == 0:
                continue
            nb = multi[:, a] + k
            ok = (nb >= 0) & (nb < grid.n[a])
            stride = int(np.prod(grid.n[a + 1:]))
            rows.append(lin[ok])
            cols.append(lin[ok] + k * stride)
            vals.append(np.full(ok.sum(), stencil.c(k) * scale))
    pos = part.position
    T = sp.csr_matrix(
        (np.concatenate(vals), (pos[np.concatenate(rows)], pos[np.concatenate(cols)])),
        shape=(grid.size, grid.size),
    )

    # coupling: Sigma node j = Gamma node i + k e_a
    sig = part.sigma_multi
    sig_lookup = {tuple(m): j for j, m in enumerate(sig)}
    g_multi = part.gamma_multi
    r, c, v = [], [], []
    for i, m in enumerate(g_multi):
        for a in range(grid.dim):
            for k in range(-p, p + 1):
                if k == 0:
                    continue
                nb = m.copy()
                nb[a] += k
                j = sig_lookup.get(tuple(nb))
                if j is not None:
                    r.append(i)
                    c.append(j)
                    v.append(stencil.c(k) * scale)
    H_GS = sp.csr_matrix((v, (r, c)), shape=(part.n_gamma, part.n_sigma))

    if V is None:
        Vi = np.zeros(part.n_interior)
    elif np.isscalar(V):
        Vi = np.full(part.n_interior, float(V))
    else:
        Vi = part.to_interior(np.asarray(V, dtype=float))
    return HamiltonianBlocks(grid, part, stencil, T.tocsr(), H_GS, Vi)
