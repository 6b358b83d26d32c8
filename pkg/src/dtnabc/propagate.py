"""Time integration of the reduced interior dynamics with rational ABCs.

The state is packed as y = [phi_I; f_Gamma] (order 1) or
y = [phi_I; f_Gamma; g_Gamma] with g = f' (order 2), and evolves as
y' = -i H_aug y.  For order m the rows of H_aug read

    phi:  H phi + E^T f                      (m >= 1),  (H + E^T M E) phi  (m = 0)
    f:    i (A E phi + B f)                  (m = 1),   i g                (m = 2)
    g:    i (B1 g + B0 f + A1 E phi' + A0 E phi),   phi' = -i (H phi + E^T f)
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.special import erf

from .abc import RationalAbc
from .lattice import Grid, HamiltonianBlocks, assemble_blocks, build_grid, get_stencil, partition

log = logging.getLogger(__name__)

__all__ = [
    "PropagationError",
    "ObservableSchemaError",
    "SimState",
    "ObservableSeries",
    "AugmentedGenerator",
    "assemble_augmented_generator",
    "CrankNicolson",
    "step_crank_nicolson",
    "step_taylor4",
    "spectral_radius_estimate",
    "exact_solution_1d",
    "exact_solution_3d",
    "exact_number_1d",
    "cap_potential",
    "cap_baseline",
    "CAP_PROFILES",
    "lyapunov",
    "lyapunov_weight",
    "write_snapshot",
    "TAYLOR4_LIMIT",
]

# Taylor-4 amplification stays <= 1 on the imaginary axis up to |z| = 2 sqrt(2)
TAYLOR4_LIMIT = 2.0 * math.sqrt(2.0)
GUARD_EVERY = 100


class PropagationError(RuntimeError):
    pass


class ObservableSchemaError(ValueError):
    """An observables file whose header or rows do not follow the CSV layout."""


@dataclass
class SimState:
    t: float
    phi: np.ndarray
    f: np.ndarray | None = None
    g: np.ndarray | None = None

    def pack(self) -> np.ndarray:
        parts = [self.phi] + [v for v in (self.f, self.g) if v is not None]
        return np.concatenate(parts, axis=0)


@dataclass
class ObservableSeries:
    times: list = field(default_factory=list)
    N: list = field(default_factory=list)
    N_ref: list = field(default_factory=list)
    W: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def append(self, t, N, N_ref=float("nan"), W=float("nan"), **extra):
        self.times.append(float(t))
        self.N.append(float(N))
        self.N_ref.append(float(N_ref))
        self.W.append(float(W))
        for k, v in extra.items():
            self.extra.setdefault(k, []).append(float(v))

    @property
    def err_N(self) -> np.ndarray:
        return np.abs(np.asarray(self.N) - np.asarray(self.N_ref))

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"t": np.asarray(self.times), "N": np.asarray(self.N), "N_ref": np.asarray(self.N_ref),
               "W": np.asarray(self.W), "err_N": self.err_N}
        out.update({k: np.asarray(v) for k, v in self.extra.items()})
        return out

    def max_error(self) -> float:
        e = self.err_N
        return float(np.nanmax(e)) if e.size else float("nan")

    def to_csv(self, path) -> None:
        cols = self.arrays()
        names = list(cols)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(names)
            for i in range(len(self.times)):
                w.writerow([repr(float(cols[n][i])) for n in names])

    @classmethod
    def from_csv(cls, path) -> "ObservableSeries":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows:
            raise ObservableSchemaError(f"{path}: empty file")
        head = rows[0]
        base = ["t", "N", "N_ref", "W", "err_N"]
        if head[:5] != base:
            raise ObservableSchemaError(f"{path}: header {head[:5]} does not match {base}")
        ser = cls()
        for k, r in enumerate(rows[1:], start=2):
            if len(r) != len(head):
                raise ObservableSchemaError(f"{path}:{k}: {len(r)} fields, header has {len(head)}")
            try:
                vals = [float(v) for v in r]
            except ValueError as exc:
                raise ObservableSchemaError(f"{path}:{k}: {exc}") from None
            ser.append(vals[0], vals[1], vals[2], vals[3], **dict(zip(head[5:], vals[5:])))
        return ser


class AugmentedGenerator:
    """H_aug for the interior operator ``H`` closed by ``abc`` (None = Dirichlet)."""

    def __init__(self, H, n_gamma: int, abc: RationalAbc | None = None):
        self.H = sp.csr_matrix(H)
        self.n_interior = self.H.shape[0]
        self.n_gamma = n_gamma
        self.abc = abc
        self.order = -1 if abc is None else abc.order
        if abc is not None and abc.n_gamma != n_gamma:
            raise PropagationError(f"ABC acts on {abc.n_gamma} boundary nodes, partition has {n_gamma}")
        self._cache: dict = {}

    @property
    def n_aux(self) -> int:
        return max(self.order, 0) * self.n_gamma

    @property
    def size(self) -> int:
        return self.n_interior + self.n_aux

    def split(self, y):
        n, m = self.n_interior, self.n_gamma
        phi = y[:n]
        f = y[n:n + m] if self.order >= 1 else None
        g = y[n + m:n + 2 * m] if self.order == 2 else None
        return phi, f, g

    def apply(self, y: np.ndarray) -> np.ndarray:
        n, m = self.n_interior, self.n_gamma
        phi, f, g = self.split(y)
        out = np.empty(y.shape, dtype=complex)
        r = self.H @ phi
        if self.order == 0:
            r = np.asarray(r, dtype=complex)
            r[:m] += self.abc.M @ phi[:m]
        elif self.order >= 1:
            r = np.asarray(r, dtype=complex)
            r[:m] += f
        out[:n] = r
        if self.order == 1:
            a = self.abc
            out[n:] = 1j * (a.A @ phi[:m] + a.B @ f)
        elif self.order == 2:
            a = self.abc
            dphi_g = -1j * r[:m]
            out[n:n + m] = 1j * g
            out[n + m:] = 1j * (a.B1 @ g + a.B0 @ f + a.A1 @ dphi_g + a.A0 @ phi[:m])
        return out

    def sparse(self) -> sp.csr_matrix:
        """Explicit H_aug (dense ABC blocks stored as sparse blocks)."""
        n, m = self.n_interior, self.n_gamma
        H = self.H
        if self.order < 0:
            return H.tocsr()
        E = sp.csr_matrix((np.ones(m), (np.arange(m), np.arange(m))), shape=(m, n))
        a = self.abc
        if self.order == 0:
            return (H + E.T @ sp.csr_matrix(a.M) @ E).tocsr()
        if self.order == 1:
            return sp.bmat([[H, E.T], [sp.csr_matrix(1j * a.A) @ E, sp.csr_matrix(1j * a.B)]]).tocsr()
        EH = (E @ H).tocsr()
        row_phi = sp.csr_matrix(1j * a.A0) @ E + sp.csr_matrix(a.A1) @ EH
        row_f = sp.csr_matrix(1j * a.B0 + a.A1)
        return sp.bmat([
            [H, E.T, None],
            [None, sp.csr_matrix((m, m)), 1j * sp.identity(m)],
            [row_phi, row_f, sp.csr_matrix(1j * a.B1)],
        ]).tocsr()

    def dense(self) -> np.ndarray:
        return self.sparse().toarray()


def assemble_augmented_generator(blocks: HamiltonianBlocks, abc: RationalAbc | None = None, H=None) -> AugmentedGenerator:
    if abc is not None and abc.order not in (0, 1, 2):
        raise PropagationError(f"unsupported ABC order {abc.order}")
    return AugmentedGenerator(blocks.H_II if H is None else H, blocks.partition.n_gamma, abc)


class CrankNicolson:
    """Cayley step (I + i dt/2 H)^{-1} (I - i dt/2 H) with a cached sparse LU."""

    def __init__(self, gen: AugmentedGenerator, dt: float):
        Ha = gen.sparse().tocsc()
        I = sp.identity(Ha.shape[0], format="csc", dtype=complex)
        try:
            self._lu = spla.splu((I + 0.5j * dt * Ha).tocsc())
        except RuntimeError as exc:
            raise PropagationError(f"Crank-Nicolson factorisation failed: {exc}") from None
        self._rhs = (I - 0.5j * dt * Ha).tocsr()
        self.dt = dt

    def step(self, y: np.ndarray) -> np.ndarray:
        return self._lu.solve(np.asarray(self._rhs @ y, dtype=complex))


def step_crank_nicolson(gen: AugmentedGenerator, y: np.ndarray, dt: float) -> np.ndarray:
    key = ("cn", dt)
    cn = gen._cache.get(key)
    if cn is None:
        cn = gen._cache[key] = CrankNicolson(gen, dt)
    return cn.step(y)


def step_taylor4(gen, y: np.ndarray, dt: float) -> np.ndarray:
    """sum_{k=0}^{4} (-i dt H)^k / k!  applied with four operator products."""
    out = np.array(y, dtype=complex)
    term = out.copy()
    for k in range(1, 5):
        term = (-1j * dt / k) * gen.apply(term)
        out += term
    return out


def spectral_radius_estimate(gen, iters: int = 30) -> float:
    """Power-iteration estimate of the spectral radius of H_aug (deterministic start)."""
    v = np.ones(gen.size, dtype=complex) + 0.5j * np.cos(np.arange(gen.size))
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = gen.apply(v)
        lam = float(np.linalg.norm(w))
        if lam == 0.0:
            return 0.0
        v = w / lam
    return 1.1 * lam


# ---------------------------------------------------------------- references

def exact_solution_1d(x, t, k0: float = 5.0, xc: float = -6.0):
    """Free packet exp(i k0 (x-xc) - (x-xc)^2) evolved under i psi_t = -psi_xx / 2."""
    x = np.asarray(x, dtype=float) - xc
    z = 1j - 2.0 * t
    return np.sqrt(1j / z) * np.exp((-k0 * x + 0.5 * k0**2 * t - 1j * x**2) / z)


def exact_solution_3d(x, t, k0: float = 5.0):
    """``x`` has shape (..., 3); packet exp(-|x|^2 + i k0 x_1)."""
    x = np.asarray(x, dtype=float)
    r2 = np.sum(x**2, axis=-1)
    z = 1j - 2.0 * t
    return (1j / z) ** 1.5 * np.exp((-1j * r2 - k0 * x[..., 0] + 0.5 * k0**2 * t) / z)


def exact_number_1d(t, lo: float, hi: float, k0: float = 5.0, xc: float = -6.0) -> float:
    """Continuum mass of the exact packet on [lo, hi]."""
    w2 = 1.0 + 4.0 * t * t
    a = math.sqrt(2.0 / w2)
    m = xc + k0 * t
    return math.sqrt(math.pi / 2) * 0.5 * (erf(a * (hi - m)) - erf(a * (lo - m)))


CAP_PROFILES = ("printed", "outward")


def cap_potential(x, inner=(-12.0, 3.0), outer=(-16.0, 7.0), profile: str = "printed"):
    """Absorbing profile on the pads ``outer \\ inner``.

    ``printed``: (x - outer_lo)^2 on the left pad and (x - outer_hi)^2 on the
    right pad, so W = 16 at the pad/interior interfaces of [-12, 3] and 0 at the
    walls.  ``outward``: (x - inner_lo)^2 and (x - inner_hi)^2, vanishing at the
    interfaces and growing towards the walls.
    """
    if profile not in CAP_PROFILES:
        raise PropagationError(f"unknown CAP profile {profile!r}")
    x = np.asarray(x, dtype=float)
    W = np.zeros_like(x)
    left = (x > outer[0]) & (x < inner[0])
    right = (x > inner[1]) & (x < outer[1])
    a_l, a_r = (outer[0], outer[1]) if profile == "printed" else (inner[0], inner[1])
    W[left] = (x[left] - a_l) ** 2
    W[right] = (x[right] - a_r) ** 2
    return W


def cap_baseline(eta: float, h: float = 0.01, stencil="fd5", inner=(-12.0, 3.0), outer=(-16.0, 7.0),
                 profile: str = "printed"):
    """H - i eta W on the padded interval ``outer`` with hard walls.

    Returns the generator, the padded grid, its partition and a mask of the
    nodes inside ``inner``.
    """
    if not eta > 0:
        raise PropagationError("CAP strength must be positive")
    st = get_stencil(stencil) if isinstance(stencil, str) else stencil
    grid = build_grid(1, outer, h, st)
    part = partition(grid, st, open_faces=[(False, False)])
    x = grid.axis(0)
    W = cap_potential(x, inner, outer, profile)
    blocks = assemble_blocks(grid, part, st)
    H = blocks.H_II - 1j * eta * sp.diags(part.to_interior(W))
    mask = part.to_interior((x >= inner[0] - 1e-9 * h) & (x <= inner[1] + 1e-9 * h))
    return AugmentedGenerator(H, 0, None), grid, part, mask


def lyapunov_weight(abc: RationalAbc | None, blocks: HamiltonianBlocks) -> np.ndarray | None:
    """Q = (H_GS H_SG)^{-1} for first-order ABCs, else None."""
    if abc is None or abc.order != 1:
        return None
    gram = blocks.coupling_gram()
    try:
        return np.linalg.inv(gram)
    except np.linalg.LinAlgError:
        raise PropagationError("H_GS H_SG is singular; no Lyapunov weight") from None


def lyapunov(y: np.ndarray, gen: AugmentedGenerator, h: float, dim: int, Q: np.ndarray | None = None) -> float:
    """W = h^d (phi^* phi + f^* Q f); the f term only for first-order ABCs."""
    phi, f, _ = gen.split(y)
    W = float(np.vdot(phi, phi).real)
    if gen.order == 1:
        if Q is None:
            raise PropagationError("first-order Lyapunov functional needs Q")
        W += float(np.vdot(f, Q @ f).real)
    elif gen.order == 2:
        return float("nan")
    return h**dim * W


def write_snapshot(path, grid: Grid, part, phi: np.ndarray, plane: int | None = None) -> None:
    """CSV of interior values; ``plane`` restricts 3D output to one z index."""
    u = part.to_grid(np.asarray(phi))
    coords = np.stack(np.meshgrid(*[grid.axis(a) for a in range(grid.dim)], indexing="ij"), axis=-1)
    if grid.dim == 3 and plane is not None:
        u = u[:, :, plane]
        coords = coords[:, :, plane]
    names = ["x", "y", "z"][: grid.dim]
    coords = coords.reshape(-1, grid.dim)
    u = u.reshape(-1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names + ["re", "im", "abs2"])
        for c, v in zip(coords, u):
            w.writerow([repr(float(ci)) for ci in c] + [repr(float(v.real)), repr(float(v.imag)), repr(float(abs(v) ** 2))])


def check_finite(y: np.ndarray, step: int) -> None:
    if not np.all(np.isfinite(y)):
        raise PropagationError(f"non-finite state at step {step}")
