"""Lattice Green's functions of the free discrete Hamiltonian in the Laplace domain.

All discrete Green's functions here are resolvent entries

    G(n) = [(H - i s I)^{-1}]_{x, x + n h}

of the infinite-lattice operator ``H = kinetic_prefactor * D2_h`` (no potential),
so that ``sum_j (H - is)_{ij} G_{jk} = delta_{ik}``.  The printed continuum forms
(`greens_continuum`) instead use the normalisation ``(d^2 + 2 s i) G = delta``;
`continuum_resolvent` converts them to the lattice convention.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.fft

from .lattice import Stencil, get_stencil

__all__ = [
    "GreensError",
    "Greens1dFactors",
    "greens1d_factors",
    "greens1d",
    "printed_quartic_forms",
    "greens_continuum",
    "continuum_resolvent",
    "Greens3dTable",
    "greens3d",
    "save_table",
    "load_table",
]


class GreensError(ArithmeticError):
    pass


@dataclass(frozen=True)
class Greens1dFactors:
    """Decaying characteristic roots and amplitudes of the 1D lattice resolvent.

    ``G_j = sum_r b[r] * u[r] ** |j|``.  For the five-point stencil ``u = (u1, u3)``
    and ``growing = (u2, u4)`` in the labelling of the closed-form roots.
    """

    s: complex
    h: float
    stencil: Stencil
    u: np.ndarray
    growing: np.ndarray
    b: np.ndarray
    poly: np.ndarray

    @property
    def u1(self) -> complex:
        return complex(self.u[0])

    @property
    def u3(self) -> complex:
        return complex(self.u[1])

    @property
    def b1(self) -> complex:
        return complex(self.b[0])

    @property
    def b2(self) -> complex:
        return complex(self.b[1])

    @property
    def a(self) -> complex:
        return complex(np.sqrt(9 + 6 * self.s * self.h**2 * 1j))

    def residuals(self) -> np.ndarray:
        roots = np.concatenate([self.u, self.growing])
        scale = np.abs(self.poly).max()
        return np.abs(np.polyval(self.poly, roots)) / scale

    def __call__(self, j) -> np.ndarray:
        j = np.abs(np.asarray(j))
        return np.sum(self.b[:, None] * self.u[:, None] ** j.ravel()[None, :], axis=0).reshape(j.shape)


def _characteristic(s: complex, h: float, stencil: Stencil) -> np.ndarray:
    # pref/h^2 sum c_k u^k - i s = 0, multiplied through by h^2/pref and u^p
    c = np.asarray(stencil.coeffs, dtype=complex)
    c[stencil.half_width] -= 1j * s * h**2 / stencil.kinetic_prefactor
    return c[::-1].copy()  # numpy.roots wants the highest power first; c is symmetric anyway


def greens1d_factors(s: complex, h: float, stencil: Stencil | None = None) -> Greens1dFactors:
    stencil = stencil or get_stencil("fd5")
    s = complex(s)
    if s.real <= 0 or h <= 0:
        raise GreensError(f"need Re(s) > 0 and h > 0 (s={s}, h={h})")
    p = stencil.half_width
    poly = _characteristic(s, h, stencil)
    roots = np.roots(poly)
    # Newton polish on the companion-matrix roots
    dpoly = np.polyder(poly)
    for _ in range(3):
        roots = roots - np.polyval(poly, roots) / np.polyval(dpoly, roots)
    mod = np.abs(roots)
    if np.any(np.abs(mod - 1.0) < 1e-12):
        raise GreensError(f"characteristic root on the unit circle (s={s}, h={h}); branch is ambiguous")
    inside = roots[mod < 1]
    outside = roots[mod > 1]
    if inside.size != p:
        raise GreensError(f"{inside.size} roots inside the unit disk, expected {p} (s={s}, h={h})")
    inside = inside[np.argsort(np.abs(inside))]
    outside = outside[np.argsort(np.abs(outside))]
    if p == 2:
        # label the growing roots like the closed forms: u2 pairs with u3, u4 with u1
        outside = np.array([outside[np.argmin(np.abs(outside * inside[1] - 1))],
                            outside[np.argmin(np.abs(outside * inside[0] - 1))]])

    # rows j = 0..p-1 of (H - is) G = delta fix the amplitudes; rows j >= p hold per root
    scale = stencil.kinetic_prefactor / h**2
    M = np.zeros((p, p), dtype=complex)
    for row in range(p):
        for k in range(-p, p + 1):
            M[row] += scale * stencil.c(k) * inside ** abs(row + k)
        M[row] -= 1j * s * inside**row
    rhs = np.zeros(p, dtype=complex)
    rhs[0] = 1.0
    b = np.linalg.solve(M, rhs)
    out = Greens1dFactors(s, float(h), stencil, inside, outside, b, poly)
    if out.residuals().max() > 1e-10:
        raise GreensError(f"root finder did not converge (s={s}, h={h}): {out.residuals().max():.2e}")
    return out


def greens1d(s: complex, h: float, j, stencil: Stencil | None = None) -> np.ndarray:
    return greens1d_factors(s, h, stencil)(j)


def printed_quartic_forms(s: complex, h: float) -> dict[str, complex]:
    """Nested-radical closed forms for the five-point stencil (reference values).

    ``b1``/``b2`` here belong to the ``(D2_h + 2 s i) G = delta`` normalisation.
    """
    x = 6 * s * h**2 * 1j
    a = np.sqrt(9 + x)
    return {
        "a": a,
        "u1": 4 + a - np.sqrt(x + 8 * a + 24),
        "u2": 4 - a + np.sqrt(x - 8 * a + 24),
        "u3": 4 - a - np.sqrt(x - 8 * a + 24),
        "u4": 4 + a + np.sqrt(x + 8 * a + 24),
        "b1": h**2 / 2 * np.sqrt(3 / ((3 + 2 * s * h**2 * 1j) * (24 + x + 8 * a))),
        "b2": h**2 / 2 * np.sqrt(3 / ((3 + 2 * s * h**2 * 1j) * (24 + x - 8 * a))),
    }


def _kappa(s: complex, kinetic_prefactor: float) -> complex:
    k = np.sqrt(1j * complex(s) / kinetic_prefactor + 0j)
    return k if k.real > 0 else -k


def greens_continuum(s: complex, r, dim: int) -> np.ndarray:
    """Fundamental solution of ``(laplacian + 2 s i) G = delta`` with Re sqrt(-2si) > 0."""
    r = np.asarray(r, dtype=float)
    k = _kappa(s, -0.5)
    if dim == 1:
        return -np.exp(-k * np.abs(r)) / (2 * k)
    if dim == 3:
        if np.any(r <= 0):
            raise GreensError("3D continuum Green's function is singular at r = 0")
        return -np.exp(-k * r) / (4 * np.pi * r)
    raise GreensError(f"dim must be 1 or 3, got {dim}")


def continuum_resolvent(s: complex, r, dim: int, h: float, kinetic_prefactor: float = -0.5) -> np.ndarray:
    """Continuum kernel of ``(kinetic_prefactor * laplacian - is)^{-1}`` times ``h**dim``.

    This is the large-distance approximation of the lattice resolvent entries.
    """
    r = np.asarray(r, dtype=float)
    k = _kappa(s, kinetic_prefactor)
    if dim == 1:
        g = -np.exp(-k * np.abs(r)) / (2 * k)
    elif dim == 3:
        if np.any(r <= 0):
            raise GreensError("3D continuum Green's function is singular at r = 0")
        g = -np.exp(-k * r) / (4 * np.pi * r)
    else:
        raise GreensError(f"dim must be 1 or 3, got {dim}")
    return g * h**dim / kinetic_prefactor


def _canonical(offsets: np.ndarray) -> np.ndarray:
    return np.sort(np.abs(np.asarray(offsets, dtype=np.int64)), axis=-1)


@dataclass(frozen=True, eq=False)
class Greens3dTable:
    """Tabulated 3D lattice resolvent over canonical offsets (|n| sorted ascending)."""

    s: complex
    h: float
    stencil: Stencil
    quad_n: int
    offsets: np.ndarray
    values: np.ndarray
    continuum_radius: float | None = None

    def __post_init__(self):
        order = np.lexsort(self.offsets.T[::-1])
        object.__setattr__(self, "offsets", self.offsets[order])
        object.__setattr__(self, "values", self.values[order])
        object.__setattr__(self, "_codes", self._encode(self.offsets))

    @staticmethod
    def _encode(canon: np.ndarray) -> np.ndarray:
        base = np.int64(1 << 20)
        return (canon[:, 0] * base + canon[:, 1]) * base + canon[:, 2]

    def lookup(self, offsets) -> np.ndarray:
        offsets = np.asarray(offsets, dtype=np.int64)
        shape = offsets.shape[:-1]
        canon = _canonical(offsets.reshape(-1, 3))
        codes = self._encode(canon)
        idx = np.searchsorted(self._codes, codes)
        idx = np.clip(idx, 0, len(self._codes) - 1)
        if np.any(self._codes[idx] != codes):
            raise KeyError("offset not tabulated")
        return self.values[idx].reshape(shape)


def _symbol_half(stencil: Stencil, h: float, quad_n: int) -> np.ndarray:
    theta = 2 * np.pi * np.arange(quad_n // 2 + 1) / quad_n
    return stencil.kinetic_prefactor / h**2 * stencil.symbol(theta)


def greens3d(
    s: complex,
    h: float,
    offsets,
    quad_n: int = 100,
    stencil: Stencil | None = None,
    continuum_radius: float | None = None,
) -> Greens3dTable:
    """3D lattice resolvent by the periodic trapezoidal rule on the Brillouin cube.

    The rule with ``quad_n`` nodes per axis is evaluated for all offsets at once
    with a type-I cosine transform (the integrand is even in every component).
    Offsets with ``|n| h >= continuum_radius`` use the continuum kernel instead.
    """
    stencil = stencil or get_stencil("fd7")
    s = complex(s)
    if quad_n < 32 or quad_n % 2:
        raise GreensError(f"quad_n must be an even number >= 32, got {quad_n}")
    canon = np.unique(_canonical(np.asarray(offsets).reshape(-1, 3)), axis=0)
    if canon.size and canon.max() > quad_n // 2:
        raise GreensError(
            f"offset {canon.max()} exceeds quad_n/2={quad_n // 2}; the periodic rule would alias it"
        )
    lam = _symbol_half(stencil, h, quad_n)
    denom = lam[:, None, None] + lam[None, :, None] + lam[None, None, :] - 1j * s
    if np.any(denom == 0):
        raise GreensError(
            f"C(xi) vanishes on the quadrature lattice (s={s}); shift s off the imaginary axis"
        )
    denom = np.reciprocal(denom, out=denom)
    full = scipy.fft.dctn(denom, type=1, overwrite_x=True, workers=-1)
    full /= quad_n**3
    values = full[canon[:, 0], canon[:, 1], canon[:, 2]]
    del full, denom
    if continuum_radius is not None:
        r = h * np.linalg.norm(canon, axis=1)
        far = r >= continuum_radius
        if far.any():
            values[far] = continuum_resolvent(s, r[far], 3, h, stencil.kinetic_prefactor)
    return Greens3dTable(s, float(h), stencil, int(quad_n), canon, values, continuum_radius)


# binary cache: "QGF1" | dim i4 | h f8 | s.re f8 | s.im f8 | stencil name 16s | prefactor f8
#               | quad_n i4 | count i8 | count * (3 * i4, 2 * f8), little-endian
_HEADER = struct.Struct("<4si ddd 16s d i q")
_RECORD = np.dtype([("off", "<i4", (3,)), ("re", "<f8"), ("im", "<f8")])


def save_table(table: Greens3dTable, path) -> None:
    buf = io.BytesIO()
    buf.write(
        _HEADER.pack(
            b"QGF1", 3, table.h, table.s.real, table.s.imag,
            table.stencil.name.encode("ascii")[:16], table.stencil.kinetic_prefactor,
            table.quad_n, len(table.values),
        )
    )
    rec = np.empty(len(table.values), dtype=_RECORD)
    rec["off"] = table.offsets
    rec["re"] = table.values.real
    rec["im"] = table.values.imag
    buf.write(rec.tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_table(path) -> Greens3dTable:
    from .lattice import STENCIL_WEIGHTS

    raw = Path(path).read_bytes()
    magic, dim, h, sre, sim, name, pref, quad_n, count = _HEADER.unpack_from(raw)
    if magic != b"QGF1":
        raise GreensError(f"{path}: not a QGF1 file")
    if dim != 3:
        raise GreensError(f"{path}: only 3D tables are stored, got dim={dim}")
    name = name.rstrip(b"\0").decode("ascii")
    stencil = get_stencil(name, pref) if name in STENCIL_WEIGHTS else None
    rec = np.frombuffer(raw, dtype=_RECORD, count=count, offset=_HEADER.size)
    return Greens3dTable(
        complex(sre, sim), h, stencil, quad_n,
        rec["off"].astype(np.int64), rec["re"] + 1j * rec["im"],
    )
