"""Rational absorbing boundary conditions built from DtN samples.

A rational ABC of order m replaces the boundary force f = K(s) phi_Gamma by

    m = 0:  f = M phi_Gamma
    m = 1:  f' = B f + A phi_Gamma                         R(s) = (sI - B)^{-1} A
    m = 2:  f'' = B1 f' + B0 f + A1 phi_Gamma' + A0 phi_Gamma
                                  R(s) = (s^2 I - s B1 - B0)^{-1} (s A1 + A0)

with coefficients fixed by interpolating K at a few positive real nodes.
"""
from __future__ import annotations

import io
import logging
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla

from .dtn import DtnSample
from .lattice import HamiltonianBlocks

log = logging.getLogger(__name__)

__all__ = [
    "AbcError",
    "RationalAbc",
    "StabilityReport",
    "build_abc0",
    "build_abc1_limit",
    "build_abc1_twopoint",
    "build_abc1_moment",
    "build_abc2",
    "certify_stability",
    "save_abc",
    "load_abc",
    "VARIANTS",
]

VARIANTS = ("zeroth", "first_limit", "first_twopoint", "first_moment", "second_fourpoint")
_MATRIX_NAMES = {0: ("M",), 1: ("A", "B"), 2: ("A1", "A0", "B1", "B0")}
INTERP_RTOL = 1e-8
NODE_RTOL = 1e-6
VERDICT_TOL = 1e-8


class AbcError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class RationalAbc:
    order: int
    variant: str
    nodes: tuple[float, ...]
    mats: dict[str, np.ndarray]

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise AbcError(f"unknown variant {self.variant!r}")
        names = _MATRIX_NAMES.get(self.order)
        if names is None or set(names) != set(self.mats):
            raise AbcError(f"order {self.order} needs matrices {names}, got {sorted(self.mats)}")
        shapes = {m.shape for m in self.mats.values()}
        if len(shapes) != 1 or any(len(sh) != 2 or sh[0] != sh[1] for sh in shapes):
            raise AbcError(f"coefficient matrices must share one square shape, got {shapes}")

    def __getattr__(self, name):
        mats = self.__dict__.get("mats", {})
        if name in mats:
            return mats[name]
        raise AttributeError(name)

    @property
    def n_gamma(self) -> int:
        return next(iter(self.mats.values())).shape[0]

    def evaluate(self, s: complex) -> np.ndarray:
        """R(s), the rational approximation of K(s)."""
        n = self.n_gamma
        I = np.eye(n)
        if self.order == 0:
            return self.M.copy()
        if self.order == 1:
            return np.linalg.solve(s * I - self.B, self.A)
        return np.linalg.solve(s * s * I - s * self.B1 - self.B0, s * self.A1 + self.A0)

    def interpolation_residuals(self, samples) -> list[float]:
        out = []
        for smp in samples:
            R = self.evaluate(smp.s)
            out.append(float(np.linalg.norm(R - smp.K) / max(np.linalg.norm(smp.K), 1e-300)))
        return out


def _check_nodes(nodes) -> None:
    nodes = [float(s) for s in nodes]
    for s in nodes:
        if not s > 0:
            raise AbcError(f"interpolation nodes must be positive, got {nodes}")
    for i in range(len(nodes)):
        for j in range(i):
            if abs(nodes[i] - nodes[j]) <= NODE_RTOL * max(nodes[i], nodes[j]):
                raise AbcError(f"interpolation nodes {nodes[j]} and {nodes[i]} coincide to {NODE_RTOL:g}")


def _solve_checked(M: np.ndarray, rhs: np.ndarray, what: str, side: str = "left") -> np.ndarray:
    """M^{-1} rhs (side='left') or rhs M^{-1} (side='right') with a conditioning check.

    Rows and columns are equilibrated first so the condition estimate is not
    dominated by the very different scales of K, sK and their differences.
    """
    if M.size == 0:
        return np.zeros_like(rhs, dtype=complex)
    r = 1.0 / np.maximum(np.abs(M).max(axis=1), 1e-300)
    Mr = M * r[:, None]
    c = 1.0 / np.maximum(np.abs(Mr).max(axis=0), 1e-300)
    Ms = Mr * c[None, :]
    lu = sla.lu_factor(Ms, check_finite=False)
    anorm = np.abs(Ms).sum(axis=0).max()
    gecon = sla.get_lapack_funcs("gecon", (lu[0],))
    rc, _ = gecon(lu[0], anorm, norm="1")
    log.info("%s: rcond %.3e", what, rc)
    if not rc > 1e-14:
        raise AbcError(f"{what} is numerically singular (rcond {rc:.2e})")
    if side == "left":
        return c[:, None] * sla.lu_solve(lu, r[:, None] * rhs, check_finite=False)
    # rhs M^{-1} = ((rhs diag(c)) Ms^{-1}) diag(r)
    return sla.lu_solve(lu, (rhs * c[None, :]).T, trans=1, check_finite=False).T * r[None, :]


def _verify(abc: RationalAbc, samples) -> RationalAbc:
    res = abc.interpolation_residuals(samples)
    if max(res, default=0.0) > INTERP_RTOL:
        raise AbcError(f"{abc.variant}: interpolation residual {max(res):.2e} at nodes {abc.nodes}")
    return abc


def build_abc0(sample: DtnSample) -> RationalAbc:
    _check_nodes([sample.s])
    return RationalAbc(0, "zeroth", (sample.s,), {"M": sample.K.copy()})


def build_abc1_limit(sample: DtnSample, blocks: HamiltonianBlocks) -> RationalAbc:
    """A = -i H_GS H_SG, B = s1 I - A K(s1)^{-1}; matches K at s1 and as s -> infinity."""
    _check_nodes([sample.s])
    n = sample.n_gamma
    A = -1j * blocks.coupling_gram()
    # B = s1 I - A K^{-1}  <=>  (B - s1 I) K = -A
    AKinv = _solve_checked(sample.K, A, f"K({sample.s:g})", side="right")
    B = sample.s * np.eye(n) - AKinv
    return _verify(RationalAbc(1, "first_limit", (sample.s,), {"A": A, "B": B}), [sample])


def build_abc1_twopoint(s1: DtnSample, s2: DtnSample) -> RationalAbc:
    _check_nodes([s1.s, s2.s])
    K1, K2 = s1.K, s2.K
    B = _solve_checked(K1 - K2, s1.s * K1 - s2.s * K2, f"K({s1.s:g}) - K({s2.s:g})", side="right")
    A = (s1.s * np.eye(K1.shape[0]) - B) @ K1
    return _verify(RationalAbc(1, "first_twopoint", (s1.s, s2.s), {"A": A, "B": B}), [s1, s2])


def build_abc1_moment(sample: DtnSample) -> RationalAbc:
    """Match K and K' at one node: B = s1 I + K K'^{-1}, A = -K K'^{-1} K."""
    if sample.Kprime is None:
        raise AbcError("moment variant needs K'(s1)")
    _check_nodes([sample.s])
    K, Kp = sample.K, sample.Kprime
    _solve_checked(K, np.eye(K.shape[0]), f"K({sample.s:g})")
    KKpinv = _solve_checked(Kp, K, f"K'({sample.s:g})", side="right")
    B = sample.s * np.eye(K.shape[0]) + KKpinv
    A = -KKpinv @ K
    abc = RationalAbc(1, "first_moment", (sample.s,), {"A": A, "B": B})
    _verify(abc, [sample])
    n = K.shape[0]
    dR = -np.linalg.solve(sample.s * np.eye(n) - B, abc.evaluate(sample.s))
    gap = np.linalg.norm(dR - Kp) / np.linalg.norm(Kp)
    if gap > INTERP_RTOL:
        raise AbcError(f"first_moment: derivative residual {gap:.2e} at s={sample.s}")
    return abc


def _dd2(vals, nodes, i, j, k):
    d1 = (vals[j] - vals[i]) / (nodes[j] - nodes[i])
    d2 = (vals[k] - vals[j]) / (nodes[k] - nodes[j])
    return (d2 - d1) / (nodes[k] - nodes[i])


def build_abc2(samples) -> RationalAbc:
    """Four-point interpolation s_i^2 K_i = B1 s_i K_i + B0 K_i + s_i A1 + A0.

    The part linear in s (s A1 + A0) is annihilated by second divided
    differences, which leaves a 2n x 2n system for X = [B1 B0]; A1 and A0
    then follow from any two nodes.
    """
    samples = list(samples)
    if len(samples) != 4:
        raise AbcError(f"second-order build needs 4 samples, got {len(samples)}")
    nodes = [smp.s for smp in samples]
    _check_nodes(nodes)
    n = samples[0].n_gamma
    d = [np.vstack([smp.s * smp.K, smp.K]) for smp in samples]
    z = [smp.s ** 2 * smp.K for smp in samples]
    Y = np.hstack([_dd2(d, nodes, 0, 1, 2), _dd2(d, nodes, 0, 1, 3)])
    Z = np.hstack([_dd2(z, nodes, 0, 1, 2), _dd2(z, nodes, 0, 1, 3)])
    try:
        X = _solve_checked(Y, Z, f"second-order system at nodes {nodes}", side="right")
    except AbcError as exc:
        raise AbcError(f"second-order block system singular for nodes {nodes}: {exc}") from None
    B1, B0 = X[:, :n], X[:, n:]
    D = [z[i] - X @ d[i] for i in range(4)]
    A1 = (D[1] - D[0]) / (nodes[1] - nodes[0])
    A0 = D[0] - nodes[0] * A1
    abc = RationalAbc(2, "second_fourpoint", tuple(nodes), {"A1": A1, "A0": A0, "B1": B1, "B0": B0})
    return _verify(abc, samples)


@dataclass
class StabilityReport:
    order: int
    im_definiteness: float | None = None
    lyapunov_matrix_check: float | None = None
    spectral_abscissa: float | None = None
    spectral_skipped: bool = False
    tolerance: float = VERDICT_TOL
    notes: list[str] = field(default_factory=list)

    @property
    def verdict(self) -> str:
        vals = [v for v in (self.im_definiteness, self.lyapunov_matrix_check, self.spectral_abscissa) if v is not None]
        if not vals:
            return "UNKNOWN"
        return "PASS" if max(vals) <= self.tolerance else "FAIL"


def certify_stability(
    abc: RationalAbc,
    blocks: HamiltonianBlocks,
    interior_size_cap: int = 4000,
) -> StabilityReport:
    """Algebraic certificates per order plus the spectral abscissa on small instances.

    Eigenvalue maxima are reported relative to the spectral norm of the matrix
    they come from, so the 1e-8 tolerance is scale free.
    """
    rep = StabilityReport(abc.order)
    if abc.order == 0:
        M = abc.M
        im = (M - M.conj().T) / 2j
        scale = max(np.linalg.norm(M, 2), 1e-300) if M.size else 1.0
        rep.im_definiteness = float(np.linalg.eigvalsh(im).max() / scale) if M.size else 0.0
    elif abc.order == 1:
        gram = blocks.coupling_gram()
        Q = _solve_checked(gram.astype(complex), np.eye(gram.shape[0], dtype=complex), "H_GS H_SG")
        QB = Q @ abc.B
        L = (QB + QB.conj().T) / 2
        rep.lyapunov_matrix_check = float(np.linalg.eigvalsh(L).max() / np.linalg.norm(QB, 2))
    else:
        rep.notes.append("no algebraic certificate for order 2")
    n_aug = blocks.partition.n_interior + abc.order * abc.n_gamma
    if n_aug > interior_size_cap:
        rep.spectral_skipped = True
        rep.notes.append(f"spectral abscissa skipped: augmented size {n_aug} > cap {interior_size_cap}")
        warnings.warn(rep.notes[-1], RuntimeWarning, stacklevel=2)
    else:
        from .propagate import assemble_augmented_generator

        gen = assemble_augmented_generator(blocks, abc)
        Ha = gen.dense()
        lam = np.linalg.eigvals(-1j * Ha)
        rep.spectral_abscissa = float(lam.real.max() / max(np.abs(lam).max(), 1e-300))
    return rep


# "QABC" | order i4 | variant 16s | n_nodes i4 | n_gamma i8 | nodes f8... |
#        matrices in fixed order, row-major complex (re, im f8), little-endian
_HEADER = struct.Struct("<4si16siq")


def save_abc(abc: RationalAbc, path) -> None:
    buf = io.BytesIO()
    buf.write(_HEADER.pack(b"QABC", abc.order, abc.variant.encode("ascii"), len(abc.nodes), abc.n_gamma))
    buf.write(np.asarray(abc.nodes, dtype="<f8").tobytes())
    for name in _MATRIX_NAMES[abc.order]:
        buf.write(np.ascontiguousarray(abc.mats[name], dtype="<c16").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_abc(path) -> RationalAbc:
    raw = Path(path).read_bytes()
    magic, order, variant, nn, n = _HEADER.unpack_from(raw)
    if magic != b"QABC":
        raise AbcError(f"{path}: not a QABC file")
    off = _HEADER.size
    nodes = tuple(np.frombuffer(raw, dtype="<f8", count=nn, offset=off).tolist())
    off += 8 * nn
    mats = {}
    for name in _MATRIX_NAMES[order]:
        mats[name] = np.frombuffer(raw, dtype="<c16", count=n * n, offset=off).reshape(n, n).copy()
        off += 16 * n * n
    return RationalAbc(order, variant.rstrip(b"\0").decode("ascii"), nodes, mats)
