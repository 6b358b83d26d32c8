"""Time-dependent Hartree-Fock with Skyrme t0/t3 contact terms, Yukawa and Coulomb fields.

Units: lengths in fm, energies in MeV, time in hbar/MeV (1 hbar/MeV = 197.327 fm/c).
Orbitals are stored column-wise in interior order and normalised with the
h^3-weighted discrete inner product.  The mean field is

    U = 3/4 t0 rho + 3/16 t3 rho^2 + W_Y + W_C,
    (lap - 1/a^2) W_Y = -4 pi V0 a rho,       lap W_C = -4 pi e^2 rho_p,  rho_p = rho / 2.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .config import ExperimentConfig, TdhfSpec
from .lattice import HamiltonianBlocks, assemble_blocks, build_grid, get_stencil, partition
from .propagate import (
    GUARD_EVERY,
    TAYLOR4_LIMIT,
    AugmentedGenerator,
    ObservableSeries,
    PropagationError,
    check_finite,
    spectral_radius_estimate,
    step_taylor4,
    write_snapshot,
)

log = logging.getLogger(__name__)

__all__ = [
    "TdhfError",
    "TdhfModel",
    "TdhfState",
    "density",
    "boost",
    "oscillator_orbitals",
    "orthonormalize",
    "static_ground_state",
    "tdhf_propagate",
    "run_tdhf",
    "prepare_initial",
    "shift_orbitals",
    "embed_orbitals",
]


class TdhfError(RuntimeError):
    pass


def density(orbitals: np.ndarray, degeneracy: int = 4) -> np.ndarray:
    """rho = g sum_j |phi_j|^2; ``orbitals`` has one orbital per column."""
    orbitals = np.asarray(orbitals)
    if orbitals.ndim == 1:
        orbitals = orbitals[:, None]
    if orbitals.shape[1] == 0:
        return np.zeros(orbitals.shape[0])
    return degeneracy * np.sum(np.abs(orbitals) ** 2, axis=1)


def boost(orbitals: np.ndarray, k, points: np.ndarray) -> np.ndarray:
    """Multiply every column by exp(i k . r)."""
    phase = np.exp(1j * (np.asarray(points) @ np.asarray(k, dtype=float)))
    return orbitals * (phase[:, None] if np.ndim(orbitals) == 2 else phase)


def orthonormalize(orbitals: np.ndarray, h3: float, method: str = "gram_schmidt") -> np.ndarray:
    """Orthonormalise columns in the h^3-weighted inner product.

    ``gram_schmidt`` keeps the span of the leading columns; ``lowdin`` is the
    symmetric variant, which moves every column as little as possible.
    """
    X = np.asarray(orbitals, dtype=complex)
    if method == "gram_schmidt":
        q, r = np.linalg.qr(X)
        d = np.diag(r)
        q = q * (d / np.abs(d))[None, :]
        return q / math.sqrt(h3)
    S = h3 * (X.conj().T @ X)
    w, U = np.linalg.eigh(S)
    return X @ (U @ np.diag(w ** -0.5) @ U.conj().T)


class _PoissonSolver:
    """PCG for (lap - mu) W = rhs on the interior, Jacobi preconditioned."""

    def __init__(self, L: sp.csr_matrix, mu: float, tol: float, maxiter: int = 2000):
        self.A = (-(L - mu * sp.identity(L.shape[0]))).tocsr()   # SPD
        self.M = sp.diags(1.0 / self.A.diagonal())
        self.tol = tol
        self.maxiter = maxiter

    def solve(self, rhs: np.ndarray, x0: np.ndarray | None = None) -> np.ndarray:
        b = -np.asarray(rhs, dtype=float)
        nb = np.linalg.norm(b)
        if nb == 0.0:
            return np.zeros_like(b)
        hist = []
        x, info = spla.cg(self.A, b, x0=x0, rtol=self.tol, atol=0.0, maxiter=self.maxiter, M=self.M,
                          callback=lambda xk: hist.append(float(np.linalg.norm(b - self.A @ xk) / nb)))
        res = float(np.linalg.norm(b - self.A @ x) / nb)
        if info != 0 or res > self.tol * 1.01:
            raise TdhfError(f"CG did not reach {self.tol:g} (info {info}, residual {res:.2e}); history {hist[-10:]}")
        return x


@dataclass
class TdhfState:
    orbitals: np.ndarray
    rho: np.ndarray
    Wy: np.ndarray
    Wc: np.ndarray
    f: np.ndarray | None = None
    t: float = 0.0


class TdhfModel:
    """Grid, operators and parameters of one TDHF system."""

    def __init__(self, grid, params: TdhfSpec, stencil: str = "fd7", open_faces=None):
        self.params = params
        self.hb2m = params.hbarc**2 / (2.0 * params.mc2)
        st = get_stencil(stencil).with_prefactor(-self.hb2m)
        self.grid = grid
        self.h3 = grid.h**3
        faces = open_faces if open_faces is not None else [(False, False)] * 3
        self.part = partition(grid, st, open_faces=faces)
        self.blocks: HamiltonianBlocks = assemble_blocks(grid, self.part, st)
        self.T = self.blocks.T_II
        # Laplacian with homogeneous Dirichlet walls, plus its coupling to the wall layer
        lap_st = st.with_prefactor(1.0)
        lp = partition(grid, lap_st)
        lb = assemble_blocks(grid, lp, lap_st)
        perm = lp.position[self.part.order]          # our interior order -> lap order
        P = sp.csr_matrix((np.ones(perm.size), (np.arange(perm.size), perm)), shape=(perm.size, perm.size))
        self.L = (P @ lb.T_II @ P.T).tocsr()
        self._lap_gs = lb.H_GS                       # Gamma (lap order) x wall layer
        self._wall_points = grid.coords(lp.sigma_multi)
        self._lap_perm = perm
        self.points = grid.coords(grid.unravel(self.part.order))
        self.helmholtz = _PoissonSolver(self.L, 1.0 / params.a**2, params.cg_tol)
        self.poisson = _PoissonSolver(self.L, 0.0, params.cg_tol)
        self._last_wy = None
        self._last_wd = None
        self._u = None

    # ------------------------------------------------------------- fields
    def _monopole_profile(self) -> np.ndarray:
        """Harmonic field u with wall values e^2 / |r - c0|, c0 the box centre.

        The Coulomb field of a charge Z is then W_D + Z u, with W_D the solution
        under homogeneous walls.  Fixing c0 keeps the map rho -> W_C linear.
        """
        if self._u is None:
            g = self.grid
            c0 = 0.5 * (np.asarray(g.lo) + np.asarray(g.hi))
            wb = self.params.e2 / np.linalg.norm(self._wall_points - c0, axis=1)
            g_lap = np.asarray(self._lap_gs @ wb)
            out_lap = np.zeros(self.part.n_interior)
            out_lap[: g_lap.size] = g_lap
            self._u = self.poisson.solve(-out_lap[self._lap_perm])
        return self._u

    def potentials(self, rho: np.ndarray, warm: bool = True):
        """(W_Y, W_C) for the density ``rho``."""
        p = self.params
        Wy = self.helmholtz.solve(-4.0 * math.pi * p.V0 * p.a * rho, self._last_wy if warm else None)
        rho_p = 0.5 * rho
        Wd = self.poisson.solve(-4.0 * math.pi * p.e2 * rho_p, self._last_wd if warm else None)
        self._last_wy, self._last_wd = Wy, Wd
        Wc = Wd + self.h3 * rho_p.sum() * self._monopole_profile() if p.coulomb_bc == "monopole" else Wd
        return Wy, Wc

    def mean_field(self, rho, Wy, Wc) -> np.ndarray:
        p = self.params
        return 0.75 * p.t0 * rho + 0.1875 * p.t3 * rho**2 + Wy + Wc

    def hamiltonian(self, rho, Wy=None, Wc=None) -> sp.csr_matrix:
        if Wy is None or Wc is None:
            Wy, Wc = self.potentials(rho)
        return (self.T + sp.diags(self.mean_field(rho, Wy, Wc))).tocsr()

    def state(self, orbitals: np.ndarray) -> TdhfState:
        rho = density(orbitals, self.params.degeneracy)
        Wy, Wc = self.potentials(rho)
        return TdhfState(orbitals, rho, Wy, Wc)

    def total_energy(self, orbitals: np.ndarray, Wy=None, Wc=None) -> float:
        """Energy whose gradient reproduces the mean field (up to a uniform shift).

        With monopole walls W_C = W_D + Z u is linear in rho, and
        E_C = 1/2 <rho, W_D> + Z <rho, u>; its gradient differs from W_C by the
        constant <rho_p, u>, which only rotates the global phase.
        """
        p = self.params
        orbitals = np.asarray(orbitals)
        if orbitals.ndim == 1:
            orbitals = orbitals[:, None]
        rho = density(orbitals, p.degeneracy)
        if not np.any(rho):
            return 0.0
        if Wy is None or Wc is None:
            Wy, Wc = self.potentials(rho)
        kin = p.degeneracy * np.real(np.sum(orbitals.conj() * (self.T @ orbitals)))
        skyrme = np.sum(0.375 * p.t0 * rho**2 + 0.0625 * p.t3 * rho**3)
        coul = 0.5 * np.sum(rho * Wc)
        if p.coulomb_bc == "monopole":
            wb = self.h3 * 0.5 * rho.sum() * self._monopole_profile()
            coul += 0.5 * np.sum(rho * wb)
        return float(self.h3 * (kin + skyrme + 0.5 * np.sum(rho * Wy) + coul))

    def nucleons(self, orbitals: np.ndarray) -> float:
        return float(self.h3 * density(orbitals, self.params.degeneracy).sum())


# ------------------------------------------------------------- ground state

def oscillator_orbitals(points: np.ndarray, center, b: float = 1.8) -> np.ndarray:
    """1s and 1p oscillator shells about ``center`` (four spatial orbitals)."""
    d = points - np.asarray(center, dtype=float)
    g = np.exp(-0.5 * np.sum(d**2, axis=1) / b**2)
    return np.stack([g, d[:, 0] * g, d[:, 1] * g, d[:, 2] * g], axis=1).astype(complex)


def static_ground_state(model: TdhfModel, guess: np.ndarray, dtau: float | None = None, tol: float | None = None,
                        max_iter: int | None = None, trace: list | None = None):
    """Imaginary-time descent with Gram-Schmidt and a subspace Ritz rotation.

    Stops when no single-particle energy moves by more than ``tol`` MeV in one
    iteration.  Returns (orbitals, energies); ``trace`` collects total energies.
    """
    p = model.params
    dtau = p.gs_dtau if dtau is None else dtau
    tol = p.gs_tol if tol is None else tol
    max_iter = p.gs_max_iter if max_iter is None else max_iter
    h3 = model.h3
    X = orthonormalize(guess, h3)
    eps_old = None
    energies = []
    for it in range(max_iter):
        rho = density(X, p.degeneracy)
        Wy, Wc = model.potentials(rho)
        H = model.hamiltonian(rho, Wy, Wc)
        HX = H @ X
        if trace is not None:
            trace.append(model.total_energy(X, Wy, Wc))
        Hs = h3 * (X.conj().T @ HX)
        Hs = 0.5 * (Hs + Hs.conj().T)
        eps, U = np.linalg.eigh(Hs)
        X = X @ U
        HX = HX @ U
        if eps_old is not None and np.max(np.abs(eps - eps_old)) < tol:
            return X, eps
        eps_old = eps
        X = orthonormalize(X - dtau * HX, h3)
        if not np.all(np.isfinite(X)):
            raise TdhfError(f"imaginary-time iteration diverged at step {it}; lower gs_dtau")
        energies.append(eps)
    raise TdhfError(
        f"ground state not converged in {max_iter} iterations; last single-particle energies "
        f"{[e.tolist() for e in energies[-3:]]}"
    )


# ------------------------------------------------------------- dynamics

def _step(model: TdhfModel, Y: np.ndarray, dt: float, abc, rho_n: np.ndarray, sc_tol: float, sc_max: int):
    """Predictor-corrector step: H(rho^n), then midpoint Hamiltonians until rho settles."""
    n = model.part.n_interior
    deg = model.params.degeneracy

    def advance(rho_h):
        H = model.hamiltonian(rho_h)
        gen = AugmentedGenerator(H, model.part.n_gamma, abc)
        return step_taylor4(gen, Y, dt)

    Yp = advance(rho_n)
    rho_p = density(Yp[:n], deg)
    converged = False
    for _ in range(sc_max):
        Yc = advance(0.5 * (rho_n + rho_p))
        rho_c = density(Yc[:n], deg)
        change = np.linalg.norm(rho_c - rho_p) / max(np.linalg.norm(rho_c), 1e-300)
        Yp, rho_p = Yc, rho_c
        if change < sc_tol:
            converged = True
            break
    return Yp, rho_p, converged


def tdhf_propagate(model: TdhfModel, orbitals: np.ndarray, T: float, dt: float, abc=None, stride: int = 10,
                   reference=None, on_sample=None) -> ObservableSeries:
    """Nonlinear propagation; ``reference`` is an optional (model, orbitals) pair in lockstep."""
    p = model.params
    n = model.part.n_interior
    m = model.part.n_gamma if abc is not None else 0
    aux = (abc.order * m) if abc is not None else 0
    Y = np.zeros((n + aux, orbitals.shape[1]), dtype=complex)
    Y[:n] = orbitals
    rho = density(orbitals, p.degeneracy)
    H0 = model.hamiltonian(rho)
    rho_est = spectral_radius_estimate(AugmentedGenerator(H0, m, abc))
    if rho_est * dt > TAYLOR4_LIMIT:
        raise PropagationError(f"Taylor-4 unstable: spectral radius {rho_est:.3g} x dt {dt:g} > {TAYLOR4_LIMIT:.3f}")
    if reference is not None:
        rmodel, rorb = reference
        rY = np.array(rorb, dtype=complex)
        rrho = density(rY, p.degeneracy)
        inner = _embedding(model, rmodel)
    series = ObservableSeries()
    n_steps = int(round(T / dt))
    misses = 0
    for i in range(n_steps + 1):
        if i % stride == 0 or i == n_steps:
            phi = Y[:n]
            N = model.nucleons(phi)
            E = model.total_energy(phi)
            extra = {"nucleons": N, "energy": E}
            if reference is not None:
                rN = model.h3 * rrho[inner].sum()
                extra["energy_ref"] = rmodel.total_energy(rY)
                extra["rho_err"] = float(np.sqrt(model.h3 * np.sum((rho - rrho[inner]) ** 2)))
            else:
                rN = float("nan")
            series.append(i * dt, N, rN, float("nan"), **extra)
            if on_sample is not None:
                on_sample(i, Y, rho)
        if i % GUARD_EVERY == 0:
            check_finite(Y, i)
        if i == n_steps:
            break
        Y, rho, ok = _step(model, Y, dt, abc, rho, p.sc_tol, p.sc_max_iter)
        misses += not ok
        if reference is not None:
            rY, rrho, _ = _step(rmodel, rY, dt, None, rrho, p.sc_tol, p.sc_max_iter)
    if misses:
        warnings.warn(f"self-consistency missed {p.sc_tol:g} in {misses} of {n_steps} steps", RuntimeWarning,
                      stacklevel=2)
    check_finite(Y, n_steps)
    series.final = Y
    return series


def _embedding(small: TdhfModel, big: TdhfModel) -> np.ndarray:
    """Positions in ``big``'s interior order of ``small``'s interior nodes (small interior order)."""
    off = np.rint((np.asarray(small.grid.lo) - np.asarray(big.grid.lo)) / big.grid.h).astype(int)
    mi = small.grid.unravel(small.part.order) + off
    return big.part.position[big.grid.ravel(mi)]


def embed_orbitals(small: TdhfModel, big: TdhfModel, orbitals: np.ndarray) -> np.ndarray:
    out = np.zeros((big.part.n_interior, orbitals.shape[1]), dtype=complex)
    out[_embedding(small, big)] = orbitals
    return out


# ------------------------------------------------------------- runner

def shift_orbitals(model: TdhfModel, orbitals: np.ndarray, shift) -> np.ndarray:
    """Translate orbitals by whole grid steps, zero-filling what enters through the walls."""
    n = model.grid.n
    steps = [int(k) for k in shift]
    u = model.part.to_grid(orbitals)
    out = np.zeros_like(u)
    src = tuple(slice(max(0, -k), m - max(0, k)) for k, m in zip(steps, n))
    dst = tuple(slice(max(0, k), m - max(0, -k)) for k, m in zip(steps, n))
    out[dst] = u[src]
    return model.part.to_interior(out)


def prepare_initial(model: TdhfModel, cfg: TdhfSpec):
    """One fragment's ground state at the box centre, copied to every centre and boosted.

    The copies are translated by whole grid steps, then orthonormalised
    symmetrically so each orbital stays attached to its fragment.
    """
    g = model.grid
    mid = 0.5 * (np.asarray(g.lo) + np.asarray(g.hi))
    X, eps = static_ground_state(model, oscillator_orbitals(model.points, mid))
    cols = []
    for j, c in enumerate(cfg.centers):
        q = (np.asarray(c, dtype=float) - mid) / g.h
        if np.max(np.abs(q - np.rint(q))) > 1e-9:
            raise TdhfError(f"fragment centre {c} is not a whole number of grid steps from the box centre")
        Xc = shift_orbitals(model, X, np.rint(q).astype(int))
        direction = -np.sign(c[0]) if c[0] != mid[0] else (1.0 if j == 0 else -1.0)
        cols.append(boost(Xc, [direction * cfg.boost, 0.0, 0.0], model.points))
    Y = orthonormalize(np.concatenate(cols, axis=1), model.h3, method="lowdin")
    return Y, np.tile(eps, len(cfg.centers))


def run_tdhf(cfg: ExperimentConfig, out_dir=None, cache_dir=None, force=False):
    from .experiment import Domain, RunResult, _box, build_abc

    spec = cfg.tdhf
    grid = build_grid(3, _box(cfg), cfg.grid.h)
    faces = [(True, True)] * 3 if cfg.bc.kind == "abc" else [(False, False)] * 3
    if cfg.bc.kind == "abc" and cfg.grid.open_faces is not None:
        faces = [tuple(f) for f in cfg.grid.open_faces]
    model = TdhfModel(grid, spec, cfg.stencil, faces)
    Y0, _ = prepare_initial(model, spec)
    abc = None
    if cfg.bc.kind == "abc":
        dom = Domain(grid, model.part, model.blocks)
        abc = build_abc(cfg, dom, cache_dir, force)
    reference = None
    if cfg.reference.kind == "large_domain":
        reference = _reference_model(model, cfg, Y0)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    snaps = sorted({int(round(ts / cfg.dt)) for ts in cfg.snapshots})
    files = []
    plane = int(np.argmin(np.abs(grid.axis(2))))

    def on_sample(i, Y, rho):
        if out is not None and i in snaps:
            path = out / f"density_t{i * cfg.dt:.6f}.csv"
            write_snapshot(path, grid, model.part, rho.astype(complex), plane=plane)
            files.append(path)

    series = tdhf_propagate(model, Y0, cfg.T, cfg.dt, abc, cfg.stride, reference, on_sample)
    if out is not None:
        path = out / "observables.csv"
        series.to_csv(path)
        files.insert(0, path)
    return RunResult(series, abc, files, series.final)


def _reference_model(model: TdhfModel, cfg: ExperimentConfig, Y0: np.ndarray):
    f = cfg.reference.factor
    g = model.grid
    pad = [int(round((f - 1) * (m - 1) / 2)) for m in g.n]
    box = [(g.lo[a] - pad[a] * g.h, g.hi[a] + pad[a] * g.h) for a in range(3)]
    big = TdhfModel(build_grid(3, box, g.h), model.params, cfg.stencil)
    return big, embed_orbitals(model, big, Y0)
