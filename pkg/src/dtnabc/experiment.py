"""Config -> grid -> DtN samples -> ABC -> time series."""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import abc as abcmod
from .config import ExperimentConfig
from .dtn import DtnError, DtnSample, dtn_boundary_element, dtn_dense_oracle, dtn_derivative, load_sample, save_sample
from .lattice import HamiltonianBlocks, assemble_blocks, build_grid, get_stencil, partition
from .propagate import (
    GUARD_EVERY,
    TAYLOR4_LIMIT,
    AugmentedGenerator,
    ObservableSeries,
    PropagationError,
    assemble_augmented_generator,
    cap_baseline,
    check_finite,
    exact_solution_1d,
    exact_solution_3d,
    lyapunov,
    lyapunov_weight,
    spectral_radius_estimate,
    step_crank_nicolson,
    step_taylor4,
    write_snapshot,
)

log = logging.getLogger(__name__)

__all__ = [
    "Domain",
    "RunResult",
    "build_domain",
    "kernel_samples",
    "build_abc",
    "run_experiment",
    "reflection_at_first_arrival",
    "CacheMismatch",
]


class CacheMismatch(RuntimeError):
    pass


@dataclass
class Domain:
    grid: object
    part: object
    blocks: HamiltonianBlocks


@dataclass
class RunResult:
    series: ObservableSeries
    abc: object = None
    files: list = field(default_factory=list)
    final: np.ndarray | None = None


def _box(cfg: ExperimentConfig):
    box = cfg.grid.box
    return [tuple(b) for b in box] if len(box) > 1 else tuple(box[0])


def build_domain(cfg: ExperimentConfig, stencil=None) -> Domain:
    st = stencil if stencil is not None else get_stencil(cfg.stencil)
    grid = build_grid(cfg.dim, _box(cfg), cfg.grid.h, st)
    faces = None if cfg.grid.open_faces is None else [tuple(f) for f in cfg.grid.open_faces]
    if cfg.bc.kind == "dirichlet" or cfg.bc.kind == "cap":
        faces = [(False, False)] * cfg.dim
    part = partition(grid, st, open_faces=faces)
    return Domain(grid, part, assemble_blocks(grid, part, st))


def _cache_key(cfg: ExperimentConfig, dom: Domain) -> str:
    d = cfg.dtn
    text = "|".join([dom.part.fingerprint(dom.blocks.stencil), d.route, str(d.quad_n), str(d.oracle_layers), d.derivative])
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _compute_sample(cfg: ExperimentConfig, dom: Domain, s: float, derivative: bool) -> DtnSample:
    d = cfg.dtn
    if dom.part.n_gamma > d.max_gamma:
        raise DtnError(f"n_Gamma = {dom.part.n_gamma} exceeds the dense-kernel cap {d.max_gamma}")
    if d.route == "dense_oracle" or (derivative and d.derivative == "oracle"):
        smp = dtn_dense_oracle(s, dom.blocks, d.oracle_layers, derivative=derivative)
    else:
        smp = dtn_boundary_element(s, dom.blocks, d.quad_n)
        if derivative:
            smp = dtn_derivative(s, dom.blocks, "finite_difference", quad_n=d.quad_n, sample=smp)
    return smp


def kernel_samples(cfg: ExperimentConfig, dom: Domain, nodes, derivative=False, cache_dir=None, force=False):
    """DtN samples at ``nodes``, reusing hash-checked cache files when present."""
    key = _cache_key(cfg, dom)
    cache = Path(cache_dir) if cache_dir is not None else (Path(cfg.dtn.cache_dir) if cfg.dtn.cache_dir else None)
    out = []
    for s in nodes:
        path = None
        if cache is not None:
            cache.mkdir(parents=True, exist_ok=True)
            path = cache / f"{cfg.name}_s{float(s)!r}.qdtn"
            if path.exists():
                smp = load_sample(path)
                if smp.fingerprint != key and not force:
                    raise CacheMismatch(f"{path}: cached kernel hash {smp.fingerprint} != {key}; use --force")
                if smp.fingerprint == key and (smp.Kprime is not None or not derivative):
                    out.append(smp)
                    continue
        smp = _compute_sample(cfg, dom, float(s), derivative)
        smp = DtnSample(smp.s, smp.K, smp.Kprime, smp.provenance, key)
        if path is not None:
            save_sample(smp, path)
        out.append(smp)
    return out


def build_abc(cfg: ExperimentConfig, dom: Domain, cache_dir=None, force=False):
    bc = cfg.bc
    if bc.kind != "abc":
        return None
    v = bc.variant
    smp = kernel_samples(cfg, dom, bc.nodes, derivative=(v == "first_moment"), cache_dir=cache_dir, force=force)
    if v == "zeroth":
        return abcmod.build_abc0(smp[0])
    if v == "first_limit":
        return abcmod.build_abc1_limit(smp[0], dom.blocks)
    if v == "first_twopoint":
        return abcmod.build_abc1_twopoint(*smp)
    if v == "first_moment":
        return abcmod.build_abc1_moment(smp[0])
    return abcmod.build_abc2(smp)


def _stepper(integrator: str, gen: AugmentedGenerator, dt: float):
    if integrator == "cn":
        return lambda y: step_crank_nicolson(gen, y, dt)
    rho = spectral_radius_estimate(gen)
    if rho * dt > TAYLOR4_LIMIT:
        raise PropagationError(
            f"Taylor-4 unstable: spectral radius estimate {rho:.3g} times dt={dt:g} exceeds {TAYLOR4_LIMIT:.3f}"
        )
    return lambda y: step_taylor4(gen, y, dt)


class _LargeDomain:
    """Dirichlet run on a box enlarged about the interior, advanced in lockstep."""

    def __init__(self, cfg: ExperimentConfig, dom: Domain, factor: int):
        grid = dom.grid
        st = dom.blocks.stencil
        pad = []
        for a in range(grid.dim):
            faces = cfg.grid.open_faces[a] if cfg.grid.open_faces is not None else (True, True)
            ext = int(round((factor - 1) * (grid.n[a] - 1) / (2 if all(faces) else 1)))
            pad.append((ext if faces[0] else 0, ext if faces[1] else 0))
        box = [(grid.lo[a] - pad[a][0] * grid.h, grid.hi[a] + pad[a][1] * grid.h) for a in range(grid.dim)]
        big = build_grid(grid.dim, box if grid.dim > 1 else box[0], grid.h, st)
        part = partition(big, st, open_faces=[(False, False)] * grid.dim)
        blocks = assemble_blocks(big, part, st)
        self.grid, self.part = big, part
        self.gen = AugmentedGenerator(blocks.H_II, 0, None)
        # interior node (grid order) -> big-grid interior position
        mi = grid.multi_indices() + np.array([p[0] for p in pad])
        self.inner = part.position[big.ravel(mi)]
        self.inner_from_small = dom.part.order

    def restrict(self, y_big: np.ndarray) -> np.ndarray:
        """Big-grid state restricted to the small interior, in small interior order."""
        u = np.empty(self.inner.size, dtype=complex)
        u[:] = y_big[self.inner]
        out = np.empty_like(u)
        out[:] = u[self.inner_from_small]
        return out


def run_experiment(cfg: ExperimentConfig, out_dir=None, cache_dir=None, force=False) -> RunResult:
    if cfg.model == "tdhf":
        from .tdhf import run_tdhf

        return run_tdhf(cfg, out_dir=out_dir, cache_dir=cache_dir, force=force)
    return _run_free(cfg, out_dir, cache_dir, force)


def _run_free(cfg: ExperimentConfig, out_dir, cache_dir, force) -> RunResult:
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    dom = build_domain(cfg)
    grid, part = dom.grid, dom.part
    h, dim = grid.h, grid.dim
    k0 = cfg.initial.k0

    def packet(pts, t):
        if dim == 1:
            return exact_solution_1d(pts[:, 0], t, k0, cfg.initial.xc)
        return exact_solution_3d(pts, t, k0)

    abc = None
    mask = None
    if cfg.bc.kind == "cap":
        gen, grid_c, part_c, mask = cap_baseline(cfg.bc.eta, h, dom.blocks.stencil, _box(cfg), tuple(cfg.bc.cap_outer),
                                               cfg.bc.cap_profile)
        pts_run = grid_c.coords(grid_c.unravel(part_c.order))
        snap_grid, snap_part = grid_c, part_c
    else:
        abc = build_abc(cfg, dom, cache_dir, force)
        gen = assemble_augmented_generator(dom.blocks, abc)
        pts_run = grid.coords(grid.unravel(part.order))
        snap_grid, snap_part = grid, part
    Q = lyapunov_weight(abc, dom.blocks)
    pts_I = grid.coords(grid.unravel(part.order))

    y = np.zeros(gen.size, dtype=complex)
    y[: gen.n_interior] = packet(pts_run, 0.0)
    step = _stepper(cfg.integrator, gen, cfg.dt)

    ref = None
    y_ref = None
    if cfg.reference.kind == "large_domain":
        ref = _LargeDomain(cfg, dom, cfg.reference.factor)
        y_ref = packet(ref.grid.coords(ref.grid.unravel(ref.part.order)), 0.0).astype(complex)
        step_ref = _stepper(cfg.integrator, ref.gen, cfg.dt)

    def phi_I(yv):
        v = yv[: gen.n_interior]
        return v[mask] if mask is not None else v

    def observe(i, t, yv):
        phi = phi_I(yv)
        N = h**dim * float(np.vdot(phi, phi).real)
        extra = {}
        if cfg.reference.kind == "analytic":
            ex = packet(pts_I, t)
            N_ref = h**dim * float(np.vdot(ex, ex).real)
        elif ref is not None:
            r = ref.restrict(y_ref)
            N_ref = h**dim * float(np.vdot(r, r).real)
            extra["N_ref_total"] = h**dim * float(np.vdot(y_ref, y_ref).real)
            extra["dev"] = float(np.sqrt(h**dim * np.sum(np.abs(phi - r) ** 2)))
        else:
            N_ref = float("nan")
        if mask is not None or gen.order == 2:
            W = float("nan") if gen.order == 2 else N
        else:
            W = lyapunov(yv, gen, h, dim, Q)
        series.append(t, N, N_ref, W, **extra)

    series = ObservableSeries()
    n_steps = int(round(cfg.T / cfg.dt))
    snaps = sorted({int(round(ts / cfg.dt)) for ts in cfg.snapshots})
    files = []
    for i in range(n_steps + 1):
        t = i * cfg.dt
        if i % cfg.stride == 0 or i == n_steps:
            observe(i, t, y)
        if i in snaps and out is not None:
            path = out / f"snapshot_t{t:.6f}.csv"
            write_snapshot(path, snap_grid, snap_part, y[: gen.n_interior], plane=None)
            files.append(path)
        if i % GUARD_EVERY == 0:
            check_finite(y, i)
        if i == n_steps:
            break
        y = step(y)
        if ref is not None:
            y_ref = step_ref(y_ref)
    check_finite(y, n_steps)
    if out is not None:
        path = out / "observables.csv"
        series.to_csv(path)
        files.insert(0, path)
    return RunResult(series, abc, files, y)


def reflection_at_first_arrival(series: ObservableSeries, fraction: float = 0.5) -> tuple[float, float]:
    """Reflected amplitude relative to the outgoing amplitude, from a large-domain run.

    At the time t* when the reference has lost ``fraction`` of its initial mass
    from the small box, the L2 deviation of the truncated run from the reference
    is divided by the norm of the mass that has left, sqrt(N_ref(0) - N_ref(t*)).
    Returns (t*, ratio); values are linearly interpolated between samples.
    """
    a = series.arrays()
    if "dev" not in a:
        raise PropagationError("reflection needs a large-domain reference (no 'dev' column)")
    t, Nr, dev = a["t"], a["N_ref"], a["dev"]
    target = (1.0 - fraction) * Nr[0]
    below = np.nonzero(Nr <= target)[0]
    if below.size == 0 or below[0] == 0:
        raise PropagationError(f"reference never lost {fraction:.0%} of its mass within T={t[-1]:g}")
    k = below[0]
    w = (Nr[k - 1] - target) / (Nr[k - 1] - Nr[k])
    t_star = t[k - 1] + w * (t[k] - t[k - 1])
    d = dev[k - 1] + w * (dev[k] - dev[k - 1])
    return float(t_star), float(d / np.sqrt(Nr[0] - target))
