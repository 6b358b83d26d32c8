import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dtnabc.greens import (
    GreensError,
    continuum_resolvent,
    greens1d,
    greens1d_factors,
    greens3d,
    greens_continuum,
    load_table,
    printed_quartic_forms,
    save_table,
)
from dtnabc.lattice import get_stencil


def _apply_1d(stencil, G, s, h):
    p = stencil.half_width
    out = np.zeros(G.size - 2 * p, dtype=complex)
    for k in range(-p, p + 1):
        out += stencil.c(k) * G[p + k: G.size - p + k]
    return stencil.kinetic_prefactor / h**2 * out - 1j * s * G[p:-p]


@pytest.mark.parametrize("name", ["fd3", "fd5", "fd7"])
@pytest.mark.parametrize("s", [0.1, 1.0, 20.0, 100.0])
def test_1d_resolvent_equation(name, s):
    stn = get_stencil(name)
    h = 0.05
    j = np.arange(-60, 61)
    G = greens1d(s, h, j, stn)
    r = _apply_1d(stn, G, s, h)
    delta = np.zeros_like(r)
    delta[r.size // 2] = 1.0
    assert np.abs(r - delta).max() < 1e-10 * np.abs(G).max() * 1e3


@pytest.mark.parametrize("s", np.logspace(-1, 2, 13))
@pytest.mark.parametrize("h", [0.1, 0.01])
def test_quartic_residuals(s, h):
    assert greens1d_factors(s, h).residuals().max() <= 1e-10


@pytest.mark.parametrize("s,h", [(1, 0.1), (10, 0.01), (20, 0.1), (20, 0.01)])
def test_matches_closed_form_roots(s, h):
    f = greens1d_factors(s, h)
    ref = printed_quartic_forms(s, h)
    assert abs(f.u1 - ref["u1"]) < 1e-12
    assert abs(f.u3 - ref["u3"]) < 1e-12
    assert abs(f.a - ref["a"]) < 1e-12
    # same amplitudes up to the -2 normalisation of (H - is) vs (D2 + 2si);
    # the closed-form b2 carries the opposite sign
    assert abs(f.b1 / ref["b1"] + 2) < 1e-9
    assert abs(f.b2 / ref["b2"] - 2) < 1e-9


def test_decaying_roots_inside_unit_disk():
    f = greens1d_factors(10.0, 0.01)
    assert np.all(np.abs(f.u) < 1) and np.all(np.abs(f.growing) > 1)


def test_invalid_s():
    with pytest.raises(GreensError):
        greens1d_factors(0.0, 0.1)
    with pytest.raises(GreensError):
        greens1d_factors(-1.0, 0.1)


def test_continuum_3d_identity():
    s = 10.0
    r = np.linspace(0.1, 3.0, 17)
    k = np.sqrt(-2j * s)
    k = k if k.real > 0 else -k
    val = greens_continuum(s, r, 3) * 4 * np.pi * r * np.exp(k * r)
    np.testing.assert_allclose(val, -1.0, atol=1e-12)


def test_continuum_singular_at_origin():
    with pytest.raises(GreensError):
        greens_continuum(1.0, [0.0, 1.0], 3)


@pytest.mark.parametrize("s,h", [(10.0, 0.01), (1.0, 0.1), (0.1, 0.1), (100.0, 0.01)])
def test_1d_lattice_approaches_continuum(s, h):
    j = np.arange(5, 200, 5)
    lat = greens1d(s, h, j, get_stencil("fd5"))
    cont = continuum_resolvent(s, j * h, 1, h)
    assert np.all(np.diff(np.abs(lat - cont)) < 0)


def test_3d_resolvent_equation():
    stn = get_stencil("fd7")
    s, h = 10.0, 0.2
    offs = np.array([[a, b, c] for a in range(-4, 5) for b in range(-1, 2) for c in range(-1, 2)])
    t = greens3d(s, h, offs, 128, stn)
    # (H - is) G at offset 0 and at (1, 0, 0)
    for centre, expect in (((0, 0, 0), 1.0), ((1, 0, 0), 0.0)):
        acc = -1j * s * t.lookup([centre])[0]
        for ax in range(3):
            for k in range(-3, 4):
                o = np.array(centre)
                o[ax] += k
                acc += stn.kinetic_prefactor / h**2 * stn.c(k) * t.lookup([o])[0]
        assert abs(acc - expect) < 1e-9


@pytest.mark.parametrize("h,quad", [(0.2, 256), (0.01, 512)])
def test_3d_gap_to_continuum_decreases_beyond_five_offsets(h, quad):
    stn = get_stencil("fd7")
    n = np.arange(6, 15)
    offs = np.stack([n, 0 * n, 0 * n], axis=1)
    lat = greens3d(10.0, h, offs, quad, stn).lookup(offs)
    cont = continuum_resolvent(10.0, n * h, 3, h)
    assert np.all(np.diff(np.abs(lat - cont)) < 0)


def test_3d_table_symmetry_and_cache(tmp_path):
    stn = get_stencil("fd7")
    t = greens3d(5.0, 0.2, [[1, 2, 3]], 64, stn)
    v = t.lookup([[1, 2, 3], [-3, 1, -2], [2, -3, 1]])
    assert np.ptp(v.real) == 0 and np.ptp(v.imag) == 0
    save_table(t, tmp_path / "g.qgf")
    t2 = load_table(tmp_path / "g.qgf")
    np.testing.assert_array_equal(t2.lookup([[3, 2, 1]]), v[:1])


def test_quadrature_convergence():
    stn = get_stencil("fd7")
    offs = [[0, 0, 0], [1, 0, 0], [2, 1, 0], [3, 3, 3]]
    vals = [greens3d(4.0, 0.2, offs, q, stn).lookup(offs) for q in (32, 64, 128)]
    d1 = np.abs(vals[1] - vals[0]).max()
    d2 = np.abs(vals[2] - vals[1]).max()
    assert d2 <= d1 / 4


def test_3d_rejects_aliased_offsets():
    with pytest.raises(GreensError, match="alias"):
        greens3d(1.0, 0.2, [[40, 0, 0]], 64)


@settings(max_examples=30, deadline=None)
@given(s=st.floats(0.05, 200.0), h=st.floats(0.005, 0.2))
def test_1d_green_is_symmetric_and_dissipative(s, h):
    f = greens1d_factors(s, h)
    j = np.arange(0, 8)
    G = f(j)
    np.testing.assert_allclose(f(-j), G)
    # Im <delta, (H - is)^{-1} delta> = s |G|^2-weighted sum > 0 for Hermitian H
    assert G[0].imag > 0
