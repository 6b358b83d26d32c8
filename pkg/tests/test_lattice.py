import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dtnabc.lattice import (
    LatticeError,
    assemble_blocks,
    build_grid,
    get_stencil,
    partition,
)


@pytest.mark.parametrize("name,order", [("fd3", 2), ("fd5", 4), ("fd7", 6), ("fd9", 8)])
def test_stencil_convergence_slope(name, order):
    stn = get_stencil(name)
    errs = []
    hs = [0.2, 0.1] if order < 8 else [0.4, 0.2]
    for h in hs:
        k = np.arange(-stn.half_width, stn.half_width + 1)
        approx = np.dot(stn.coeffs, np.sin(0.3 + k * h)) / h**2
        errs.append(abs(approx + np.sin(0.3)))
    slope = np.log2(errs[0] / errs[1])
    assert abs(slope - order) < 0.3


@pytest.mark.parametrize("name", ["fd3", "fd5", "fd7", "fd9"])
def test_stencil_symbol_nonpositive(name):
    theta = np.linspace(-np.pi, np.pi, 401)
    sym = get_stencil(name).symbol(theta)
    assert sym.max() <= 1e-14
    assert abs(sym[200]) < 1e-14


def test_fd7_weights():
    c = get_stencil("fd7").coeffs
    np.testing.assert_allclose(c, [1 / 90, -3 / 20, 3 / 2, -49 / 18, 3 / 2, -3 / 20, 1 / 90], atol=1e-15)


def test_unknown_stencil():
    with pytest.raises(LatticeError):
        get_stencil("fd11")


def test_grid_rejects_incommensurate_box():
    with pytest.raises(LatticeError, match="multiple"):
        build_grid(1, (0.0, 1.0), 0.3)
    with pytest.raises(LatticeError):
        build_grid(2, (0.0, 1.0), 0.1)


def test_grid_points_1d():
    g = build_grid(1, (-12.0, 3.0), 0.01)
    assert g.n == (1501,)
    assert g.axis(0)[0] == -12.0 and abs(g.axis(0)[-1] - 3.0) < 1e-12


@pytest.mark.parametrize("m,p,expected", [(15, 3, 15**3 - 9**3), (31, 3, 14166), (8, 1, 8**3 - 6**3)])
def test_gamma_count_3d(m, p, expected):
    stn = get_stencil({1: "fd3", 3: "fd7"}[p])
    g = build_grid(3, (0.0, float(m - 1)), 1.0, stn)
    part = partition(g, stn)
    assert part.n_gamma == expected


def test_gamma_count_1d_one_open_face():
    stn = get_stencil("fd5")
    g = build_grid(1, (-12.0, 3.0), 0.01, stn)
    part = partition(g, stn, open_faces=[(False, True)])
    assert part.n_gamma == 2
    assert part.n_sigma == 2
    # Gamma is stored first
    assert np.all(part.gamma_multi[:, 0] >= g.n[0] - 2)


def test_closed_box_has_no_boundary_layer():
    stn = get_stencil("fd5")
    g = build_grid(1, (0.0, 1.0), 0.1, stn)
    part = partition(g, stn, open_faces=[(False, False)])
    assert part.n_gamma == 0


def test_restriction_is_a_selector():
    stn = get_stencil("fd7")
    g = build_grid(3, (0.0, 7.0), 1.0, stn)
    part = partition(g, stn)
    E = part.E.toarray()
    np.testing.assert_array_equal(E @ E.T, np.eye(part.n_gamma))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_interior_ordering_round_trip(seed):
    stn = get_stencil("fd5")
    g = build_grid(3, (0.0, 5.0), 1.0, stn)
    part = partition(g, stn, open_faces=[(True, False), (False, True), (True, True)])
    u = np.random.default_rng(seed).standard_normal(g.n)
    np.testing.assert_array_equal(part.to_grid(part.to_interior(u)), u)


def test_blocks_reproduce_global_operator_1d():
    # the interior rows of a larger closed box equal H_II plus the Gamma-Sigma coupling
    stn = get_stencil("fd5")
    small = build_grid(1, (0.0, 2.0), 0.1, stn)
    part = partition(small, stn)
    blk = assemble_blocks(small, part, stn)
    big = build_grid(1, (-0.2, 2.2), 0.1, stn)
    bpart = partition(big, stn, open_faces=[(False, False)])
    Hbig = assemble_blocks(big, bpart, stn).H_II.toarray()
    Hbig = Hbig[np.ix_(bpart.position, bpart.position)]  # back to grid order
    inner = np.arange(2, 2 + small.n[0])
    H_small = blk.H_II.toarray()[np.ix_(part.position, part.position)]
    np.testing.assert_allclose(Hbig[np.ix_(inner, inner)], H_small, atol=1e-12)
    sig_pos = part.sigma_multi[:, 0] + 2
    coup = Hbig[np.ix_(inner, sig_pos)]
    dense = np.zeros((small.n[0], part.n_sigma))
    gm = part.gamma_multi[:, 0]
    dense[gm] = blk.H_GS.toarray()
    np.testing.assert_allclose(coup, dense, atol=1e-12)


def test_hamiltonian_symmetric():
    stn = get_stencil("fd7")
    g = build_grid(3, (0.0, 6.0), 1.0, stn)
    part = partition(g, stn)
    blk = assemble_blocks(g, part, stn, V=np.linspace(0, 1, g.size).reshape(g.n))
    H = blk.H_II
    assert abs(H - H.T).max() < 1e-13
    gram = blk.coupling_gram()
    assert np.linalg.eigvalsh(gram).min() > 0


def test_exterior_potential_rejected():
    stn = get_stencil("fd5")
    g = build_grid(1, (0.0, 1.0), 0.1, stn)
    with pytest.raises(LatticeError, match="potential-free"):
        assemble_blocks(g, partition(g, stn), stn, exterior_potential=1.0)
