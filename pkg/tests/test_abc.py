import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dtnabc.abc import (
    AbcError,
    RationalAbc,
    build_abc0,
    build_abc1_limit,
    build_abc1_moment,
    build_abc1_twopoint,
    build_abc2,
    certify_stability,
    load_abc,
    save_abc,
)
from dtnabc.dtn import DtnSample, dtn_boundary_element, dtn_derivative
from dtnabc.lattice import assemble_blocks, build_grid, get_stencil, partition

TRIALS = 100


def csym(rng, n):
    X = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    return (X + X.T) / 2


def first_order_data(rng, n):
    A = csym(rng, n) + 3 * np.eye(n)
    B = csym(rng, n) - 4 * np.eye(n)
    return A, B


def second_order_data(rng, n, eps=0.3):
    # zeros near s = 5 and poles near s = -1, -2: no near cancellation, so the
    # data determine the coefficients to working precision
    I = np.eye(n)
    return I + eps * csym(rng, n), -5 * I + eps * csym(rng, n), -3 * I + eps * csym(rng, n), -2 * I + eps * csym(rng, n)


def spread_nodes(rng, k, lo=0.5, hi=5.0, gap=0.3):
    while True:
        x = np.sort(rng.uniform(lo, hi, k))
        if np.diff(x).min() >= gap:
            return x


def r1(A, B, s):
    return np.linalg.solve(s * np.eye(A.shape[0]) - B, A)


def r2(A1, A0, B1, B0, s):
    n = A1.shape[0]
    return np.linalg.solve(s * s * np.eye(n) - s * B1 - B0, s * A1 + A0)


def rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


@pytest.mark.parametrize("n", [1, 3])
def test_exact_recovery_first_order_twopoint(n):
    rng = np.random.default_rng(100 + n)
    worst = 0.0
    for _ in range(TRIALS):
        A, B = first_order_data(rng, n)
        s1, s2 = np.sort(rng.uniform(0.5, 30.0, 2))
        abc = build_abc1_twopoint(DtnSample(s1, r1(A, B, s1)), DtnSample(s2, r1(A, B, s2)))
        worst = max(worst, rel(abc.A, A), rel(abc.B, B))
    assert worst <= 1e-10


@pytest.mark.parametrize("n", [1, 3])
def test_exact_recovery_first_order_moment(n):
    rng = np.random.default_rng(200 + n)
    worst = 0.0
    for _ in range(TRIALS):
        A, B = first_order_data(rng, n)
        s = rng.uniform(0.5, 30.0)
        M = np.linalg.inv(s * np.eye(n) - B)
        smp = DtnSample(s, M @ A, -M @ M @ A)
        abc = build_abc1_moment(smp)
        worst = max(worst, rel(abc.A, A), rel(abc.B, B))
    assert worst <= 1e-10


@pytest.mark.parametrize("n", [1, 3])
def test_exact_recovery_second_order(n):
    rng = np.random.default_rng(300 + n)
    worst = 0.0
    for _ in range(TRIALS):
        mats = second_order_data(rng, n)
        nodes = spread_nodes(rng, 4)
        abc = build_abc2([DtnSample(s, r2(*mats, s)) for s in nodes])
        got = (abc.A1, abc.A0, abc.B1, abc.B0)
        worst = max(worst, max(rel(g, m) for g, m in zip(got, mats)))
    assert worst <= 1e-10


@settings(max_examples=50, deadline=None)
@given(a=st.floats(0.1, 10), b=st.floats(-10, -0.1), s1=st.floats(0.1, 10), gap=st.floats(0.1, 10))
def test_scalar_twopoint_recovers_pole(a, b, s1, gap):
    s2 = s1 + gap
    abc = build_abc1_twopoint(DtnSample(s1, np.array([[a / (s1 - b)]])), DtnSample(s2, np.array([[a / (s2 - b)]])))
    assert abs(abc.A[0, 0] - a) <= 1e-9 * abs(a)
    assert abs(abc.B[0, 0] - b) <= 1e-9 * max(1.0, abs(b))


def _blocks(h=0.1):
    st_ = get_stencil("fd5")
    g = build_grid(1, (-2.0, 1.0), h, st_)
    part = partition(g, st_, open_faces=[(False, True)])
    return assemble_blocks(g, part, st_)


def test_moment_is_confluent_limit_of_twopoint():
    blk = _blocks()
    m = build_abc1_moment(dtn_derivative(10.0, blk, "finite_difference"))
    gaps = []
    for d in (1.0, 0.1, 0.01):
        t = build_abc1_twopoint(dtn_boundary_element(10.0, blk), dtn_boundary_element(10.0 + d, blk))
        gaps.append(rel(t.B, m.B))
    assert gaps[0] > gaps[1] > gaps[2]
    assert gaps[2] < 1e-2


def test_interpolation_at_nodes_on_lattice_kernel():
    blk = _blocks(0.01)
    smp = [dtn_boundary_element(s, blk) for s in (10.0, 11.0, 20.0, 21.0)]
    abc = build_abc2(smp)
    assert max(abc.interpolation_residuals(smp)) <= 1e-8
    lim = build_abc1_limit(smp[2], blk)
    assert lim.interpolation_residuals([smp[2]])[0] <= 1e-8
    np.testing.assert_allclose(lim.A, -1j * blk.coupling_gram())


def test_zeroth_order_is_sample_and_certified():
    blk = _blocks()
    smp = dtn_boundary_element(20.0, blk)
    abc = build_abc0(smp)
    np.testing.assert_array_equal(abc.M, smp.K)
    rep = certify_stability(abc, blk)
    assert rep.verdict == "PASS"
    assert rep.im_definiteness <= 1e-8


@pytest.mark.parametrize("s1", [1.0, 10.0, 20.0])
def test_limit_variant_certified(s1):
    blk = _blocks()
    rep = certify_stability(build_abc1_limit(dtn_boundary_element(s1, blk), blk), blk)
    assert rep.verdict == "PASS"
    assert rep.lyapunov_matrix_check <= 1e-8
    assert rep.spectral_abscissa <= 1e-8


def test_second_order_reports_spectrum_only():
    blk = _blocks()
    abc = build_abc2([dtn_boundary_element(s, blk) for s in (10.0, 11.0, 20.0, 21.0)])
    rep = certify_stability(abc, blk)
    assert rep.lyapunov_matrix_check is None and rep.im_definiteness is None
    assert rep.spectral_abscissa is not None


def test_spectral_check_skipped_above_cap():
    blk = _blocks()
    rep = certify_stability(build_abc0(dtn_boundary_element(20.0, blk)), blk, interior_size_cap=3)
    assert rep.spectral_skipped and rep.spectral_abscissa is None
    assert rep.im_definiteness is not None


def test_empty_boundary_is_dirichlet():
    st_ = get_stencil("fd5")
    g = build_grid(1, (0.0, 1.0), 0.1, st_)
    blk = assemble_blocks(g, partition(g, st_, open_faces=[(False, False)]), st_)
    abc = build_abc0(dtn_boundary_element(20.0, blk))
    assert abc.M.shape == (0, 0)


def test_node_validation():
    K = np.eye(2, dtype=complex)
    with pytest.raises(AbcError, match="coincide"):
        build_abc1_twopoint(DtnSample(10.0, K), DtnSample(10.0 + 1e-7, 2 * K))
    with pytest.raises(AbcError, match="positive"):
        build_abc0(DtnSample(-1.0, K))


def test_singular_systems_raise():
    K = np.eye(2, dtype=complex)
    with pytest.raises(AbcError, match="singular"):
        build_abc1_twopoint(DtnSample(1.0, K), DtnSample(2.0, K))
    with pytest.raises(AbcError, match=r"nodes \[1.0, 2.0, 3.0, 4.0\]"):
        build_abc2([DtnSample(s, K) for s in (1.0, 2.0, 3.0, 4.0)])


def test_file_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    mats = dict(zip(("A1", "A0", "B1", "B0"), second_order_data(rng, 3)))
    abc = RationalAbc(2, "second_fourpoint", (1.0, 2.0, 3.0, 10.0), mats)
    save_abc(abc, tmp_path / "c.qabc")
    assert (tmp_path / "c.qabc").read_bytes()[:4] == b"QABC"
    back = load_abc(tmp_path / "c.qabc")
    assert back.order == 2 and back.variant == abc.variant and back.nodes == abc.nodes
    for k in mats:
        np.testing.assert_array_equal(getattr(back, k), mats[k])
