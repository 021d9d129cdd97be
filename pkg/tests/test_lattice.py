import math
from functools import lru_cache
from math import comb

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_band, random_lattice
from tlasr.lattice import (
    AlignmentBand,
    InfeasibleBandError,
    LogitLattice,
    band_from_alignment,
    brute_force_loss,
    enumerate_alignments,
    log_sum_exp,
    rnnt_forward,
    rnnt_grad,
    rnnt_loss_and_grad,
)


def recursive_loss(lattice, band=None):
    """Independent oracle: path probabilities summed by plain recursion."""
    T, U = lattice.T, lattice.U
    p = np.exp(lattice.values - lattice.values.max(axis=-1, keepdims=True))
    p /= p.sum(axis=-1, keepdims=True)
    mask = np.ones((T, U + 1), bool) if band is None else band.mask(T)
    labels, blank = lattice.labels, lattice.blank

    @lru_cache(maxsize=None)
    def total(t, u):
        if not mask[t, u]:
            return 0.0
        if t == T - 1 and u == U:
            return p[t, u, blank]
        s = 0.0
        if t + 1 < T:
            s += p[t, u, blank] * total(t + 1, u)
        if u < U:
            s += p[t, u, labels[u]] * total(t, u + 1)
        return s

    return -math.log(total(0, 0))


# log_sum_exp -----------------------------------------------------------------


def test_log_sum_exp_examples():
    assert log_sum_exp([0.0, 0.0]) == pytest.approx(math.log(2), abs=1e-15)
    assert log_sum_exp([3.25]) == 3.25
    assert log_sum_exp([1000.0, 1000.0]) == pytest.approx(1000 + math.log(2), abs=1e-12)
    assert log_sum_exp([-math.inf, -math.inf]) == -math.inf


def test_log_sum_exp_empty_is_rejected():
    with pytest.raises(ValueError):
        log_sum_exp([])


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.floats(-1e3, 1e3))
def test_log_sum_exp_shift(xs, c):
    assert log_sum_exp([x + c for x in xs]) == pytest.approx(log_sum_exp(xs) + c, abs=1e-12 * max(1.0, abs(c)))


# lattice and band types ------------------------------------------------------


def test_lattice_validation():
    with pytest.raises(ValueError):
        LogitLattice(np.zeros((2, 2)), [0])
    with pytest.raises(ValueError):
        LogitLattice(np.zeros((2, 3, 3)), [0])  # 3 label rows, 1 label
    with pytest.raises(ValueError):
        LogitLattice(np.zeros((2, 2, 3)), [2])  # label equals blank
    with pytest.raises(ValueError):
        LogitLattice(np.full((2, 2, 3), np.nan), [0])


def test_band_validation_messages():
    with pytest.raises(InfeasibleBandError, match="infeasible alignment band"):
        AlignmentBand([1, 3], [1, 3]).validate(3, 1)
    with pytest.raises(InfeasibleBandError, match="infeasible alignment band"):
        AlignmentBand([2, 2], [3, 3]).validate(3, 1)
    lat = LogitLattice(np.zeros((3, 2, 3)), [0])
    with pytest.raises(InfeasibleBandError, match="infeasible alignment band"):
        rnnt_forward(lat, AlignmentBand([1, 3], [1, 3]))


def test_band_from_alignment_examples():
    band = band_from_alignment([2], 0, 0, 3)
    assert band.left.tolist() == [1, 2]
    assert band.right.tolist() == [2, 3]
    T = 5
    assert band_from_alignment([1, 3, 4], T, T, T).is_full(T)


def test_band_from_alignment_rejects_non_monotone():
    with pytest.raises(ValueError):
        band_from_alignment([3, 2], 1, 1, 4)
    with pytest.raises(ValueError):
        band_from_alignment([5], 1, 1, 4)


@settings(max_examples=200)
@given(st.data())
def test_band_from_alignment_always_valid(data):
    T = data.draw(st.integers(1, 12))
    U = data.draw(st.integers(0, 8))
    emit = sorted(data.draw(st.lists(st.integers(1, T), min_size=U, max_size=U)))
    bl, br = data.draw(st.integers(0, 3)), data.draw(st.integers(0, 3))
    band = band_from_alignment(emit, bl, br, T)
    band.validate(T, U)
    assert np.all(np.diff(band.left) >= 0) and np.all(np.diff(band.right) >= 0)
    assert sum(1 for _ in enumerate_alignments(T, U, band)) >= 1 if T + U <= 14 else True


# forward ---------------------------------------------------------------------


def test_uniform_two_frame_one_label():
    lat = LogitLattice(np.zeros((2, 2, 3)), [0])
    loss, _ = rnnt_forward(lat)
    # every alignment ends with a blank at the last frame: paths are
    # (label, blank, blank) and (blank, label, blank), each with three factors of 1/3
    assert loss == pytest.approx(-math.log(2 / 27), abs=1e-12)
    assert loss == pytest.approx(brute_force_loss(lat), abs=1e-12)


def test_single_cell():
    values = np.array([[[0.3, -1.2, 0.5]]])
    lat = LogitLattice(values, [])
    loss, _ = rnnt_forward(lat)
    expected = -(values[0, 0, 2] - math.log(np.exp(values[0, 0]).sum()))
    assert loss == pytest.approx(expected, abs=1e-14)


def test_path_count():
    for T in range(1, 6):
        for U in range(0, 5):
            n = sum(1 for _ in enumerate_alignments(T, U))
            assert n == comb(T + U - 1, U)
    assert sum(1 for _ in enumerate_alignments(2, 1)) == 2


def test_forward_matches_enumeration(rng):
    for _ in range(300):
        T, U, V = int(rng.integers(1, 5)), int(rng.integers(0, 4)), int(rng.integers(1, 4))
        lat = random_lattice(rng, T, U, V)
        band = random_band(rng, T, U) if rng.random() < 0.7 else None
        loss, _ = rnnt_forward(lat, band)
        assert loss == pytest.approx(brute_force_loss(lat, band), abs=1e-9)
        assert loss == pytest.approx(recursive_loss(lat, band), abs=1e-9)
        assert loss >= -1e-12


def test_restricted_loss_never_below_full(rng):
    for _ in range(300):
        T, U, V = int(rng.integers(1, 7)), int(rng.integers(0, 5)), int(rng.integers(1, 4))
        lat = random_lattice(rng, T, U, V)
        full, _ = rnnt_forward(lat)
        restricted, _ = rnnt_forward(lat, random_band(rng, T, U))
        assert restricted >= full - 1e-12


def test_full_band_is_value_identical(rng):
    lat = random_lattice(rng, 5, 3, 3)
    a, alpha_a = rnnt_forward(lat)
    b, alpha_b = rnnt_forward(lat, AlignmentBand.full(5, 3))
    assert a == b
    assert np.array_equal(alpha_a, alpha_b)


def test_alphas_are_minus_inf_outside_band(rng):
    lat = random_lattice(rng, 6, 3, 2)
    band = band_from_alignment([2, 3, 5], 0, 0, 6)
    _, alphas = rnnt_forward(lat, band)
    assert np.all(np.isneginf(alphas[~band.mask(6)]))
    assert np.all(np.isfinite(alphas[band.mask(6)]))


def test_brute_force_size_guard():
    lat = LogitLattice(np.zeros((10, 6, 2)), [0] * 5)
    with pytest.raises(ValueError):
        brute_force_loss(lat)


# gradient --------------------------------------------------------------------


def numeric_grad(lat, band, eps=1e-5):
    g = np.zeros_like(lat.values)
    for idx in np.ndindex(*lat.values.shape):
        plus, minus = lat.values.copy(), lat.values.copy()
        plus[idx] += eps
        minus[idx] -= eps
        g[idx] = (
            rnnt_forward(LogitLattice(plus, lat.labels), band)[0]
            - rnnt_forward(LogitLattice(minus, lat.labels), band)[0]
        ) / (2 * eps)
    return g


def assert_grad_close(analytic, numeric):
    big = np.abs(analytic) > 1e-8
    rel = np.abs(analytic - numeric)[big] / np.maximum(np.abs(analytic[big]), np.abs(numeric[big]))
    assert rel.max(initial=0.0) < 1e-4
    assert np.all(np.abs(numeric[~big]) < 1e-6)


def test_gradient_matches_finite_differences(rng):
    for _ in range(25):
        T, U, V = int(rng.integers(1, 5)), int(rng.integers(0, 4)), int(rng.integers(1, 4))
        lat = random_lattice(rng, T, U, V, scale=1.0)
        band = random_band(rng, T, U) if rng.random() < 0.6 else None
        _, grad = rnnt_loss_and_grad(lat, band)
        assert_grad_close(grad, numeric_grad(lat, band))


def test_gradient_single_cell_hand_value():
    lat = LogitLattice(np.zeros((1, 1, 2)), [])
    _, grad = rnnt_loss_and_grad(lat)
    assert grad[0, 0, 1] == pytest.approx(-0.5, abs=1e-15)
    assert grad[0, 0, 0] == pytest.approx(0.5, abs=1e-15)


def test_gradient_zero_outside_band_and_rows_sum_to_zero(rng):
    lat = random_lattice(rng, 7, 3, 3)
    band = band_from_alignment([2, 4, 5], 1, 0, 7)
    _, grad = rnnt_loss_and_grad(lat, band)
    outside = ~band.mask(7)
    assert np.all(grad[outside] == 0.0)
    assert np.allclose(grad.sum(axis=-1), 0.0, atol=1e-12)


def test_gradient_rejects_wrong_alphas(rng):
    lat = random_lattice(rng, 3, 2, 2)
    with pytest.raises(ValueError):
        rnnt_grad(lat, None, np.zeros((2, 2)))
