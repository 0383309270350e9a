import numpy as np
import pytest
from scipy.optimize import bisect

from ringbp.channel import ChannelInstance, rng_stream, transmit
from ringbp.convergence import (
    Direction,
    NoConvergence,
    binary_fixed_point,
    binary_turn_map,
    perron_limit,
    translation_set,
    turn_operator,
)
from ringbp.detector import RingSchedule, binary_trace, ring_bp_discrete

from conftest import Y_FIXTURE, random_channel


def test_turn_operator_identity():
    mats = {(j, i): np.eye(3) for j in range(4) for i in ((j - 1) % 4, (j + 1) % 4)}
    for d in Direction:
        assert np.array_equal(turn_operator(mats, 2, d).matrix, np.eye(3))


def test_turn_operator_two_nodes():
    A10 = np.array([[1.0, 2.0], [3.0, 4.0]])
    A01 = np.array([[0.5, 1.0], [2.0, 0.1]])
    mats = {(0, 1): A01, (1, 0): A10}
    # the message into node 1 sees node 0's hop first
    assert np.allclose(turn_operator(mats, 1, "forward").matrix, A10 @ A01)
    assert np.allclose(turn_operator(mats, 0, "forward").matrix, A01 @ A10)


def test_turn_operator_ordering():
    rng = np.random.default_rng(0)
    mats = {(j, i): rng.random((2, 2)) + 0.1 for j in range(4) for i in ((j - 1) % 4, (j + 1) % 4)}
    F2 = mats[(2, 1)] @ mats[(1, 0)] @ mats[(0, 3)] @ mats[(3, 2)]
    B2 = mats[(2, 3)] @ mats[(3, 0)] @ mats[(0, 1)] @ mats[(1, 2)]
    assert np.allclose(turn_operator(mats, 2, "forward").matrix, F2)
    assert np.allclose(turn_operator(mats, 2, "backward").matrix, B2)


def test_turn_operator_hex_positive(hex_channel):
    mats = translation_set(hex_channel, Y_FIXTURE)
    for j in range(4):
        for d in Direction:
            assert np.all(turn_operator(mats, j, d).matrix > 0)


def test_perron_identity_degenerate():
    rep = perron_limit(np.eye(3))
    assert np.allclose(rep.limit, 1 / 3)
    assert rep.degenerate


def test_perron_symmetric_2x2():
    rep = perron_limit(np.array([[2.0, 1.0], [1.0, 2.0]]))
    assert np.allclose(rep.limit, [0.5, 0.5], atol=1e-12)
    assert rep.eigenvalue == pytest.approx(3.0, rel=1e-12)
    rep = perron_limit(np.array([[2.0, 1.0], [1.0, 2.0]]), start=np.array([0.9, 0.1]))
    assert rep.spectral_gap == pytest.approx(1 / 3, rel=1e-3)
    assert not rep.degenerate


def test_perron_start_independence():
    rng = np.random.default_rng(1)
    F = rng.random((4, 4)) + 0.05
    tol = 1e-10
    limits = [perron_limit(F, tol, start=rng.random(4) + 1e-3).limit for _ in range(3)]
    for v in limits[1:]:
        assert np.abs(v - limits[0]).sum() < 2 * tol


def test_perron_cap():
    F = np.array([[1.0, 1e-9], [1e-9, 1.0]])
    with pytest.raises(NoConvergence):
        perron_limit(F, 1e-12, max_iter=50, start=np.array([0.9, 0.1]))


def test_perron_matches_discrete_long_run(hex_channel):
    mats = translation_set(hex_channel, Y_FIXTURE)
    res = ring_bp_discrete(hex_channel, Y_FIXTURE, RingSchedule("parallel", 120))
    for j in range(4):
        fwd = perron_limit(turn_operator(mats, j, "forward")).limit
        bwd = perron_limit(turn_operator(mats, j, "backward")).limit
        assert np.abs(res.forward[j] - fwd).sum() < 1e-8
        assert np.abs(res.backward[j] - bwd).sum() < 1e-8


def test_fixed_point_odd_contraction():
    rep = binary_fixed_point(lambda x: 0.5 * np.tanh(x), start=3.0)
    assert abs(rep.limit) < 1e-9
    assert rep.monotone


def test_fixed_point_bisection_oracle():
    g = lambda x: 0.9 * np.tanh(x - 1) + 2
    tol = 1e-12
    root = bisect(lambda x: g(x) - x, -10, 10, xtol=1e-14)
    rep = binary_fixed_point(g, tol)
    # the last gap bounds the distance to the root by tol * L / (1 - L)
    assert abs(rep.limit - root) < 10 * tol
    assert rep.monotone


def test_fixed_point_cap():
    with pytest.raises(NoConvergence):
        binary_fixed_point(lambda x: x + 1.0, max_iter=100)


def test_fixed_point_unique_and_monotone(hex_channel):
    tol = 1e-10
    for d in Direction:
        for j in range(4):
            g = binary_turn_map(hex_channel, Y_FIXTURE, j, d)
            reps = [binary_fixed_point(g, tol, start=s) for s in (-20.0, 0.0, 20.0)]
            assert all(r.monotone for r in reps)
            assert max(r.limit for r in reps) - min(r.limit for r in reps) < 2 * tol


def test_turn_map_slope_below_one():
    for seed in range(10):
        ch = random_channel(seed, snr_db=0.0)
        y = transmit(ch, rng_stream(seed, 5)).y
        for j in range(4):
            g = binary_turn_map(ch, y, j, "forward")
            x = np.linspace(-30, 30, 121)
            h = 1e-4
            fd = np.array([(g(t + h) - g(t - h)) / (2 * h) for t in x])
            assert np.all(np.abs(fd) < 1)


def test_fixed_point_matches_recursion(hex_channel):
    trace = binary_trace(hex_channel, Y_FIXTURE, RingSchedule("parallel", 120))
    for j in range(4):
        f = binary_fixed_point(binary_turn_map(hex_channel, Y_FIXTURE, j, "forward")).limit
        b = binary_fixed_point(binary_turn_map(hex_channel, Y_FIXTURE, j, "backward")).limit
        assert abs(trace.forward[-1][j] - f) < 1e-8
        assert abs(trace.backward[-1][j] - b) < 1e-8
