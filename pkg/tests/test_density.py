import logging

import numpy as np
import pytest

from ringbp import density
from ringbp.channel import ChannelInstance, draw_channel, h_ex, rng_stream, snr_to_sigma2
from ringbp.density import (
    BACKWARD,
    FORWARD,
    DEConfig,
    DensityState,
    NegativeVariance,
    PairGaussian,
    QuadratureUnstable,
    belief_sinr,
    ber_from_sinr,
    de_step,
    gauss_hermite,
    hop_model,
    message_covariance,
    q_function,
    run_de,
    sinr_bound,
    write_de_trace,
)
from ringbp.linalg import CIRCULAR, EXACT, RingLinks, build_truncated_link

from conftest import SIGMA2_6DB, mc_llr_moments, random_channel

# regression pins: example channel, 6 dB, two parallel turns, exact statistics
DE_FORWARD_PIN = [
    (8.061519180731977, 16.52130195158047),
    (15.550145833592307, 33.01835208450203),
    (4.002506189016186, 6.367686766491371),
    (13.064272123105617, 26.267567509997974),
]
DE_BACKWARD_PIN = [
    (8.140683013939782, 16.306765190082302),
    (13.213858796130534, 26.377870023415994),
    (10.02169835924708, 20.48293245230721),
    (7.480873429992821, 12.034728597846538),
]
GAMMA_PIN = [4.756902007591149, 8.084427472788278, 4.533047501943742, 6.763319536378166]
# computed by direct matrix inversion, independent of the package
BOUND_ORACLE = [4.633830073686542, 8.225850080912513, 4.437127519143992, 6.744597252087085]


def unitary_channel(seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4)))
    return scale * Q


def test_gauss_hermite_moments():
    x, w = gauss_hermite(40)
    assert w.sum() == pytest.approx(1.0, abs=1e-14)
    assert np.dot(w, x**2) == pytest.approx(1.0, abs=1e-12)
    assert np.dot(w, x**4) == pytest.approx(3.0, abs=1e-11)
    assert abs(np.dot(w, x**3)) < 1e-12


def test_pair_gaussian_clip(caplog):
    with caplog.at_level(logging.WARNING, logger="ringbp.density"):
        pg = PairGaussian.build([0, 0], [[1.0, 3.0], [3.0, 4.0]], "test")
    assert pg.clipped
    assert pg.cov[0, 1] == pytest.approx(0.999 * 2.0)
    assert np.all(np.linalg.eigvalsh(pg.cov) > 0)
    assert "clipping" in caplog.text
    assert not PairGaussian.build([0, 0], [[1.0, 0.5], [0.5, 1.0]]).clipped


def test_density_state_rejects_negative_variance():
    with pytest.raises(ValueError):
        DensityState(1.0, -0.1, FORWARD, (0, 3))


def test_zero_interference_hop():
    H = unitary_channel()
    links = RingLinks(H, 0.4)
    for j in range(4):
        lk = links.forward(j)
        assert abs(lk.a_ji) < 1e-14
    trace = run_de(links, 3)
    for t in (1, 2, 3):
        for j in range(4):
            lk = links.forward(j)
            st = trace.turns[t][(FORWARD, j)]
            assert st.m == pytest.approx(4 * lk.sigma2, rel=1e-10)
            assert st.v == pytest.approx(16 * lk.var_r, rel=1e-10)


def test_perfect_cancellation_limit(hex_channel):
    links = RingLinks(hex_channel.H, hex_channel.sigma2)
    for j in range(4):
        lk = links.forward(j)
        slz, alpha = message_covariance(links, j)
        prev = DensityState(400.0, 1.0, FORWARD, (0, 0), 1)
        st = de_step(lk, prev, slz, alpha, DEConfig(check_quadrature=False))
        assert st.m == pytest.approx(4 * lk.sigma2, rel=1e-9)
        assert st.v == pytest.approx(16 * lk.var_r, rel=1e-9)


def test_turns_zero(hex_channel):
    trace = run_de(hex_channel, 0)
    assert trace.n_turns == 0
    assert all(st.m == 0 and st.v == 0 for st in trace.final.values())
    assert len(trace.final) == 8


def test_states_nonnegative():
    for seed in range(10):
        trace = run_de(random_channel(seed, snr_db=2.0), 2)
        for states in trace.turns:
            assert all(st.m >= 0 and st.v >= 0 for st in states.values())


def test_hex_regression_pins(hex_channel):
    trace = run_de(hex_channel, 2)
    for j in range(4):
        f, b = trace.final[(FORWARD, j)], trace.final[(BACKWARD, j)]
        assert (f.m, f.v) == pytest.approx(DE_FORWARD_PIN[j], rel=1e-9)
        assert (b.m, b.v) == pytest.approx(DE_BACKWARD_PIN[j], rel=1e-9)
        assert f.pair == (j, (j - 1) % 4) and b.pair == (j, (j + 1) % 4)
    assert belief_sinr(trace).gamma == pytest.approx(GAMMA_PIN, rel=1e-9)


def test_hex_bound_oracle(hex_channel):
    assert sinr_bound(hex_channel) == pytest.approx(BOUND_ORACLE, rel=1e-12)


def test_bound_orthogonal_columns():
    # both truncated links reduce to the matched filter and share all their noise
    s2 = 0.3
    bound = sinr_bound(ChannelInstance(unitary_channel(1), s2))
    assert bound == pytest.approx(np.full(4, 2 / s2), rel=1e-12)


def test_cyclic_permutation_symmetry():
    ch = random_channel(21, snr_db=4.0)
    k = 1
    perm = ChannelInstance(np.roll(ch.H, -k, axis=1), ch.sigma2)
    a, b = run_de(ch, 2), run_de(perm, 2)
    for d in (FORWARD, BACKWARD):
        for j in range(4):
            sa, sb = a.final[(d, (j + k) % 4)], b.final[(d, j)]
            assert (sb.m, sb.v) == pytest.approx((sa.m, sa.v), rel=1e-10)


def test_phase_invariance():
    ch = random_channel(22, snr_db=4.0)
    rot = ChannelInstance(np.exp(0.7j) * ch.H, ch.sigma2)
    a, b = run_de(ch, 2), run_de(rot, 2)
    for key, st in a.final.items():
        assert (b.final[key].m, b.final[key].v) == pytest.approx((st.m, st.v), rel=1e-10)
    assert belief_sinr(b).gamma == pytest.approx(belief_sinr(a).gamma, rel=1e-10)


def test_quadrature_doubling(hex_channel):
    a = run_de(hex_channel, 2, DEConfig(nodes=40, check_quadrature=False))
    b = run_de(hex_channel, 2, DEConfig(nodes=80, check_quadrature=False))
    for key, st in a.final.items():
        assert b.final[key].m == pytest.approx(st.m, rel=1e-4)
        assert b.final[key].v == pytest.approx(st.v, rel=1e-4)


def test_coarse_hermite_falls_back_to_reduced_grid(hex_channel):
    coarse = run_de(hex_channel, 2, DEConfig(nodes=2, max_nodes=4))
    fine = run_de(hex_channel, 2)
    for key, st in fine.final.items():
        assert (coarse.final[key].m, coarse.final[key].v) == pytest.approx((st.m, st.v), rel=1e-4)


def test_reduced_grid_matches_hermite(hex_channel):
    links = RingLinks(hex_channel.H, hex_channel.sigma2)
    trace = run_de(links, 1)
    for d in (FORWARD, BACKWARD):
        for j in range(4):
            model = hop_model(links, j, d, trace.final[(d, (j - 1) % 4 if d == FORWARD else (j + 1) % 4)])
            assert model.moments_reduced(0.25) == pytest.approx(model.moments(320), rel=1e-9)


def test_quadrature_unstable(hex_channel, monkeypatch):
    monkeypatch.setattr(density.HopModel, "moments_reduced", lambda self, step: (1.0 + step, 1.0))
    with pytest.raises(QuadratureUnstable):
        run_de(hex_channel, 2, DEConfig(nodes=2, max_nodes=4))


def test_independence_reduction(hex_channel, monkeypatch):
    trace = run_de(hex_channel, 2)
    monkeypatch.setattr(density, "sigma_zz", lambda links, j: 0.0)
    rep = belief_sinr(trace)
    for j in range(4):
        f, b = trace.final[(FORWARD, j)], trace.final[(BACKWARD, j)]
        # conditional-mean and joint quadrature rules agree to the quadrature tolerance
        assert rep.var_llr[j] == pytest.approx(f.v + b.v, rel=1e-4)


def test_negative_variance_reported(hex_channel):
    trace = run_de(hex_channel, 2)
    for key, st in list(trace.final.items()):
        trace.final[key] = DensityState(st.m * 3, 0.0, st.direction, st.pair, st.turn)
    with pytest.raises(NegativeVariance):
        belief_sinr(trace)


def test_real_channel_alpha_zero():
    H = draw_channel(4, 4, rng_stream(3)).real + 0j
    links = RingLinks(H, 0.5)
    for j in range(4):
        for d in (FORWARD, BACKWARD):
            assert message_covariance(links, j, d)[1] == 0.0


def test_sigma_lz_monte_carlo():
    H = draw_channel(4, 4, rng_stream(4))
    s2 = 0.4
    links = RingLinks(H, s2)
    rng = rng_stream(5)
    n = 1_000_000
    x = rng.choice([-1.0, 1.0], size=(n, 4))
    noise = np.sqrt(s2 / 2) * (rng.standard_normal((n, 4)) + 1j * rng.standard_normal((n, 4)))
    y = x @ H.T + noise
    for j in range(4):
        a, b = links.forward(j), links.forward((j - 1) % 4)
        na = (a.project(y) - a.a_jj * x[:, a.j] - a.a_ji * x[:, a.i]).real
        nb = (b.project(y) - b.a_jj * x[:, b.j] - b.a_ji * x[:, b.i]).real
        prod = na * nb
        se = prod.std(ddof=1) / np.sqrt(n)
        assert abs(prod.mean() - message_covariance(links, j)[0]) < 3 * se


def test_ber_from_sinr_values():
    assert ber_from_sinr(np.zeros(5))[0] == 0.5
    assert ber_from_sinr([4.0])[0] == pytest.approx(0.022750131948179, rel=1e-12)
    ber, bound = ber_from_sinr([[1.0, 2.0]], [[1.5, 3.0]])
    assert bound < ber
    assert q_function(0.0) == 0.5


def test_hex_de_matches_monte_carlo(hex_channel):
    trace = run_de(hex_channel, 2)
    fm, fv, _, _ = mc_llr_moments(hex_channel, 2, 1_000_000, seed=1)
    for j in range(4):
        st = trace.final[(FORWARD, j)]
        assert st.m == pytest.approx(fm[1, j], rel=0.05)
        assert st.v == pytest.approx(fv[1, j], rel=0.05)


def test_hex_gamma_matches_monte_carlo_sinr(hex_channel):
    rep = belief_sinr(run_de(hex_channel, 2))
    _, _, bm, bv = mc_llr_moments(hex_channel, 2, 1_000_000, seed=2)
    gamma_mc = bm**2 / bv
    print("DE gamma", np.round(rep.gamma, 4), "MC gamma", np.round(gamma_mc, 4))
    assert rep.gamma == pytest.approx(gamma_mc, rel=0.05)


def test_gamma_within_bound():
    channels = [ChannelInstance(h_ex(), SIGMA2_6DB)] + [random_channel(s, snr_db=2.0) for s in range(20)]
    worst = 0.0
    for ch in channels:
        rep = belief_sinr(run_de(ch, 2))
        worst = max(worst, float(np.max(rep.gamma - rep.gamma_bound)))
    print("largest gamma - gamma_bound:", worst)
    assert worst <= 1e-6


def test_exact_vs_circular_discrepancy(hex_channel):
    rows = []
    for ch in [hex_channel] + [random_channel(s, snr_db=6.0) for s in range(5)]:
        ge = belief_sinr(run_de(ch, 2, mode=EXACT)).gamma
        gc = belief_sinr(run_de(ch, 2, mode=CIRCULAR)).gamma
        rows.append(np.max(np.abs(gc - ge) / ge))
    print("max relative gamma discrepancy, circular vs exact:", np.round(rows, 4))
    assert np.all(np.isfinite(rows))


def test_trace_csv(hex_channel, tmp_path):
    trace = run_de(hex_channel, 2)
    path = tmp_path / "t.csv"
    write_de_trace(path, [trace], [{"channel": 0}])
    lines = path.read_text().splitlines()
    assert lines[0] == "# ringbp-de-trace/1"
    assert lines[1] == "channel,direction,node,source,turn,m,v"
    assert len(lines) == 2 + 3 * 8
