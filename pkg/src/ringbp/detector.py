"""Ring belief-propagation detectors and the LMMSE baseline.

Messages are indexed by their destination node: ``forward[j]`` is the message
``j-1 -> j`` and ``backward[j]`` is ``j+1 -> j``. In the parallel schedule one
iteration updates every message once from the previous iterate; in the
sequential schedule one iteration is a full forward sweep followed by a full
backward sweep around the ring.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .channel import Alphabet, ChannelInstance
from .linalg import EXACT, RingLinks, TruncatedLink, hermitian_solve, build_k_matrix

LLR_CLAMP = 50.0


class DegenerateLink(ValueError):
    pass


class AlphabetMismatch(ValueError):
    pass


class Schedule(str, Enum):
    PARALLEL = "parallel"
    SEQUENTIAL = "sequential"


@dataclass(frozen=True)
class RingSchedule:
    mode: Schedule = Schedule.PARALLEL
    iterations: int = 2

    def __post_init__(self):
        object.__setattr__(self, "mode", Schedule(getattr(self.mode, "value", self.mode)))
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


DEFAULT_SCHEDULE = RingSchedule()


def ring_links(ch: ChannelInstance, links: RingLinks | None = None, mode: str = EXACT) -> RingLinks:
    if links is not None:
        return links
    return RingLinks(ch.H, ch.sigma2, mode)


def _ring_order(M: int, schedule: RingSchedule):
    """Yield lists of (direction, node) updates for one iteration."""
    if schedule.mode is Schedule.PARALLEL:
        return [[("f", j) for j in range(M)] + [("b", j) for j in range(M)]]
    return [[("f", j)] for j in range(M)] + [[("b", j)] for j in reversed(range(M))]


# -- discrete alphabet ---------------------------------------------------------

def _log_translation(link: TruncatedLink, y: np.ndarray, symbols: np.ndarray) -> np.ndarray:
    if not link.sigma2 > 0:
        raise DegenerateLink(f"link ({link.j}|{link.i}) has sigma2={link.sigma2}")
    yji = np.asarray(link.project(y))[..., None, None]
    mean = link.a_jj * symbols[:, None] + link.a_ji * symbols[None, :]
    return -np.abs(yji - mean) ** 2 / link.sigma2 - np.log(np.pi * link.sigma2)


def translation_matrix(link: TruncatedLink, y: np.ndarray, alphabet: Alphabet) -> np.ndarray:
    """Matrix with entry ``(m, n) = CN(y_{j|i}; a_jj s_m + a_ji s_n, sigma2_{j|i})``."""
    return np.exp(_log_translation(link, y, alphabet.symbols))


def _scaled_translation(link, y, symbols):
    # Rescaled per observation so the largest entry is 1; messages are renormalised anyway.
    logA = _log_translation(link, y, symbols)
    return np.exp(logA - logA.max(axis=(-2, -1), keepdims=True))


@dataclass
class DiscreteResult:
    beliefs: np.ndarray
    forward: np.ndarray
    backward: np.ndarray
    history: list = field(default_factory=list)

    @property
    def decisions(self) -> np.ndarray:
        return np.argmax(self.beliefs, axis=-1)


def _hop(A, msg):
    out = np.einsum("...mn,...n->...m", A, msg)
    return out / out.sum(axis=-1, keepdims=True)


def ring_bp_discrete(
    ch: ChannelInstance,
    y: np.ndarray,
    schedule: RingSchedule = DEFAULT_SCHEDULE,
    *,
    links: RingLinks | None = None,
    init_forward: np.ndarray | None = None,
    init_backward: np.ndarray | None = None,
    keep_history: bool = False,
) -> DiscreteResult:
    """Forward-backward recursion over message vectors.

    ``y`` may be a single received vector or a batch of them (rows); message
    arrays then have shape ``batch + (M, |alphabet|)``.
    """
    links = ring_links(ch, links)
    M, Q = ch.n_tx, ch.alphabet.size
    symbols = ch.alphabet.symbols
    y = np.asarray(y)
    batch = y.shape[:-1]
    Af = [_scaled_translation(links.forward(j), y, symbols) for j in range(M)]
    Ab = [_scaled_translation(links.backward(j), y, symbols) for j in range(M)]
    shape = batch + (M, Q)
    fwd = np.full(shape, 1.0 / Q) if init_forward is None else np.broadcast_to(init_forward, shape).astype(float)
    bwd = np.full(shape, 1.0 / Q) if init_backward is None else np.broadcast_to(init_backward, shape).astype(float)
    fwd = fwd / fwd.sum(axis=-1, keepdims=True)
    bwd = bwd / bwd.sum(axis=-1, keepdims=True)
    history = []
    for _ in range(schedule.iterations):
        for group in _ring_order(M, schedule):
            f_prev, b_prev = (fwd.copy(), bwd.copy()) if len(group) > 1 else (fwd, bwd)
            for direction, j in group:
                if direction == "f":
                    fwd[..., j, :] = _hop(Af[j], f_prev[..., (j - 1) % M, :])
                else:
                    bwd[..., j, :] = _hop(Ab[j], b_prev[..., (j + 1) % M, :])
        if keep_history:
            history.append((fwd.copy(), bwd.copy()))
    beliefs = fwd * bwd
    beliefs /= beliefs.sum(axis=-1, keepdims=True)
    return DiscreteResult(beliefs, fwd, bwd, history)


# -- Gaussian messages -----------------------------------------------------------

def ring_bp_gaussian(
    ch: ChannelInstance,
    y: np.ndarray,
    schedule: RingSchedule = DEFAULT_SCHEDULE,
    *,
    links: RingLinks | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Mean/variance recursion for Gaussian input.

    Returns the per-stream mean and variance averaged over the two incoming
    directions (both converge to the LMMSE estimate and its MMSE).
    """
    links = ring_links(ch, links)
    M = ch.n_tx
    y = np.asarray(y)
    batch = y.shape[:-1]
    mu = {"f": np.zeros(batch + (M,), dtype=complex), "b": np.zeros(batch + (M,), dtype=complex)}
    var = {"f": np.ones(M), "b": np.ones(M)}
    consts = {}
    for d, pick, step in (("f", links.forward, -1), ("b", links.backward, 1)):
        for j in range(M):
            lk = pick(j)
            g = 1.0 / (1.0 + lk.sigma2)
            consts[(d, j)] = (g * lk.project(y), g * lk.a_ji, abs(lk.a_ji) ** 2 * g**2, g, (j + step) % M)
    order = _ring_order(M, schedule)
    for _ in range(schedule.iterations):
        for group in order:
            # single updates read the live state; parallel groups read the previous iterate
            src_mu = {d: a.copy() for d, a in mu.items()} if len(group) > 1 else mu
            src_var = {d: a.copy() for d, a in var.items()} if len(group) > 1 else var
            for d, j in group:
                proj, ga, ga2, g, src = consts[(d, j)]
                mu[d][..., j] = proj - ga * src_mu[d][..., src]
                var[d][j] = g + ga2 * src_var[d][src]
    mu_f, mu_b, var_f, var_b = mu["f"], mu["b"], var["f"], var["b"]
    return 0.5 * (mu_f + mu_b), 0.5 * (var_f + var_b)


# -- binary LLR recursion ----------------------------------------------------------

def zeta(x, c):
    """Bounded nonlinearity ``-log((e^{x/2-c}+e^{-x/2+c}) / (e^{x/2+c}+e^{-x/2-c}))``."""
    x = np.asarray(x, dtype=float)
    return np.logaddexp(0.5 * x + c, -0.5 * x - c) - np.logaddexp(0.5 * x - c, -0.5 * x + c)


def zeta_prime(x, c):
    x = np.asarray(x, dtype=float)
    return 0.5 * np.tanh(0.5 * x + c) - 0.5 * np.tanh(0.5 * x - c)


@dataclass(frozen=True)
class BinaryLinkTerms:
    """Observation-dependent constants of one binary hop ``l_out = b - zeta(l_in + 2d; c)``."""

    y_real: np.ndarray
    c: float
    d: np.ndarray

    @classmethod
    def from_link(cls, link: TruncatedLink, y: np.ndarray) -> "BinaryLinkTerms":
        yji = link.project(y)
        a = link.a_ji
        d = (2.0 / link.sigma2) * np.real(np.conj(a) * yji)
        return cls(np.real(yji), 2.0 * a.real, d)

    def step(self, l_in, prior=0.0):
        out = prior + 4.0 * self.y_real - zeta(l_in + 2.0 * self.d, self.c)
        return np.clip(out, -LLR_CLAMP, LLR_CLAMP)


@dataclass
class BinaryTrace:
    """Per-iteration forward/backward LLRs, each of shape ``batch + (M,)``."""

    forward: list
    backward: list

    @property
    def final(self) -> np.ndarray:
        return self.forward[-1] + self.backward[-1]


def _check_binary(ch):
    if not ch.alphabet.is_binary:
        raise AlphabetMismatch(f"binary LLR recursion needs BPSK, got {ch.alphabet.name.value}")


def binary_trace(
    ch: ChannelInstance,
    y: np.ndarray,
    schedule: RingSchedule = DEFAULT_SCHEDULE,
    *,
    links: RingLinks | None = None,
    prior_llr: np.ndarray | None = None,
    init_forward: np.ndarray | None = None,
    init_backward: np.ndarray | None = None,
) -> BinaryTrace:
    """Run the scalar LLR recursion on one or many received vectors (rows of ``y``)."""
    _check_binary(ch)
    links = ring_links(ch, links)
    M = ch.n_tx
    y = np.asarray(y)
    batch = y.shape[:-1]
    prior = np.zeros(M) if prior_llr is None else np.asarray(prior_llr, dtype=float)
    tf = [BinaryLinkTerms.from_link(links.forward(j), y) for j in range(M)]
    tb = [BinaryLinkTerms.from_link(links.backward(j), y) for j in range(M)]
    fwd = np.zeros(batch + (M,)) if init_forward is None else np.broadcast_to(init_forward, batch + (M,)).astype(float)
    bwd = np.zeros(batch + (M,)) if init_backward is None else np.broadcast_to(init_backward, batch + (M,)).astype(float)
    trace = BinaryTrace([], [])
    for _ in range(schedule.iterations):
        for group in _ring_order(M, schedule):
            pf, pb = (fwd.copy(), bwd.copy()) if len(group) > 1 else (fwd, bwd)
            for direction, j in group:
                if direction == "f":
                    fwd[..., j] = tf[j].step(pf[..., (j - 1) % M], prior[..., j])
                else:
                    bwd[..., j] = tb[j].step(pb[..., (j + 1) % M], prior[..., j])
        trace.forward.append(fwd.copy())
        trace.backward.append(bwd.copy())
    return trace


def ring_bp_binary(
    ch: ChannelInstance,
    y: np.ndarray,
    schedule: RingSchedule = DEFAULT_SCHEDULE,
    **kwargs,
) -> np.ndarray:
    """Final-belief LLRs ``l_{j-1->j} + l_{j+1->j}`` for BPSK."""
    return binary_trace(ch, y, schedule, **kwargs).final


# -- LMMSE baseline ---------------------------------------------------------------

@dataclass
class LmmseResult:
    xhat: np.ndarray
    mmse: np.ndarray
    llr: np.ndarray | None


def lmmse_detect(ch: ChannelInstance, y: np.ndarray) -> LmmseResult:
    """``xhat_j = h_j^H K^{-1} y`` and ``MMSE_j = 1 - h_j^H K^{-1} h_j`` with ``K = sigma2 I + H H^H``."""
    H = ch.H
    K = build_k_matrix(H, ch.sigma2)
    KinvH = hermitian_solve(K, H)
    y = np.asarray(y)
    xhat = y @ KinvH.conj()
    mmse = 1.0 - np.real(np.einsum("nk,nk->k", H.conj(), KinvH))
    llr = 4.0 * xhat.real / mmse if ch.alphabet.is_binary else None
    return LmmseResult(xhat, mmse, llr)


def lmmse_sinr(H: np.ndarray, sigma2: float, mode: str = EXACT) -> np.ndarray:
    """Per-stream SINR of the real part of the LMMSE output for BPSK.

    Uses the same real-part convention as the ring-BP belief SINR, so the two
    can be compared directly.
    """
    H = np.asarray(H, dtype=complex)
    K = build_k_matrix(H, sigma2)
    W = hermitian_solve(K, H)
    G = W.conj().T @ H  # G[j, k] = w_j^H h_k
    M = H.shape[1]
    out = np.empty(M)
    for j in range(M):
        signal = G[j, j].real
        noise = 0.5 * sigma2 * float(np.vdot(W[:, j], W[:, j]).real)
        others = np.delete(G[j], j)
        if mode == EXACT:
            interference = float(np.sum(others.real**2))
        else:
            interference = 0.5 * float(np.sum(np.abs(others) ** 2))
        out[j] = signal**2 / (interference + noise)
    return out
