"""Density evolution for the binary ring recursion on a fixed channel.

Every directed message is modelled as a Gaussian LLR whose mean, once
multiplied by the sign of its target bit, is ``m`` and whose variance is
``v``. One parallel iteration maps the state of the message entering node
``j-1`` to the state of the message entering node ``j`` by averaging the
one-hop update over the antipodal neighbour bit and the correlated Gaussian
pair ``(z, w)``, where ``z`` is the target-aligned real part of the truncated
observation and ``w`` collects the incoming LLR plus the imaginary residual
leaking through the neighbour coefficient.

The expectation over ``(z, w)`` uses tensor-product Gauss-Hermite quadrature
after whitening with a PSD square root of the pair covariance. When doubling
the nodes up to ``max_nodes`` still moves the result, the hop falls back to an
exact 1-D reduction on a fine uniform grid.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.special import erfc

from .channel import ChannelInstance
from .detector import zeta
from .linalg import EXACT, RingLinks, TruncatedLink, real_cross_covariance

log = logging.getLogger(__name__)

FORWARD = "forward"
BACKWARD = "backward"
DIRECTIONS = (FORWARD, BACKWARD)

DE_TRACE_SCHEMA = "ringbp-de-trace/1"
PSD_CLIP = 0.999
QUADRATURE_RTOL = 1e-4
REDUCED_STEP = 0.25


class QuadratureUnstable(RuntimeError):
    pass


class NegativeVariance(ArithmeticError):
    pass


@dataclass(frozen=True)
class DEConfig:
    """Knobs of the density-evolution model.

    ``target_bias`` keeps the contribution of the (known, +1) target bit that
    sits inside the incoming message as a mean shift rather than as symmetric
    noise; switching it off gives the purely symmetric model.
    """

    nodes: int = 40
    max_nodes: int = 160
    check_quadrature: bool = True
    target_bias: bool = True


DEFAULT_CONFIG = DEConfig()


@lru_cache(maxsize=None)
def gauss_hermite(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Probabilists' Gauss-Hermite nodes with weights normalised to sum to one."""
    x, w = np.polynomial.hermite_e.hermegauss(n)
    x.setflags(write=False)
    w = w / w.sum()
    w.setflags(write=False)
    return x, w


def _psd_sqrt(C: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(C)
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


@dataclass(frozen=True)
class DensityState:
    m: float
    v: float
    direction: str
    pair: tuple[int, int]
    turn: int = 0

    def __post_init__(self):
        if self.v < 0:
            raise ValueError(f"negative message variance {self.v}")


@dataclass(frozen=True)
class PairGaussian:
    mu: np.ndarray
    cov: np.ndarray
    clipped: bool = False

    @classmethod
    def build(cls, mu, cov, label: str = "") -> "PairGaussian":
        cov = np.array(cov, dtype=float)
        cov[1, 0] = cov[0, 1]
        cov[0, 0] = max(cov[0, 0], 0.0)
        cov[1, 1] = max(cov[1, 1], 0.0)
        limit = np.sqrt(cov[0, 0] * cov[1, 1])
        clipped = False
        if abs(cov[0, 1]) > limit:
            log.warning("clipping indefinite pair covariance %s: |%.4g| > %.4g", label, cov[0, 1], limit)
            cov[0, 1] = cov[1, 0] = np.sign(cov[0, 1]) * PSD_CLIP * limit
            clipped = True
        return cls(np.asarray(mu, dtype=float), cov, clipped)

    def conditional_second(self, first):
        """Mean and variance of the second coordinate given the first."""
        c00, c01, c11 = self.cov[0, 0], self.cov[0, 1], self.cov[1, 1]
        if c00 <= 0:
            return np.full_like(np.asarray(first, dtype=float), self.mu[1]), c11
        gain = c01 / c00
        return self.mu[1] + gain * (np.asarray(first) - self.mu[0]), max(c11 - gain * c01, 0.0)


@dataclass
class SinrReport:
    gamma: np.ndarray
    gamma_bound: np.ndarray
    mean_llr: np.ndarray
    var_llr: np.ndarray
    sigma_zz: np.ndarray

    @property
    def ber_estimate(self) -> float:
        return float(np.mean(q_function(np.sqrt(self.gamma))))

    @property
    def ber_bound(self) -> float:
        return float(np.mean(q_function(np.sqrt(self.gamma_bound))))


def q_function(x):
    """Standard normal tail probability."""
    return 0.5 * erfc(np.asarray(x, dtype=float) / np.sqrt(2.0))


# -- per-hop ingredients -----------------------------------------------------------

def _link(links: RingLinks, j: int, direction: str) -> TruncatedLink:
    return links.forward(j) if direction == FORWARD else links.backward(j)


def _source(links: RingLinks, j: int, direction: str) -> int:
    return (j - 1) % links.M if direction == FORWARD else (j + 1) % links.M


def message_covariance(links: RingLinks, j: int, direction: str = FORWARD) -> tuple[float, float]:
    """``(sigma_lz, alpha)`` for the message entering ``j``.

    ``sigma_lz`` is the covariance of the real residuals of this hop's link and
    the upstream hop's link; ``alpha`` is the variance that the imaginary
    residual adds to ``w`` through the neighbour coefficient.
    """
    link = _link(links, j, direction)
    upstream = _link(links, _source(links, j, direction), direction)
    sigma_lz = real_cross_covariance(link, upstream, links.H)
    alpha = (4.0 * link.a_ji.imag / link.sigma2) ** 2 * link.var_i
    return sigma_lz, alpha


def _target_leak(links: RingLinks, j: int, direction: str) -> tuple[float, float]:
    """Mean shift and variance share of the target bit inside the incoming message."""
    upstream = _link(links, _source(links, j, direction), direction)
    if j in (upstream.j, upstream.i):
        return 0.0, 0.0
    g = upstream.gains[j]
    shift = 4.0 * g.real
    share = 16.0 * (g.real**2 if links.mode == EXACT else 0.5 * abs(g) ** 2)
    return shift, share


@dataclass(frozen=True)
class HopModel:
    """Gaussian model of one hop update, ready for quadrature."""

    link: TruncatedLink
    m_in: float
    pair: PairGaussian
    w_shift: float

    def llr(self, x, z, w):
        s = self.link.sigma2
        a = self.link.a_ji
        arg = (4.0 * a.real / s) * z + (4.0 * abs(a) ** 2 / s) * x + w
        return 4.0 * z + 4.0 * a.real * x - zeta(arg, 2.0 * a.real)

    def moments(self, nodes: int) -> tuple[float, float]:
        gx, gw = gauss_hermite(nodes)
        Z1, Z2 = np.meshgrid(gx, gx, indexing="ij")
        W = np.outer(gw, gw)
        S = _psd_sqrt(self.pair.cov)
        dz = S[0, 0] * Z1 + S[0, 1] * Z2
        dw = S[1, 0] * Z1 + S[1, 1] * Z2
        e1 = e2 = 0.0
        for x in (1.0, -1.0):
            z = self.pair.mu[0] + dz
            w = self.m_in * x + self.w_shift + dw
            L = self.llr(x, z, w)
            e1 += 0.5 * np.sum(W * L)
            e2 += 0.5 * np.sum(W * L * L)
        return e1, max(e2 - e1 * e1, 0.0)

    def moments_reduced(self, step: float) -> tuple[float, float]:
        """Same moments from the scalar ``u = arg`` on a uniform grid of spacing ``step``.

        The LLR is ``4z + 4a^R x - zeta(u)`` and ``z`` given ``u`` is Gaussian,
        so both moments are 1-D integrals over ``u``. The trapezoid rule is
        exponentially accurate here because ``zeta`` is analytic in a strip and
        the weight is Gaussian, even when ``u`` is far wider than the kinks of
        ``zeta`` that defeat Hermite nodes.
        """
        s = self.link.sigma2
        a = self.link.a_ji
        alpha, beta = 4.0 * a.real / s, 4.0 * abs(a) ** 2 / s
        (vz, czw), (_, vw) = self.pair.cov
        mz = self.pair.mu[0]
        vu = alpha**2 * vz + vw + 2.0 * alpha * czw
        sd = np.sqrt(max(vu, 0.0))
        k = (alpha * vz + czw) / vu if vu > 0 else 0.0
        h = min(step, sd / 4.0) if sd > 0 else 1.0
        t = np.arange(-np.ceil(10.0 * sd / h), np.ceil(10.0 * sd / h) + 1) * h
        wt = np.exp(-0.5 * (t / sd) ** 2) if sd > 0 else np.ones(1)
        wt = wt / wt.sum()
        e1 = e2 = 0.0
        for x in (1.0, -1.0):
            b = 4.0 * a.real * x
            mu_u = alpha * mz + self.m_in * x + self.w_shift + beta * x
            zt = zeta(mu_u + t, 2.0 * a.real)
            cz = 4.0 * (mz + k * t) + b
            e1 += 0.5 * (4.0 * mz + b - wt @ zt)
            e2 += 0.5 * (16.0 * (vz + mz**2) + 8.0 * b * mz + b * b - 2.0 * wt @ (cz * zt) + wt @ (zt * zt))
        return float(e1), max(float(e2 - e1 * e1), 0.0)

    def conditional_mean(self, z: np.ndarray, nodes: int) -> np.ndarray:
        """``E[l | z]`` averaged over the neighbour bit and ``w`` given ``z``."""
        gx, gw = gauss_hermite(nodes)
        mu_w, var_w = self.pair.conditional_second(z)
        sd = np.sqrt(var_w)
        out = np.zeros_like(np.asarray(z, dtype=float))
        for x in (1.0, -1.0):
            w = (self.m_in * x + self.w_shift + (mu_w - self.pair.mu[1]))[..., None] + sd * gx
            out = out + 0.5 * np.sum(gw * self.llr(x, np.asarray(z)[..., None], w), axis=-1)
        return out


def _zw_covariance(link: TruncatedLink, sigma_lz: float, fresh: bool) -> float:
    # l_in carries 4 * Re(n_upstream), hence the factor 4 on the residual covariance.
    cov = 0.0 if fresh else 4.0 * sigma_lz
    if link.mode == EXACT:
        cov += (4.0 * link.a_ji.imag / link.sigma2) * link.cov_ri
    return cov


def hop_model(
    links: RingLinks,
    j: int,
    direction: str,
    prev: DensityState,
    config: DEConfig = DEConfig(),
    sigma_lz: float | None = None,
    alpha: float | None = None,
) -> HopModel:
    link = _link(links, j, direction)
    if sigma_lz is None or alpha is None:
        sigma_lz, alpha = message_covariance(links, j, direction)
    fresh = prev.turn == 0  # incoming message is the deterministic zero start
    shift, share = (0.0, 0.0)
    if config.target_bias and not fresh:
        shift, share = _target_leak(links, j, direction)
    cov_zw = _zw_covariance(link, sigma_lz, fresh)
    var_w = max(prev.v - share, 0.0) + alpha
    pair = PairGaussian.build(
        mu=[link.sigma2, prev.m],
        cov=[[link.var_r, cov_zw], [cov_zw, var_w]],
        label=f"{direction} ({link.j}|{link.i})",
    )
    return HopModel(link, prev.m, pair, shift)


def de_step(
    link_or_links,
    prev: DensityState,
    sigma_lz: float | None = None,
    alpha: float | None = None,
    config: DEConfig = DEConfig(),
    *,
    j: int | None = None,
    direction: str = FORWARD,
) -> DensityState:
    """Advance one message by one hop.

    Accepts either a ``RingLinks`` with ``j``/``direction`` or a bare
    ``TruncatedLink`` (then ``sigma_lz``/``alpha`` are required and no target
    leak is modelled).
    """
    if isinstance(link_or_links, RingLinks):
        model = hop_model(link_or_links, j, direction, prev, config, sigma_lz, alpha)
    else:
        link = link_or_links
        j = link.j
        cov_zw = _zw_covariance(link, sigma_lz, prev.turn == 0)
        pair = PairGaussian.build([link.sigma2, prev.m], [[link.var_r, cov_zw], [cov_zw, prev.v + alpha]])
        model = HopModel(link, prev.m, pair, 0.0)
    m, v = _checked_moments(model, config)
    return DensityState(m, v, direction, (model.link.j, model.link.i), prev.turn + 1)


def _checked_moments(model: HopModel, config: DEConfig) -> tuple[float, float]:
    n = config.nodes
    m, v = model.moments(n)
    if not config.check_quadrature:
        return m, v
    while True:
        n2 = 2 * n
        m2, v2 = model.moments(n2)
        err = max(abs(m2 - m) / max(abs(m2), 1e-9), abs(v2 - v) / max(v2, 1e-9))
        if err <= QUADRATURE_RTOL:
            return m, v
        if n2 >= config.max_nodes:
            break
        n, m, v = n2, m2, v2
    m, v = model.moments_reduced(REDUCED_STEP)
    m2, v2 = model.moments_reduced(REDUCED_STEP / 2)
    err2 = max(abs(m2 - m) / max(abs(m2), 1e-9), abs(v2 - v) / max(v2, 1e-9))
    if err2 > QUADRATURE_RTOL:
        raise QuadratureUnstable(
            f"relative quadrature error {err:.2e} with {n2} nodes and {err2:.2e} on the reduced grid "
            f"on link ({model.link.j}|{model.link.i})"
        )
    log.debug("hop (%d|%d): Hermite error %.2e, using reduced grid", model.link.j, model.link.i, err)
    return m, v


# -- whole ring ---------------------------------------------------------------------

@dataclass
class DETrace:
    """States per turn: ``turns[t][(direction, j)]`` for the message entering ``j``."""

    links: RingLinks
    config: DEConfig
    turns: list = field(default_factory=list)

    @property
    def final(self) -> dict:
        return self.turns[-1]

    @property
    def n_turns(self) -> int:
        return len(self.turns) - 1


def _as_links(ch_or_links, mode: str = EXACT) -> RingLinks:
    if isinstance(ch_or_links, RingLinks):
        return ch_or_links
    if isinstance(ch_or_links, ChannelInstance):
        return RingLinks(ch_or_links.H, ch_or_links.sigma2, mode)
    raise TypeError("expected ChannelInstance or RingLinks")


def run_de(ch_or_links, turns: int = 2, config: DEConfig = DEConfig(), mode: str = EXACT) -> DETrace:
    """Parallel-schedule density evolution from all-zero messages."""
    links = _as_links(ch_or_links, mode)
    M = links.M
    init = {}
    for d in DIRECTIONS:
        for j in range(M):
            lk = _link(links, j, d)
            init[(d, j)] = DensityState(0.0, 0.0, d, (lk.j, lk.i), 0)
    trace = DETrace(links, config, [init])
    covs = {(d, j): message_covariance(links, j, d) for d in DIRECTIONS for j in range(M)}
    for _ in range(turns):
        prev = trace.turns[-1]
        new = {}
        for (d, j), (slz, alpha) in covs.items():
            src = prev[(d, _source(links, j, d))]
            new[(d, j)] = de_step(links, src, slz, alpha, config, j=j, direction=d)
        trace.turns.append(new)
    return trace


def sigma_zz(links: RingLinks, j: int) -> float:
    return real_cross_covariance(links.forward(j), links.backward(j), links.H)


def sinr_bound(ch_or_links, mode: str = EXACT) -> np.ndarray:
    """SINR of the final belief when both neighbour bits are cancelled perfectly."""
    links = _as_links(ch_or_links, mode)
    out = np.empty(links.M)
    for j in range(links.M):
        f, b = links.forward(j), links.backward(j)
        out[j] = (f.sigma2 + b.sigma2) ** 2 / (f.var_r + b.var_r + 2.0 * sigma_zz(links, j))
    return out


def belief_sinr(trace: DETrace) -> SinrReport:
    """Mean, variance and SINR of ``l_{j-1->j} + l_{j+1->j}`` after the last turn."""
    links, config = trace.links, trace.config
    M = links.M
    T = trace.n_turns
    n = config.nodes
    gx, gw = gauss_hermite(n)
    Z1, Z2 = np.meshgrid(gx, gx, indexing="ij")
    W = np.outer(gw, gw)
    gamma = np.zeros(M)
    mean = np.zeros(M)
    var = np.zeros(M)
    szz = np.zeros(M)
    for j in range(M):
        f, b = trace.final[(FORWARD, j)], trace.final[(BACKWARD, j)]
        lf, lb = links.forward(j), links.backward(j)
        szz[j] = sigma_zz(links, j)
        mean[j] = f.m + b.m
        if T == 0:
            continue
        zpair = PairGaussian.build([lf.sigma2, lb.sigma2], [[lf.var_r, szz[j]], [szz[j], lb.var_r]], f"zz node {j}")
        S = _psd_sqrt(zpair.cov)
        zf = zpair.mu[0] + S[0, 0] * Z1 + S[0, 1] * Z2
        zb = zpair.mu[1] + S[1, 0] * Z1 + S[1, 1] * Z2
        before = trace.turns[T - 1]
        hf = hop_model(links, j, FORWARD, before[(FORWARD, _source(links, j, FORWARD))], config)
        hb = hop_model(links, j, BACKWARD, before[(BACKWARD, _source(links, j, BACKWARD))], config)
        cross = float(np.sum(W * hf.conditional_mean(zf, n) * hb.conditional_mean(zb, n)))
        var[j] = f.v + b.v + 2.0 * cross - 2.0 * f.m * b.m
        if var[j] < 0:
            raise NegativeVariance(f"final-belief variance {var[j]:.4g} < 0 at node {j}")
        gamma[j] = mean[j] ** 2 / var[j] if var[j] > 0 else np.inf
    return SinrReport(gamma, sinr_bound(links), mean, var, szz)


def ber_from_sinr(gamma, gamma_bound=None) -> tuple[float, float | None]:
    """Average ``Q(sqrt(gamma))`` over all streams and channels given (any shape)."""
    ber = float(np.mean(q_function(np.sqrt(np.asarray(gamma, dtype=float)))))
    if gamma_bound is None:
        return ber, None
    return ber, float(np.mean(q_function(np.sqrt(np.asarray(gamma_bound, dtype=float)))))


# -- CSV -----------------------------------------------------------------------------

DE_TRACE_FIELDS = ("direction", "node", "source", "turn", "m", "v")


def de_trace_rows(trace: DETrace, label: dict | None = None):
    for t, states in enumerate(trace.turns):
        for (d, j), st in sorted(states.items()):
            row = dict(label or {})
            row.update(direction=d, node=j, source=st.pair[1], turn=t, m=f"{st.m:.10g}", v=f"{st.v:.10g}")
            yield row


def write_de_trace(path_or_buf, traces, labels=None) -> None:
    """Write one or more traces as CSV preceded by a schema comment line."""
    if isinstance(traces, DETrace):
        traces = [traces]
    labels = labels or [{} for _ in traces]
    extra = list(labels[0].keys()) if labels else []
    own = not isinstance(path_or_buf, io.TextIOBase)
    fh = open(path_or_buf, "w", newline="") if own else path_or_buf
    try:
        fh.write(f"# {DE_TRACE_SCHEMA}\n")
        writer = csv.DictWriter(fh, fieldnames=extra + list(DE_TRACE_FIELDS), lineterminator="\n")
        writer.writeheader()
        for trace, label in zip(traces, labels):
            writer.writerows(de_trace_rows(trace, label))
    finally:
        if own:
            fh.close()


__all__ = [
    "DEConfig",
    "DETrace",
    "DensityState",
    "NegativeVariance",
    "PairGaussian",
    "QuadratureUnstable",
    "SinrReport",
    "belief_sinr",
    "ber_from_sinr",
    "de_step",
    "message_covariance",
    "q_function",
    "run_de",
    "sinr_bound",
    "write_de_trace",
]
