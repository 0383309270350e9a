"""Independent oracles for the limits of the ring recursions.

``perron_limit`` runs power iteration on the one-turn translation operator,
whose positive eigenvector is the limit of the discrete message recursion.
``binary_fixed_point`` iterates the composed one-turn scalar map of the
binary LLR recursion.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable, Mapping

import numpy as np

from .channel import ChannelInstance
from .detector import BinaryLinkTerms, _scaled_translation, ring_links, zeta
from .linalg import RingLinks

DEFAULT_TOL = 1e-10
MAX_ITER = 100_000


class NoConvergence(RuntimeError):
    pass


class Direction(str, Enum):
    FORWARD = "forward"
    BACKWARD = "backward"


@dataclass(frozen=True)
class TurnOperator:
    j: int
    direction: Direction
    matrix: np.ndarray


@dataclass
class FixedPointReport:
    limit: np.ndarray | float
    iterations_to_tol: int
    spectral_gap: float = float("nan")
    eigenvalue: float = float("nan")
    degenerate: bool = False
    monotone: bool = True
    gaps: np.ndarray | None = None


def translation_set(ch: ChannelInstance, y: np.ndarray, links: RingLinks | None = None) -> dict:
    """Scaled translation matrices ``A_{j|i}`` for every ring link, keyed by ``(j, i)``."""
    links = ring_links(ch, links)
    return {(lk.j, lk.i): _scaled_translation(lk, y, ch.alphabet.symbols) for lk in links}


def turn_operator(translations: Mapping[tuple[int, int], np.ndarray], j: int, direction: Direction | str) -> TurnOperator:
    """Ordered product of the translation matrices for one full turn ending at ``j``.

    Forward: ``A_{j|j-1} A_{j-1|j-2} ... A_{j+1|j}``.
    Backward: ``A_{j|j+1} A_{j+1|j+2} ... A_{j-1|j}``.
    """
    direction = Direction(getattr(direction, "value", direction))
    M = 1 + max(k for k, _ in translations)
    step = -1 if direction is Direction.FORWARD else 1
    Q = next(iter(translations.values())).shape[0]
    F = np.eye(Q)
    for k in range(M):
        node = (j + step * k) % M
        F = F @ translations[(node, (node + step) % M)]
    return TurnOperator(j, direction, F)


def _fit_rate(residuals: np.ndarray) -> float:
    tail = residuals[-20:]
    tail = tail[tail > 0]
    if len(tail) < 3:
        return float("nan")
    k = np.arange(len(tail))
    slope = np.polyfit(k, np.log(tail), 1)[0]
    return float(np.exp(slope))


def perron_limit(
    op: TurnOperator | np.ndarray,
    tol: float = DEFAULT_TOL,
    max_iter: int = MAX_ITER,
    start: np.ndarray | None = None,
) -> FixedPointReport:
    """Power iteration from ``start`` (uniform by default) until L1 steps fall below ``tol``."""
    F = op.matrix if isinstance(op, TurnOperator) else np.asarray(op, dtype=float)
    Q = F.shape[0]
    v = np.full(Q, 1.0 / Q) if start is None else np.asarray(start, dtype=float) / np.sum(start)
    residuals = []
    for it in range(1, max_iter + 1):
        u = F @ v
        lam = u.sum()
        u = u / lam
        r = float(np.abs(u - v).sum())
        residuals.append(r)
        v = u
        if r < tol:
            residuals = np.array(residuals)
            gap = _fit_rate(residuals)
            return FixedPointReport(
                limit=v,
                iterations_to_tol=it,
                spectral_gap=gap,
                eigenvalue=float(lam),
                degenerate=bool(np.isnan(gap)),
            )
    raise NoConvergence(f"power iteration did not reach tol={tol} in {max_iter} steps")


def binary_turn_map(
    ch: ChannelInstance,
    y: np.ndarray,
    j: int,
    direction: Direction | str = Direction.FORWARD,
    links: RingLinks | None = None,
) -> Callable[[float], float]:
    """One complete turn of the scalar recursion, mapping the message into ``j`` to its next value."""
    direction = Direction(getattr(direction, "value", direction))
    links = ring_links(ch, links)
    M = ch.n_tx
    step = 1 if direction is Direction.FORWARD else -1
    hops = []
    for k in range(1, M + 1):
        node = (j + step * k) % M
        link = links.forward(node) if direction is Direction.FORWARD else links.backward(node)
        hops.append(BinaryLinkTerms.from_link(link, y))

    def g(l):
        for t in hops:
            l = 4.0 * t.y_real - zeta(l + 2.0 * t.d, t.c)
        return float(l)

    return g


def binary_fixed_point(
    g: Callable[[float], float],
    tol: float = DEFAULT_TOL,
    start: float = 0.0,
    max_iter: int = MAX_ITER,
) -> FixedPointReport:
    """Iterate ``x <- g(x)`` until successive iterates differ by less than ``tol``.

    ``monotone`` records whether the iterate gaps decreased strictly, ignoring
    gaps already at rounding level.
    """
    x = float(start)
    gaps = []
    for it in range(1, max_iter + 1):
        x_new = g(x)
        gaps.append(abs(x_new - x))
        x = x_new
        if gaps[-1] < tol:
            gaps = np.array(gaps)
            floor = 64 * np.finfo(float).eps * max(1.0, abs(x))
            live = gaps[gaps > floor]
            monotone = bool(np.all(np.diff(live) < 0)) if len(live) > 1 else True
            return FixedPointReport(limit=x, iterations_to_tol=it, monotone=monotone, gaps=gaps)
    raise NoConvergence(f"fixed-point iteration did not reach tol={tol} in {max_iter} steps")
