"""Complex linear algebra and conditional-MMSE truncation of a MIMO channel.

A truncated link ``(j | i)`` projects the received vector onto
``w = K_{j,i}^{-1} h_j`` so that only streams ``j`` and ``i`` remain as signal
terms; every other stream is folded into the residual noise ``n_{j|i}``.

Stream indices are zero-based throughout the package.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np
from scipy.linalg import solve_triangular

EXACT = "exact"
CIRCULAR = "circular"
STATS_MODES = (EXACT, CIRCULAR)


class NotPositiveDefinite(np.linalg.LinAlgError):
    """Raised when a Cholesky factorization meets a non-positive pivot."""


def hermitian_solve(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``A x = b`` for Hermitian positive-definite ``A`` via Cholesky."""
    A = np.asarray(A, dtype=complex)
    b = np.asarray(b, dtype=complex)
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
        raise ValueError("non-finite entries")
    if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] != b.shape[0]:
        raise ValueError(f"shape mismatch: A {A.shape}, b {b.shape}")
    try:
        lower = np.linalg.cholesky(A)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None
    z = solve_triangular(lower, b, lower=True, check_finite=False)
    return solve_triangular(lower.conj().T, z, lower=False, check_finite=False)


def build_k_matrix(H: np.ndarray, sigma2: float, excluded: Iterable[int] = ()) -> np.ndarray:
    """Return ``sigma2 * I + sum_{k not in excluded} h_k h_k^H``."""
    H = np.asarray(H, dtype=complex)
    excluded = set(excluded)
    keep = [k for k in range(H.shape[1]) if k not in excluded]
    Hk = H[:, keep]
    K = sigma2 * np.eye(H.shape[0], dtype=complex) + Hk @ Hk.conj().T
    return 0.5 * (K + K.conj().T)


@dataclass(frozen=True)
class TruncatedLink:
    """Conditional-MMSE truncation of stream ``j`` given neighbour ``i``.

    ``gains`` holds ``w^H h_k`` for every column ``k``; entries ``j`` and ``i``
    are the signal coefficients, the rest are residual interference.
    ``var_r``/``var_i``/``cov_ri`` are the second-order statistics of the real
    and imaginary parts of ``n_{j|i}``.
    """

    j: int
    i: int
    w: np.ndarray
    gains: np.ndarray
    sigma2: float
    var_r: float
    var_i: float
    cov_ri: float
    noise_power: float
    mode: str = EXACT

    @property
    def a_jj(self) -> complex:
        return complex(self.gains[self.j])

    @property
    def a_ji(self) -> complex:
        return complex(self.gains[self.i])

    @property
    def interferers(self) -> list[int]:
        return [k for k in range(len(self.gains)) if k not in (self.j, self.i)]

    def project(self, y: np.ndarray) -> np.ndarray:
        """Truncated observation ``y_{j|i} = w^H y`` (works on batches of rows)."""
        return np.asarray(y) @ self.w.conj()


def _residual_moments(gains: np.ndarray, interferers: list[int], w: np.ndarray, sigma2: float):
    # Interferers are antipodal real symbols with unit power; noise is CN(0, sigma2 I).
    g = gains[interferers]
    noise = 0.5 * sigma2 * float(np.vdot(w, w).real)
    var_r = float(np.sum(g.real**2)) + noise
    var_i = float(np.sum(g.imag**2)) + noise
    cov_ri = float(np.sum(g.real * g.imag))
    return var_r, var_i, cov_ri


def build_truncated_link(H: np.ndarray, sigma2: float, j: int, i: int, mode: str = EXACT) -> TruncatedLink:
    """Build the truncated link ``(j | i)``.

    In ``exact`` mode the residual real/imaginary moments are evaluated for
    binary (real antipodal) interferers; ``circular`` mode uses the
    circular-symmetry shortcut ``var_r = var_i = sigma2_{j|i} / 2``.
    """
    if mode not in STATS_MODES:
        raise ValueError(f"unknown statistics mode {mode!r}")
    H = np.asarray(H, dtype=complex)
    M = H.shape[1]
    if j == i or not (0 <= j < M and 0 <= i < M):
        raise ValueError(f"invalid link ({j}|{i}) for M={M}")
    K = build_k_matrix(H, sigma2, (j, i))
    w = hermitian_solve(K, H[:, j])
    gains = w.conj() @ H
    s2 = float(gains[j].real)
    others = [k for k in range(M) if k not in (j, i)]
    if mode == EXACT:
        var_r, var_i, cov_ri = _residual_moments(gains, others, w, sigma2)
    else:
        var_r = var_i = 0.5 * s2
        cov_ri = 0.0
    return TruncatedLink(j, i, w, gains, s2, var_r, var_i, cov_ri, sigma2, mode)


def real_cross_covariance(first: TruncatedLink, second: TruncatedLink, H: np.ndarray | None = None) -> float:
    """``E[Re(n_first) Re(n_second)]`` over the interferers the two links share.

    Exact mode sums over shared binary interferers plus the common noise;
    circular mode returns ``0.5 * Re(w1^H K_shared w2)``.
    """
    shared = [k for k in first.interferers if k in second.interferers]
    sigma2 = first.noise_power
    if first.mode == CIRCULAR:
        if H is None:
            raise ValueError("circular-mode cross covariance needs the channel matrix")
        excluded = [k for k in range(H.shape[1]) if k not in shared]
        K = build_k_matrix(H, sigma2, excluded)
        return 0.5 * float(np.real(first.w.conj() @ K @ second.w))
    g1 = first.gains[shared]
    g2 = second.gains[shared]
    noise = 0.5 * sigma2 * float(np.vdot(first.w, second.w).real)
    return float(np.sum(g1.real * g2.real)) + noise


class RingLinks:
    """All ring-adjacent truncated links ``(j | j-1)`` and ``(j | j+1)`` of a channel."""

    def __init__(self, H: np.ndarray, sigma2: float, mode: str = EXACT):
        self.H = np.asarray(H, dtype=complex)
        self.sigma2 = float(sigma2)
        self.mode = mode
        self.M = self.H.shape[1]
        if self.M < 2:
            raise ValueError("ring needs at least two streams")
        self._links: dict[tuple[int, int], TruncatedLink] = {}
        for j in range(self.M):
            for i in {(j - 1) % self.M, (j + 1) % self.M}:
                self._links[(j, i)] = build_truncated_link(self.H, self.sigma2, j, i, mode)

    def __getitem__(self, key: tuple[int, int]) -> TruncatedLink:
        return self._links[key]

    def __iter__(self):
        return iter(self._links.values())

    def forward(self, j: int) -> TruncatedLink:
        """Link feeding the forward message ``j-1 -> j``."""
        return self._links[(j, (j - 1) % self.M)]

    def backward(self, j: int) -> TruncatedLink:
        """Link feeding the backward message ``j+1 -> j``."""
        return self._links[(j, (j + 1) % self.M)]
