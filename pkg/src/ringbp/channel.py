"""Channel ensembles, alphabets and the ``y = Hx + n`` link model."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np


class AlphabetName(str, Enum):
    BPSK = "bpsk"
    QPSK = "qpsk"
    QAM16 = "qam16"


def _pam_gray(levels: int) -> np.ndarray:
    # Gray-labelled PAM: amplitude of label b is points[b].
    amps = np.arange(-(levels - 1), levels, 2, dtype=float)
    gray = np.array([k ^ (k >> 1) for k in range(levels)])
    points = np.empty(levels)
    points[gray] = amps
    return points


@dataclass(frozen=True)
class Alphabet:
    """Unit-energy constellation; symbol ``k`` carries the bits of ``k`` (MSB first)."""

    name: AlphabetName
    symbols: np.ndarray

    @property
    def bits_per_symbol(self) -> int:
        return int(np.log2(len(self.symbols)))

    @property
    def size(self) -> int:
        return len(self.symbols)

    @property
    def is_binary(self) -> bool:
        return self.name is AlphabetName.BPSK

    @cached_property
    def bit_table(self) -> np.ndarray:
        m = self.bits_per_symbol
        idx = np.arange(self.size)
        return ((idx[:, None] >> np.arange(m - 1, -1, -1)) & 1).astype(np.int8)

    def bits_to_indices(self, bits: np.ndarray) -> np.ndarray:
        weights = 1 << np.arange(self.bits_per_symbol - 1, -1, -1)
        return np.asarray(bits) @ weights

    def demap_hard(self, symbols: np.ndarray) -> np.ndarray:
        """Nearest-symbol indices."""
        d = np.abs(np.asarray(symbols)[..., None] - self.symbols) ** 2
        return np.argmin(d, axis=-1)

    @classmethod
    def from_name(cls, name: str | AlphabetName) -> "Alphabet":
        name = AlphabetName(str(getattr(name, "value", name)).lower())
        if name is AlphabetName.BPSK:
            # bit 0 -> +1, bit 1 -> -1
            symbols = np.array([1.0, -1.0], dtype=complex)
        elif name is AlphabetName.QPSK:
            axis = np.array([1.0, -1.0])
            symbols = (axis[:, None] + 1j * axis[None, :]).ravel() / np.sqrt(2.0)
        else:
            axis = _pam_gray(4)
            symbols = (axis[:, None] + 1j * axis[None, :]).ravel() / np.sqrt(10.0)
        return cls(name, symbols)


BPSK = Alphabet.from_name("bpsk")
QPSK = Alphabet.from_name("qpsk")
QAM16 = Alphabet.from_name("qam16")


@dataclass(frozen=True)
class ChannelInstance:
    H: np.ndarray
    sigma2: float
    alphabet: Alphabet = BPSK
    seed: int | None = None

    def __post_init__(self):
        H = np.asarray(self.H, dtype=complex)
        object.__setattr__(self, "H", H)
        if H.ndim != 2 or H.shape[0] < H.shape[1]:
            raise ValueError(f"channel must be N x M with N >= M, got {H.shape}")
        if not self.sigma2 > 0:
            raise ValueError("noise power must be positive")

    @property
    def n_rx(self) -> int:
        return self.H.shape[0]

    @property
    def n_tx(self) -> int:
        return self.H.shape[1]


@dataclass(frozen=True)
class Observation:
    """One or more received vectors (rows of ``y``) with the transmitted truth."""

    y: np.ndarray
    x_true: np.ndarray
    indices: np.ndarray
    bits_true: np.ndarray


def rng_stream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator addressed by ``(seed, *key)``.

    Streams for different keys never overlap, so work units can run in any
    order or on any worker and still draw the same numbers.
    """
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in key)))


def snr_to_sigma2(snr_db: float) -> float:
    return float(10.0 ** (-snr_db / 10.0))


def draw_channel(n: int, m: int, rng: np.random.Generator, entry_variance: float | None = None) -> np.ndarray:
    """I.i.d. circularly-symmetric complex Gaussian ``n x m`` matrix.

    The default entry variance ``1/n`` gives columns of unit expected energy,
    so ``1/sigma2`` is the per-stream receive SNR.
    """
    if n < m:
        raise ValueError("need n >= m")
    var = 1.0 / n if entry_variance is None else entry_variance
    scale = np.sqrt(var / 2.0)
    return scale * (rng.standard_normal((n, m)) + 1j * rng.standard_normal((n, m)))


def transmit(ch: ChannelInstance, rng: np.random.Generator, size: int | None = None) -> Observation:
    """Draw uniform symbols and CN(0, sigma2) noise; ``size`` rows if given."""
    shape = (ch.n_tx,) if size is None else (size, ch.n_tx)
    alphabet = ch.alphabet
    bits = rng.integers(0, 2, size=shape + (alphabet.bits_per_symbol,), dtype=np.int8)
    idx = alphabet.bits_to_indices(bits)
    x = alphabet.symbols[idx]
    nshape = shape[:-1] + (ch.n_rx,)
    n = np.sqrt(ch.sigma2 / 2.0) * (rng.standard_normal(nshape) + 1j * rng.standard_normal(nshape))
    y = x @ ch.H.T + n
    return Observation(y=y, x_true=x, indices=idx, bits_true=bits)


# -- text matrix format -------------------------------------------------------

def format_complex(z: complex) -> str:
    return f"{z.real:.17g}{z.imag:+.17g}i"


def parse_complex(token: str) -> complex:
    token = token.strip().replace("i", "j")
    if token.endswith("j") and token[:-1] in ("", "+", "-"):
        token = token[:-1] + "1j"
    return complex(token)


def dumps_matrix(H: np.ndarray) -> str:
    return "\n".join(" ".join(format_complex(z) for z in row) for row in np.asarray(H)) + "\n"


def loads_matrix(text: str) -> np.ndarray:
    rows = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            rows.append([parse_complex(t) for t in line.split()])
    if not rows or len({len(r) for r in rows}) != 1:
        raise ValueError("matrix text must have equal-length, non-empty rows")
    return np.array(rows, dtype=complex)


def save_matrix(path: str | Path, H: np.ndarray) -> None:
    Path(path).write_text(dumps_matrix(H))


def load_matrix(path: str | Path) -> np.ndarray:
    return loads_matrix(Path(path).read_text())


def h_ex() -> np.ndarray:
    """The rounded 4x4 example channel used for the density-evolution fixture."""
    text = resources.files("ringbp").joinpath("data/h_ex.txt").read_text()
    return loads_matrix(text)
