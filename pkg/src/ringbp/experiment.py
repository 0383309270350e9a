"""Config-driven experiment runner.

Sweeps an SNR list over an ensemble of channels (or one fixed channel),
counting Monte-Carlo bit errors for each configured detector and, for the ring
detectors on BPSK, predicting the BER analytically with density evolution.
Every work unit is one channel; its random numbers come from a stream keyed by
``(seed, purpose, channel, snr)`` so the worker count never changes results.
"""

from __future__ import annotations

import configparser
import csv
import io
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from .channel import Alphabet, ChannelInstance, draw_channel, h_ex, load_matrix, rng_stream, snr_to_sigma2, transmit
from .density import DEConfig, belief_sinr, run_de, write_de_trace
from .detector import (
    LLR_CLAMP,
    RingSchedule,
    binary_trace,
    lmmse_detect,
    lmmse_sinr,
    ring_bp_discrete,
    ring_bp_gaussian,
)
from .linalg import CIRCULAR, EXACT, RingLinks

log = logging.getLogger(__name__)

RESULTS_SCHEMA = "ringbp-results/1"
HIST_SCHEMA = "ringbp-llr-hist/1"
THREADS_ENV = "RINGBP_THREADS"
TRIAL_CHUNK = 20_000

# stream purposes
_CHANNEL, _TRIALS, _HIST = 0, 1, 2


class ConfigError(ValueError):
    """Invalid configuration; carries the offending field and source line when known."""

    def __init__(self, message: str, field: str | None = None, line: int | None = None, source: str | None = None):
        self.field = field
        self.line = line
        self.source = source
        where = ""
        if source:
            where += source
            if line:
                where += f":{line}"
            where += ": "
        if field:
            where += f"{field}: "
        super().__init__(where + message)


class DetectorKind(str, Enum):
    RING_BP_DISCRETE = "ring_bp_discrete"
    RING_BP_BINARY = "ring_bp_binary"
    GAUSSIAN_BP = "gaussian_bp"
    LMMSE = "lmmse"

    @classmethod
    def parse(cls, text: str) -> "DetectorKind":
        key = str(getattr(text, "value", text)).replace("_", "").replace("-", "").lower()
        for kind in cls:
            if kind.value.replace("_", "") == key:
                return kind
        raise ValueError(f"unknown detector {text!r}")

    @property
    def is_ring(self) -> bool:
        return self in (DetectorKind.RING_BP_DISCRETE, DetectorKind.RING_BP_BINARY)


def parse_stats_mode(text: str) -> str:
    key = str(text).replace("_", "").replace("-", "").lower()
    if key == EXACT:
        return EXACT
    if key in (CIRCULAR, "circularsymmetry"):
        return CIRCULAR
    raise ValueError(f"unknown statistics mode {text!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    n: int = 4
    m: int = 4
    alphabet: str = "bpsk"
    snr_db: tuple = (0.0, 2.0, 4.0, 6.0, 8.0, 10.0)
    detectors: tuple = (DetectorKind.RING_BP_BINARY,)
    iterations: int = 2
    schedule: str = "parallel"
    num_channels: int = 200
    trials_per_channel: int = 5000
    seed: int = 0
    statistics_mode: str = EXACT
    de: bool = True
    target_bias: bool = True
    quadrature_nodes: int = 40
    channel_file: str | None = None
    hist_bins: int = 80
    hist_low: float = -20.0
    hist_high: float = 60.0
    hist_trials: int = 100_000
    out_dir: str = "results"

    def __post_init__(self):
        object.__setattr__(self, "snr_db", tuple(float(s) for s in self.snr_db))
        object.__setattr__(self, "detectors", tuple(DetectorKind.parse(d) for d in self.detectors))
        self.validate()

    def validate(self) -> None:
        for name in ("n", "m", "iterations", "num_channels", "quadrature_nodes", "hist_bins"):
            if getattr(self, name) < 1:
                raise ConfigError("must be >= 1", field=name)
        for name in ("trials_per_channel", "hist_trials", "seed"):
            if getattr(self, name) < 0:
                raise ConfigError("must be >= 0", field=name)
        if self.m < 2:
            raise ConfigError("ring needs at least two streams", field="m")
        if self.n < self.m:
            raise ConfigError(f"need n >= m, got n={self.n}, m={self.m}", field="n")
        if not self.snr_db:
            raise ConfigError("SNR list is empty", field="snr_db")
        if not self.detectors:
            raise ConfigError("no detector listed", field="detectors")
        if len(set(self.detectors)) != len(self.detectors):
            raise ConfigError("detector listed twice", field="detectors")
        if not self.hist_high > self.hist_low:
            raise ConfigError("histogram range is empty", field="hist_high")
        try:
            alphabet = Alphabet.from_name(self.alphabet)
        except ValueError:
            raise ConfigError(f"unknown alphabet {self.alphabet!r}", field="alphabet") from None
        if DetectorKind.RING_BP_BINARY in self.detectors and not alphabet.is_binary:
            raise ConfigError("ring_bp_binary needs the bpsk alphabet", field="detectors")
        try:
            RingSchedule(self.schedule, self.iterations)
        except ValueError as exc:
            raise ConfigError(str(exc), field="schedule") from None
        try:
            parse_stats_mode(self.statistics_mode)
        except ValueError as exc:
            raise ConfigError(str(exc), field="statistics_mode") from None

    @property
    def alphabet_obj(self) -> Alphabet:
        return Alphabet.from_name(self.alphabet)

    @property
    def ring_schedule(self) -> RingSchedule:
        return RingSchedule(self.schedule, self.iterations)

    @property
    def stats(self) -> str:
        return parse_stats_mode(self.statistics_mode)

    @property
    def de_config(self) -> DEConfig:
        return DEConfig(nodes=self.quadrature_nodes, target_bias=self.target_bias)

    @property
    def fixed_channel(self) -> bool:
        return self.channel_file is not None

    @property
    def channel_count(self) -> int:
        return 1 if self.fixed_channel else self.num_channels

    @property
    def hist_edges(self) -> np.ndarray:
        return np.linspace(self.hist_low, self.hist_high, self.hist_bins + 1)

    def with_overrides(self, **kw) -> "ExperimentConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})


PROFILES = {
    "smoke": {"num_channels": 200, "trials_per_channel": 5000},
    "paper": {"num_channels": 1600, "trials_per_channel": 5000},
}


def apply_profile(config: ExperimentConfig, profile: str | None) -> ExperimentConfig:
    if profile is None:
        return config
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}", field="profile")
    return replace(config, **PROFILES[profile])


# -- config file -------------------------------------------------------------------

_SCHEMA = {
    "experiment": {
        "n": ("n", int),
        "m": ("m", int),
        "alphabet": ("alphabet", str),
        "detector": ("detectors", "list"),
        "detectors": ("detectors", "list"),
        "iterations": ("iterations", int),
        "schedule": ("schedule", str),
        "statistics": ("statistics_mode", str),
        "statistics_mode": ("statistics_mode", str),
    },
    "ensemble": {
        "snr_db": ("snr_db", "floats"),
        "num_channels": ("num_channels", int),
        "trials_per_channel": ("trials_per_channel", int),
        "seed": ("seed", int),
        "channel_file": ("channel_file", str),
    },
    "analysis": {
        "de": ("de", bool),
        "target_bias": ("target_bias", bool),
        "quadrature_nodes": ("quadrature_nodes", int),
    },
    "histogram": {
        "bins": ("hist_bins", int),
        "low": ("hist_low", float),
        "high": ("hist_high", float),
        "trials": ("hist_trials", int),
    },
    "output": {
        "out_dir": ("out_dir", str),
    },
}

_FIELD_SOURCE = {attr: (sec, key) for sec, keys in _SCHEMA.items() for key, (attr, _) in keys.items()}


def _parse_floats(text: str) -> tuple:
    text = text.strip()
    if ":" in text:
        parts = [float(p) for p in text.split(":")]
        if len(parts) != 3 or parts[2] <= 0:
            raise ValueError("range must be start:stop:step with step > 0")
        start, stop, step = parts
        count = int(np.floor((stop - start) / step + 1e-9)) + 1
        return tuple(round(start + k * step, 12) for k in range(count))
    return tuple(float(p) for p in text.replace(",", " ").split())


def _parse_bool(text: str) -> bool:
    key = text.strip().lower()
    if key in ("1", "true", "yes", "on"):
        return True
    if key in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _key_lines(text: str) -> dict:
    """Map ``(section, key)`` to its 1-based line number."""
    lines, section = {}, None
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip().lower()
        elif line and line[0] not in "#;" and ("=" in line or ":" in line):
            sep = min(i for i in (line.find("="), line.find(":")) if i >= 0)
            lines[(section, line[:sep].strip().lower())] = no
    return lines


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        raise ConfigError(str(exc).splitlines()[0], line=line, source=source) from None
    lines = _key_lines(text)
    values: dict = {}
    for section in parser.sections():
        sec = section.lower()
        if sec not in _SCHEMA:
            raise ConfigError(f"unknown section [{section}]", source=source, line=lines.get((sec, None)))
        for key, raw in parser.items(section):
            line = lines.get((sec, key))
            if key not in _SCHEMA[sec]:
                raise ConfigError("unknown key", field=f"{sec}.{key}", line=line, source=source)
            attr, kind = _SCHEMA[sec][key]
            try:
                if kind == "list":
                    value = tuple(p for p in raw.replace(",", " ").split())
                    value = tuple(DetectorKind.parse(p) for p in value)
                elif kind == "floats":
                    value = _parse_floats(raw)
                elif kind is bool:
                    value = _parse_bool(raw)
                elif kind is str and attr == "channel_file" and raw.strip() == "":
                    value = None
                else:
                    value = kind(raw.strip())
            except ValueError as exc:
                raise ConfigError(str(exc), field=f"{sec}.{key}", line=line, source=source) from None
            values[attr] = value
    try:
        return ExperimentConfig(**values)
    except ConfigError as exc:
        sec, key = _FIELD_SOURCE.get(exc.field, (None, None))
        line = lines.get((sec, key))
        name = f"{sec}.{key}" if sec else exc.field
        raise ConfigError(str(exc).split(": ", 1)[-1], field=name, line=line, source=source) from None


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", source=str(path)) from None
    return parse_config(text, source=str(path))


def resolve_channel(config: ExperimentConfig, index: int) -> np.ndarray:
    if config.fixed_channel:
        if config.channel_file.lower() == "h_ex":
            H = h_ex()
        else:
            H = load_matrix(config.channel_file)
        if H.shape != (config.n, config.m):
            raise ConfigError(f"channel file holds a {H.shape} matrix, config says {(config.n, config.m)}",
                              field="ensemble.channel_file")
        return H
    return draw_channel(config.n, config.m, rng_stream(config.seed, _CHANNEL, index))


# -- per-channel work ----------------------------------------------------------------

@dataclass
class _Tally:
    errors: int = 0
    bits: int = 0
    ber_var: float = 0.0  # sum over channels of p(1-p) * bits
    gamma_sim: np.ndarray | None = None
    gamma: np.ndarray | None = None
    gamma_bound: np.ndarray | None = None
    seconds: float = 0.0


def _decide(kind: DetectorKind, ch: ChannelInstance, y: np.ndarray, schedule: RingSchedule, links: RingLinks):
    """Return (bit decisions, real soft output or None) for a batch of rows."""
    alphabet = ch.alphabet
    if kind is DetectorKind.RING_BP_BINARY:
        llr = binary_trace(ch, y, schedule, links=links).final
        return (llr < 0).astype(np.int8)[..., None], llr
    if kind is DetectorKind.RING_BP_DISCRETE:
        res = ring_bp_discrete(ch, y, schedule, links=links)
        bits = alphabet.bit_table[res.decisions]
        soft = None
        if alphabet.is_binary:
            with np.errstate(divide="ignore"):
                soft = np.clip(np.log(res.beliefs[..., 0]) - np.log(res.beliefs[..., 1]), -LLR_CLAMP, LLR_CLAMP)
        return bits, soft
    if kind is DetectorKind.GAUSSIAN_BP:
        mu, var = ring_bp_gaussian(ch, y, schedule, links=links)
        est = mu / (1.0 - var)
    else:
        res = lmmse_detect(ch, y)
        est = res.xhat / (1.0 - res.mmse)
    bits = alphabet.bit_table[alphabet.demap_hard(est)]
    return bits, (est.real if alphabet.is_binary else None)


def _soft_sinr(soft_sum, soft_sq, count):
    mean = soft_sum / count
    var = soft_sq / count - mean**2
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(var > 0, mean**2 / var, np.inf)


def _channel_unit(config: ExperimentConfig, index: int) -> dict:
    H = resolve_channel(config, index)
    alphabet = config.alphabet_obj
    schedule = config.ring_schedule
    mode = config.stats
    out = {}
    for s_idx, snr in enumerate(config.snr_db):
        ch = ChannelInstance(H, snr_to_sigma2(snr), alphabet)
        links = RingLinks(H, ch.sigma2, mode)
        tallies = {kind: _Tally() for kind in config.detectors}
        trials = config.trials_per_channel
        if trials > 0:
            rng = rng_stream(config.seed, _TRIALS, index, s_idx)
            sums = {k: [np.zeros(config.m), np.zeros(config.m)] for k in config.detectors}
            done = 0
            while done < trials:
                size = min(TRIAL_CHUNK, trials - done)
                obs = transmit(ch, rng, size)
                for kind in config.detectors:
                    t0 = time.perf_counter()
                    bits, soft = _decide(kind, ch, obs.y, schedule, links)
                    tally = tallies[kind]
                    tally.errors += int(np.count_nonzero(bits != obs.bits_true))
                    if soft is not None:
                        aligned = soft * obs.x_true.real
                        sums[kind][0] += aligned.sum(axis=0)
                        sums[kind][1] += (aligned**2).sum(axis=0)
                    tally.seconds += time.perf_counter() - t0
                done += size
            nbits = trials * config.m * alphabet.bits_per_symbol
            for kind, tally in tallies.items():
                tally.bits = nbits
                p = tally.errors / nbits
                tally.ber_var = p * (1.0 - p) * nbits
                if alphabet.is_binary:
                    tally.gamma_sim = _soft_sinr(*sums[kind], trials)
        if alphabet.is_binary:
            ring = [k for k in config.detectors if k.is_ring]
            if ring and config.de:
                t0 = time.perf_counter()
                report = belief_sinr(run_de(links, config.iterations, config.de_config))
                dt = time.perf_counter() - t0
                for kind in ring:
                    tallies[kind].gamma = report.gamma
                    tallies[kind].gamma_bound = report.gamma_bound
                    tallies[kind].seconds += dt / len(ring)
            linear = [k for k in config.detectors if not k.is_ring]
            if linear:
                gamma = lmmse_sinr(H, ch.sigma2, mode)
                for kind in linear:
                    tallies[kind].gamma = gamma
        for kind, tally in tallies.items():
            out[(s_idx, kind)] = tally
    return out


# -- aggregation -------------------------------------------------------------------

@dataclass
class ResultRow:
    snr_db: float
    detector: str
    ber_sim: float | None
    ber_sim_se: float | None
    ber_de: float | None
    ber_bound: float | None
    sinr_avg_db: float | None
    sinr_bound_avg_db: float | None
    sinr_sim_avg_db: float | None
    num_bits: int
    wall_time: float = field(default=0.0, compare=False)


RESULT_FIELDS = (
    "snr_db",
    "detector",
    "ber_sim",
    "ber_sim_se",
    "ber_de",
    "ber_bound",
    "sinr_avg_db",
    "sinr_bound_avg_db",
    "sinr_sim_avg_db",
    "num_bits",
)


def q_of_sqrt(gamma: np.ndarray) -> np.ndarray:
    return ndtr(-np.sqrt(gamma))


def _db(x):
    return float(10.0 * np.log10(x))


def _reduce(config: ExperimentConfig, units: list[dict]) -> list[ResultRow]:
    rows = []
    for s_idx, snr in enumerate(config.snr_db):
        for kind in config.detectors:
            parts = [u[(s_idx, kind)] for u in units]
            bits = sum(p.bits for p in parts)
            errors = sum(p.errors for p in parts)
            ber_sim = ber_se = sim_db = None
            if bits > 0:
                ber_sim = errors / bits
                ber_se = float(np.sqrt(sum(p.ber_var for p in parts))) / bits
                if parts[0].gamma_sim is not None:
                    sim_db = _db(np.mean(np.concatenate([p.gamma_sim for p in parts])))
            ber_de = ber_bound = sinr_db = bound_db = None
            if parts[0].gamma is not None:
                gamma = np.concatenate([p.gamma for p in parts])
                ber_de = float(np.mean(q_of_sqrt(gamma)))
                sinr_db = _db(np.mean(gamma))
            if parts[0].gamma_bound is not None:
                gb = np.concatenate([p.gamma_bound for p in parts])
                ber_bound = float(np.mean(q_of_sqrt(gb)))
                bound_db = _db(np.mean(gb))
            rows.append(
                ResultRow(
                    snr_db=snr,
                    detector=kind.value,
                    ber_sim=ber_sim,
                    ber_sim_se=ber_se,
                    ber_de=ber_de,
                    ber_bound=ber_bound,
                    sinr_avg_db=sinr_db,
                    sinr_bound_avg_db=bound_db,
                    sinr_sim_avg_db=sim_db,
                    num_bits=bits,
                    wall_time=sum(p.seconds for p in parts),
                )
            )
    return rows


def worker_count(requested: int | None = None, units: int | None = None) -> int:
    if requested is None:
        env = os.environ.get(THREADS_ENV)
        requested = int(env) if env else (os.cpu_count() or 1)
    requested = max(1, requested)
    return min(requested, units) if units else requested


def _map_units(config: ExperimentConfig, workers: int | None) -> list[dict]:
    count = config.channel_count
    n_workers = worker_count(workers, count)
    if n_workers == 1:
        return [_channel_unit(config, c) for c in range(count)]
    with ProcessPoolExecutor(max_workers=n_workers) as pool:
        # map preserves order, so the reduction is independent of scheduling
        return list(pool.map(_channel_unit, [config] * count, range(count), chunksize=max(1, count // (4 * n_workers))))


def run_experiment(config: ExperimentConfig, workers: int | None = None) -> list[ResultRow]:
    """Monte-Carlo and density-evolution results for every (SNR, detector) pair."""
    log.info("run start: %d channel(s), %d SNR point(s), detectors=%s",
             config.channel_count, len(config.snr_db), ",".join(k.value for k in config.detectors))
    t0 = time.perf_counter()
    units = _map_units(config, workers)
    rows = _reduce(config, units)
    log.info("run done in %.2fs", time.perf_counter() - t0)
    return rows


def compare_detectors(config: ExperimentConfig, workers: int | None = None) -> list[ResultRow]:
    """Run several detectors on shared channels and noise realizations."""
    if len(config.detectors) < 2:
        raise ConfigError("comparison needs at least two detectors", field="experiment.detectors")
    return run_experiment(config, workers)


# -- LLR histograms ------------------------------------------------------------------

@dataclass
class HistogramTable:
    node: int
    turn: int
    edges: np.ndarray
    mass: np.ndarray
    mean: float
    var: float
    trials: int

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[1:] + self.edges[:-1])

    def gaussian_mass(self, m: float, v: float) -> np.ndarray:
        """Mass of ``N(m, v)`` per bin with the tails folded into the end bins, like the histogram."""
        cdf = ndtr((self.edges[1:-1] - m) / np.sqrt(v)) if v > 0 else (self.edges[1:-1] >= m).astype(float)
        cdf = np.concatenate([[0.0], cdf, [1.0]])
        return np.diff(cdf)


def llr_histograms(
    ch: ChannelInstance,
    turns: int,
    edges: np.ndarray,
    trials: int = 100_000,
    seed: int = 0,
    schedule_mode: str = "parallel",
    links: RingLinks | None = None,
) -> dict:
    """Target-aligned forward-message histograms for every node and turn ``1..turns``.

    Each LLR is multiplied by its target bit, so the tables describe the
    message density given that bit is ``+1``. Values outside the edges are
    counted in the end bins so every table has unit mass.
    """
    if not ch.alphabet.is_binary:
        raise ValueError("LLR histograms need the bpsk alphabet")
    edges = np.asarray(edges, dtype=float)
    nb = len(edges) - 1
    M = ch.n_tx
    links = links or RingLinks(ch.H, ch.sigma2)
    schedule = RingSchedule(schedule_mode, turns)
    counts = np.zeros((turns, M, nb), dtype=np.int64)
    s1 = np.zeros((turns, M))
    s2 = np.zeros((turns, M))
    rng = rng_stream(seed, _HIST)
    done = 0
    while done < trials:
        size = min(TRIAL_CHUNK * 5, trials - done)
        obs = transmit(ch, rng, size)
        trace = binary_trace(ch, obs.y, schedule, links=links)
        sign = obs.x_true.real
        for t in range(turns):
            aligned = trace.forward[t] * sign
            s1[t] += aligned.sum(axis=0)
            s2[t] += (aligned**2).sum(axis=0)
            idx = np.clip(np.searchsorted(edges, aligned, side="right") - 1, 0, nb - 1)
            for j in range(M):
                counts[t, j] += np.bincount(idx[:, j], minlength=nb)
        done += size
    tables = {}
    for t in range(turns):
        for j in range(M):
            mean = s1[t, j] / trials
            var = s2[t, j] / trials - mean**2
            tables[(j, t + 1)] = HistogramTable(j, t + 1, edges, counts[t, j] / trials, mean, var, trials)
    return tables


def histogram_llr(ch: ChannelInstance, node: int, turn: int, bins, trials: int = 100_000, seed: int = 0,
                  schedule_mode: str = "parallel") -> HistogramTable:
    """Forward-message density table for one node after ``turn`` iterations.

    ``bins`` is either an edge array or a bin count over ``[-20, 60]``.
    """
    edges = np.linspace(-20.0, 60.0, int(bins) + 1) if np.ndim(bins) == 0 else np.asarray(bins, dtype=float)
    return llr_histograms(ch, turn, edges, trials, seed, schedule_mode)[(node, turn)]


def l1_distance(a: HistogramTable, b: HistogramTable) -> float:
    return float(np.abs(a.mass - b.mass).sum())


# -- output --------------------------------------------------------------------------

def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.10g}"
    return str(x)


def _open(path_or_buf):
    if isinstance(path_or_buf, io.TextIOBase):
        return path_or_buf, False
    try:
        return open(path_or_buf, "w", newline=""), True
    except OSError as exc:
        raise IOError(f"cannot write {path_or_buf}: {exc.strerror}") from None


def write_results(path_or_buf, rows: list[ResultRow]) -> None:
    fh, own = _open(path_or_buf)
    try:
        fh.write(f"# {RESULTS_SCHEMA}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_FIELDS)
        for row in rows:
            w.writerow([_fmt(getattr(row, f)) for f in RESULT_FIELDS])
    finally:
        if own:
            fh.close()


def write_results_json(path: str | Path, rows: list[ResultRow], config: ExperimentConfig) -> None:
    cfg = asdict(config)
    cfg["detectors"] = [k.value for k in config.detectors]
    payload = {"schema": RESULTS_SCHEMA, "config": cfg, "rows": [asdict(r) for r in rows]}
    try:
        Path(path).write_text(json.dumps(payload, indent=2) + "\n")
    except OSError as exc:
        raise IOError(f"cannot write {path}: {exc.strerror}") from None


HIST_FIELDS = ("snr_db", "node", "turn", "bin_center", "mass", "de_mass")


def write_histograms(path_or_buf, tables: dict, de_states: dict | None = None, snr_db: float | None = None) -> None:
    """``de_states`` maps ``(node, turn)`` to ``(m, v)`` for the Gaussian overlay column."""
    fh, own = _open(path_or_buf)
    try:
        fh.write(f"# {HIST_SCHEMA}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HIST_FIELDS)
        for key in sorted(tables):
            tab = tables[key]
            overlay = None
            if de_states and key in de_states:
                overlay = tab.gaussian_mass(*de_states[key])
            for b, (c, mass) in enumerate(zip(tab.centers, tab.mass)):
                w.writerow([_fmt(snr_db), tab.node, tab.turn, _fmt(c), _fmt(mass),
                            _fmt(None if overlay is None else overlay[b])])
    finally:
        if own:
            fh.close()


def de_trace_experiment(config: ExperimentConfig, out_dir: str | Path) -> dict:
    """Write ``de_trace.csv`` for every channel and SNR, plus ``llr_hist.csv`` in fixed-channel mode."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not config.alphabet_obj.is_binary:
        raise ConfigError("density evolution needs the bpsk alphabet", field="experiment.alphabet")
    traces, labels = [], []
    hist_tables = []
    for c in range(config.channel_count):
        H = resolve_channel(config, c)
        for snr in config.snr_db:
            sigma2 = snr_to_sigma2(snr)
            links = RingLinks(H, sigma2, config.stats)
            trace = run_de(links, config.iterations, config.de_config)
            traces.append(trace)
            labels.append({"snr_db": _fmt(snr), "channel": c})
            if config.fixed_channel and config.hist_trials > 0:
                ch = ChannelInstance(H, sigma2)
                tables = llr_histograms(ch, config.iterations, config.hist_edges, config.hist_trials,
                                        config.seed, config.schedule, links)
                states = {(j, t): (trace.turns[t][("forward", j)].m, trace.turns[t][("forward", j)].v)
                          for (j, t) in tables}
                hist_tables.append((snr, tables, states))
    paths = {"de_trace": out_dir / "de_trace.csv"}
    write_de_trace(paths["de_trace"], traces, labels)
    if hist_tables:
        paths["llr_hist"] = out_dir / "llr_hist.csv"
        buf = io.StringIO()
        for k, (snr, tables, states) in enumerate(hist_tables):
            part = io.StringIO()
            write_histograms(part, tables, states, snr)
            text = part.getvalue()
            if k > 0:
                # keep a single schema line and header
                text = text.split("\n", 2)[2]
            buf.write(text)
        paths["llr_hist"].write_text(buf.getvalue())
    return paths
