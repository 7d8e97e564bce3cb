"""Irregular multivariate time series records, files, synthetic data and batching."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .diff_engine import Tensor
from .errors import BatchError, ConfigError, ParseError, SchemaError, SplitError, ValidationError

log = logging.getLogger(__name__)

PROFILES = ("uniform", "density_shift")


@dataclass(frozen=True)
class Observation:
    t: float
    v: float

    def __post_init__(self):
        if not (math.isfinite(self.t) and math.isfinite(self.v)):
            raise ValidationError(f"non-finite observation ({self.t}, {self.v})")


@dataclass(frozen=True)
class ChannelSeries:
    observations: tuple[Observation, ...] = ()

    def __post_init__(self):
        ts = [o.t for o in self.observations]
        if any(b < a for a, b in zip(ts, ts[1:])):
            raise ValidationError("channel observations must be sorted by time")

    def __len__(self) -> int:
        return len(self.observations)

    @property
    def times(self) -> list[float]:
        return [o.t for o in self.observations]

    @property
    def values(self) -> list[float]:
        return [o.v for o in self.observations]


@dataclass(frozen=True)
class ImtsRecord:
    channels: tuple[ChannelSeries, ...]
    queries: tuple[tuple[float, ...], ...]
    targets: tuple[tuple[float, ...], ...]
    t_obs: float

    def __post_init__(self):
        n = len(self.channels)
        if len(self.queries) != n or len(self.targets) != n:
            raise SchemaError(
                f"channels/queries/targets lengths differ: {n}/{len(self.queries)}/{len(self.targets)}"
            )
        if not (math.isfinite(self.t_obs) and self.t_obs > 0):
            raise ValidationError(f"t_obs must be finite and > 0, got {self.t_obs}")
        for ch in self.channels:
            for o in ch.observations:
                if o.t < 0 or o.t > self.t_obs:
                    raise ValidationError(f"observation time {o.t} outside [0, {self.t_obs}]")
        for q, y in zip(self.queries, self.targets):
            if len(q) != len(y):
                raise SchemaError(f"{len(q)} queries but {len(y)} targets in a channel")
            if not all(math.isfinite(x) for x in (*q, *y)):
                raise ValidationError("non-finite query time or target")

    @property
    def n_channels(self) -> int:
        return len(self.channels)

    @classmethod
    def from_lists(cls, channels, queries, targets, t_obs: float = 1.0) -> "ImtsRecord":
        return cls(
            channels=tuple(
                ChannelSeries(tuple(Observation(float(t), float(v)) for t, v in ch)) for ch in channels
            ),
            queries=tuple(tuple(float(x) for x in q) for q in queries),
            targets=tuple(tuple(float(x) for x in y) for y in targets),
            t_obs=float(t_obs),
        )

    def to_json(self) -> dict:
        return {
            "t_obs": self.t_obs,
            "channels": [[[o.t, o.v] for o in ch.observations] for ch in self.channels],
            "queries": [list(q) for q in self.queries],
            "targets": [list(y) for y in self.targets],
        }


@dataclass(frozen=True)
class ValueStats:
    mean: tuple[float, ...]
    std: tuple[float, ...]

    @property
    def degenerate(self) -> tuple[int, ...]:
        return tuple(i for i, s in enumerate(self.std) if not s > 0)


@dataclass(frozen=True)
class Dataset:
    records: tuple[ImtsRecord, ...]
    n_channels: int
    value_stats: ValueStats | None = None

    def __post_init__(self):
        for i, r in enumerate(self.records):
            if r.n_channels != self.n_channels:
                raise SchemaError(f"record {i} has {r.n_channels} channels, expected {self.n_channels}")

    def __len__(self) -> int:
        return len(self.records)

    def with_stats(self, stats: ValueStats | None) -> "Dataset":
        return replace(self, value_stats=stats)


def compute_value_stats(records, n_channels: int) -> ValueStats:
    """Per-channel mean/std over observation values and targets."""
    means, stds = [], []
    for n in range(n_channels):
        vals = []
        for r in records:
            vals.extend(r.channels[n].values)
            vals.extend(r.targets[n])
        if vals:
            arr = np.asarray(vals, dtype=np.float64)
            means.append(float(arr.mean()))
            stds.append(float(arr.std()))
        else:
            means.append(0.0)
            stds.append(0.0)
    return ValueStats(tuple(means), tuple(stds))


# --- files --------------------------------------------------------------------


def _record_from_json(obj, line: int) -> ImtsRecord:
    if not isinstance(obj, dict):
        raise SchemaError("record must be a JSON object", line)
    missing = {"t_obs", "channels", "queries", "targets"} - obj.keys()
    if missing:
        raise SchemaError(f"missing keys {sorted(missing)}", line)
    try:
        return ImtsRecord.from_lists(obj["channels"], obj["queries"], obj["targets"], obj["t_obs"])
    except SchemaError as exc:
        raise SchemaError(str(exc), line) from None
    except ValidationError as exc:
        raise ValidationError(f"line {line}: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"bad record structure: {exc}", line) from None


def _reject_constant(name: str):
    raise ValueError(f"non-finite number {name}")


def load_dataset(path: str | Path) -> Dataset:
    records = []
    n_channels = None
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw, parse_constant=_reject_constant)
            except json.JSONDecodeError as exc:
                raise ParseError(lineno, exc.msg) from None
            except ValueError as exc:
                raise ValidationError(f"line {lineno}: {exc}") from None
            rec = _record_from_json(obj, lineno)
            if n_channels is None:
                n_channels = rec.n_channels
            elif rec.n_channels != n_channels:
                raise SchemaError(f"{rec.n_channels} channels, earlier records have {n_channels}", lineno)
            records.append(rec)
    return Dataset(tuple(records), n_channels or 0)


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in dataset.records:
            fh.write(json.dumps(r.to_json(), separators=(",", ":")) + "\n")


# --- synthetic data -------------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    """Sum-of-sinusoids generator with irregular, per-channel sampling.

    Each channel gets fixed frequencies; each record draws its own amplitudes
    and phases around per-channel base values, so the history carries the
    information needed to forecast.  ``density_shift`` puts ``burst_fraction``
    of each channel's samples into ``[burst_start, burst_end] * t_obs`` with
    extra noise, and leaves the following interval of the same width nearly
    empty.
    """

    n_records: int = 64
    n_channels: int = 2
    t_obs: float = 1.0
    horizon: float = 0.5
    n_sinusoids: int = 2
    freq_range: tuple[float, float] = (0.5, 2.0)
    amplitude_jitter: float = 0.2
    phase_jitter: float = 0.3
    min_obs: int = 16
    max_obs: int = 32
    n_queries: int = 4
    profile: str = "uniform"
    noise_std: float = 0.0
    burst_start: float = 0.2
    burst_end: float = 0.4
    burst_fraction: float = 0.7
    burst_noise_std: float = 0.5
    sparse_fraction: float = 0.02

    def __post_init__(self):
        if not self.n_records > 0:
            raise ConfigError(f"n_records must be > 0, got {self.n_records}")
        if not self.t_obs > 0:
            raise ConfigError(f"t_obs must be > 0, got {self.t_obs}")
        if self.n_channels < 1 or self.n_sinusoids < 1:
            raise ConfigError("n_channels and n_sinusoids must be >= 1")
        if self.profile not in PROFILES:
            raise ConfigError(f"profile must be one of {PROFILES}, got {self.profile!r}")
        if self.noise_std < 0 or self.burst_noise_std < 0:
            raise ConfigError("noise std must be >= 0")
        if not 0 <= self.min_obs <= self.max_obs:
            raise ConfigError("need 0 <= min_obs <= max_obs")
        if self.horizon <= 0 or self.n_queries < 1:
            raise ConfigError("horizon must be > 0 and n_queries >= 1")
        if not 0 <= self.burst_start < self.burst_end <= 1:
            raise ConfigError("need 0 <= burst_start < burst_end <= 1")
        if self.burst_fraction + self.sparse_fraction > 1:
            raise ConfigError("burst_fraction + sparse_fraction must be <= 1")


@dataclass(frozen=True)
class SignalBank:
    """Per-channel frequencies and base phases for the synthetic signal."""

    freqs: np.ndarray  # [N, K], cycles per t_obs
    phases: np.ndarray  # [N, K]

    def evaluate(self, t, channel: int, amps, phase_shift, t_obs: float) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)[..., None]
        w = 2.0 * np.pi * self.freqs[channel] / t_obs
        return np.sum(amps * np.sin(w * t + self.phases[channel] + phase_shift), axis=-1)


def _sample_times(rng: np.random.Generator, cfg: SynthConfig, count: int) -> np.ndarray:
    T = cfg.t_obs
    if cfg.profile == "uniform":
        return np.sort(rng.uniform(0.0, T, size=count))
    b0, b1 = cfg.burst_start * T, cfg.burst_end * T
    s0, s1 = b1, min(T, b1 + (b1 - b0))
    n_burst = int(round(cfg.burst_fraction * count))
    n_sparse = int(round(cfg.sparse_fraction * count))
    n_rest = count - n_burst - n_sparse
    rest_len = (b0 - 0.0) + (T - s1)
    u = rng.uniform(0.0, rest_len, size=n_rest)
    rest = np.where(u < b0, u, u - b0 + s1)
    times = np.concatenate(
        [rng.uniform(b0, b1, size=n_burst), rng.uniform(s0, s1, size=n_sparse), rest]
    )
    return np.sort(times)


def generate_synthetic(config: SynthConfig, seed: int) -> Dataset:
    rng = np.random.default_rng(seed)
    N, K, T = config.n_channels, config.n_sinusoids, config.t_obs
    bank = SignalBank(
        freqs=rng.uniform(*config.freq_range, size=(N, K)),
        phases=rng.uniform(0.0, 2.0 * np.pi, size=(N, K)),
    )
    b0, b1 = config.burst_start * T, config.burst_end * T
    records = []
    for _ in range(config.n_records):
        channels, queries, targets = [], [], []
        for n in range(N):
            amps = 1.0 + config.amplitude_jitter * rng.uniform(-1.0, 1.0, size=K)
            shift = config.phase_jitter * rng.uniform(-1.0, 1.0, size=K)
            count = int(rng.integers(config.min_obs, config.max_obs + 1))
            t = _sample_times(rng, config, count)
            v = bank.evaluate(t, n, amps, shift, T)
            if config.noise_std > 0:
                v = v + rng.normal(0.0, config.noise_std, size=t.shape)
            if config.profile == "density_shift" and config.burst_noise_std > 0:
                in_burst = (t >= b0) & (t <= b1)
                v = v + in_burst * rng.normal(0.0, config.burst_noise_std, size=t.shape)
            q = np.sort(rng.uniform(T, T + config.horizon, size=config.n_queries))
            channels.append(list(zip(t.tolist(), v.tolist())))
            queries.append(q.tolist())
            targets.append(bank.evaluate(q, n, amps, shift, T).tolist())
        records.append(ImtsRecord.from_lists(channels, queries, targets, T))
    return Dataset(tuple(records), N)


# --- split / normalize ------------------------------------------------------------


def split_dataset(
    dataset: Dataset, ratios: tuple[float, float, float] = (0.8, 0.1, 0.1), seed: int = 0
) -> tuple[Dataset, Dataset, Dataset]:
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise SplitError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    n = len(dataset)
    if n == 0:
        raise SplitError("cannot split an empty dataset")
    n_train = int(math.floor(ratios[0] * n + 1e-9))
    n_val = int(math.floor(ratios[1] * n + 1e-9))
    if n_train == 0:
        raise SplitError(f"{n} records leave an empty training split")
    perm = np.random.default_rng(seed).permutation(n)
    parts = (perm[:n_train], perm[n_train : n_train + n_val], perm[n_train + n_val :])
    train_recs = tuple(dataset.records[i] for i in parts[0])
    stats = compute_value_stats(train_recs, dataset.n_channels)
    return tuple(
        Dataset(tuple(dataset.records[i] for i in idx), dataset.n_channels, stats) for idx in parts
    )


def split_indices(n: int, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> tuple[list[int], list[int], list[int]]:
    """Index form of :func:`split_dataset`, for inspection and tests."""
    n_train = int(math.floor(ratios[0] * n + 1e-9))
    n_val = int(math.floor(ratios[1] * n + 1e-9))
    perm = np.random.default_rng(seed).permutation(n).tolist()
    return perm[:n_train], perm[n_train : n_train + n_val], perm[n_train + n_val :]


def normalize(dataset: Dataset) -> Dataset:
    """Z-score observation values and targets per channel using ``value_stats``.

    Timestamps are left as stored; they already live in ``[0, t_obs]``.
    """
    stats = dataset.value_stats
    if stats is None:
        raise ValidationError("normalize needs value_stats (split the dataset first)")
    std = list(stats.std)
    for n in stats.degenerate:
        log.warning("channel %d has zero std; using std=1", n)
        std[n] = 1.0
    mean = stats.mean

    def scale(r: ImtsRecord) -> ImtsRecord:
        return ImtsRecord(
            channels=tuple(
                ChannelSeries(tuple(Observation(o.t, (o.v - mean[n]) / std[n]) for o in ch.observations))
                for n, ch in enumerate(r.channels)
            ),
            queries=r.queries,
            targets=tuple(tuple((y - mean[n]) / std[n] for y in ys) for n, ys in enumerate(r.targets)),
            t_obs=r.t_obs,
        )

    return Dataset(tuple(scale(r) for r in dataset.records), dataset.n_channels, stats)


# --- batching -----------------------------------------------------------------------


@dataclass(frozen=True)
class PaddedBatch:
    times: Tensor
    values: Tensor
    obs_mask: Tensor
    query_times: Tensor
    target_values: Tensor
    query_mask: Tensor
    t_obs: float = 1.0
    size: int = field(default=0)

    def replace(self, **kw) -> "PaddedBatch":
        return replace(self, **kw)


def batch_records(records) -> PaddedBatch:
    records = list(records)
    if not records:
        raise BatchError("cannot batch an empty record list")
    N = records[0].n_channels
    if any(r.n_channels != N for r in records):
        raise BatchError("records in a batch must share n_channels")
    t_obs = records[0].t_obs
    if any(r.t_obs != t_obs for r in records):
        raise BatchError("records in a batch must share t_obs")
    B = len(records)
    L = max([len(ch) for r in records for ch in r.channels] + [1])
    Q = max([len(q) for r in records for q in r.queries] + [1])
    times = np.zeros((B, N, L))
    values = np.zeros((B, N, L))
    obs_mask = np.zeros((B, N, L))
    qt = np.zeros((B, N, Q))
    tv = np.zeros((B, N, Q))
    qm = np.zeros((B, N, Q))
    for b, r in enumerate(records):
        for n in range(N):
            ch = r.channels[n]
            k = len(ch)
            if k:
                times[b, n, :k] = ch.times
                values[b, n, :k] = ch.values
                obs_mask[b, n, :k] = 1.0
            m = len(r.queries[n])
            if m:
                qt[b, n, :m] = r.queries[n]
                tv[b, n, :m] = r.targets[n]
                qm[b, n, :m] = 1.0
    return PaddedBatch(
        Tensor(times), Tensor(values), Tensor(obs_mask), Tensor(qt), Tensor(tv), Tensor(qm), t_obs, B
    )
