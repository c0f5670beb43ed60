"""Series loading, synthetic generation, chronological splits and windowing."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)

INSTANCE_EPS = 1e-5
STD_FLOOR = 1e-8


@dataclass(frozen=True)
class SeriesTable:
    name: str
    timestamps: list
    values: np.ndarray  # [timesteps, M]
    channel_names: list

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise DataError(f"values must be [timesteps, channels], got shape {values.shape}")
        if values.shape[0] < 2 or values.shape[1] < 1:
            raise DataError(f"need at least 2 timesteps and 1 channel, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise DataError("series contains missing or non-finite values")
        if len(self.channel_names) != values.shape[1]:
            raise DataError("channel_names length does not match the number of columns")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def n_steps(self):
        return self.values.shape[0]

    @property
    def n_channels(self):
        return self.values.shape[1]

    def with_values(self, values, name=None):
        return SeriesTable(name or self.name, self.timestamps, values, self.channel_names)

    def select_channels(self, names):
        idx = [self.channel_names.index(n) for n in names]
        return SeriesTable(self.name, self.timestamps, self.values[:, idx], list(names))


def load_csv(path) -> SeriesTable:
    """Read a CSV whose first column is an opaque timestamp and the rest numeric channels."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: file not found")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if len(header) < 2:
            raise DataError(f"{path}: need a timestamp column and at least one channel")
        stamps, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: row {lineno} has {len(row)} cells, expected {len(header)}")
            stamps.append(row[0])
            parsed = []
            for col, cell in enumerate(row[1:], start=1):
                cell = cell.strip()
                if cell == "":
                    raise DataError(f"{path}: missing value at row {lineno}, column {col} ({header[col]})")
                try:
                    parsed.append(float(cell))
                except ValueError:
                    raise DataError(
                        f"{path}: non-numeric value {cell!r} at row {lineno}, column {col} ({header[col]})"
                    ) from None
            rows.append(parsed)
    if len(rows) < 2:
        raise DataError(f"{path}: need at least 2 data rows, got {len(rows)}")
    values = np.array(rows, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        bad = np.argwhere(~np.isfinite(values))[0]
        raise DataError(f"{path}: non-finite value at row {bad[0] + 2}, column {bad[1] + 1}")
    return SeriesTable(path.stem, stamps, values, header[1:])


def write_csv(table: SeriesTable, path, header0="date"):
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([header0, *table.channel_names])
        for stamp, row in zip(table.timestamps, table.values):
            w.writerow([stamp, *(repr(float(v)) for v in row)])


# -- splits ----------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    """Fractions of the series per role, or explicit ``(train_end, val_end, test_end)`` indices."""

    train_fraction: float = 0.7
    val_fraction: float = 0.1
    test_fraction: float = 0.2
    boundaries: tuple | None = None

    def __post_init__(self):
        if self.boundaries is None:
            fr = (self.train_fraction, self.val_fraction, self.test_fraction)
            if min(fr) <= 0 or abs(sum(fr) - 1.0) > 1e-9:
                raise ConfigError(f"split fractions {fr} must be positive and sum to 1")
        elif len(self.boundaries) != 3 or list(self.boundaries) != sorted(set(self.boundaries)):
            raise ConfigError(f"split boundaries {self.boundaries} must be three increasing indices")

    @classmethod
    def ett_hourly(cls):
        # 12/4/4 months of 30 days
        h = 30 * 24
        return cls(boundaries=(12 * h, 16 * h, 20 * h))

    @classmethod
    def ett_minutely(cls):
        q = 30 * 24 * 4
        return cls(boundaries=(12 * q, 16 * q, 20 * q))


@dataclass(frozen=True)
class Split:
    train: tuple
    val: tuple
    test: tuple


def chrono_split(n_steps: int, spec: SplitSpec, L: int, T: int = 1) -> Split:
    """Chronological train/val/test ranges (half-open).

    The val and test ranges start ``L`` steps early so their first window has
    a full look-back; their horizons stay inside the role's own span.
    """
    if spec.boundaries is not None:
        train_end, val_end, test_end = (int(b) for b in spec.boundaries)
        if not 0 < train_end < val_end < test_end:
            raise ConfigError(f"split boundaries must be increasing and positive, got {spec.boundaries}")
        if test_end > n_steps:
            raise ConfigError(f"split boundary {test_end} exceeds series length {n_steps}")
    else:
        fr = (spec.train_fraction, spec.val_fraction, spec.test_fraction)
        if any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must be non-negative and sum to 1, got {fr}")
        train_end = math.floor(spec.train_fraction * n_steps + 1e-9)
        val_end = train_end + math.floor(spec.val_fraction * n_steps + 1e-9)
        test_end = n_steps
    split = Split((0, train_end), (train_end - L, val_end), (val_end - L, test_end))
    for role in ("train", "val", "test"):
        lo, hi = getattr(split, role)
        if lo < 0:
            raise ConfigError(f"{role} split starts before the series (look-back {L} too long)")
        if hi - lo < L + T:
            raise ConfigError(f"{role} split has {hi - lo} steps, fewer than L+T={L + T}")
    return split


# -- global standardisation ------------------------------------------------

@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, values):
        return (np.asarray(values) - self.mean) / self.std

    def invert(self, values):
        return np.asarray(values) * self.std + self.mean


def fit_standardizer(values, train_range) -> Standardizer:
    lo, hi = train_range
    rows = np.asarray(values)[lo:hi]
    return Standardizer(rows.mean(axis=0), np.maximum(rows.std(axis=0), STD_FLOOR))


def apply_standardizer(table: SeriesTable, stats: Standardizer) -> SeriesTable:
    return table.with_values(stats.apply(table.values))


# -- windows ---------------------------------------------------------------

@dataclass(frozen=True)
class WindowSample:
    x: np.ndarray  # [M, L]
    y: np.ndarray  # [M, T]
    inst_mean: np.ndarray | None = None
    inst_std: np.ndarray | None = None


def window_count(range_len, L, T, stride=1):
    if range_len < L + T:
        return 0
    return (range_len - L - T) // stride + 1


@dataclass
class WindowSet:
    """Lazy sequence of (look-back, horizon) windows over ``values[lo:hi]``."""

    values: np.ndarray  # [timesteps, M]
    lo: int
    hi: int
    L: int
    T: int
    stride: int = 1
    starts: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.starts is None:
            n = window_count(self.hi - self.lo, self.L, self.T, self.stride)
            self.starts = self.lo + self.stride * np.arange(n, dtype=np.int64)

    def __len__(self):
        return len(self.starts)

    def __getitem__(self, i) -> WindowSample:
        s = int(self.starts[i])
        x = self.values[s:s + self.L].T.copy()
        y = self.values[s + self.L:s + self.L + self.T].T.copy()
        return WindowSample(x, y)

    def batch(self, idx):
        """Arrays ``x [B, M, L]`` and ``y [B, M, T]`` for window positions ``idx``."""
        s = self.starts[np.asarray(idx, dtype=np.int64)]
        xi = s[:, None] + np.arange(self.L)[None, :]
        yi = s[:, None] + self.L + np.arange(self.T)[None, :]
        return (np.ascontiguousarray(self.values[xi].transpose(0, 2, 1)),
                np.ascontiguousarray(self.values[yi].transpose(0, 2, 1)))

    def all(self):
        return self.batch(np.arange(len(self)))

    def subset(self, idx) -> "WindowSet":
        """Windows at positions ``idx`` (in that order)."""
        return WindowSet(self.values, self.lo, self.hi, self.L, self.T, self.stride,
                         self.starts[np.asarray(idx, dtype=np.int64)])

    def latest_fraction(self, fraction: float) -> "WindowSet":
        """Keep only the most recent ``fraction`` of windows (drops the oldest)."""
        if not 0.0 <= fraction <= 1.0:
            raise ConfigError(f"train fraction must lie in [0, 1], got {fraction}")
        keep = int(round(fraction * len(self)))
        return WindowSet(self.values, self.lo, self.hi, self.L, self.T, self.stride,
                         self.starts[len(self) - keep:])


def make_windows(values, role_range, L, T, stride=1, allow_empty=False) -> WindowSet:
    if L < 1 or T < 1 or stride < 1:
        raise ConfigError(f"L, T and stride must be positive, got L={L}, T={T}, stride={stride}")
    values = values.values if isinstance(values, SeriesTable) else np.asarray(values, dtype=np.float64)
    lo, hi = role_range
    if hi - lo < L + T:
        if not allow_empty:
            raise DataError(f"range [{lo}, {hi}) is shorter than L+T={L + T}")
        logger.warning("range [%d, %d) shorter than L+T=%d; no windows", lo, hi, L + T)
    return WindowSet(values, lo, hi, L, T, stride)


# -- instance normalisation -------------------------------------------------

def instance_normalize(x, eps=INSTANCE_EPS):
    """Per-channel zero mean / unit std over the last axis (population std)."""
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=-1)
    std = x.std(axis=-1)
    return (x - mean[..., None]) / (std[..., None] + eps), mean, std


def instance_denormalize(y, mean, std, eps=INSTANCE_EPS):
    return np.asarray(y) * (np.asarray(std)[..., None] + eps) + np.asarray(mean)[..., None]


# -- synthetic data ---------------------------------------------------------

@dataclass(frozen=True)
class ChannelSpec:
    sinusoids: tuple = ((24.0, 1.0, 0.0),)  # (period, amplitude, phase)
    trend: float = 0.0
    sigma: float = 0.1

    def __post_init__(self):
        if any(p <= 0 for p, _, _ in self.sinusoids):
            raise ConfigError("sinusoid periods must be positive")
        if self.sigma < 0:
            raise ConfigError("noise sigma must be non-negative")


@dataclass(frozen=True)
class SynthSpec:
    channels: tuple
    timesteps: int = 2000
    seed: int = 2021
    coupling: float = 0.0
    name: str = "synthetic"

    def __post_init__(self):
        if not 0.0 <= self.coupling <= 1.0:
            raise ConfigError(f"coupling must lie in [0, 1], got {self.coupling}")
        if self.timesteps < 2 or not self.channels:
            raise ConfigError("need at least 2 timesteps and one channel")

    @property
    def M(self):
        return len(self.channels)

    @classmethod
    def random(cls, M, timesteps, seed, periods=(24.0, 168.0), sigma=0.1,
               trend=0.0, coupling=0.0, name="synthetic"):
        """Channels sharing ``periods`` with seeded random amplitudes and phases."""
        rng = np.random.default_rng([seed, 7])
        chans = []
        for _ in range(M):
            amps = rng.uniform(0.5, 1.5, size=len(periods))
            phases = rng.uniform(0.0, 2 * np.pi, size=len(periods))
            sins = tuple((float(p), float(a), float(ph)) for p, a, ph in zip(periods, amps, phases))
            chans.append(ChannelSpec(sins, trend, sigma))
        return cls(tuple(chans), timesteps, seed, coupling, name)


def synth_generate(spec: SynthSpec) -> SeriesTable:
    """value(t) = trend*t + sum a*sin(2*pi*t/period + phase) + coupling*shared(t) + noise."""
    rng = np.random.default_rng(spec.seed)
    t = np.arange(spec.timesteps, dtype=np.float64)
    # shared component: unit-variance AR(1), phi=0.9
    innov = rng.standard_normal(spec.timesteps) * math.sqrt(1 - 0.81)
    shared = np.empty(spec.timesteps)
    shared[0] = rng.standard_normal()
    for i in range(1, spec.timesteps):
        shared[i] = 0.9 * shared[i - 1] + innov[i]
    cols = []
    for ch in spec.channels:
        v = ch.trend * t
        for period, amp, phase in ch.sinusoids:
            v = v + amp * np.sin(2 * np.pi * t / period + phase)
        if spec.coupling:
            v = v + spec.coupling * shared
        cols.append(v + ch.sigma * rng.standard_normal(spec.timesteps))
    stamps = [str(i) for i in range(spec.timesteps)]
    names = [f"ch{i}" for i in range(spec.M)]
    return SeriesTable(spec.name, stamps, np.stack(cols, axis=1), names)


# -- assembled dataset ------------------------------------------------------

@dataclass
class ForecastData:
    """Standardised series plus train/val/test window sets for one (L, T)."""

    table: SeriesTable
    split: Split
    scaler: Standardizer | None
    train: WindowSet
    val: WindowSet
    test: WindowSet

    @property
    def n_channels(self):
        return self.table.n_channels


def prepare_data(table: SeriesTable, L: int, T: int, split_spec: SplitSpec = SplitSpec(),
                 standardize: bool = True, train_fraction: float = 1.0, stride: int = 1) -> ForecastData:
    split = chrono_split(table.n_steps, split_spec, L, T)
    scaler = fit_standardizer(table.values, split.train) if standardize else None
    scaled = apply_standardizer(table, scaler) if scaler else table
    train = make_windows(scaled, split.train, L, T, stride)
    if train_fraction < 1.0:
        train = train.latest_fraction(train_fraction)
    return ForecastData(
        scaled, split, scaler, train,
        make_windows(scaled, split.val, L, T, stride),
        make_windows(scaled, split.test, L, T, stride),
    )
