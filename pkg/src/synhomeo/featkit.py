"""Channel-wise EEG feature extraction.

Each channel yields 16 numbers split into three blocks:

* time (6): mean, variance, kurtosis, skewness, Hjorth mobility, Hjorth complexity
* frequency (5): Hann-windowed periodogram power in the delta, theta, alpha,
  beta and gamma bands
* time-frequency (5): relative energy of the db4 4-level DWT subbands
  ``[A4, D4, D3, D2, D1]``

A subject is summarised by averaging the per-epoch features, and subjects are
z-scored against a frozen cohort (see :func:`normalize_cohort`).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import pywt

N_TIME = 6
N_FREQ = 5
N_TF = 5
N_PER_CHANNEL = N_TIME + N_FREQ + N_TF

BANDS = (
    ("delta", 0.5, 4.0),
    ("theta", 4.0, 8.0),
    ("alpha", 8.0, 13.0),
    ("beta", 13.0, 30.0),
    ("gamma", 30.0, 45.0),
)

DWT_WAVELET = "db4"
DWT_LEVEL = 4
DWT_MODE = "symmetric"
MIN_DWT_LENGTH = 16
MIN_PSD_LENGTH = 64

# relative variance below which a signal is treated as constant
_DEGENERATE_RTOL = 1e-20


@dataclass(frozen=True)
class Epoch:
    """One multi-channel recording window, ``samples`` is ``[n_channels, n_samples]``."""

    samples: np.ndarray
    sample_rate: float

    def __post_init__(self):
        arr = np.asarray(self.samples, dtype=float)
        if arr.ndim != 2:
            raise ValueError(f"epoch must be 2-D [channels, samples], got shape {arr.shape}")
        if arr.shape[0] < 1:
            raise ValueError("epoch needs at least one channel")
        if arr.shape[1] < MIN_DWT_LENGTH:
            raise ValueError(f"epoch needs at least {MIN_DWT_LENGTH} samples, got {arr.shape[1]}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("epoch contains non-finite samples")
        if not self.sample_rate > 0:
            raise ValueError("sample_rate must be positive")
        object.__setattr__(self, "samples", arr)

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]


@dataclass(frozen=True)
class FeatureVector:
    """Subject- or epoch-level feature, blocks stored channel-major."""

    time_block: np.ndarray
    freq_block: np.ndarray
    tf_block: np.ndarray
    n_channels: int

    def __post_init__(self):
        for name, per in (("time_block", N_TIME), ("freq_block", N_FREQ), ("tf_block", N_TF)):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (per * self.n_channels,):
                raise ValueError(
                    f"{name} must have length {per * self.n_channels}, got {arr.shape}"
                )
            object.__setattr__(self, name, arr)

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.time_block, self.freq_block, self.tf_block])

    @classmethod
    def from_array(cls, values: np.ndarray, n_channels: int) -> "FeatureVector":
        values = np.asarray(values, dtype=float)
        a = N_TIME * n_channels
        b = a + N_FREQ * n_channels
        if values.shape != (N_PER_CHANNEL * n_channels,):
            raise ValueError(f"expected {N_PER_CHANNEL * n_channels} values, got {values.shape}")
        return cls(values[:a], values[a:b], values[b:], n_channels)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (len(self.time_block), len(self.freq_block), len(self.tf_block))


def _is_degenerate(x: np.ndarray, var: float) -> bool:
    return var <= _DEGENERATE_RTOL * float(np.mean(x * x))


def _hjorth_mobility(x: np.ndarray) -> float:
    var = float(np.var(x))
    if _is_degenerate(x, var):
        return 0.0
    dx = np.diff(x)
    return math.sqrt(float(np.var(dx)) / var)


def extract_time(channel: Sequence[float]) -> np.ndarray:
    """Mean, variance, kurtosis, skewness, Hjorth mobility and complexity.

    Moments are population moments; kurtosis is ``m4 / m2**2`` (not excess).
    A constant channel returns zeros for every shape statistic.
    """
    x = np.asarray(channel, dtype=float)
    if x.ndim != 1 or x.size < 3:
        raise ValueError("time features need a 1-D channel of length >= 3")
    if not np.all(np.isfinite(x)):
        raise ValueError("channel contains non-finite values")

    mean = float(np.mean(x))
    centered = x - mean
    m2 = float(np.mean(centered**2))
    if _is_degenerate(x, m2):
        return np.array([mean, m2, 0.0, 0.0, 0.0, 0.0])

    m3 = float(np.mean(centered**3))
    m4 = float(np.mean(centered**4))
    kurtosis = m4 / m2**2
    skewness = m3 / m2**1.5

    mobility = _hjorth_mobility(x)
    dx = np.diff(x)
    complexity = _hjorth_mobility(dx) / mobility if mobility > 0 else 0.0
    return np.array([mean, m2, kurtosis, skewness, mobility, complexity])


def periodogram(channel: Sequence[float], sample_rate: float) -> tuple[np.ndarray, np.ndarray]:
    """One-sided Hann-windowed periodogram (density scaling)."""
    x = np.asarray(channel, dtype=float)
    n = x.size
    window = np.hanning(n) if n > 1 else np.ones(1)
    spectrum = np.fft.rfft(x * window)
    psd = np.abs(spectrum) ** 2 / (sample_rate * np.sum(window**2))
    if n % 2 == 0:
        psd[1:-1] *= 2.0
    else:
        psd[1:] *= 2.0
    freqs = np.fft.rfftfreq(n, d=1.0 / sample_rate)
    return freqs, psd


def extract_freq(channel: Sequence[float], sample_rate: float) -> np.ndarray:
    """Mean periodogram power over the bins of each band ``[lo, hi)``."""
    if sample_rate <= 2 * BANDS[-1][2]:
        raise ValueError("gamma band above Nyquist: sample_rate must exceed 90 Hz")
    x = np.asarray(channel, dtype=float)
    if x.ndim != 1 or x.size < MIN_PSD_LENGTH:
        raise ValueError(f"frequency features need a 1-D channel of length >= {MIN_PSD_LENGTH}")
    freqs, psd = periodogram(x, sample_rate)
    out = np.zeros(len(BANDS))
    for i, (_, lo, hi) in enumerate(BANDS):
        mask = (freqs >= lo) & (freqs < hi)
        if mask.any():
            out[i] = float(np.mean(psd[mask]))
    return out


def extract_tf(channel: Sequence[float]) -> np.ndarray:
    """Relative subband energies ``[A4, D4, D3, D2, D1]`` of a db4 DWT."""
    x = np.asarray(channel, dtype=float)
    if x.ndim != 1 or x.size < MIN_DWT_LENGTH:
        raise ValueError("too short for 4-level DWT")
    peak = float(np.max(np.abs(x)))
    if peak == 0.0:
        return np.zeros(N_TF)
    # ratios are scale-free; rescaling keeps tiny inputs from underflowing when squared
    x = x / peak
    with warnings.catch_warnings():
        # short epochs exceed pywt's recommended level; boundary effects are accepted
        warnings.simplefilter("ignore", UserWarning)
        coeffs = pywt.wavedec(x, DWT_WAVELET, mode=DWT_MODE, level=DWT_LEVEL)
    energies = np.array([float(np.sum(c * c)) for c in coeffs])
    total = energies.sum()
    if total == 0.0:
        return np.zeros(N_TF)
    return energies / total


def channel_features(channel: Sequence[float], sample_rate: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return extract_time(channel), extract_freq(channel, sample_rate), extract_tf(channel)


def epoch_features(epoch: Epoch | np.ndarray, sample_rate: float | None = None) -> FeatureVector:
    """Features of a single epoch, assembled channel-major per block."""
    if not isinstance(epoch, Epoch):
        epoch = Epoch(np.asarray(epoch, dtype=float), sample_rate)
    fs = epoch.sample_rate
    t, f, tf = [], [], []
    for ch in epoch.samples:
        a, b, c = channel_features(ch, fs)
        t.append(a)
        f.append(b)
        tf.append(c)
    return FeatureVector(np.concatenate(t), np.concatenate(f), np.concatenate(tf), epoch.n_channels)


def epoch_feature_matrix(samples: np.ndarray, sample_rate: float) -> np.ndarray:
    """Flat feature rows for an ``[n_epochs, n_channels, n_samples]`` array."""
    samples = np.asarray(samples, dtype=float)
    return np.stack([epoch_features(Epoch(e, sample_rate)).as_array() for e in samples])


def _order_free_mean(rows: np.ndarray) -> np.ndarray:
    # fsum is exactly rounded, so the result does not depend on row order
    n = rows.shape[0]
    return np.array([math.fsum(col) for col in rows.T]) / n


def aggregate_epoch_features(rows: np.ndarray, n_channels: int, how: str = "mean") -> FeatureVector:
    rows = np.asarray(rows, dtype=float)
    if rows.ndim != 2 or rows.shape[0] < 1:
        raise ValueError("need at least one epoch feature row")
    if how == "mean":
        values = _order_free_mean(rows)
    elif how == "median":
        values = np.median(rows, axis=0)
    else:
        raise ValueError(f"unknown epoch aggregation {how!r}")
    return FeatureVector.from_array(values, n_channels)


def build_initial_feature(
    epochs: Sequence[Epoch | np.ndarray], sample_rate: float, how: str = "mean"
) -> FeatureVector:
    """Subject-level feature: per-epoch features aggregated across epochs."""
    if len(epochs) < 1:
        raise ValueError("need at least one epoch")
    wrapped = [e if isinstance(e, Epoch) else Epoch(np.asarray(e, dtype=float), sample_rate) for e in epochs]
    n_channels = wrapped[0].n_channels
    for i, e in enumerate(wrapped):
        if e.n_channels != n_channels:
            raise ValueError(
                f"channel-count mismatch: epoch {i} has {e.n_channels} channels, expected {n_channels}"
            )
        if e.sample_rate != sample_rate:
            raise ValueError(f"epoch {i} sample_rate {e.sample_rate} differs from {sample_rate}")
    rows = np.stack([epoch_features(e).as_array() for e in wrapped])
    return aggregate_epoch_features(rows, n_channels, how)


@dataclass(frozen=True)
class CohortStats:
    """Per-dimension z-score statistics frozen at source initialisation."""

    mean: np.ndarray
    std: np.ndarray
    n_channels: int

    def apply(self, feature: FeatureVector) -> FeatureVector:
        x = feature.as_array()
        if x.shape != self.mean.shape:
            raise ValueError(f"feature has {x.size} dims, statistics have {self.mean.size}")
        out = np.zeros_like(x)
        live = self.std > 0
        out[live] = (x[live] - self.mean[live]) / self.std[live]
        return FeatureVector.from_array(out, feature.n_channels)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "n_channels": self.n_channels}

    @classmethod
    def from_dict(cls, d: dict) -> "CohortStats":
        return cls(np.asarray(d["mean"], float), np.asarray(d["std"], float), int(d["n_channels"]))


def fit_cohort_stats(features: Sequence[FeatureVector]) -> CohortStats:
    if len(features) < 2:
        raise ValueError("cohort normalisation needs at least 2 feature vectors")
    shapes = {f.shape for f in features}
    if len(shapes) != 1:
        raise ValueError(f"feature vectors differ in shape: {sorted(shapes)}")
    X = np.stack([f.as_array() for f in features])
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    scale = np.maximum(np.abs(mean), np.max(np.abs(X), axis=0))
    std[std <= 1e-12 * np.maximum(scale, 1e-300)] = 0.0
    return CohortStats(mean, std, features[0].n_channels)


def normalize_cohort(features: Sequence[FeatureVector]) -> tuple[list[FeatureVector], CohortStats]:
    """Z-score each dimension across the cohort.

    Returns the normalised vectors together with the statistics, which are
    reused unchanged for subjects arriving later.  Constant dimensions map to 0.
    """
    stats = fit_cohort_stats(features)
    return [stats.apply(f) for f in features], stats


def normalize_channels(feature: FeatureVector) -> FeatureVector:
    """Within-subject alternative: z-score each feature across channels."""
    c = feature.n_channels
    blocks = []
    for block, per in ((feature.time_block, N_TIME), (feature.freq_block, N_FREQ), (feature.tf_block, N_TF)):
        m = block.reshape(c, per)
        mu = m.mean(axis=0)
        sd = m.std(axis=0)
        z = np.zeros_like(m)
        live = sd > 1e-12 * np.maximum(np.abs(mu), 1e-300)
        z[:, live] = (m[:, live] - mu[live]) / sd[live]
        blocks.append(z.ravel())
    return FeatureVector(blocks[0], blocks[1], blocks[2], c)
