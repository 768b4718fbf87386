"""Per-cycle feature extraction and z-score normalisation.

For every heater cycle and sensor array five features are produced:

R    relative resistance, cycle mean over the first cycle's mean, minus one
SL   first difference of R between consecutive cycles (0 for cycle 0)
AMP  amplitude of the heater-frequency component
PA   phase of that component, sine-referenced, in (-pi, pi]
THD  total harmonic distortion over harmonics 2..K
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .sensorsim import SensorResponse

GROUPS = ("R", "SL", "AMP", "PA", "THD")


class FeatureError(ValueError):
    pass


def feature_names(n_arrays: int) -> list[str]:
    return [f"A{a}_{g}" for a in range(n_arrays) for g in GROUPS]


@dataclass
class FeatureSeries:
    values: np.ndarray  # cycles x (n_arrays * 5)
    feature_names: list
    cycle_seconds: float
    sensor_id: int = 0

    @property
    def group_of(self) -> list[str]:
        return [name.split("_", 1)[1] for name in self.feature_names]

    @property
    def n_arrays(self) -> int:
        return len(self.feature_names) // len(GROUPS)

    def __len__(self):
        return len(self.values)


def _spectrum(windows: np.ndarray, n_harmonics: int):
    """Harmonic amplitudes and fundamental phase along the last axis."""
    n = windows.shape[-1]
    x = windows - windows.mean(axis=-1, keepdims=True)
    spec = np.fft.rfft(x, axis=-1)[..., 1:n_harmonics + 1]
    amps = 2.0 * np.abs(spec) / n
    # x = a*sin + b*cos  <=>  X_1 = (b - i*a) * n/2
    phase = np.arctan2(spec[..., 0].real, -spec[..., 0].imag)
    phase = np.where(phase <= -np.pi, np.pi, phase)
    return amps, phase


def cycle_spectrum(window, n_harmonics: int = 5, ticks_per_cycle: int | None = None):
    """Amplitudes ``A_1..A_K`` and fundamental phase of one heater-cycle window.

    The window must hold exactly one heater period; the mean is removed first.
    """
    w = np.asarray(window, dtype=float)
    if w.ndim != 1:
        raise FeatureError("window must be 1-d")
    if ticks_per_cycle is not None and len(w) != ticks_per_cycle:
        raise FeatureError(f"window has {len(w)} ticks, expected {ticks_per_cycle}")
    if len(w) < 2 * n_harmonics + 2:
        raise FeatureError(f"window of {len(w)} ticks too short for {n_harmonics} harmonics")
    amps, phase = _spectrum(w, n_harmonics)
    return amps, float(phase)


def thd(amplitudes) -> float:
    a = np.asarray(amplitudes, dtype=float)
    if a[0] <= 0:
        raise FeatureError("fundamental amplitude is zero (dead array)")
    return float(np.sqrt(np.sum(a[1:] ** 2)) / a[0])


def extract_features(response: SensorResponse, n_harmonics: int = 5) -> FeatureSeries:
    tpc = response.ticks_per_cycle
    r = response.resistance
    n_ticks, n_arrays = r.shape
    if n_ticks % tpc:
        raise FeatureError(f"response length {n_ticks} not divisible by {tpc} ticks per cycle")
    if tpc < 2 * n_harmonics + 2:
        raise FeatureError(f"{tpc} ticks per cycle too few for {n_harmonics} harmonics")
    cycles = r.reshape(n_ticks // tpc, tpc, n_arrays).transpose(0, 2, 1)  # cycle, array, tick

    mean = cycles.mean(axis=2)
    rel = mean / mean[0] - 1.0
    slope = np.zeros_like(rel)
    slope[1:] = np.diff(rel, axis=0)
    amps, phase = _spectrum(cycles, n_harmonics)
    a1 = amps[..., 0]
    scale = np.abs(cycles).max(axis=2)
    dead = a1 <= 1e-12 * scale
    if dead.any():
        cyc, arr = np.argwhere(dead)[0]
        raise FeatureError(f"sensor {response.sensor_id}: dead array {arr} in cycle {cyc} (A1 = 0)")
    distortion = np.sqrt(np.sum(amps[..., 1:] ** 2, axis=-1)) / a1

    feats = np.stack([rel, slope, a1, phase, distortion], axis=2)  # cycle, array, group
    values = feats.reshape(len(feats), n_arrays * len(GROUPS))
    return FeatureSeries(values, feature_names(n_arrays), response.heater_period, response.sensor_id)


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    feature_names: list

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "feature_names": list(self.feature_names)}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["std"], dtype=float), list(d["feature_names"]))


def fit_normalizer(train: list[FeatureSeries]) -> NormStats:
    if not train:
        raise FeatureError("no training series to fit normaliser on")
    data = np.concatenate([s.values for s in train], axis=0)
    mean = data.mean(axis=0)
    std = np.sqrt(np.mean((data - mean) ** 2, axis=0))
    flat = np.flatnonzero(std <= 1e-12 * (1.0 + np.abs(mean)))
    if flat.size:
        names = [train[0].feature_names[i] for i in flat]
        raise FeatureError(f"constant feature(s), zero std: {', '.join(names)}")
    return NormStats(mean, std, list(train[0].feature_names))


def apply_normalizer(series: FeatureSeries, stats: NormStats) -> FeatureSeries:
    if list(series.feature_names) != list(stats.feature_names):
        raise FeatureError("feature names do not match normaliser")
    return FeatureSeries((series.values - stats.mean) / stats.std, series.feature_names,
                         series.cycle_seconds, series.sensor_id)


def invert_normalizer(series: FeatureSeries, stats: NormStats) -> FeatureSeries:
    return FeatureSeries(series.values * stats.std + stats.mean, series.feature_names,
                         series.cycle_seconds, series.sensor_id)


def export_features(series: FeatureSeries, path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cycle"] + list(series.feature_names))
        for i, row in enumerate(series.values):
            w.writerow([i] + [repr(float(v)) for v in row])
    return path


def save_normalizer(stats: NormStats, path) -> None:
    Path(path).write_text(json.dumps(stats.to_dict(), indent=2) + "\n", encoding="utf-8")
