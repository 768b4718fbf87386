"""Ozone concentration profiles: generation, CSV import/export, densification.

Two regimes are supported. Artificial profiles are built from a segment list
at one sample per minute; realistic profiles are hourly diurnal curves. Both
cover 24 hours. ``densify`` brings either onto the raw sampling grid used by
the sensor simulator.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

PER_MINUTE = 60.0
PER_HOUR = 3600.0


class ProfileError(ValueError):
    """Invalid profile definition or malformed profile file."""


@dataclass(frozen=True)
class ConcentrationProfile:
    times: np.ndarray  # seconds, starting at 0
    values: np.ndarray  # ppb
    resolution_s: float
    label: str = ""

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if times.shape != values.shape or times.ndim != 1 or len(times) == 0:
            raise ProfileError("times and values must be equal-length 1-d arrays")
        if np.any(values < 0) or not np.all(np.isfinite(values)):
            raise ProfileError("concentrations must be finite and >= 0")
        if len(times) > 1 and np.any(np.diff(times) <= 0):
            raise ProfileError("times must be strictly increasing")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    @property
    def resolution(self) -> str:
        if self.resolution_s == PER_MINUTE:
            return "per_minute"
        if self.resolution_s == PER_HOUR:
            return "per_hour"
        return "custom"

    @property
    def duration(self) -> float:
        return len(self.values) * self.resolution_s

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True)
class DenseProfile:
    values: np.ndarray  # ppb per raw tick
    raw_rate: float  # Hz
    source: str = ""

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True)
class Segment:
    """``minutes`` of constant ``start`` ppb, or a linear ramp to ``end``."""

    minutes: int
    start: float
    end: float | None = None

    def render(self) -> np.ndarray:
        if self.end is None or self.minutes == 1:
            return np.full(self.minutes, float(self.start))
        k = np.arange(self.minutes)
        return self.start + (self.end - self.start) * k / (self.minutes - 1)


def _as_segment(seg) -> Segment:
    if isinstance(seg, Segment):
        return seg
    seg = tuple(seg)
    if len(seg) == 2:
        return Segment(int(seg[0]), float(seg[1]))
    if len(seg) == 3:
        return Segment(int(seg[0]), float(seg[1]), float(seg[2]))
    raise ProfileError(f"segment must be (minutes, level) or (minutes, start, end), got {seg!r}")


def gen_artificial(segments: Iterable, seed: int | None = None, jitter: float = 0.0,
                   label: str = "artificial") -> ConcentrationProfile:
    """Piecewise-constant / ramp profile at one sample per minute over 24 h.

    ``jitter`` adds seeded Gaussian noise (ppb) to every sample, clipped at 0;
    with the default of 0 the seed is ignored and the output depends only on
    ``segments``.
    """
    segs = [_as_segment(s) for s in segments]
    for i, s in enumerate(segs):
        if s.minutes <= 0:
            raise ProfileError(f"segment {i}: duration must be positive")
        if s.start < 0 or (s.end is not None and s.end < 0):
            raise ProfileError(f"segment {i}: negative concentration")
    total = sum(s.minutes for s in segs)
    if total != 1440:
        raise ProfileError(f"segments cover {total} min, expected 1440")
    values = np.concatenate([s.render() for s in segs])
    if jitter > 0:
        rng = np.random.default_rng(seed)
        values = np.clip(values + rng.normal(0.0, jitter, values.shape), 0.0, None)
    times = np.arange(1440) * PER_MINUTE
    return ConcentrationProfile(times, values, PER_MINUTE, label)


def random_segments(seed: int, max_ppb: float = 100.0, n_segments: int = 12,
                    ramp_fraction: float = 0.3, lead_in: int = 60) -> list[Segment]:
    """Draw a random 24 h segment layout: steps and ramps between random levels.

    Used to produce distinct artificial profile instances for train/val/test.
    Every layout opens with ``lead_in`` minutes of clean air (0 ppb), so that
    resistance baselines taken at the start of a record are comparable.
    """
    rng = np.random.default_rng(seed)
    cuts = np.sort(rng.choice(np.arange(lead_in + 30, 1440 - 29, 10), size=n_segments - 1, replace=False))
    bounds = np.diff(np.concatenate([[lead_in], cuts, [1440]]))
    segs = [Segment(lead_in, 0.0)] if lead_in else []
    level = 0.0
    for minutes in bounds:
        nxt = float(np.round(rng.uniform(0, max_ppb), 1))
        if rng.random() < ramp_fraction:
            segs.append(Segment(int(minutes), level, nxt))
        else:
            segs.append(Segment(int(minutes), nxt))
        level = nxt
    return segs


def gen_realistic(peak_hour: int = 14, base: float = 20.0, peak: float = 60.0, width: float = 3.0,
                  seed: int | None = None, jitter: float = 0.0,
                  label: str = "realistic") -> ConcentrationProfile:
    """Hourly diurnal profile: ``base`` plus a Gaussian bump centred on ``peak_hour``.

    This is a parametric stand-in for a measured spring-day Ozone shape. With
    ``jitter`` > 0 seeded noise is added and the argmax is no longer guaranteed.
    """
    if not 0 <= peak_hour <= 23:
        raise ProfileError("peak_hour must be in 0..23")
    if peak < base:
        raise ProfileError(f"peak ({peak}) < base ({base})")
    if base < 0:
        raise ProfileError("base must be >= 0")
    if width <= 0:
        raise ProfileError("width must be positive")
    hours = np.arange(24, dtype=float)
    values = base + (peak - base) * np.exp(-0.5 * ((hours - peak_hour) / width) ** 2)
    if jitter > 0:
        rng = np.random.default_rng(seed)
        values = np.clip(values + rng.normal(0.0, jitter, values.shape), 0.0, None)
    return ConcentrationProfile(hours * PER_HOUR, values, PER_HOUR, label)


def export_csv(profile: ConcentrationProfile, path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time_s", "conc_ppb"])
        for t, c in zip(profile.times, profile.values):
            w.writerow([repr(float(t)), repr(float(c))])
    return path


def import_csv(path, label: str | None = None) -> ConcentrationProfile:
    path = Path(path)
    times, values = [], []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["time_s", "conc_ppb"]:
            raise ProfileError(f"{path}: expected header 'time_s,conc_ppb', got {header!r}")
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise ProfileError(f"{path}: row {row_no}: expected 2 fields, got {len(row)}")
            try:
                t, c = float(row[0]), float(row[1])
            except ValueError as exc:
                raise ProfileError(f"{path}: row {row_no}: {exc}") from None
            if c < 0 or not math.isfinite(c):
                raise ProfileError(f"{path}: row {row_no}: invalid concentration {row[1]!r}")
            if times and t <= times[-1]:
                raise ProfileError(f"{path}: row {row_no}: time {t} not after {times[-1]}")
            times.append(t)
            values.append(c)
    if not times:
        raise ProfileError(f"{path}: no data rows")
    if len(times) == 1:
        resolution = PER_HOUR
    else:
        steps = np.diff(times)
        resolution = float(steps[0])
        bad = np.flatnonzero(np.abs(steps - resolution) > 1e-9 * resolution)
        if bad.size:
            raise ProfileError(f"{path}: row {bad[0] + 3}: non-uniform spacing")
    t = np.asarray(times)
    return ConcentrationProfile(t - t[0], np.asarray(values), resolution,
                                label if label is not None else path.stem)


def densify(profile: ConcentrationProfile, raw_rate: float = 1.0,
            method: str | None = None) -> DenseProfile:
    """Resample a profile onto a raw grid of ``raw_rate`` ticks per second.

    ``method`` is ``"hold"`` (zero-order hold) or ``"linear"``; by default
    per-hour profiles are interpolated and everything else is held. Beyond the
    last sample the value is held for one resolution interval.
    """
    ticks = raw_rate * profile.resolution_s
    n_ticks = int(round(ticks))
    if n_ticks < 1 or abs(ticks - n_ticks) > 1e-9 * max(1.0, ticks):
        raise ProfileError(f"raw_rate {raw_rate} Hz x resolution {profile.resolution_s} s "
                           "is not an integer tick count")
    if method is None:
        method = "linear" if profile.resolution == "per_hour" else "hold"
    if method == "hold":
        values = np.repeat(profile.values, n_ticks)
    elif method == "linear":
        t = np.arange(len(profile) * n_ticks) / n_ticks  # in sample units
        values = np.interp(t, np.arange(len(profile)), profile.values)
    else:
        raise ProfileError(f"unknown densify method {method!r}")
    return DenseProfile(values, float(raw_rate), profile.label)


def cycle_means(dense: DenseProfile, ticks_per_cycle: int) -> np.ndarray:
    """Mean concentration per heater cycle, the regression target."""
    n = len(dense) // ticks_per_cycle
    return dense.values[: n * ticks_per_cycle].reshape(n, ticks_per_cycle).mean(axis=1)
