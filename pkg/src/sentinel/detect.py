"""Similarity metrics between sensor rankings and the outlier flagging policy."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import median_abs_deviation

METRICS = ("cosine", "correlation", "euclidean")


class DetectionError(ValueError):
    pass


def cosine(x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0 or ny == 0:
        raise DetectionError("cosine similarity undefined for a zero vector")
    return float(np.dot(x, y) / (nx * ny))


def correlation(x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt(np.sum(dx * dx)), np.sqrt(np.sum(dy * dy))
    # rounding in the mean leaves a tiny spread for constant vectors
    tol = 1e-12 * np.sqrt(len(x))
    if sx <= tol * np.abs(x).max() or sy <= tol * np.abs(y).max():
        raise DetectionError("correlation undefined for a constant vector")
    return float(np.sum(dx * dy) / (sx * sy))


def euclidean(x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise DetectionError(f"length mismatch: {x.shape} vs {y.shape}")
    return float(np.sqrt(np.sum(np.abs(x - y) ** 2)))


_FUNCS = {"cosine": cosine, "correlation": correlation, "euclidean": euclidean}


@dataclass
class SimilarityMatrix:
    metric: str
    values: np.ndarray
    sensor_ids: list

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sensor"] + [str(s) for s in self.sensor_ids])
            for sid, row in zip(self.sensor_ids, self.values):
                w.writerow([sid] + [repr(float(v)) for v in row])
        return path


def _vectors(rankings, use_groups: bool):
    if use_groups:
        return [np.array(list(r.group_rollup.values())) for r in rankings]
    return [np.asarray(r.importance, dtype=float) for r in rankings]


def pairwise(rankings, metric: str, use_groups: bool = False) -> SimilarityMatrix:
    """All-pairs ``metric`` between sensor rankings (per-feature vectors by default)."""
    if metric not in _FUNCS:
        raise DetectionError(f"unknown metric {metric!r}")
    if len(rankings) < 2:
        raise DetectionError("need at least two sensors")
    names = rankings[0].feature_names
    if any(list(r.feature_names) != list(names) for r in rankings):
        raise DetectionError("rankings have different feature sets")
    vecs = _vectors(rankings, use_groups)
    ids = [r.sensor_id for r in rankings]
    n = len(vecs)
    diag = 0.0 if metric == "euclidean" else 1.0
    out = np.full((n, n), diag)
    fn = _FUNCS[metric]
    for i in range(n):
        for j in range(i + 1, n):
            try:
                out[i, j] = out[j, i] = fn(vecs[i], vecs[j])
            except DetectionError as exc:
                raise DetectionError(f"sensors {ids[i]} and {ids[j]}: {exc}") from None
    return SimilarityMatrix(metric, out, ids)


def summed_distance(m: SimilarityMatrix) -> np.ndarray:
    """Each sensor's total Euclidean distance to all others."""
    if m.metric != "euclidean":
        raise DetectionError(f"summed distance needs a euclidean matrix, got {m.metric}")
    return m.values.sum(axis=1)


def robust_scale(values) -> tuple[float, float]:
    """Median and normal-consistent MAD (``1.4826 * median|x - median|``)."""
    values = np.asarray(values, dtype=float)
    return float(np.median(values)), float(median_abs_deviation(values, scale="normal"))


@dataclass
class Policy:
    """Flagging thresholds.

    A sensor passes the Euclidean criterion when its summed distance exceeds
    ``median + k_mad * MAD`` over sensors. Passing sensors that stay below
    ``median + clear_factor * k_mad * MAD`` are borderline and need both
    secondary metrics to corroborate. Sensors beyond that band are flagged on
    distance alone, or need one corroborating metric when
    ``clear_needs_corroboration`` is set.

    A secondary metric corroborates when the sensor's median similarity to the
    other sensors falls below the floor. Floors left at ``None`` are set from
    the data as ``median - k_mad * MAD`` of that per-sensor statistic.
    """

    k_mad: float = 3.0
    cosine_floor: float | None = None
    corr_floor: float | None = None
    clear_factor: float = 2.0
    clear_needs_corroboration: bool = False

    def validate(self):
        if self.k_mad <= 0:
            raise DetectionError("k_mad must be positive")
        if self.clear_factor < 1:
            raise DetectionError("clear_factor must be >= 1")
        for name in ("cosine_floor", "corr_floor"):
            v = getattr(self, name)
            if v is not None and not 0 < v <= 1:
                raise DetectionError(f"{name} must be in (0, 1]")


@dataclass
class SensorFlag:
    sensor_id: int
    summed_euclidean: float
    median_cosine: float
    min_cosine: float
    median_correlation: float
    primary: bool
    borderline: bool
    corroborated_by: list
    flag: bool


@dataclass
class OutlierFlags:
    sensors: list
    policy: dict
    median: float
    mad: float
    threshold: float
    clear_threshold: float
    cosine_floor: float
    corr_floor: float
    truth: dict = field(default_factory=dict)

    @property
    def flagged(self) -> list[int]:
        return [s.sensor_id for s in self.sensors if s.flag]

    def by_id(self, sensor_id: int) -> SensorFlag:
        for s in self.sensors:
            if s.sensor_id == sensor_id:
                return s
        raise KeyError(sensor_id)

    def outcome(self) -> dict:
        """Comparison with the injected ground truth, if any."""
        truth = set(self.truth)
        flagged = set(self.flagged)
        return {"true_positives": sorted(flagged & truth), "false_positives": sorted(flagged - truth),
                "missed": sorted(truth - flagged)}

    def to_dict(self) -> dict:
        d = {"policy": self.policy, "median": self.median, "mad": self.mad, "threshold": self.threshold,
             "clear_threshold": self.clear_threshold, "cosine_floor": self.cosine_floor,
             "corr_floor": self.corr_floor, "flagged": self.flagged,
             "sensors": [asdict(s) for s in self.sensors]}
        if self.truth:
            d["truth"] = {str(k): v for k, v in self.truth.items()}
            d["outcome"] = self.outcome()
        return d


def similarity_matrices(rankings, use_groups: bool = False) -> dict:
    return {m: pairwise(rankings, m, use_groups) for m in METRICS}


def _median_offdiag(m: SimilarityMatrix) -> np.ndarray:
    n = len(m.values)
    off = ~np.eye(n, dtype=bool)
    return np.array([np.median(m.values[i][off[i]]) for i in range(n)])


def flag_outliers(matrices: dict, policy: Policy | None = None, truth: dict | None = None) -> OutlierFlags:
    policy = policy or Policy()
    policy.validate()
    eu, co, cr = matrices["euclidean"], matrices["cosine"], matrices["correlation"]
    ids = list(eu.sensor_ids)
    if not (list(co.sensor_ids) == ids == list(cr.sensor_ids)):
        raise DetectionError("similarity matrices cover different sensors")
    if len(ids) < 4:
        raise DetectionError("need at least 4 sensors for robust thresholds")
    k = policy.k_mad
    sums = summed_distance(eu)
    med, mad = robust_scale(sums)
    thr = med + k * mad
    clear = med + policy.clear_factor * k * mad
    med_cos, med_cor = _median_offdiag(co), _median_offdiag(cr)
    cos_floor = policy.cosine_floor
    if cos_floor is None:
        c, s = robust_scale(med_cos)
        cos_floor = c - k * s
    cor_floor = policy.corr_floor
    if cor_floor is None:
        c, s = robust_scale(med_cor)
        cor_floor = c - k * s
    off = ~np.eye(len(ids), dtype=bool)
    min_cos = np.where(off, co.values, np.inf).min(axis=1)

    out = []
    for i, sid in enumerate(ids):
        primary = bool(sums[i] > thr)
        borderline = primary and not sums[i] > clear
        corr_by = []
        if med_cos[i] < cos_floor:
            corr_by.append("cosine")
        if med_cor[i] < cor_floor:
            corr_by.append("correlation")
        if borderline:
            flag = len(corr_by) == 2
        else:
            flag = primary and (len(corr_by) >= 1 or not policy.clear_needs_corroboration)
        out.append(SensorFlag(sid, float(sums[i]), float(med_cos[i]), float(min_cos[i]), float(med_cor[i]),
                              primary, borderline, corr_by, bool(flag)))
    return OutlierFlags(out, asdict(policy), med, mad, thr, clear, float(cos_floor), float(cor_floor),
                        dict(truth or {}))


def flags_csv(flags: OutlierFlags, path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sensor", "summed_euclidean", "median_cosine", "min_cosine", "median_correlation",
                    "primary", "borderline", "corroborated_by", "flag", "deviation_factor"])
        for s in flags.sensors:
            w.writerow([s.sensor_id, repr(s.summed_euclidean), repr(s.median_cosine), repr(s.min_cosine),
                        repr(s.median_correlation), int(s.primary), int(s.borderline),
                        "|".join(s.corroborated_by), int(s.flag), flags.truth.get(s.sensor_id, 1.0)])
    return path


def flags_json(flags: OutlierFlags) -> str:
    return json.dumps(flags.to_dict(), indent=2) + "\n"
