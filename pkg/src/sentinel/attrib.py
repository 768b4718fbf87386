"""Expected-gradients attribution and per-datapoint averaging over windows.

For a window ``x``, baselines ``x_b`` (b = 1..B) and ``S`` midpoint steps::

    phi[tau, j] = 1/(B*S) * sum_b sum_s (x - x_b)[tau, j] * df/dx[tau, j] at x_b + a_s (x - x_b)
    a_s = (s - 1/2) / S
    phi_0 = 1/B * sum_b f(x_b)

``f`` is the model's final-step prediction. Summed over a window, ``phi``
approximates ``f(x) - phi_0`` (completeness); each datapoint's attributions
from all windows containing it are then averaged in absolute value.

Models are duck-typed: anything with ``final_output(X)`` and
``final_output_and_grad(X)`` over ``(N, L, F)`` batches works.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from itertools import combinations
from math import factorial
from pathlib import Path

import numpy as np


class AttributionError(ValueError):
    pass


class LinearSurrogate:
    """``f(X) = sum(w * X) + b`` with exact gradients; a test oracle adapter."""

    def __init__(self, weights, bias: float = 0.0):
        self.w = np.asarray(weights, dtype=float)
        self.b = float(bias)

    def final_output(self, X):
        return np.einsum("nlf,lf->n", np.asarray(X, dtype=float), self.w) + self.b

    def final_output_and_grad(self, X):
        X = np.asarray(X, dtype=float)
        return self.final_output(X), np.broadcast_to(self.w, X.shape).copy()


@dataclass
class AttributionWindow:
    phi: np.ndarray  # L x F
    base_value: float
    output: float  # f(x)
    sensor_id: int = 0
    start: int = 0

    @property
    def residual(self) -> float:
        """Completeness gap ``sum(phi) - (f(x) - phi_0)``."""
        return float(self.phi.sum() - (self.output - self.base_value))


def sample_baselines(series: list, length: int, n: int, seed, targets: list | None = None,
                     max_target: float | None = None) -> np.ndarray:
    """Draw ``n`` stride-1 windows uniformly from a pool of ``(cycles, F)`` series.

    With ``targets`` and ``max_target`` the pool is restricted to windows whose
    target concentration never exceeds ``max_target`` (clean-air references).
    """
    starts = [(i, s) for i, x in enumerate(series) for s in range(len(x) - length + 1)]
    if max_target is not None:
        if targets is None:
            raise AttributionError("max_target needs per-series targets")
        starts = [(i, s) for i, s in starts if np.max(targets[i][s:s + length]) <= max_target]
    if not starts:
        raise AttributionError("empty baseline pool")
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(starts), size=n, replace=len(starts) < n)
    return np.stack([series[starts[k][0]][starts[k][1]:starts[k][1] + length] for k in pick])


def _eg_batch(model, X: np.ndarray, baselines: np.ndarray, steps: int, max_rows: int = 4096):
    """Expected-gradients ``phi`` for a batch of windows ``(N, L, F)``."""
    N = len(X)
    B = len(baselines)
    alphas = (np.arange(steps) + 0.5) / steps
    phi = np.zeros_like(X)
    per_window = B * steps
    wins = max(1, max_rows // per_window)
    for lo in range(0, N, wins):
        x = X[lo:lo + wins]  # n, L, F
        diff = x[:, None] - baselines[None]  # n, B, L, F
        path = baselines[None, :, None] + alphas[None, None, :, None, None] * diff[:, :, None]
        _, g = model.final_output_and_grad(path.reshape((-1,) + X.shape[1:]))
        g = g.reshape(path.shape).mean(axis=2)  # n, B, L, F
        phi[lo:lo + wins] = (diff * g).mean(axis=1)
    return phi


def expected_gradients(model, window, baselines, steps: int = 64, n_baselines: int | None = None,
                       seed=None, sensor_id: int = 0, start: int = 0) -> AttributionWindow:
    """Attribute the final-step output of one ``(L, F)`` window.

    If ``n_baselines`` is smaller than the pool, that many baselines are drawn
    from it with ``seed``; otherwise the whole pool is used.
    """
    x = np.asarray(window, dtype=float)
    pool = np.asarray(baselines, dtype=float)
    if pool.ndim == 2:
        pool = pool[None]
    if len(pool) == 0:
        raise AttributionError("empty baseline pool")
    if steps < 1:
        raise AttributionError("steps must be >= 1")
    if pool.shape[1:] != x.shape:
        raise AttributionError(f"baseline shape {pool.shape[1:]} != window shape {x.shape}")
    if n_baselines is not None and n_baselines < len(pool):
        rng = np.random.default_rng(seed)
        pool = pool[np.sort(rng.choice(len(pool), n_baselines, replace=False))]
    phi = _eg_batch(model, x[None], pool, steps)[0]
    base = float(np.mean(model.final_output(pool)))
    out = float(model.final_output(x[None])[0])
    return AttributionWindow(phi, base, out, sensor_id, start)


@dataclass
class AttributionSet:
    """Per sensor: ``phi_avg`` (cycles x F) and window counts ``m`` (cycles,)."""

    feature_names: list
    phi_avg: dict
    counts: dict
    base_value: float
    meta: dict = field(default_factory=dict)

    @property
    def sensor_ids(self) -> list[int]:
        return sorted(self.phi_avg)

    def save(self, path) -> None:
        arrays = {}
        for sid in self.sensor_ids:
            arrays[f"phi_{sid}"] = self.phi_avg[sid]
            arrays[f"m_{sid}"] = self.counts[sid]
        header = {"feature_names": list(self.feature_names), "base_value": self.base_value,
                  "sensor_ids": self.sensor_ids, "meta": self.meta}
        with open(path, "wb") as fh:
            np.savez(fh, header=np.array(json.dumps(header)), **arrays)

    @classmethod
    def load(cls, path) -> "AttributionSet":
        with np.load(path) as data:
            header = json.loads(str(data["header"]))
            phi = {sid: data[f"phi_{sid}"] for sid in header["sensor_ids"]}
            m = {sid: data[f"m_{sid}"] for sid in header["sensor_ids"]}
        return cls(header["feature_names"], phi, m, header["base_value"], header["meta"])


def local_attributions(model, series: dict, baselines: np.ndarray, steps: int = 64,
                       feature_names=None, chunk: int = 64) -> AttributionSet:
    """Attribute every stride-1 window's final step and average ``|phi|`` per datapoint.

    ``series`` maps sensor id to its normalised ``(cycles, F)`` values. Window
    attributions are accumulated in ascending start order.
    """
    baselines = np.asarray(baselines, dtype=float)
    if len(baselines) == 0:
        raise AttributionError("empty baseline pool")
    L = baselines.shape[1]
    phi_avg, counts = {}, {}
    for sid in sorted(series):
        values = np.asarray(series[sid], dtype=float)
        C = len(values)
        if C < L:
            raise AttributionError(f"sensor {sid}: {C} cycles shorter than window {L}")
        view = np.lib.stride_tricks.sliding_window_view(values, L, axis=0).transpose(0, 2, 1)
        acc = np.zeros_like(values)
        m = np.zeros(C, dtype=int)
        for lo in range(0, len(view), chunk):
            phi = np.abs(_eg_batch(model, np.ascontiguousarray(view[lo:lo + chunk]), baselines, steps))
            for k in range(len(phi)):
                s = lo + k
                acc[s:s + L] += phi[k]
                m[s:s + L] += 1
        phi_avg[sid] = acc / m[:, None]
        counts[sid] = m
    base = float(np.mean(model.final_output(baselines)))
    names = list(feature_names) if feature_names is not None else [f"f{j}" for j in range(baselines.shape[2])]
    return AttributionSet(names, phi_avg, counts, base,
                          {"n_baselines": len(baselines), "steps": steps, "window": L})


def heatmap(attr: AttributionSet, sensor_id: int) -> np.ndarray:
    if sensor_id not in attr.phi_avg:
        raise AttributionError(f"unknown sensor {sensor_id}")
    return attr.phi_avg[sensor_id]


def heatmap_export(attr: AttributionSet, sensor_id: int, path) -> Path:
    """Write the cycles x features heatmap of one sensor as CSV."""
    mat = heatmap(attr, sensor_id)
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cycle"] + list(attr.feature_names))
        for i, row in enumerate(mat):
            w.writerow([i] + [repr(float(v)) for v in row])
    return path


def exact_shapley(f, x, baseline) -> np.ndarray:
    """Exact Shapley values by coalition enumeration (baseline-replacement game).

    Exponential in the number of players; for tiny test problems only.
    """
    x = np.asarray(x, dtype=float).ravel()
    base = np.asarray(baseline, dtype=float).ravel()
    n = len(x)
    if n > 14:
        raise AttributionError("exact Shapley limited to 14 players")
    shape = np.shape(baseline)

    def value(members):
        z = base.copy()
        idx = list(members)
        z[idx] = x[idx]
        return float(f(z.reshape(shape)))

    phi = np.zeros(n)
    for j in range(n):
        others = [k for k in range(n) if k != j]
        for size in range(n):
            w = factorial(size) * factorial(n - size - 1) / factorial(n)
            for coal in combinations(others, size):
                phi[j] += w * (value(coal + (j,)) - value(coal))
    return phi.reshape(shape)
