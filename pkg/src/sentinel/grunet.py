"""Single-layer GRU regressor written against numpy.

Cell equations, per step with input ``x`` and previous state ``h``::

    z  = sigmoid(x @ W_z + h @ U_z + b_z)          update gate
    r  = sigmoid(x @ W_r + h @ U_r + b_r)          reset gate
    hc = tanh(x @ W_h + (r * h) @ U_h + b_h)       candidate
    h' = (1 - z) * h + z * hc
    y  = h' @ w_out + b_out

Gate weights are stored stacked along the last axis in ``[z | r | h]`` order.
Everything runs in float64; windows are batched as ``(N, L, F)`` arrays.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .featex import NormStats

MODEL_FORMAT = "sentinel-gru/1"


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, last_finite_epoch):
        super().__init__(msg)
        self.last_finite_epoch = last_finite_epoch


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class GruParams:
    W: np.ndarray  # F x 3H input -> gates
    U: np.ndarray  # H x 3H hidden -> gates
    b: np.ndarray  # 3H
    w_out: np.ndarray  # H
    b_out: float = 0.0

    @property
    def n_features(self) -> int:
        return self.W.shape[0]

    @property
    def hidden(self) -> int:
        return self.U.shape[0]

    def gate(self, name: str):
        """``(W, U, b)`` views for gate ``"z"``, ``"r"`` or ``"h"``."""
        H = self.hidden
        k = "zrh".index(name)
        sl = slice(k * H, (k + 1) * H)
        return self.W[:, sl], self.U[:, sl], self.b[sl]

    def astype(self, dtype) -> "GruParams":
        return GruParams(self.W.astype(dtype), self.U.astype(dtype), self.b.astype(dtype),
                         self.w_out.astype(dtype), float(self.b_out))

    def copy(self) -> "GruParams":
        return GruParams(self.W.copy(), self.U.copy(), self.b.copy(), self.w_out.copy(), float(self.b_out))

    def arrays(self) -> list[np.ndarray]:
        return [self.W, self.U, self.b, self.w_out]

    def to_dict(self) -> dict:
        return {"W": self.W.tolist(), "U": self.U.tolist(), "b": self.b.tolist(),
                "w_out": self.w_out.tolist(), "b_out": float(self.b_out)}

    @classmethod
    def from_dict(cls, d) -> "GruParams":
        return cls(np.asarray(d["W"], dtype=float), np.asarray(d["U"], dtype=float),
                   np.asarray(d["b"], dtype=float), np.asarray(d["w_out"], dtype=float), float(d["b_out"]))

    @classmethod
    def zeros(cls, n_features: int, hidden: int = 40) -> "GruParams":
        return cls(np.zeros((n_features, 3 * hidden)), np.zeros((hidden, 3 * hidden)),
                   np.zeros(3 * hidden), np.zeros(hidden), 0.0)


def init_params(n_features: int, hidden: int = 40, seed=0) -> GruParams:
    rng = np.random.default_rng(seed)
    k = 1.0 / np.sqrt(hidden)
    W = rng.uniform(-k, k, (n_features, 3 * hidden))
    U = rng.uniform(-k, k, (hidden, 3 * hidden))
    b = rng.uniform(-k, k, 3 * hidden)
    w_out = rng.uniform(-k, k, hidden)
    b_out = float(rng.uniform(-k, k))
    return GruParams(W, U, b, w_out, b_out)


def _as_batch(x):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3:
        raise ValueError(f"expected (L, F) or (N, L, F) input, got shape {x.shape}")
    return x, single


def _forward(p: GruParams, X: np.ndarray):
    N, L, _ = X.shape
    H = p.hidden
    Xt = np.ascontiguousarray(X.transpose(1, 0, 2)).reshape(L * N, -1)
    A = (Xt @ p.W + p.b).reshape(L, N, 3 * H)  # time-major
    Uzr, Uh = np.ascontiguousarray(p.U[:, :2 * H]), np.ascontiguousarray(p.U[:, 2 * H:])
    dt = A.dtype
    zr = np.empty((L, N, 2 * H), dt)  # time-major caches
    hc = np.empty((L, N, H), dt)
    hs = np.empty((L, N, H), dt)
    h = np.zeros((N, H), dt)
    for t in range(L):
        a = A[t]
        g = zr[t]
        np.matmul(h, Uzr, out=g)
        g += a[:, :2 * H]
        g *= 0.5
        np.tanh(g, out=g)
        g += 1.0
        g *= 0.5  # sigmoid via tanh
        c = hc[t]
        np.multiply(g[:, H:], h, out=c)
        c = np.matmul(c, Uh, out=c)
        c += a[:, 2 * H:]
        np.tanh(c, out=c)
        nxt = hs[t]
        np.subtract(c, h, out=nxt)
        nxt *= g[:, :H]
        nxt += h
        h = nxt
    y = (hs @ p.w_out).T + p.b_out  # N, L
    return y, (X, zr, hc, hs)


def forward(params: GruParams, window):
    """Predictions ``(L,)`` and hidden states ``(L, H)``; batched if given ``(N, L, F)``."""
    X, single = _as_batch(window)
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite input")
    y, cache = _forward(params, X)
    hs = cache[3].transpose(1, 0, 2)
    return (y[0], hs[0]) if single else (y, hs)


def _backward(p: GruParams, cache, dy: np.ndarray, want_params=True, want_input=True):
    """Reverse-mode sweep given ``dy = dLoss/dy`` of shape ``(N, L)``."""
    X, zr, hc, hs = cache
    L, N, H = hs.shape
    Uzr, Uh = p.U[:, :2 * H], p.U[:, 2 * H:]
    UzrT, UhT = np.ascontiguousarray(Uzr.T), np.ascontiguousarray(Uh.T)
    dt = hs.dtype
    dA = np.empty((L, N, 3 * H), dt)
    dU = np.zeros_like(p.U) if want_params else None
    dh = np.zeros((N, H), dt)
    dyT = np.ascontiguousarray(dy.T, dtype=dt)
    zeros = np.zeros((N, H), dt)
    tmp = np.empty((N, H), dt)
    for t in range(L - 1, -1, -1):
        h_prev = hs[t - 1] if t > 0 else zeros
        dh += dyT[t][:, None] * p.w_out
        zt, rt, hct = zr[t, :, :H], zr[t, :, H:], hc[t]
        d = dA[t]
        dah, daz, dar = d[:, 2 * H:], d[:, :H], d[:, H:2 * H]
        # candidate
        np.multiply(hct, hct, out=tmp)
        np.subtract(1.0, tmp, out=tmp)
        tmp *= zt
        np.multiply(dh, tmp, out=dah)
        # update gate
        np.subtract(hct, h_prev, out=tmp)
        tmp *= dh
        tmp *= zt
        np.multiply(tmp, 1.0 - zt, out=daz)
        # reset gate
        drh = dah @ UhT
        np.multiply(drh, h_prev, out=tmp)
        tmp *= rt
        np.multiply(tmp, 1.0 - rt, out=dar)
        dzr = d[:, :2 * H]
        if want_params and t > 0:
            dU[:, :2 * H] += h_prev.T @ dzr
            dU[:, 2 * H:] += (rt * h_prev).T @ dah
        dh *= 1.0 - zt
        drh *= rt
        dh += drh
        dh += dzr @ UzrT
    grads = None
    if want_params:
        flatA = dA.transpose(1, 0, 2).reshape(N * L, 3 * H)
        grads = GruParams(X.reshape(N * L, -1).T @ flatA, dU, flatA.sum(axis=0),
                          np.einsum("nl,lnh->h", dy, hs), float(dy.sum()))
    dX = None
    if want_input:
        dX = (dA.reshape(L * N, 3 * H) @ p.W.T).reshape(L, N, -1).transpose(1, 0, 2)
    return grads, dX


def grad_input(params: GruParams, window, out_index: int = -1) -> np.ndarray:
    """Gradient of prediction ``out_index`` w.r.t. every input entry, ``(L, F)``."""
    X, single = _as_batch(window)
    L = X.shape[1]
    if not -L <= out_index < L:
        raise IndexError(f"out_index {out_index} outside window of length {L}")
    t = out_index % L
    _, cache = _forward(params, X)
    dy = np.zeros(X.shape[:2])
    dy[:, t] = 1.0
    _, dX = _backward(params, cache, dy, want_params=False)
    return dX[0] if single else dX


def final_output_and_grad(params: GruParams, X: np.ndarray):
    """Final-step prediction ``(N,)`` and its input gradient ``(N, L, F)``."""
    y, cache = _forward(params, X)
    dy = np.zeros_like(y)
    dy[:, -1] = 1.0
    _, dX = _backward(params, cache, dy, want_params=False)
    return y[:, -1], dX


def loss_and_grads(params: GruParams, X: np.ndarray, Y: np.ndarray):
    """Mean squared error over all per-step predictions, plus parameter gradients."""
    y, cache = _forward(params, X)
    err = y - Y
    loss = float(np.mean(err * err))
    grads, _ = _backward(params, cache, 2.0 * err / err.size, want_input=False)
    return loss, grads


# --------------------------------------------------------------------------- data


@dataclass
class WindowBatch:
    """Stride-1 windows of length ``length`` over each series, never spanning series."""

    series: list  # per-sensor (cycles, F) arrays, normalised
    targets: list  # per-sensor (cycles,) ppb
    length: int
    sensor_ids: list = field(default_factory=list)

    def __post_init__(self):
        if not self.sensor_ids:
            self.sensor_ids = list(range(len(self.series)))
        for s, t in zip(self.series, self.targets):
            if len(s) != len(t):
                raise ValueError("series and targets differ in length")
            if len(s) < self.length:
                raise ValueError(f"series of {len(s)} cycles shorter than window {self.length}")

    @property
    def index(self) -> np.ndarray:
        """``(n_windows, 2)`` array of (series position, start)."""
        parts = [np.stack([np.full(len(s) - self.length + 1, i), np.arange(len(s) - self.length + 1)], 1)
                 for i, s in enumerate(self.series)]
        return np.concatenate(parts) if parts else np.zeros((0, 2), dtype=int)

    def __len__(self):
        return sum(len(s) - self.length + 1 for s in self.series)

    def gather(self, idx: np.ndarray):
        L = self.length
        X = np.stack([self.series[i][s:s + L] for i, s in idx])
        Y = np.stack([self.targets[i][s:s + L] for i, s in idx])
        return X, Y


@dataclass
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 100
    batch_size: int = 32
    window: int = 32
    seed: int = 0
    hidden: int = 40
    patience: int | None = 10  # None: run all epochs, still keep the best-val checkpoint
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class TrainReport:
    loss_history: list
    val_rmse_history: list
    wall_time: float
    best_epoch: int
    seed: int
    hyper: dict
    train_metrics: dict = field(default_factory=dict)
    val_metrics: dict = field(default_factory=dict)

    def deterministic_dict(self) -> dict:
        """Everything except the wall time."""
        d = asdict(self)
        d.pop("wall_time")
        return d


class _Adam:
    def __init__(self, params: GruParams, cfg: TrainConfig):
        self.cfg = cfg
        self.m = [np.zeros_like(a) for a in params.arrays()] + [0.0]
        self.v = [np.zeros_like(a) for a in params.arrays()] + [0.0]
        self.t = 0

    def step(self, p: GruParams, g: GruParams):
        c = self.cfg
        self.t += 1
        bc1 = 1 - c.beta1 ** self.t
        bc2 = 1 - c.beta2 ** self.t
        arrays = p.arrays()
        for i, (a, ga) in enumerate(zip(arrays, g.arrays())):
            self.m[i] = c.beta1 * self.m[i] + (1 - c.beta1) * ga
            self.v[i] = c.beta2 * self.v[i] + (1 - c.beta2) * ga * ga
            a -= c.lr * (self.m[i] / bc1) / (np.sqrt(self.v[i] / bc2) + c.eps)
        self.m[-1] = c.beta1 * self.m[-1] + (1 - c.beta1) * g.b_out
        self.v[-1] = c.beta2 * self.v[-1] + (1 - c.beta2) * g.b_out ** 2
        p.b_out -= c.lr * (self.m[-1] / bc1) / (np.sqrt(self.v[-1] / bc2) + c.eps)


def _scale_head(p: GruParams, scale: float, shift: float) -> GruParams:
    q = p.copy()
    q.w_out = q.w_out * scale
    q.b_out = q.b_out * scale + shift
    return q


def train(batches: WindowBatch, hyper: TrainConfig | None = None, val: WindowBatch | None = None):
    """Fit a GRU by Adam on the MSE of every per-step prediction.

    Targets are standardised internally and the scaling is folded back into the
    output head, so the returned parameters predict ppb directly. With ``val``
    given, training stops after ``patience`` epochs without a new best
    validation RMSE and the best parameters are returned.
    """
    hyper = hyper or TrainConfig()
    if len(batches) == 0:
        raise ValueError("no training windows")
    if batches.length != hyper.window:
        raise ValueError(f"batch window {batches.length} != configured window {hyper.window}")
    t0 = time.perf_counter()
    init_seq, shuffle_seq = np.random.SeedSequence(hyper.seed).spawn(2)
    n_features = batches.series[0].shape[1]
    params = init_params(n_features, hyper.hidden, init_seq)
    shuffle_rng = np.random.default_rng(shuffle_seq)

    all_targets = np.concatenate(batches.targets)
    shift = float(all_targets.mean())
    scale = float(all_targets.std()) or 1.0
    opt = _Adam(params, hyper)
    index = batches.index

    losses, val_hist = [], []
    best, best_rmse, best_epoch, stale = params.copy(), np.inf, 0, 0
    for epoch in range(hyper.epochs):
        order = index[shuffle_rng.permutation(len(index))]
        total, count = 0.0, 0
        for lo in range(0, len(order), hyper.batch_size):
            X, Y = batches.gather(order[lo:lo + hyper.batch_size])
            loss, grads = loss_and_grads(params, X, (Y - shift) / scale)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} in epoch {epoch}", epoch - 1)
            opt.step(params, grads)
            total += loss * len(X)
            count += len(X)
        losses.append(total / count * scale ** 2)
        if val is None:
            best, best_epoch = params, epoch
            continue
        rmse = evaluate(_scale_head(params, scale, shift), val)["rmse"]
        val_hist.append(rmse)
        if rmse < best_rmse:
            best, best_rmse, best_epoch, stale = params.copy(), rmse, epoch, 0
        else:
            stale += 1
            if hyper.patience is not None and stale >= hyper.patience:
                break
    wall = time.perf_counter() - t0
    final = _scale_head(best, scale, shift)
    report = TrainReport(losses, val_hist, wall, best_epoch, hyper.seed, asdict(hyper),
                         evaluate(final, batches), evaluate(final, val) if val is not None else {})
    return final, report


# --------------------------------------------------------------------- inference


def predict_series(params: GruParams, series, length: int, chunk: int = 512) -> np.ndarray:
    """Per-cycle estimate: mean of every stride-1 window prediction covering the cycle."""
    values = np.asarray(getattr(series, "values", series), dtype=float)
    C = len(values)
    if C < length:
        raise ValueError(f"series of {C} cycles shorter than window {length}")
    n_win = C - length + 1
    acc = np.zeros(C)
    cnt = np.zeros(C)
    view = np.lib.stride_tricks.sliding_window_view(values, length, axis=0).transpose(0, 2, 1)
    for lo in range(0, n_win, chunk):
        y, _ = _forward(params, view[lo:lo + chunk])
        for k in range(len(y)):
            acc[lo + k:lo + k + length] += y[k]
            cnt[lo + k:lo + k + length] += 1
    return acc / cnt


def evaluate(params: GruParams, batches: WindowBatch) -> dict:
    preds = np.concatenate([predict_series(params, s, batches.length) for s in batches.series])
    return metrics(preds, np.concatenate(batches.targets))


def metrics(pred, truth, eps: float = 1.0) -> dict:
    """RMSE and MAE in ppb, MAPE in % over samples with ``truth > eps``."""
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ValueError("pred and truth differ in shape")
    if pred.size == 0:
        raise ValueError("empty input")
    err = pred - truth
    mask = truth > eps
    mape = float(np.mean(np.abs(err[mask]) / truth[mask]) * 100) if mask.any() else float("nan")
    return {"rmse": float(np.sqrt(np.mean(err ** 2))), "mae": float(np.mean(np.abs(err))), "mape": mape}


# ------------------------------------------------------------------------- model


@dataclass
class GruModel:
    """Trained parameters bundled with their normaliser and window length."""

    params: GruParams
    norm: NormStats | None
    window: int
    hyper: dict = field(default_factory=dict)
    seed: int = 0
    compute_dtype: str = "float64"

    def _cast(self, X):
        dt = np.dtype(self.compute_dtype)
        p = self.params if dt == np.float64 else self.params.astype(dt)
        return p, np.asarray(X, dtype=dt)

    def final_output(self, X: np.ndarray) -> np.ndarray:
        p, X = self._cast(X)
        y, _ = _forward(p, X)
        return y[:, -1].astype(float)

    def final_output_and_grad(self, X: np.ndarray):
        p, X = self._cast(X)
        y, g = final_output_and_grad(p, X)
        return y.astype(float), g.astype(float)

    def to_dict(self) -> dict:
        return {"format": MODEL_FORMAT, "params": self.params.to_dict(),
                "norm": self.norm.to_dict() if self.norm else None,
                "window": self.window, "hyper": self.hyper, "seed": self.seed, "compute_dtype": self.compute_dtype}

    @classmethod
    def from_dict(cls, d) -> "GruModel":
        if d.get("format") != MODEL_FORMAT:
            raise ValueError(f"unsupported model format {d.get('format')!r}")
        norm = NormStats.from_dict(d["norm"]) if d.get("norm") else None
        return cls(GruParams.from_dict(d["params"]), norm, int(d["window"]), d.get("hyper", {}), d.get("seed", 0),
                   d.get("compute_dtype", "float64"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "GruModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
