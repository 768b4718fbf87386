"""End-to-end runs: train-set pruning and test-set deviation detection.

Both applications share one data path: simulate a chamber per profile role
(train / val / test), extract features, normalise with train-only
statistics, train the GRU, attribute with clean-air baselines drawn from the
train set, rank and flag.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .attrib import AttributionSet, heatmap_export, local_attributions, sample_baselines
from .detect import OutlierFlags, Policy, flag_outliers, flags_csv, similarity_matrices
from .featex import apply_normalizer, extract_features, fit_normalizer
from .grunet import GruModel, TrainConfig, WindowBatch, metrics, predict_series, train
from .profiles import ConcentrationProfile, gen_artificial, gen_realistic, random_segments
from .ranking import global_importance, rankings_json, sensor_rankings
from .sensorsim import GRADED_DEVIATIONS, MultiSensorDataset, SensorConfig, simulate_chamber

log = logging.getLogger(__name__)

ROLES = ("train", "val", "test")
TABLE_COLUMNS = ["rmse_train_ppb", "mae_train_ppb", "mape_train_pct",
                 "rmse_test_ppb", "mae_test_ppb", "mape_test_pct", "duration_train_s"]
# files whose content carries wall-clock measurements
TIMING_FILES = ("performance_table.csv", "timings.json")


class PipelineError(RuntimeError):
    pass


@dataclass
class AttributionConfig:
    n_baselines: int = 8
    steps: int = 16
    baseline: str = "clean"  # "clean" or "train"
    clean_ppb: float = 1.0
    clean_fallback_quantile: float = 0.05
    compute_dtype: str = "float32"


def _desk_sensor() -> SensorConfig:
    return SensorConfig(heater_period=180.0)


def _desk_train() -> TrainConfig:
    return TrainConfig(lr=3e-3, epochs=12, batch_size=64, window=16, patience=None)


@dataclass
class RunConfig:
    """Everything a run depends on. Defaults are the desk-scale preset."""

    profile_kind: str = "artificial"
    n_sensors: int = 20
    deviations: dict = field(default_factory=lambda: dict(GRADED_DEVIATIONS))
    sensor: SensorConfig = field(default_factory=_desk_sensor)
    raw_rate: float = 1.0
    n_harmonics: int = 5
    train: TrainConfig = field(default_factory=_desk_train)
    attribution: AttributionConfig = field(default_factory=AttributionConfig)
    policy: Policy = field(default_factory=Policy)
    repetitions: int = 6
    seed: int = 0

    def __post_init__(self):
        self.deviations = {int(k): float(v) for k, v in dict(self.deviations).items()}
        if self.profile_kind not in ("artificial", "realistic"):
            raise PipelineError(f"unknown profile kind {self.profile_kind!r}")
        bad = [p for p in self.deviations if not 0 <= p < self.n_sensors]
        if bad:
            raise PipelineError(f"deviation positions {bad} outside 0..{self.n_sensors - 1}")
        if self.repetitions < 1:
            raise PipelineError("repetitions must be >= 1")

    @classmethod
    def full(cls, **kw) -> "RunConfig":
        """Full-resolution preset: 60 s heater cycles, 32-step windows, 64 path steps."""
        base = dict(sensor=SensorConfig(), train=TrainConfig(window=32),
                    attribution=AttributionConfig(steps=64, compute_dtype="float64"))
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["deviations"] = {str(k): v for k, v in sorted(self.deviations.items())}
        for k in ("baseline_resistance", "sensitivity", "phase_offset"):
            d["sensor"][k] = list(d["sensor"][k])
        return d

    @classmethod
    def from_dict(cls, d: dict, base: "RunConfig | None" = None) -> "RunConfig":
        """Build a config from ``d``; missing keys, including nested ones, come from ``base``."""
        d = dict(d)
        subs = {"sensor": SensorConfig, "train": TrainConfig, "attribution": AttributionConfig, "policy": Policy}
        defaults = base or cls()
        kw = {f.name: getattr(defaults, f.name) for f in fields(cls)}
        for f in fields(cls):
            if f.name not in d:
                continue
            v = d.pop(f.name)
            if f.name in subs:
                cur = asdict(getattr(defaults, f.name))
                extra = sorted(set(v) - set(cur))
                if extra:
                    raise PipelineError(f"unknown {f.name} keys: {extra}")
                cur.update(v)
                if f.name == "sensor":
                    cur = {k: tuple(x) if isinstance(x, list) else x for k, x in cur.items()}
                v = subs[f.name](**cur)
            kw[f.name] = v
        if d:
            raise PipelineError(f"unknown config keys: {sorted(d)}")
        return cls(**kw)

    @classmethod
    def load(cls, path, base: "RunConfig | None" = None) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise PipelineError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(d, base)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def derive_seed(master: int, *keys: int) -> int:
    return int(np.random.SeedSequence([int(master), *map(int, keys)]).generate_state(1)[0])


# --------------------------------------------------------------------- data prep


def make_profiles(config: RunConfig) -> dict[str, ConcentrationProfile]:
    """Three distinct profile instances for the train, val and test roles."""
    out = {}
    for i, role in enumerate(ROLES):
        s = derive_seed(config.seed, 1, i)
        if config.profile_kind == "artificial":
            out[role] = gen_artificial(random_segments(s), label=f"artificial-{role}")
        else:
            rng = np.random.default_rng(s)
            base = float(rng.uniform(15, 30))
            out[role] = gen_realistic(int(rng.integers(12, 17)), base, base + float(rng.uniform(30, 50)),
                                      float(rng.uniform(2.5, 4.0)), label=f"realistic-{role}")
    return out


@dataclass
class Prepared:
    """Features and targets of one chamber, ready for the model."""

    dataset: MultiSensorDataset
    raw: dict  # sensor id -> FeatureSeries (unnormalised)
    targets: np.ndarray  # per-cycle ppb, shared by all sensors in the chamber

    def normalised(self, norm, sensor_ids=None) -> dict:
        ids = self.dataset.sensor_ids if sensor_ids is None else sensor_ids
        return {s: apply_normalizer(self.raw[s], norm).values for s in ids}

    def batch(self, norm, window: int, sensor_ids=None) -> WindowBatch:
        vals = self.normalised(norm, sensor_ids)
        ids = sorted(vals)
        return WindowBatch([vals[s] for s in ids], [self.targets] * len(ids), window, ids)


def prepare(dataset: MultiSensorDataset, n_harmonics: int = 5) -> Prepared:
    raw = {r.sensor_id: extract_features(r, n_harmonics) for r in dataset.responses}
    return Prepared(dataset, raw, dataset.cycle_targets())


def simulate_roles(config: RunConfig, deviations_by_role: dict) -> dict[str, Prepared]:
    profiles = make_profiles(config)
    out = {}
    for i, role in enumerate(ROLES):
        ds = simulate_chamber(profiles[role], config.n_sensors, config.sensor, deviations_by_role[role],
                              derive_seed(config.seed, 2), config.raw_rate, stream=i)
        out[role] = prepare(ds, config.n_harmonics)
    return out


def draw_baselines(train_data: Prepared, norm, window: int, ac: AttributionConfig, seed: int,
                   sensor_ids=None) -> np.ndarray:
    """Attribution baselines drawn from train-split windows only.

    In ``"clean"`` mode the pool holds windows whose concentration never
    exceeds ``clean_ppb``; if there are none, the lowest-concentration
    ``clean_fallback_quantile`` of windows is used instead.
    """
    vals = train_data.normalised(norm, sensor_ids)
    series = [vals[s] for s in sorted(vals)]
    if ac.baseline == "train":
        return sample_baselines(series, window, ac.n_baselines, seed)
    if ac.baseline != "clean":
        raise PipelineError(f"unknown baseline mode {ac.baseline!r}")
    t = train_data.targets
    peaks = np.lib.stride_tricks.sliding_window_view(t, window).max(axis=1)
    limit = ac.clean_ppb
    if not np.any(peaks <= limit):
        limit = float(np.quantile(peaks, ac.clean_fallback_quantile))
        log.info("no clean-air windows; using lowest %.0f%% (<= %.2f ppb) as baselines",
                 100 * ac.clean_fallback_quantile, limit)
    return sample_baselines(series, window, ac.n_baselines, seed, [t] * len(series), limit)


def baseline_pool(config: RunConfig, train_data: Prepared, norm, sensor_ids) -> np.ndarray:
    return draw_baselines(train_data, norm, config.train.window, config.attribution,
                          derive_seed(config.seed, 4), sensor_ids)


def _train(config: RunConfig, data: dict, norm, sensor_ids, seed: int):
    hyper = replace(config.train, seed=seed)
    tb = data["train"].batch(norm, hyper.window, sensor_ids)
    vb = data["val"].batch(norm, hyper.window, sensor_ids)
    params, report = train(tb, hyper, vb)
    model = GruModel(params, norm, hyper.window, asdict(hyper), seed, config.attribution.compute_dtype)
    return model, report


def _evaluate(model: GruModel, prepared: Prepared, sensor_ids=None) -> dict:
    vals = prepared.normalised(model.norm, sensor_ids)
    preds = np.concatenate([predict_series(model.params, vals[s], model.window) for s in sorted(vals)])
    return metrics(preds, np.tile(prepared.targets, len(vals)))


def explain(config: RunConfig, model: GruModel, prepared: Prepared, baselines: np.ndarray,
            sensor_ids=None) -> AttributionSet:
    series = prepared.normalised(model.norm, sensor_ids)
    names = next(iter(prepared.raw.values())).feature_names
    attr = local_attributions(model, series, baselines, config.attribution.steps, names)
    attr.meta["baseline_mode"] = config.attribution.baseline
    return attr


@dataclass
class Detection:
    attribution: AttributionSet
    rankings: list
    matrices: dict
    flags: OutlierFlags


def detect_on(config: RunConfig, model: GruModel, prepared: Prepared, baselines, truth: dict,
              sensor_ids=None) -> Detection:
    attr = explain(config, model, prepared, baselines, sensor_ids)
    ranks = sensor_rankings(attr)
    mats = similarity_matrices(ranks)
    flags = flag_outliers(mats, config.policy, {k: v for k, v in truth.items() if k in attr.phi_avg})
    return Detection(attr, ranks, mats, flags)


# ------------------------------------------------------------------ applications


@dataclass
class DetectionReport:
    config: RunConfig
    detection: Detection
    grades: list  # per deviating sensor: id, factor, grade %, flagged, summed distance, rank
    test_metrics: dict
    train_report: dict
    kind: str = "detect"
    # runtime handles for follow-up analysis; not serialised
    model: GruModel | None = field(default=None, repr=False)
    baselines: np.ndarray | None = field(default=None, repr=False)
    data: dict | None = field(default=None, repr=False)

    def summary(self) -> dict:
        f = self.detection.flags
        return {"kind": self.kind, "flagged": f.flagged, "outcome": f.outcome(), "grades": self.grades,
                "test_metrics": self.test_metrics, "threshold": f.threshold, "median": f.median, "mad": f.mad}


def _grades(flags: OutlierFlags) -> list:
    order = sorted(flags.sensors, key=lambda s: (-s.summed_euclidean, s.sensor_id))
    rank = {s.sensor_id: i + 1 for i, s in enumerate(order)}
    out = []
    for sid, factor in sorted(flags.truth.items(), key=lambda kv: -kv[1]):
        s = flags.by_id(sid)
        out.append({"sensor_id": sid, "factor": factor, "deviation_pct": round(abs(1 - factor) * 100, 6),
                    "flagged": s.flag, "primary": s.primary, "summed_euclidean": s.summed_euclidean,
                    "distance_rank": rank[sid]})
    return out


def run_test_detection(config: RunConfig) -> DetectionReport:
    """Train on deviation-free sensors, then flag deviating sensors in the test chamber."""
    data = simulate_roles(config, {"train": {}, "val": {}, "test": config.deviations})
    ids = data["train"].dataset.sensor_ids
    norm = fit_normalizer([data["train"].raw[s] for s in ids])
    model, report = _train(config, data, norm, ids, derive_seed(config.seed, 3, 0))
    baselines = baseline_pool(config, data["train"], norm, ids)
    det = detect_on(config, model, data["test"], baselines, config.deviations)
    return DetectionReport(config, det, _grades(det.flags), _evaluate(model, data["test"]),
                           report.deterministic_dict(), model=model, baselines=baselines, data=data)


@dataclass
class PruningReport:
    config: RunConfig
    detection: Detection
    pruned: list
    kept: list
    runs_with: list  # per run: metrics dict incl. duration
    runs_without: list

    kind: str = "prune"

    @staticmethod
    def _mean(runs) -> dict:
        return {c: float(np.mean([r[c] for r in runs])) for c in TABLE_COLUMNS}

    @property
    def with_outliers(self) -> dict:
        return self._mean(self.runs_with)

    @property
    def without_outliers(self) -> dict:
        return self._mean(self.runs_without)

    def summary(self) -> dict:
        strip = lambda runs: [{k: v for k, v in r.items() if k != "duration_train_s"} for r in runs]
        f = self.detection.flags
        return {"kind": self.kind, "flagged": f.flagged, "outcome": f.outcome(), "pruned": self.pruned,
                "kept": self.kept, "runs_with_outliers": strip(self.runs_with),
                "runs_without_outliers": strip(self.runs_without)}


def _run_row(model: GruModel, report, data: dict, ids) -> dict:
    tr = _evaluate(model, data["train"], ids)
    te = _evaluate(model, data["test"])
    return {"rmse_train_ppb": tr["rmse"], "mae_train_ppb": tr["mae"], "mape_train_pct": tr["mape"],
            "rmse_test_ppb": te["rmse"], "mae_test_ppb": te["mae"], "mape_test_pct": te["mape"],
            "duration_train_s": report.wall_time, "epochs": len(report.loss_history)}


def run_train_pruning(config: RunConfig) -> PruningReport:
    """Train with deviating sensors, flag and prune them, retrain, compare on a clean test chamber.

    Repetitions alternate between the full and the pruned sensor set so slow
    drifts in machine speed affect both timing columns alike.
    """
    devs = config.deviations
    data = simulate_roles(config, {"train": devs, "val": devs, "test": {}})
    all_ids = data["train"].dataset.sensor_ids

    def run(ids, norm, r):
        model, rep = _train(config, data, norm, ids, derive_seed(config.seed, 3, r))
        row = _run_row(model, rep, data, ids)
        log.info("run %d on %d sensors: test rmse %.3f, %.1f s", r, len(ids), row["rmse_test_ppb"],
                 row["duration_train_s"])
        return model, row

    norm_all = fit_normalizer([data["train"].raw[s] for s in all_ids])
    model, first = run(all_ids, norm_all, 0)
    baselines = baseline_pool(config, data["train"], norm_all, all_ids)
    det = detect_on(config, model, data["train"], baselines, devs)
    flagged = det.flags.flagged
    if len(flagged) >= len(all_ids):
        raise PipelineError("detection flagged every sensor; policy is degenerate")
    kept = [s for s in all_ids if s not in flagged]
    norm_kept = fit_normalizer([data["train"].raw[s] for s in kept])

    runs_with, runs_without = [first], []
    for r in range(config.repetitions):
        if r:
            runs_with.append(run(all_ids, norm_all, r)[1])
        if flagged:
            runs_without.append(run(kept, norm_kept, r)[1])
    if not flagged:
        runs_without = [dict(row) for row in runs_with]
    return PruningReport(config, det, sorted(flagged), kept, runs_with, runs_without)


# ----------------------------------------------------------------------- reports


def _write(path: Path, text: str) -> Path:
    path.write_text(text, encoding="utf-8")
    return path


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def emit_reports(report, directory) -> list[Path]:
    """Write JSON/CSV outputs and a manifest; returns the written paths.

    Every file is a deterministic function of the run config except those in
    ``TIMING_FILES``, which carry training wall-clock durations.
    """
    d = Path(directory)
    try:
        d.mkdir(parents=True, exist_ok=True)
        (d / "heatmaps").mkdir(exist_ok=True)
    except OSError as exc:
        raise PipelineError(f"cannot create report directory {d}: {exc}") from exc
    det = report.detection
    written = [_write(d / "report.json", json.dumps(report.summary(), indent=2) + "\n")]
    written.append(_write(d / "flags.json", json.dumps(det.flags.to_dict(), indent=2) + "\n"))
    written.append(flags_csv(det.flags, d / "flags.csv"))
    written.append(_write(d / "rankings.json", rankings_json(det.rankings, global_importance(det.attribution))))
    for name, m in det.matrices.items():
        written.append(m.to_csv(d / f"similarity_{name}.csv"))
    for sid in det.attribution.sensor_ids:
        written.append(heatmap_export(det.attribution, sid, d / "heatmaps" / f"sensor_{sid:03d}.csv"))

    if isinstance(report, PruningReport):
        with (d / "performance_table.csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["scores"] + TABLE_COLUMNS)
            for label, row in (("with outliers", report.with_outliers), ("without outliers", report.without_outliers)):
                w.writerow([label] + [repr(row[c]) for c in TABLE_COLUMNS])
        written.append(d / "performance_table.csv")
        timings = {"with_outliers": [r["duration_train_s"] for r in report.runs_with],
                   "without_outliers": [r["duration_train_s"] for r in report.runs_without]}
        written.append(_write(d / "timings.json", json.dumps(timings, indent=2) + "\n"))
    else:
        written.append(_write(d / "train_report.json", json.dumps(report.train_report, indent=2) + "\n"))

    cfg = report.config
    manifest = {
        "tool": "sentinel", "version": __version__, "application": report.kind,
        "config": cfg.to_dict(), "config_sha256": cfg.digest(), "master_seed": cfg.seed,
        "seeds": {"profiles": [derive_seed(cfg.seed, 1, i) for i in range(3)],
                  "chamber": derive_seed(cfg.seed, 2),
                  "training": [derive_seed(cfg.seed, 3, r) for r in range(cfg.repetitions)],
                  "baselines": derive_seed(cfg.seed, 4)},
        "files": {str(p.relative_to(d)): _sha(p) for p in written if p.name not in TIMING_FILES},
        "nondeterministic_files": [p.name for p in written if p.name in TIMING_FILES],
    }
    written.append(_write(d / "manifest.json", json.dumps(manifest, indent=2) + "\n"))
    return written
