import csv
import hashlib
import json
from dataclasses import replace
from types import SimpleNamespace

import numpy as np
import pytest

from helpers import desk_detection, small_config
from sentinel import pipeline
from sentinel.detect import euclidean
from sentinel.featex import fit_normalizer
from sentinel.pipeline import (TABLE_COLUMNS, TIMING_FILES, PipelineError, RunConfig, derive_seed, draw_baselines,
                               emit_reports, explain, make_profiles, prepare, run_test_detection, run_train_pruning,
                               simulate_roles)
from sentinel.ranking import sensor_rankings
from sentinel.sensorsim import simulate_chamber


def test_config_round_trip_and_digest(tmp_path):
    c = small_config(seed=7)
    back = RunConfig.from_dict(json.loads(json.dumps(c.to_dict())))
    assert back == c and back.digest() == c.digest()
    assert RunConfig.full().digest() != RunConfig().digest()
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"seed": 3, "train": {"epochs": 5}}))
    loaded = RunConfig.load(path)
    assert loaded.seed == 3 and loaded.train.epochs == 5 and loaded.train.lr == RunConfig().train.lr


def test_config_errors(tmp_path):
    with pytest.raises(PipelineError, match="unknown config keys"):
        RunConfig.from_dict({"sede": 1})
    with pytest.raises(PipelineError, match="unknown train keys"):
        RunConfig.from_dict({"train": {"epoch": 1}})
    with pytest.raises(PipelineError, match="outside"):
        RunConfig(n_sensors=5, deviations={6: 0.9})
    with pytest.raises(PipelineError):
        RunConfig(repetitions=0)
    with pytest.raises(PipelineError):
        RunConfig(profile_kind="hourly")
    with pytest.raises(PipelineError, match="missing.json"):
        RunConfig.load(tmp_path / "missing.json")


def test_derived_seeds_distinct():
    seeds = [derive_seed(0, 1, i) for i in range(3)] + [derive_seed(0, 2), derive_seed(0, 4)]
    seeds += [derive_seed(0, 3, r) for r in range(6)] + [derive_seed(1, 2)]
    assert len(set(seeds)) == len(seeds)
    assert derive_seed(5, 3, 1) == derive_seed(5, 3, 1)


@pytest.mark.parametrize("kind", ["artificial", "realistic"])
def test_profiles_distinct_per_role(kind):
    profs = make_profiles(RunConfig(profile_kind=kind, seed=2))
    values = [p.values for p in profs.values()]
    assert not np.array_equal(values[0][: len(values[1])], values[1][: len(values[0])])
    assert not np.array_equal(values[1][: len(values[2])], values[2][: len(values[1])])


def _window_peaks(prepared, norm, window):
    """Every train window keyed by its bytes, mapped to its concentration peak."""
    vals = prepared.normalised(norm)
    peaks = {}
    for s in vals:
        for k in range(len(prepared.targets) - window + 1):
            peaks[vals[s][k:k + window].tobytes()] = prepared.targets[k:k + window].max()
    return peaks


def test_clean_baselines_come_from_clean_train_windows():
    c = small_config()
    data = simulate_roles(c, {"train": {}, "val": {}, "test": {}})
    norm = fit_normalizer(list(data["train"].raw.values()))
    # the zero lead-in spans five 720 s cycles, so 4-cycle windows have clean starts
    peaks = _window_peaks(data["train"], norm, 4)
    b = draw_baselines(data["train"], norm, 4, replace(c.attribution, n_baselines=16), 0)
    assert len(b) == 16
    assert all(peaks[w.tobytes()] <= c.attribution.clean_ppb for w in b)


def test_clean_baseline_fallback_to_low_quantile():
    c = small_config()
    data = simulate_roles(c, {"train": {}, "val": {}, "test": {}})
    dirty = replace(data["train"], targets=data["train"].targets + 5.0)
    norm = fit_normalizer(list(dirty.raw.values()))
    peaks = _window_peaks(dirty, norm, 8)
    limit = np.quantile(np.array(list(peaks.values())), 0.05)
    b = draw_baselines(dirty, norm, 8, c.attribution, 0)
    assert min(peaks.values()) > 1.0
    assert all(peaks[w.tobytes()] <= limit + 1e-9 for w in b)


def test_split_hygiene_test_chamber_does_not_leak():
    # in the detection application the deviation map only touches the test chamber
    a = run_test_detection(small_config(deviations={2: 0.6}))
    b = run_test_detection(small_config(deviations={4: 0.8, 1: 0.7}))
    assert np.array_equal(a.model.params.W, b.model.params.W)
    assert np.array_equal(a.model.norm.mean, b.model.norm.mean)
    assert np.array_equal(a.baselines, b.baselines)
    assert a.train_report == b.train_report
    expect = fit_normalizer([a.data["train"].raw[s] for s in sorted(a.data["train"].raw)])
    np.testing.assert_array_equal(a.model.norm.std, expect.std)


def test_detection_report_covers_all_test_sensors():
    r = run_test_detection(small_config())
    assert [s.sensor_id for s in r.detection.flags.sensors] == list(range(6))
    assert [g["sensor_id"] for g in r.grades] == [2] and r.grades[0]["deviation_pct"] == 40.0


def test_no_deviations_no_pruning():
    r = run_train_pruning(small_config(deviations={}))
    assert r.pruned == [] and r.kept == list(range(6))
    assert r.runs_with == r.runs_without
    assert r.with_outliers == r.without_outliers


def test_pruning_matches_flags_and_means():
    r = run_train_pruning(small_config())
    assert r.pruned == sorted(r.detection.flags.flagged)
    assert sorted(r.pruned + r.kept) == list(range(6))
    assert len(r.runs_with) == len(r.runs_without) == 2
    for col in TABLE_COLUMNS:
        assert r.with_outliers[col] == pytest.approx(np.mean([x[col] for x in r.runs_with]), rel=1e-15)


def test_pruning_aborts_when_everything_flagged(monkeypatch):
    everything = SimpleNamespace(flags=SimpleNamespace(flagged=list(range(6))))
    monkeypatch.setattr(pipeline, "detect_on", lambda *a, **k: everything)
    with pytest.raises(PipelineError, match="every sensor"):
        run_train_pruning(small_config())


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_emit_prune_reports(tmp_path):
    r = run_train_pruning(small_config())
    emit_reports(r, tmp_path)
    with (tmp_path / "performance_table.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["scores"] + TABLE_COLUMNS and len(TABLE_COLUMNS) == 7
    assert [row[0] for row in rows[1:]] == ["with outliers", "without outliers"]
    assert float(rows[1][4]) == r.with_outliers["rmse_test_ppb"]

    flagged = json.loads((tmp_path / "report.json").read_text())["flagged"]
    assert flagged == [2]
    for metric in ("cosine", "correlation", "euclidean"):
        with (tmp_path / f"similarity_{metric}.csv").open() as fh:
            table = list(csv.reader(fh))
        ids = [int(x) for x in table[0][1:]]
        assert set(flagged) <= set(ids) and [int(row[0]) for row in table[1:]] == ids
    assert len(list((tmp_path / "heatmaps").glob("sensor_*.csv"))) == 6

    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["config_sha256"] == r.config.digest()
    assert sorted(manifest["nondeterministic_files"]) == sorted(TIMING_FILES)
    for name, digest in manifest["files"].items():
        assert _sha(tmp_path / name) == digest
    assert not set(TIMING_FILES) & set(manifest["files"])


def test_emit_detect_reports(tmp_path):
    r = run_test_detection(small_config())
    paths = emit_reports(r, tmp_path / "run")
    names = {p.name for p in paths}
    assert {"report.json", "flags.json", "flags.csv", "rankings.json", "train_report.json", "manifest.json"} <= names
    assert not names & set(TIMING_FILES)
    summary = json.loads((tmp_path / "run" / "report.json").read_text())
    assert summary["outcome"]["true_positives"] == [2]


def test_emit_reports_io_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(PipelineError, match="file"):
        emit_reports(run_test_detection(small_config()), blocker)


def test_in_process_determinism(tmp_path):
    for d in ("a", "b"):
        emit_reports(run_train_pruning(small_config(seed=4)), tmp_path / d)
    for p in sorted((tmp_path / "a").rglob("*")):
        if p.is_file() and p.name not in TIMING_FILES:
            assert p.read_bytes() == (tmp_path / "b" / p.relative_to(tmp_path / "a")).read_bytes(), p.name


@pytest.mark.slow
def test_desk_training_loss_trend():
    """The cumulative running mean of the epoch loss keeps falling over the last ten epochs."""
    c = RunConfig(deviations={}, repetitions=1, train=replace(RunConfig().train, epochs=24))
    data = simulate_roles(c, {r: {} for r in ("train", "val", "test")})
    ids = data["train"].dataset.sensor_ids
    norm = fit_normalizer([data["train"].raw[s] for s in ids])
    _, report = pipeline._train(c, data, norm, ids, derive_seed(c.seed, 3, 0))
    loss = np.asarray(report.loss_history)
    assert len(loss) == 24
    running = np.cumsum(loss) / np.arange(1, len(loss) + 1)
    assert np.all(np.diff(running[-11:]) <= 0), running[-11:]


@pytest.mark.slow
def test_desk_monotone_response():
    """Raising one sensor's deviation, all else re-simulated identically, never lowers its summed distance."""
    report, _ = desk_detection(0)
    c = report.config
    pos = 6
    others = [r for r in report.detection.rankings if r.sensor_id != pos]
    test_profile = report.data["test"].dataset.profile
    sums = []
    for factor in (1.0, 0.95, 0.90, 0.85, 0.80, 0.70):
        devs = {**{k: v for k, v in c.deviations.items() if k != pos}, pos: factor}
        ds = simulate_chamber(test_profile, c.n_sensors, c.sensor, devs, derive_seed(c.seed, 2), c.raw_rate, stream=2)
        prepared = prepare(ds, c.n_harmonics)
        mine = sensor_rankings(explain(c, report.model, prepared, report.baselines, [pos]))[0]
        sums.append(sum(euclidean(mine.importance, o.importance) for o in others))
    assert np.all(np.diff(sums) >= 0), sums
