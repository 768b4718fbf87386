"""Command-line entry point: ``sentinel <command> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .attrib import AttributionSet, heatmap_export, local_attributions
from .detect import Policy, flag_outliers, flags_csv, flags_json, similarity_matrices
from .featex import fit_normalizer
from .grunet import GruModel, TrainConfig, TrainingDiverged, metrics, predict_series, train
from .pipeline import (AttributionConfig, PipelineError, RunConfig, draw_baselines, emit_reports, prepare,
                       run_test_detection, run_train_pruning)
from .profiles import Segment, export_csv, gen_artificial, gen_realistic, import_csv, random_segments
from .ranking import global_importance, load_rankings, rankings_json, sensor_rankings
from .sensorsim import GRADED_DEVIATIONS, SensorConfig, export_dataset, load_dataset, simulate_chamber

log = logging.getLogger("sentinel")


def parse_segments(text: str) -> list[Segment]:
    """``"60:0;120:20;90:20-80"``: minutes:level or minutes:start-end, separated by ``;``."""
    out = []
    for part in filter(None, (p.strip() for p in text.split(";"))):
        try:
            minutes, level = part.split(":")
            if "-" in level.lstrip("-"):
                a, b = level.split("-", 1)
                out.append(Segment(int(minutes), float(a), float(b)))
            else:
                out.append(Segment(int(minutes), float(level)))
        except ValueError:
            raise ValueError(f"bad segment {part!r}; use minutes:level or minutes:start-end") from None
    return out


def parse_deviations(text: str) -> dict:
    """``"6:0.95,2:0.9"`` -> ``{6: 0.95, 2: 0.9}``."""
    out = {}
    for part in filter(None, (p.strip() for p in text.split(","))):
        try:
            pos, factor = part.split(":")
            out[int(pos)] = float(factor)
        except ValueError:
            raise ValueError(f"bad deviation {part!r}; use position:factor") from None
    return out


# ------------------------------------------------------------------- commands


def cmd_profile(args):
    if args.profile_cmd == "gen-artificial":
        segs = parse_segments(args.segments) if args.segments else random_segments(args.random)
        prof = gen_artificial(segs, seed=args.seed, jitter=args.jitter)
    elif args.profile_cmd == "gen-realistic":
        prof = gen_realistic(args.peak_hour, args.base, args.peak, args.width, seed=args.seed, jitter=args.jitter)
    else:
        prof = import_csv(args.input)
    if args.out:
        export_csv(prof, args.out)
    print(json.dumps({"label": prof.label, "samples": len(prof), "resolution": prof.resolution,
                      "duration_s": prof.duration, "min_ppb": float(prof.values.min()),
                      "max_ppb": float(prof.values.max())}))
    return 0


def cmd_simulate(args):
    prof = import_csv(args.profile)
    devs = dict(GRADED_DEVIATIONS) if args.graded_deviations else parse_deviations(args.deviations or "")
    ds = simulate_chamber(prof, args.n_sensors, SensorConfig(heater_period=args.heater_period), devs,
                          args.seed, args.raw_rate, args.stream)
    export_dataset(ds, args.out)
    print(f"wrote {len(ds.responses)} sensors to {args.out}")
    return 0


def _prepared(path):
    return prepare(load_dataset(path))


def cmd_train(args):
    tr, va = _prepared(args.train), _prepared(args.val) if args.val else None
    ids = tr.dataset.sensor_ids
    norm = fit_normalizer([tr.raw[s] for s in ids])
    hyper = TrainConfig(lr=args.lr, epochs=args.epochs, batch_size=args.batch_size, window=args.window,
                        seed=args.seed, hidden=args.hidden, patience=args.patience)
    params, report = train(tr.batch(norm, args.window), hyper, va.batch(norm, args.window) if va else None)
    model = GruModel(params, norm, args.window, report.hyper, args.seed, args.compute_dtype)
    model.save(args.out)
    print(json.dumps({"train": report.train_metrics, "val": report.val_metrics, "epochs": len(report.loss_history),
                      "best_epoch": report.best_epoch, "wall_time_s": report.wall_time}))
    return 0


def _predictions(model: GruModel, prep):
    vals = prep.normalised(model.norm)
    return {s: predict_series(model.params, vals[s], model.window) for s in sorted(vals)}


def cmd_predict(args):
    model = GruModel.load(args.model)
    prep = _prepared(args.data)
    preds = _predictions(model, prep)
    ids = sorted(preds)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cycle", "target_ppb"] + [f"sensor_{s}" for s in ids])
        for i, t in enumerate(prep.targets):
            w.writerow([i, repr(float(t))] + [repr(float(preds[s][i])) for s in ids])
    return 0


def cmd_metrics(args):
    model = GruModel.load(args.model)
    prep = _prepared(args.data)
    preds = _predictions(model, prep)
    per = {str(s): metrics(p, prep.targets) for s, p in preds.items()}
    overall = metrics(np.concatenate(list(preds.values())), np.tile(prep.targets, len(preds)))
    print(json.dumps({"overall": overall, "per_sensor": per}, indent=2))
    return 0


def cmd_explain(args):
    model = GruModel.load(args.model)
    model.compute_dtype = args.compute_dtype
    prep = _prepared(args.data)
    base_src = _prepared(args.baselines_from)
    ac = AttributionConfig(n_baselines=args.n_baselines, steps=args.steps, baseline=args.baseline,
                           clean_ppb=args.clean_ppb)
    baselines = draw_baselines(base_src, model.norm, model.window, ac, args.seed)
    names = next(iter(prep.raw.values())).feature_names
    attr = local_attributions(model, prep.normalised(model.norm), baselines, args.steps, names)
    attr.save(args.out)
    if args.heatmaps:
        Path(args.heatmaps).mkdir(parents=True, exist_ok=True)
        for sid in attr.sensor_ids:
            heatmap_export(attr, sid, Path(args.heatmaps) / f"sensor_{sid:03d}.csv")
    return 0


def cmd_rank(args):
    attr = AttributionSet.load(args.attrib)
    Path(args.out).write_text(rankings_json(sensor_rankings(attr), global_importance(attr)), encoding="utf-8")
    return 0


def cmd_detect(args):
    ranks = load_rankings(Path(args.rankings).read_text(encoding="utf-8"))
    policy = Policy()
    if args.policy != "default":
        fields = json.loads(Path(args.policy).read_text(encoding="utf-8"))
        try:
            policy = Policy(**fields)
        except TypeError as exc:
            raise ValueError(f"bad policy file {args.policy}: {exc}") from None
    truth = load_dataset(args.truth).deviation_truth if args.truth else None
    mats = similarity_matrices(ranks, use_groups=args.groups)
    flags = flag_outliers(mats, policy, truth)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, m in mats.items():
        m.to_csv(out / f"similarity_{name}.csv")
    flags_csv(flags, out / "flags.csv")
    (out / "flags.json").write_text(flags_json(flags), encoding="utf-8")
    print(json.dumps({"flagged": flags.flagged, **({"outcome": flags.outcome()} if truth else {})}))
    return 0


def cmd_run(args):
    base = RunConfig.full() if args.preset == "full" else RunConfig()
    config = RunConfig.load(args.config, base) if args.config else base
    if args.seed is not None:
        config = RunConfig.from_dict({"seed": args.seed}, config)
    if args.mode == "prune":
        report = run_train_pruning(config)
        emit_reports(report, args.out)
        ok = (not report.detection.flags.outcome()["false_positives"]
              and report.without_outliers["rmse_test_ppb"] <= report.with_outliers["rmse_test_ppb"])
    else:
        report = run_test_detection(config)
        emit_reports(report, args.out)
        out = report.detection.flags.outcome()
        strong = {g["sensor_id"] for g in report.grades if g["deviation_pct"] >= 10}
        ok = not out["false_positives"] and strong <= set(out["true_positives"])
    print(json.dumps(report.summary()["outcome"]))
    return 0 if ok else 1


# --------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sentinel", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    prof = sub.add_parser("profile", help="generate or import concentration profiles")
    psub = prof.add_subparsers(dest="profile_cmd", required=True)
    a = psub.add_parser("gen-artificial")
    g = a.add_mutually_exclusive_group(required=True)
    g.add_argument("--segments", help="minutes:level or minutes:start-end, ';'-separated, 1440 min total")
    g.add_argument("--random", type=int, metavar="SEED", help="random segment layout")
    a.add_argument("--jitter", type=float, default=0.0)
    a.add_argument("--seed", type=int)
    a.add_argument("-o", "--out")
    r = psub.add_parser("gen-realistic")
    r.add_argument("--peak-hour", type=int, default=14)
    r.add_argument("--base", type=float, default=20.0)
    r.add_argument("--peak", type=float, default=60.0)
    r.add_argument("--width", type=float, default=3.0)
    r.add_argument("--jitter", type=float, default=0.0)
    r.add_argument("--seed", type=int)
    r.add_argument("-o", "--out")
    i = psub.add_parser("import")
    i.add_argument("input")
    i.add_argument("-o", "--out")
    prof.set_defaults(func=cmd_profile)

    s = sub.add_parser("simulate", help="simulate a chamber of sensors")
    s.add_argument("--profile", required=True)
    s.add_argument("--n-sensors", "--sensors", dest="n_sensors", type=int, default=20)
    s.add_argument("--deviations", "--deviate", dest="deviations", help="position:factor,...")
    s.add_argument("--graded-deviations", action="store_true", help="the 5/10/15/20/30%% grid at 6,2,18,15,8")
    s.add_argument("--heater-period", type=float, default=60.0)
    s.add_argument("--raw-rate", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--stream", type=int, default=0)
    s.add_argument("-o", "--out", required=True)
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", help="train a GRU on a simulated dataset")
    t.add_argument("--train", required=True)
    t.add_argument("--val")
    t.add_argument("--window", type=int, default=32)
    t.add_argument("--epochs", type=int, default=100)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--hidden", type=int, default=40)
    t.add_argument("--patience", type=int, default=10)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--compute-dtype", choices=("float64", "float32"), default="float64")
    t.add_argument("-o", "--out", required=True)
    t.set_defaults(func=cmd_train)

    for name, fn in (("predict", cmd_predict), ("metrics", cmd_metrics)):
        q = sub.add_parser(name)
        q.add_argument("--model", required=True)
        q.add_argument("--data", required=True)
        if name == "predict":
            q.add_argument("-o", "--out", required=True)
        q.set_defaults(func=fn)

    e = sub.add_parser("explain", help="per-datapoint attributions for every sensor")
    e.add_argument("--model", required=True)
    e.add_argument("--data", "--dataset", dest="data", required=True)
    e.add_argument("--baselines-from", required=True, help="train dataset directory")
    e.add_argument("--n-baselines", type=int, default=8)
    e.add_argument("--steps", type=int, default=64)
    e.add_argument("--baseline", choices=("clean", "train"), default="clean")
    e.add_argument("--clean-ppb", type=float, default=1.0)
    e.add_argument("--compute-dtype", choices=("float64", "float32"), default="float64")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--heatmaps")
    e.add_argument("-o", "--out", required=True)
    e.set_defaults(func=cmd_explain)

    k = sub.add_parser("rank", help="global and per-sensor feature rankings")
    k.add_argument("--attrib", required=True)
    k.add_argument("-o", "--out", required=True)
    k.set_defaults(func=cmd_rank)

    d = sub.add_parser("detect", help="flag deviating sensors from rankings")
    d.add_argument("--rankings", required=True)
    d.add_argument("--policy", default="default", help="'default' or a JSON file of policy fields")
    d.add_argument("--truth", help="dataset directory whose deviation map is the ground truth")
    d.add_argument("--groups", action="store_true", help="compare group rollups instead of features")
    d.add_argument("-o", "--out", required=True)
    d.set_defaults(func=cmd_detect)

    u = sub.add_parser("run", help="run an application end to end")
    u.add_argument("mode", choices=("prune", "detect"))
    u.add_argument("--config", help="JSON run config; missing keys take preset values")
    u.add_argument("--preset", choices=("desk", "full"), default="desk")
    u.add_argument("--seed", type=int)
    u.add_argument("-o", "--out", required=True)
    u.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ValueError, PipelineError, TrainingDiverged, OSError) as exc:
        print(f"sentinel: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
