"""Global and per-sensor feature rankings from averaged local attributions."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .attrib import AttributionSet
from .featex import GROUPS


class RankingError(ValueError):
    pass


@dataclass
class GlobalRanking:
    importance: np.ndarray
    n: int
    feature_names: list

    def to_dict(self) -> dict:
        return {"n": self.n,
                "importance": {k: float(v) for k, v in zip(self.feature_names, self.importance)},
                "groups": group_rollup(self.importance, self.feature_names)}


@dataclass
class SensorRanking:
    sensor_id: int
    importance: np.ndarray
    n: int
    feature_names: list
    group_rollup: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"sensor_id": self.sensor_id, "n": self.n,
                "importance": {k: float(v) for k, v in zip(self.feature_names, self.importance)},
                "groups": self.group_rollup}

    @classmethod
    def from_dict(cls, d) -> "SensorRanking":
        names = list(d["importance"])
        imp = np.array([d["importance"][k] for k in names])
        return cls(int(d["sensor_id"]), imp, int(d["n"]), names, group_rollup(imp, names))


def group_rollup(importance, feature_names) -> dict:
    """Sum of importances per feature group (R, SL, AMP, PA, THD) across arrays."""
    out = {}
    for g in GROUPS:
        members = [i for i, name in enumerate(feature_names) if name.rsplit("_", 1)[-1] == g]
        if members:
            out[g] = float(np.sum(np.asarray(importance)[members]))
    return out


def global_importance(attr: AttributionSet) -> GlobalRanking:
    if not attr.phi_avg:
        raise RankingError("empty attribution set")
    data = np.concatenate([attr.phi_avg[s] for s in attr.sensor_ids], axis=0)
    if len(data) == 0:
        raise RankingError("empty attribution set")
    return GlobalRanking(np.abs(data).mean(axis=0), len(data), list(attr.feature_names))


def sensor_ranking(attr: AttributionSet, sensor_id: int) -> SensorRanking:
    if sensor_id not in attr.phi_avg:
        raise RankingError(f"unknown sensor {sensor_id}")
    data = attr.phi_avg[sensor_id]
    if len(data) == 0:
        raise RankingError(f"sensor {sensor_id} has no samples")
    # the outer abs is a no-op on averaged |phi| values, kept to match the definition
    imp = np.abs(data).mean(axis=0)
    return SensorRanking(sensor_id, imp, len(data), list(attr.feature_names),
                         group_rollup(imp, attr.feature_names))


def sensor_rankings(attr: AttributionSet) -> list[SensorRanking]:
    return [sensor_ranking(attr, s) for s in attr.sensor_ids]


def rank_order(ranking) -> list[int]:
    """Feature indices by descending importance; ties broken by index."""
    imp = np.asarray(getattr(ranking, "importance", ranking), dtype=float)
    return sorted(range(len(imp)), key=lambda j: (-imp[j], j))


def rankings_json(rankings: list[SensorRanking], glob: GlobalRanking | None = None) -> str:
    payload = {"sensors": [r.to_dict() for r in rankings]}
    if glob is not None:
        payload["global"] = glob.to_dict()
    return json.dumps(payload, indent=2) + "\n"


def load_rankings(text: str) -> list[SensorRanking]:
    try:
        return [SensorRanking.from_dict(d) for d in json.loads(text)["sensors"]]
    except (KeyError, TypeError) as exc:
        raise RankingError(f"malformed rankings document: missing {exc}") from None
