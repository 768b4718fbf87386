"""Measurement-chamber simulator for heater-modulated chemi-resistive sensors.

The response model is deliberately simple and non-physical. For array ``a``::

    r_a(t) = r0_a * (1 + d*s_a*g(c)) * (1 + m*sin(w*t + theta_a) + kappa*d*s_a*g(c)*sin(2*w*t)) * (1 + eps)
    g(c)   = c / (c + K)

``d`` is the sensor's deviation factor (1.0 nominal, 0.95 is a 5% loss of
sensitivity), ``m`` the heater modulation depth, ``kappa`` the harmonic
coupling and ``eps`` i.i.d. Gaussian relative noise. The second-harmonic term
makes the response distortion grow with concentration times sensitivity.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .profiles import ConcentrationProfile, DenseProfile, densify

GRADED_DEVIATIONS = {6: 0.95, 2: 0.90, 18: 0.85, 15: 0.80, 8: 0.70}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SensorConfig:
    n_arrays: int = 4
    baseline_resistance: tuple = (10e3, 12e3, 8e3, 15e3)
    sensitivity: tuple = (0.40, 0.30, 0.50, 0.25)
    phase_offset: tuple = (0.0, 0.4, 0.8, 1.2)
    heater_period: float = 60.0
    heater_mod_depth: float = 0.3
    harmonic_coupling: float = 0.4
    noise_sigma: float = 0.002
    deviation_factor: float = 1.0
    saturation_ppb: float = 100.0

    def validate(self, raw_rate: float = 1.0) -> None:
        n = self.n_arrays
        for name in ("baseline_resistance", "sensitivity", "phase_offset"):
            if len(getattr(self, name)) != n:
                raise ConfigError(f"{name} needs {n} entries")
        if any(r <= 0 for r in self.baseline_resistance):
            raise ConfigError("baseline resistances must be > 0")
        if any(s <= 0 for s in self.sensitivity):
            raise ConfigError("sensitivities must be > 0")
        ticks = self.heater_period * raw_rate
        if ticks < 16 or abs(ticks - round(ticks)) > 1e-9:
            raise ConfigError(f"heater period must span an integer >= 16 ticks, got {ticks}")
        if not 0 <= self.heater_mod_depth <= 1:
            raise ConfigError("heater_mod_depth must be in [0, 1]")
        if self.harmonic_coupling < 0 or self.noise_sigma < 0:
            raise ConfigError("harmonic_coupling and noise_sigma must be >= 0")
        if not 0 < self.deviation_factor < 2:
            raise ConfigError(f"deviation_factor must be in (0, 2), got {self.deviation_factor}")
        if self.saturation_ppb <= 0:
            raise ConfigError("saturation_ppb must be > 0")
        # g(c) < 1, so this keeps the modulation factor strictly positive
        bound = (self.heater_mod_depth + self.harmonic_coupling * self.deviation_factor * max(self.sensitivity)
                 + 5 * self.noise_sigma)
        if bound >= 1:
            raise ConfigError(f"m + kappa*d*max(s) + 5*sigma = {bound:.3f} must be < 1")

    def ticks_per_cycle(self, raw_rate: float) -> int:
        return int(round(self.heater_period * raw_rate))


@dataclass
class SensorResponse:
    resistance: np.ndarray  # ticks x n_arrays, ohm
    raw_rate: float
    heater_period: float
    sensor_id: int = 0

    @property
    def ticks_per_cycle(self) -> int:
        return int(round(self.heater_period * self.raw_rate))


@dataclass
class MultiSensorDataset:
    responses: list
    profile: ConcentrationProfile
    dense: DenseProfile
    deviation_truth: dict
    seed: int
    nominal: SensorConfig = field(default_factory=SensorConfig)

    @property
    def sensor_ids(self) -> list[int]:
        return [r.sensor_id for r in self.responses]

    def cycle_targets(self) -> np.ndarray:
        """Mean concentration over each heater cycle (ppb)."""
        tpc = self.responses[0].ticks_per_cycle
        n = len(self.dense) // tpc
        return self.dense.values[: n * tpc].reshape(n, tpc).mean(axis=1)

    def subset(self, sensor_ids: Iterable[int]) -> "MultiSensorDataset":
        keep = set(sensor_ids)
        return replace(self,
                       responses=[r for r in self.responses if r.sensor_id in keep],
                       deviation_truth={k: v for k, v in self.deviation_truth.items() if k in keep})


def saturating(c, k: float):
    c = np.asarray(c, dtype=float)
    return c / (c + k)


def simulate_sensor(dense: DenseProfile, config: SensorConfig, seed: int | np.random.SeedSequence = 0,
                    sensor_id: int = 0) -> SensorResponse:
    config.validate(dense.raw_rate)
    if len(dense) == 0:
        raise ConfigError("empty dense profile")
    t = np.arange(len(dense)) / dense.raw_rate
    omega = 2 * np.pi / config.heater_period
    r0 = np.asarray(config.baseline_resistance, dtype=float)
    sens = np.asarray(config.sensitivity, dtype=float)
    theta = np.asarray(config.phase_offset, dtype=float)

    resp = config.deviation_factor * sens[None, :] * saturating(dense.values, config.saturation_ppb)[:, None]
    heater = (1.0 + config.heater_mod_depth * np.sin(omega * t[:, None] + theta[None, :])
              + config.harmonic_coupling * resp * np.sin(2 * omega * t)[:, None])
    r = r0[None, :] * (1.0 + resp) * heater
    if config.noise_sigma > 0:
        rng = np.random.default_rng(seed)
        r = r * (1.0 + rng.normal(0.0, config.noise_sigma, r.shape))
    return SensorResponse(r, dense.raw_rate, config.heater_period, sensor_id)


def _normalise_deviations(deviations) -> dict[int, float]:
    if deviations is None:
        return {}
    items = deviations.items() if isinstance(deviations, Mapping) else deviations
    out: dict[int, float] = {}
    for pos, factor in items:
        pos = int(pos)
        if pos in out:
            raise ConfigError(f"duplicate deviation position {pos}")
        out[pos] = float(factor)
    return out


def sensor_seed(master: int, sensor_id: int, stream: int = 0) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(master), int(stream), int(sensor_id)])


def simulate_chamber(profile: ConcentrationProfile, n_sensors: int = 20,
                     nominal: SensorConfig | None = None, deviations=None, seed: int = 0,
                     raw_rate: float = 1.0, stream: int = 0) -> MultiSensorDataset:
    """Simulate ``n_sensors`` identical sensors sharing one chamber and profile.

    ``deviations`` maps sensor position to deviation factor (a mapping or a
    sequence of pairs). ``stream`` separates noise realisations of the same
    chamber exposed to different profiles.
    """
    nominal = nominal or SensorConfig()
    devs = _normalise_deviations(deviations)
    for pos, factor in devs.items():
        if not 0 <= pos < n_sensors:
            raise ConfigError(f"deviation position {pos} outside 0..{n_sensors - 1}")
        if not 0 < factor < 2:
            raise ConfigError(f"deviation factor {factor} at position {pos} outside (0, 2)")
    dense = densify(profile, raw_rate)
    responses = []
    for sid in range(n_sensors):
        cfg = replace(nominal, deviation_factor=devs.get(sid, 1.0))
        responses.append(simulate_sensor(dense, cfg, sensor_seed(seed, sid, stream), sid))
    return MultiSensorDataset(responses, profile, dense, dict(sorted(devs.items())), seed, nominal)


def export_dataset(ds: MultiSensorDataset, directory) -> Path:
    """One CSV per sensor (``t_s, r_array0, ...``) plus ``manifest.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    n_arrays = ds.responses[0].resistance.shape[1]
    for r in ds.responses:
        with (d / f"sensor_{r.sensor_id:03d}.csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t_s"] + [f"r_array{a}" for a in range(n_arrays)])
            t = np.arange(len(r.resistance)) / r.raw_rate
            for ti, row in zip(t, r.resistance):
                w.writerow([repr(float(ti))] + [repr(float(v)) for v in row])
    manifest = {
        "seed": ds.seed,
        "raw_rate": ds.dense.raw_rate,
        "profile": {"label": ds.profile.label, "resolution_s": ds.profile.resolution_s,
                    "times": ds.profile.times.tolist(), "values": ds.profile.values.tolist()},
        "nominal": asdict(ds.nominal),
        "deviation_model": "multiplicative sensitivity scaling",
        "deviation_truth": {str(k): v for k, v in ds.deviation_truth.items()},
        "sensors": ds.sensor_ids,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return d


def load_dataset(directory) -> MultiSensorDataset:
    d = Path(directory)
    man = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
    nominal = SensorConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in man["nominal"].items()})
    p = man["profile"]
    profile = ConcentrationProfile(np.array(p["times"]), np.array(p["values"]), p["resolution_s"], p["label"])
    dense = densify(profile, man["raw_rate"])
    responses = []
    for sid in man["sensors"]:
        data = np.loadtxt(d / f"sensor_{sid:03d}.csv", delimiter=",", skiprows=1, ndmin=2)
        responses.append(SensorResponse(data[:, 1:], man["raw_rate"], nominal.heater_period, sid))
    truth = {int(k): float(v) for k, v in man["deviation_truth"].items()}
    return MultiSensorDataset(responses, profile, dense, truth, man["seed"], nominal)
