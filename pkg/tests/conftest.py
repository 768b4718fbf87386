import pytest
from hypothesis import HealthCheck, settings

from helpers import CRITERIA
from sentinel.featex import extract_features, fit_normalizer, apply_normalizer
from sentinel.grunet import GruModel, TrainConfig, WindowBatch, train
from sentinel.profiles import gen_artificial, random_segments
from sentinel.sensorsim import SensorConfig, simulate_chamber

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_chamber():
    """Six sensors, 360 s heater cycles (240 per day), one deviating sensor."""
    prof = gen_artificial(random_segments(11))
    return simulate_chamber(prof, 6, SensorConfig(heater_period=360.0), {2: 0.7}, seed=5)


@pytest.fixture(scope="session")
def small_model(small_chamber):
    """A briefly trained GRU on the small chamber, with its normalised series."""
    feats = [extract_features(r) for r in small_chamber.responses]
    norm = fit_normalizer(feats)
    series = {f.sensor_id: apply_normalizer(f, norm).values for f in feats}
    t = small_chamber.cycle_targets()
    batch = WindowBatch([series[s] for s in sorted(series)], [t] * len(series), 12, sorted(series))
    hyper = TrainConfig(lr=3e-3, epochs=3, batch_size=64, window=12, hidden=10, seed=3)
    params, report = train(batch, hyper)
    return GruModel(params, norm, 12, {}, 3), series, t
