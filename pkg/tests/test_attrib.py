import numpy as np
import pytest
from hypothesis import given, strategies as st

from sentinel.attrib import (AttributionError, AttributionSet, LinearSurrogate, expected_gradients, exact_shapley,
                             heatmap, heatmap_export, local_attributions, sample_baselines)


class Quadratic:
    """f(X) = sum(a * X**2) on the final step only; exact gradients, non-linear."""

    def __init__(self, a):
        self.a = np.asarray(a, dtype=float)

    def final_output(self, X):
        return np.einsum("nlf,lf->n", np.asarray(X) ** 2, self.a)

    def final_output_and_grad(self, X):
        X = np.asarray(X, dtype=float)
        return self.final_output(X), 2 * self.a * X


def test_window_equal_to_baseline_gives_zero():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 3))
    res = expected_gradients(Quadratic(rng.normal(size=(5, 3))), x, x[None], steps=7)
    assert np.all(res.phi == 0)
    assert res.residual == pytest.approx(0, abs=1e-12)


@given(st.integers(0, 10_000), st.integers(1, 40), st.integers(1, 6))
def test_linear_model_exact(seed, steps, B):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(4, 3))
    x, base = rng.normal(size=(4, 3)), rng.normal(size=(B, 4, 3))
    res = expected_gradients(LinearSurrogate(w, 0.3), x, base, steps=steps)
    np.testing.assert_allclose(res.phi, w * (x - base.mean(axis=0)), rtol=0, atol=1e-10)


def test_linear_matches_exact_shapley():
    rng = np.random.default_rng(1)
    w = rng.normal(size=(3, 4))
    model = LinearSurrogate(w, 1.0)
    x, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    shap = exact_shapley(lambda z: model.final_output(z[None])[0], x, b)
    np.testing.assert_allclose(expected_gradients(model, x, b[None], steps=3).phi, shap, atol=1e-12)


def test_symmetric_features_equal_attribution():
    w = np.ones((2, 3))
    x = np.array([[1.0, 1.0, 2.0], [3.0, 3.0, 0.5]])
    phi = expected_gradients(LinearSurrogate(w), x, np.zeros((1, 2, 3)), steps=5).phi
    np.testing.assert_array_equal(phi[:, 0], phi[:, 1])


def test_quadratic_completeness_converges():
    rng = np.random.default_rng(2)
    model = Quadratic(rng.normal(size=(4, 2)))
    x, base = rng.normal(size=(4, 2)), rng.normal(size=(3, 4, 2))
    # midpoint rule is exact for a linear integrand (quadratic f)
    assert abs(expected_gradients(model, x, base, steps=1).residual) < 1e-12


def test_baseline_subsampling_is_seeded():
    rng = np.random.default_rng(3)
    model = LinearSurrogate(rng.normal(size=(2, 2)))
    x, pool = rng.normal(size=(2, 2)), rng.normal(size=(20, 2, 2))
    a = expected_gradients(model, x, pool, steps=2, n_baselines=4, seed=9)
    b = expected_gradients(model, x, pool, steps=2, n_baselines=4, seed=9)
    assert np.array_equal(a.phi, b.phi) and a.base_value == b.base_value


def test_errors():
    x = np.zeros((3, 2))
    with pytest.raises(AttributionError, match="empty"):
        expected_gradients(LinearSurrogate(np.ones((3, 2))), x, np.zeros((0, 3, 2)))
    with pytest.raises(AttributionError, match="steps"):
        expected_gradients(LinearSurrogate(np.ones((3, 2))), x, x[None], steps=0)
    with pytest.raises(AttributionError, match="shape"):
        expected_gradients(LinearSurrogate(np.ones((3, 2))), x, np.zeros((1, 4, 2)))
    with pytest.raises(AttributionError, match="empty"):
        sample_baselines([np.zeros((10, 2))], 4, 3, 0, [np.full(10, 5.0)], 1.0)


def test_clean_baselines_respect_target_limit():
    series = [np.arange(40.0)[:, None]]
    targets = [np.r_[np.zeros(10), np.full(30, 50.0)]]
    b = sample_baselines(series, 4, 16, 0, targets, 1.0)
    assert b.shape == (16, 4, 1) and b[:, :, 0].max() <= 9


def _brute_force(model, series, baselines, steps):
    """Enumerate every window explicitly and average |phi| per datapoint."""
    L = baselines.shape[1]
    C, F = series.shape
    buckets = [[] for _ in range(C)]
    for s in range(C - L + 1):
        phi = expected_gradients(model, series[s:s + L], baselines, steps).phi
        for k in range(L):
            buckets[s + k].append(np.abs(phi[k]))
    return np.array([np.mean(b, axis=0) for b in buckets]), np.array([len(b) for b in buckets])


def test_streaming_matches_brute_force(small_model):
    model, series, _ = small_model
    rng = np.random.default_rng(4)
    baselines = np.stack([series[0][s:s + 12] for s in rng.integers(0, 200, 3)])
    sub = {5: series[5][:40], 1: series[1][100:135]}
    attr = local_attributions(model, sub, baselines, steps=4, chunk=7)
    for sid, vals in sub.items():
        expect, m = _brute_force(model, vals, baselines, 4)
        np.testing.assert_allclose(attr.phi_avg[sid], expect, rtol=1e-12, atol=1e-15)
        np.testing.assert_array_equal(attr.counts[sid], m)
    assert attr.sensor_ids == [1, 5]


def test_absolute_average_across_windows():
    model = LinearSurrogate(np.array([[-0.5], [0.5]]))
    series = np.array([[2.0], [1.0], [4.0]])
    attr = local_attributions(model, {0: series}, np.zeros((1, 2, 1)), steps=1)
    # cycle 1 gets +0.5 from the first window and -0.5 from the second
    np.testing.assert_allclose(attr.phi_avg[0][:, 0], [1.0, 0.5, 2.0])
    np.testing.assert_array_equal(attr.counts[0], [1, 2, 1])


def test_local_attributions_short_series():
    with pytest.raises(AttributionError):
        local_attributions(LinearSurrogate(np.ones((4, 1))), {0: np.zeros((3, 1))}, np.zeros((1, 4, 1)))


def test_heatmap_shape_and_export(tmp_path, small_model):
    model, series, _ = small_model
    baselines = np.stack([series[0][:12], series[3][:12]])
    attr = local_attributions(model, {2: series[2][:30]}, baselines, steps=2, feature_names=[f"f{i}" for i in range(20)])
    hm = heatmap(attr, 2)
    assert hm.shape == (30, 20) and np.all(hm >= 0)
    path = heatmap_export(attr, 2, tmp_path / "h.csv")
    rows = np.loadtxt(path, delimiter=",", skiprows=1)
    np.testing.assert_array_equal(rows[:, 1:], hm)
    np.testing.assert_allclose(rows[:, 1:].sum(axis=1), attr.phi_avg[2].sum(axis=1), rtol=1e-15)
    with pytest.raises(AttributionError, match="unknown"):
        heatmap(attr, 99)


def test_attribution_set_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    attr = AttributionSet(["a", "b"], {0: rng.random((4, 2)), 3: rng.random((6, 2))},
                          {0: np.ones(4, int), 3: np.ones(6, int)}, 1.25, {"steps": 4})
    attr.save(tmp_path / "a.npz")
    back = AttributionSet.load(tmp_path / "a.npz")
    assert back.feature_names == ["a", "b"] and back.base_value == 1.25 and back.meta == {"steps": 4}
    for sid in (0, 3):
        assert np.array_equal(back.phi_avg[sid], attr.phi_avg[sid])


def test_gru_attribution_shapes(small_model):
    model, series, _ = small_model
    x = series[4][:12]
    res = expected_gradients(model, x, series[0][None, :12], steps=8)
    assert res.phi.shape == (12, 20) and np.all(np.isfinite(res.phi))
    _, g = model.final_output_and_grad(x[None])
    assert g.shape == (1, 12, 20)


def test_exact_shapley_limit():
    with pytest.raises(AttributionError):
        exact_shapley(lambda z: 0.0, np.zeros(15), np.zeros(15))
