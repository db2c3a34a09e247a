import numpy as np
import pytest

from spafh.mcmc import ChainConfig
from spafh.model import ModelError
from spafh.simulation import (
    MetricTable, ScenarioSpec, build_lattice, compute_metrics, gen_dataset, run_study, threshold_columns,
)
import spafh.simulation as simulation


def test_lattice_100_degrees_and_edges():
    s = build_lattice(100)
    assert len(s.edges) == 180
    deg = s.degree.reshape(10, 10)
    assert deg[0, 0] == deg[0, -1] == deg[-1, 0] == deg[-1, -1] == 2
    assert np.all(deg[0, 1:-1] == 3) and np.all(deg[1:-1, 0] == 3)
    assert np.all(deg[1:-1, 1:-1] == 4)
    W = s.dense_W()
    assert np.array_equal(W, W.T) and np.all(np.diag(W) == 0)


def test_lattice_20_degrees():
    assert set(build_lattice(20).degree.tolist()) <= {2.0, 3.0}
    with pytest.raises(ModelError):
        build_lattice(25)


def test_variance_case_proportions():
    data, _, _ = gen_dataset(None, ScenarioSpec(scenario=1, m=100, seed=1))
    levels, counts = np.unique(data.V[:, 0, 0], return_counts=True)
    np.testing.assert_allclose(levels, [0.3, 0.4, 0.5, 0.6, 0.7])
    assert np.all(counts == 20)
    assert np.all(data.V[:, 0, 1] == 0)


def test_noise_free_recovery():
    data, theta, u = gen_dataset(np.random.default_rng(0), ScenarioSpec(scenario=4, m=20), noise=False)
    np.testing.assert_allclose(data.y, theta)
    np.testing.assert_allclose(theta - u, data.X @ np.ones(4))


def test_noise_is_centred():
    rng = np.random.default_rng(7)
    spec = ScenarioSpec(scenario=1, m=20)
    resid = []
    for _ in range(10_000 // 20):
        data, theta, _ = gen_dataset(rng, spec)
        resid.append(data.y - theta)
    resid = np.concatenate(resid)
    se = resid.std(axis=0) / np.sqrt(len(resid))
    assert np.all(np.abs(resid.mean(axis=0)) < 3 * se)


@pytest.mark.parametrize("scenario,m,zeros", [(4, 100, 50), (5, 500, 400)])
def test_threshold_zero_counts(scenario, m, zeros):
    _, _, u = gen_dataset(np.random.default_rng(3), ScenarioSpec(scenario=scenario, m=m))
    assert np.all((u == 0).sum(axis=0) == zeros)


def test_threshold_keeps_largest():
    u = np.array([[3.0, -1.0], [-0.5, 2.0], [1.0, 0.1], [-4.0, 0.2]])
    out = threshold_columns(u, 0.5)
    np.testing.assert_array_equal(out, [[3.0, -1.0], [0, 2.0], [0, 0], [-4.0, 0]])


def test_mixture_fraction():
    spec = ScenarioSpec(scenario=2, m=100)
    assert spec.omega == 0.5 and ScenarioSpec(scenario=3).omega == 0.8
    s = build_lattice(100)
    shifted = []
    for seed in range(50):
        u = simulation.gen_random_effects(np.random.default_rng(seed), spec, s)
        base = simulation.mcar_draw(np.random.default_rng(seed), s, spec.rho_true, spec.sigma_true)
        shift = u - base
        assert np.all(np.isclose(shift, 0) | np.isclose(shift, 5.0))
        shifted.append(np.isclose(shift, 5.0))
    frac = np.concatenate(shifted).mean()
    n = 50 * 100 * 2
    assert abs(frac - 0.5) < 3 * np.sqrt(0.25 / n)


def test_covariate_seed_shares_design():
    a = gen_dataset(np.random.default_rng(1), ScenarioSpec(covariate_seed=9))[0]
    b = gen_dataset(np.random.default_rng(2), ScenarioSpec(covariate_seed=9))[0]
    c = gen_dataset(np.random.default_rng(2), ScenarioSpec())[0]
    np.testing.assert_array_equal(a.X, b.X)
    assert not np.array_equal(b.X, c.X)


def test_metrics_perfect_estimator():
    truth = np.random.default_rng(0).standard_normal((4, 2))
    m = compute_metrics(np.repeat(truth[None], 10, axis=0), truth)
    assert m["cp"] == 1.0 and m["al"] == 0.0
    assert m["aad"] == pytest.approx(0.0, abs=1e-14) and m["asd"] == pytest.approx(0.0, abs=1e-28)


def test_metrics_integer_sequence():
    draws = np.arange(101, dtype=float).reshape(101, 1, 1)
    m = compute_metrics(draws, np.array([[50.0]]))
    assert m["aad"] == 0 and m["asd"] == 0 and m["cp"] == 1
    assert m["al"] == pytest.approx(95.0)


def test_metrics_translation_invariant():
    rng = np.random.default_rng(2)
    draws = rng.standard_normal((200, 5, 2))
    truth = rng.standard_normal((5, 2))
    a, b = compute_metrics(draws, truth), compute_metrics(draws + 3.25, truth + 3.25)
    for key in a:
        assert a[key] == pytest.approx(b[key], abs=1e-12)


def test_study_table_shape_and_fairness(monkeypatch):
    seen = []
    real = simulation.run_chain

    def spy(rng, data, structure, model, config, state=None):
        seen.append((model.variant.value, data.y.tobytes()))
        return real(rng, data, structure, model, config, state)

    monkeypatch.setattr(simulation, "run_chain", spy)
    grid = [ScenarioSpec(scenario=1, m=20), ScenarioSpec(scenario=4, m=20)]
    table = run_study(grid, ["FH", "SpaFH"], n_reps=2, rng_seed=3, config=ChainConfig(30, 10))
    assert len(table.rows) == 2 * 2 * 2
    pairs = [seen[i:i + 2] for i in range(0, len(seen), 2)]
    assert all(p[0][1] == p[1][1] for p in pairs)
    assert len({p[0][1] for p in pairs}) == 4
    med = table.medians()
    assert len(med) == 4 and all(r["n_reps"] == 2 for r in med)


def test_single_replication_median_is_identity():
    table = run_study([ScenarioSpec(m=20)], ["FH"], n_reps=1, rng_seed=0, config=ChainConfig(30, 10))
    row = table.rows[0]
    for key in ("aad", "asd", "cp", "al"):
        assert table.median("FH", 1, 20, "a", key) == row[key]


def test_failed_replications_are_excluded():
    t = MetricTable()
    for rep, (val, failed) in enumerate([(1.0, False), (np.nan, True), (3.0, False)]):
        t.add({"method": "FH", "scenario": 1, "m": 20, "variance_case": "a", "replication": rep,
               "aad": val, "asd": val, "cp": val, "al": val, "failed": failed})
    (row,) = t.medians()
    assert row["aad"] == 2.0 and row["n_failed"] == 1


def test_scenario_validation():
    with pytest.raises(ModelError):
        ScenarioSpec(scenario=6)
    with pytest.raises(ModelError):
        ScenarioSpec(variance_case="c")
    with pytest.raises(ModelError):
        ScenarioSpec(beta_true=(1.0,))
