import numpy as np
import pytest

from divtrack.stats import spearman_rho
from divtrack.synthetic import PanelSpec, ToySpec, generate_panel, generate_toy
from divtrack.tracker import tracking_objective


def test_toy_deterministic():
    a, b = generate_toy(ToySpec(seed=4)), generate_toy(ToySpec(seed=4))
    np.testing.assert_array_equal(a.X, b.X)
    np.testing.assert_array_equal(a.Y, b.Y)
    assert not np.array_equal(a.X[:, :5], generate_toy(ToySpec(seed=5)).X[:, :5])


def test_toy_shapes_and_sizes():
    inst = generate_toy(ToySpec(seed=0))
    n = inst.X.shape[1]
    assert inst.X.shape == (750, n) and inst.Y.shape == (750,)
    assert inst.sizes.sum() == n
    assert inst.sizes.min() >= 50 and inst.sizes.max() <= 200
    np.testing.assert_allclose(inst.true_group_weight, 0.2)


def test_single_group_without_noise():
    inst = generate_toy(ToySpec(n_groups=1, dims=20, group_size_range=(3, 3), noise_std=0.0))
    for j in range(3):
        np.testing.assert_array_equal(inst.X[:, j], inst.Y)


def test_rank_correlation_within_and_across_groups():
    inst = generate_toy(ToySpec(seed=1, group_size_range=(3, 5)))
    g = inst.group_of
    a, b = np.flatnonzero(g == 0)[:2]
    c = np.flatnonzero(g == 1)[0]
    assert spearman_rho(inst.X[:, a], inst.X[:, b]) > 0.99
    assert abs(spearman_rho(inst.X[:, a], inst.X[:, c])) < 0.2


def test_oracle_objective_is_noise_level():
    inst = generate_toy(ToySpec(seed=2))
    w = inst.oracle_weights()
    assert w.sum() == pytest.approx(1.0) and np.count_nonzero(w) == 5
    mse = tracking_objective(w, inst.X, inst.Y) / inst.X.shape[0]
    # residual is Y noise plus the weighted X noise on the five chosen copies
    expected = 0.05**2 * (1 + 5 * 0.2**2)
    assert mse == pytest.approx(expected, rel=0.15)


def test_panel_structure():
    spec = PanelSpec(n_assets=30, n_days=60, n_industries=4, seed=3)
    panel = generate_panel(spec)
    assert len(panel.dates) == 60 and len(panel.tickers) == 30
    assert all(d.weekday() < 5 for d in panel.dates)
    assert np.all(panel.prices > 0)
    assert panel.index_prices[0] == pytest.approx(100.0)
    assert panel.members_at(panel.dates[-1]) == frozenset(panel.tickers)
    assert len(set(panel.sector_of.values())) <= 2
    again = generate_panel(spec)
    assert again == panel
