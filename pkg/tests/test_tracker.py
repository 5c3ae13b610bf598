import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from divtrack.qp import simplex_problem, solve_qp
from divtrack.spectral import assignment_matrix
from divtrack.synthetic import ToySpec, generate_toy
from divtrack.tracker import (
    Portfolio,
    TrackerParams,
    assemble_qp,
    build_similarity,
    diversity_loss,
    diversity_loss_pairwise,
    reweighted_l1,
    reweighted_l1_by_cluster,
    sector_clusters,
    sparsify,
    track,
    tracking_objective,
)


def random_labels(rng, n, k):
    labels = np.concatenate([np.arange(k), rng.integers(0, k, n - k)])
    return rng.permutation(labels)


def test_similarity_examples():
    Z = assignment_matrix([0, 1, 0]).Z
    np.testing.assert_array_equal(build_similarity(Z), [[1, 0, 1], [0, 1, 0], [1, 0, 1]])
    np.testing.assert_array_equal(build_similarity(np.eye(4)), np.eye(4))


def test_diversity_loss_examples():
    labels = np.repeat(np.arange(4), 3)
    Z = assignment_matrix(labels)
    # equal capital per cluster gives 1/K
    assert diversity_loss(np.full(12, 1 / 12), Z) == pytest.approx(1 / 4)
    # everything in one cluster gives 1
    assert diversity_loss(np.r_[np.full(3, 1 / 3), np.zeros(9)], Z) == pytest.approx(1.0)
    # singletons reduce to the Herfindahl index
    assert diversity_loss(np.full(5, 0.2), np.eye(5)) == pytest.approx(0.2)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 12), st.integers(1, 5))
def test_diversity_loss_forms_agree(seed, n, k):
    rng = np.random.default_rng(seed)
    k = min(k, n)
    Z = assignment_matrix(random_labels(rng, n, k))
    w = rng.dirichlet(np.ones(n))
    assert diversity_loss_pairwise(w, Z.similarity) == pytest.approx(diversity_loss(w, Z), abs=1e-12)


def test_reweighted_l1_examples():
    w = np.array([0.5, 0.3, 0.2])
    # one cluster: 1/N
    assert reweighted_l1(w, np.ones((1, 3))) == pytest.approx(1 / 3)
    # whole weight in cluster k: 1/|C_k|
    Z = assignment_matrix([0, 0, 1])
    assert reweighted_l1([0.4, 0.6, 0.0], Z) == pytest.approx(1 / 2)
    assert reweighted_l1([0.0, 0.0, 1.0], Z) == pytest.approx(1.0)
    # identity clusters: the plain l1 norm
    assert reweighted_l1(w, np.eye(3)) == pytest.approx(1.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 12), st.integers(1, 5))
def test_reweighted_l1_forms_agree(seed, n, k):
    rng = np.random.default_rng(seed)
    k = min(k, n)
    labels = random_labels(rng, n, k)
    w = rng.standard_normal(n)
    assert reweighted_l1(w, assignment_matrix(labels)) == pytest.approx(
        reweighted_l1_by_cluster(w, labels), abs=1e-12
    )


@pytest.mark.parametrize("with_Z", [False, True])
def test_qp_form_matches_objective(with_Z):
    rng = np.random.default_rng(0)
    D, N = 30, 8
    X, Y = rng.standard_normal((D, N)), rng.standard_normal(D)
    Z = assignment_matrix(random_labels(rng, N, 3)) if with_Z else None
    prob = assemble_qp(X, Y, Z, 2.5, 7.0)
    for w in rng.dirichlet(np.ones(N), size=100):
        direct = tracking_objective(w, X, Y, Z, 2.5, 7.0)
        via_qp = prob.objective(w) + Y @ Y
        assert abs(direct - via_qp) <= 1e-10 * max(1.0, abs(direct))


def test_ridge_matrix():
    rng = np.random.default_rng(1)
    X, Y = rng.standard_normal((10, 4)), rng.standard_normal(10)
    prob = assemble_qp(X, Y, None, 3.0, 0.0)
    np.testing.assert_allclose(prob.P, 2 * (X.T @ X + 3.0 * np.eye(4)))
    np.testing.assert_allclose(prob.q, -2 * X.T @ Y)


@pytest.fixture(scope="module")
def toy():
    inst = generate_toy(ToySpec(seed=0))
    return inst, assignment_matrix(inst.group_of)


def group_totals(portfolio, inst):
    w = np.zeros(inst.X.shape[1])
    for t, v in portfolio.weights.items():
        w[int(t)] = v
    return np.array([w[inst.group_of == g].sum() for g in range(5)])


def test_baseline_dense_on_toy(toy):
    inst, _ = toy
    p = track(inst.X, inst.Y, params=TrackerParams("baseline"))
    assert p.n_holdings >= 25
    assert sum(p.weights.values()) == pytest.approx(1.0)


def test_cluster_equal_group_allocation(toy):
    inst, cm = toy
    p = track(inst.X, inst.Y, cm, TrackerParams("cluster", 10.0, 1000.0))
    np.testing.assert_allclose(group_totals(p, inst), 0.2, atol=0.01)


def test_ridge_equals_direct_assembly():
    rng = np.random.default_rng(2)
    X, Y = rng.standard_normal((40, 6)), rng.standard_normal(40)
    p = track(X, Y, params=TrackerParams("ridge", 0.7, 0.0, weight_threshold=0.0))
    direct = solve_qp(simplex_problem(2 * (X.T @ X + 0.7 * np.eye(6)), -2 * X.T @ Y)).w
    got = np.array([p.weights.get(str(j), 0.0) for j in range(6)])
    np.testing.assert_allclose(got, np.maximum(direct, 0), atol=1e-8)


def test_sparsify_examples():
    delta = 2.5e-10
    w = np.array([0.5, 0.5 - delta, delta])
    out = sparsify(w, 1e-6)
    assert out[2] == 0.0
    np.testing.assert_allclose(out[:2], np.array([0.5, 0.5 - delta]) / (1 - delta), rtol=0, atol=1e-15)
    assert out.sum() == pytest.approx(1.0, abs=1e-15)
    np.testing.assert_array_equal(sparsify(w, 0.0), w)
    with pytest.raises(ValueError, match="threshold"):
        sparsify(np.full(4, 0.25), 0.3)


def test_lambda1_shrinks_diversity_loss(toy):
    inst, cm = toy
    X, Y = inst.X[:, ::8], inst.Y
    Z = assignment_matrix(inst.group_of[::8])
    losses = []
    for l1 in [0.0, 0.1, 1.0, 10.0, 100.0]:
        w = solve_qp(assemble_qp(X, Y, Z, l1, 0.0)).w
        losses.append(diversity_loss(w, Z))
    assert all(b <= a + 1e-9 for a, b in zip(losses, losses[1:]))


def simplex_grid(n, step):
    m = round(1 / step)
    for c in itertools.product(range(m + 1), repeat=n - 1):
        if sum(c) <= m:
            yield np.array(list(c) + [m - sum(c)]) / m


@pytest.mark.parametrize("seed", range(4))
def test_brute_force_grid_oracle(seed):
    rng = np.random.default_rng(seed)
    n = 3 if seed % 2 else 4
    X, Y = rng.standard_normal((20, n)), rng.standard_normal(20)
    labels = random_labels(rng, n, 2)
    Z = assignment_matrix(labels)
    params = TrackerParams("cluster", 0.5, 0.8, weight_threshold=0.0)
    p = track(X, Y, Z, params)
    w = np.array([p.weights.get(str(j), 0.0) for j in range(n)])
    best = min(tracking_objective(v, X, Y, Z, 0.5, 0.8) for v in simplex_grid(n, 0.02))
    assert tracking_objective(w, X, Y, Z, 0.5, 0.8) <= best + 1e-9


def test_rank_deficient_returns_solved():
    # more assets than observations makes X'X singular
    rng = np.random.default_rng(3)
    X, Y = rng.standard_normal((5, 12)), rng.standard_normal(5)
    p = track(X, Y, params=TrackerParams("baseline"))
    assert sum(p.weights.values()) == pytest.approx(1.0)


def test_params_validation():
    assert TrackerParams("Cluster").method == "cluster"
    with pytest.raises(ValueError):
        TrackerParams("baseline", lambda1=1.0)
    with pytest.raises(ValueError):
        TrackerParams("ridge", 1.0, 5.0)
    with pytest.raises(ValueError):
        TrackerParams("cluster", -1.0)
    with pytest.raises(ValueError):
        TrackerParams("lasso")
    with pytest.raises(ValueError, match="cluster model"):
        track(np.eye(3), np.ones(3), None, TrackerParams("sector"))


def test_sector_clusters_unknown_group():
    cm = sector_clusters(["A", "B", "C", "D"], {"A": "Tech", "C": "Energy", "D": "Tech"})
    assert cm.K == 3
    np.testing.assert_array_equal(cm.labels, [1, 2, 0, 1])


def test_portfolio_serialisation(tmp_path):
    p = Portfolio({"A": 0.25, "B": 0.75}, threshold=1e-6)
    p.to_csv(tmp_path / "p.csv")
    again = Portfolio.from_csv(tmp_path / "p.csv")
    assert again.weights == p.weights
    p.to_json(tmp_path / "p.json")
    data = json.loads((tmp_path / "p.json").read_text())
    assert data["weights"] == {"A": 0.25, "B": 0.75} and data["n_holdings"] == 2


def test_weights_on_simplex(toy):
    inst, cm = toy
    for method, l1, l2 in [("baseline", 0, 0), ("ridge", 1, 0), ("cluster", 1, 50)]:
        p = track(inst.X, inst.Y, cm, TrackerParams(method, l1, l2))
        w = np.array(list(p.weights.values()))
        assert w.min() > 1e-6
        assert w.sum() == pytest.approx(1.0, abs=1e-12)
