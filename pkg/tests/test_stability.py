import itertools

import numpy as np
import pytest
from scipy import stats
from sklearn.metrics import adjusted_rand_score, normalized_mutual_info_score

from conftest import brute_force_shares, random_panel, six_archetype_panel
from pggtypes.clustering import ClusterSolution, cluster
from pggtypes.dtw import distance_matrix
from pggtypes.errors import DomainError
from pggtypes.stability import (
    adjusted_rand_index,
    bootstrap_stability,
    contingency,
    heterogeneity,
    match_clusters,
    normalized_mutual_information,
    random_labels,
    returned_to_baseline,
    save_heterogeneity_report,
    save_stability_report,
    welch_t_test,
)


def pair_counting_ari(a, b):
    """ARI from explicit pair agreement counts."""
    n = len(a)
    pairs = list(itertools.combinations(range(n), 2))
    ss = sum(a[i] == a[j] and b[i] == b[j] for i, j in pairs)
    sa = sum(a[i] == a[j] for i, j in pairs)
    sb = sum(b[i] == b[j] for i, j in pairs)
    total = len(pairs)
    expected = sa * sb / total
    top = (sa + sb) / 2
    return 1.0 if top == expected else (ss - expected) / (top - expected)


def test_ari_matches_pair_counting():
    rng = np.random.default_rng(0)
    for _ in range(30):
        n = int(rng.integers(5, 25))
        a, b = rng.integers(0, 4, n), rng.integers(0, 3, n)
        assert adjusted_rand_index(a, b) == pytest.approx(pair_counting_ari(a, b), abs=1e-12)
        assert adjusted_rand_index(a, b) == pytest.approx(adjusted_rand_score(a, b), abs=1e-12)


def test_ari_permutation_invariant():
    a = [1, 1, 2, 2, 3, 3]
    assert adjusted_rand_index(a, [3, 3, 1, 1, 2, 2]) == 1.0


def test_nmi_matches_sklearn():
    rng = np.random.default_rng(1)
    for _ in range(30):
        a, b = rng.integers(0, 4, 30), rng.integers(0, 3, 30)
        ref = normalized_mutual_info_score(a, b, average_method="arithmetic")
        assert normalized_mutual_information(a, b) == pytest.approx(ref, abs=1e-12)


def test_nmi_single_cluster_is_zero():
    assert normalized_mutual_information([1, 1, 1], [1, 2, 3]) == 0.0


def test_mappings_must_share_uids():
    with pytest.raises(DomainError):
        adjusted_rand_index({"a": 1}, {"b": 1})
    assert adjusted_rand_index({"a": 1, "b": 2}, {"b": 5, "a": 4}) == 1.0


def test_contingency_and_matching():
    table = contingency([1, 1, 2, 2, 2], [5, 5, 5, 6, 6])
    np.testing.assert_array_equal(table, [[2, 0], [1, 2]])
    assert match_clusters(table) == {0: 0, 1: 1}


def test_leave_one_out_return():
    base = np.array([1, 1, 1, 2, 2, 2])
    new = np.array([2, 2, 2, 1, 1, 1])
    assert returned_to_baseline(base, new).all()
    # a lone point cannot pull the match towards itself
    base = np.array([1, 2])
    new = np.array([1, 1])
    hit = returned_to_baseline(base, new)
    assert hit.tolist() == [False, False]


def test_bootstrap_is_deterministic():
    sim = six_archetype_panel(seed=2)
    dm = distance_matrix(sim.panel, dims="action")
    base = cluster(dm, 6, seed=2, panel=sim.panel)
    a = bootstrap_stability(sim.panel, base, reps=4, seed=3, dims="action")
    b = bootstrap_stability(sim.panel, base, reps=4, seed=3, dims="action", n_jobs=2)
    np.testing.assert_array_equal(a.ari, b.ari)
    np.testing.assert_array_equal(a.return_rate, b.return_rate)
    assert a.replications == 4 and a.skipped == 0


def test_bootstrap_validation():
    panel = random_panel(6, 3)
    base = ClusterSolution(2, tuple(panel.uids), [1, 1, 1, 2, 2, 2])
    with pytest.raises(DomainError):
        bootstrap_stability(panel, base, reps=0)
    with pytest.raises(DomainError):
        bootstrap_stability(panel, base, fraction=1.5)


def test_random_assignment_return_rate_near_chance():
    panel = random_panel(60, 4, seed=4)
    base = ClusterSolution(3, tuple(panel.uids), np.random.default_rng(0).integers(1, 4, 60))
    rep = bootstrap_stability(panel, base, reps=60, seed=0, cluster_fn=random_labels)
    assert abs(rep.mean_return_rate - 1 / 3) < 0.06


def test_heterogeneity_shares_match_brute_force():
    panel = random_panel(12, 5, seed=5)
    dm = distance_matrix(panel)
    sol = cluster(dm, 3, seed=0, panel=panel)
    rep = heterogeneity(dm, sol, panel)
    assert rep.between_variance_share + rep.within_variance_share == pytest.approx(1.0, abs=1e-12)
    X = panel.stacked((0, 1))
    share, within = brute_force_shares(X, sol.labels.tolist(), rep.global_center, rep.centers)
    assert rep.between_variance_share == pytest.approx(share, abs=1e-9)
    assert rep.within_variance_share == pytest.approx(within, abs=1e-9)


def test_reports_are_written(tmp_path):
    panel = random_panel(12, 5, seed=6)
    dm = distance_matrix(panel)
    sol = cluster(dm, 2, seed=0, panel=panel)
    save_heterogeneity_report(heterogeneity(dm, sol, panel), tmp_path / "h.csv")
    save_stability_report(bootstrap_stability(panel, sol, reps=2), tmp_path / "s.csv")
    assert (tmp_path / "h.csv").read_text().startswith("metric,cluster_1,cluster_2,overall")
    assert "ari_mean" in (tmp_path / "s.csv").read_text()


def test_welch_matches_scipy():
    rng = np.random.default_rng(7)
    x, y = rng.normal(0, 1, 15), rng.normal(0.5, 2, 9)
    t, df, p = welch_t_test(x, y)
    ref = stats.ttest_ind(x, y, equal_var=False)
    assert t == pytest.approx(ref.statistic, abs=1e-12)
    assert p == pytest.approx(ref.pvalue, abs=1e-12)
    assert df == pytest.approx(ref.df, abs=1e-9)


def test_welch_rejects_tiny_samples():
    with pytest.raises(DomainError):
        welch_t_test([1.0], [1.0, 2.0])


def test_identity_agreement():
    a = [1, 2, 2, 3, 3, 3]
    assert adjusted_rand_index(a, a) == 1.0
    assert normalized_mutual_information(a, a) == pytest.approx(1.0)


def test_contingency_hand_computation():
    a = [1, 1, 1, 1, 2, 2, 2, 2, 3, 3, 3, 3]
    b = [1, 1, 2, 2, 1, 1, 2, 2, 1, 2, 2, 2]
    # table rows a, columns b: [[2,2],[2,2],[1,3]]
    comb = lambda x: x * (x - 1) / 2
    index = sum(comb(v) for v in (2, 2, 2, 2, 1, 3))
    rows = 3 * comb(4)
    cols = comb(5) + comb(7)
    expected = rows * cols / comb(12)
    hand = (index - expected) / ((rows + cols) / 2 - expected)
    assert adjusted_rand_index(a, b) == pytest.approx(hand, abs=1e-12)


def test_nmi_of_independent_partitions_is_small():
    values = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        values.append(normalized_mutual_information(rng.integers(0, 5, 500), rng.integers(0, 5, 500)))
    assert np.mean(values) < 0.05


def test_full_panel_replication_agrees_with_itself():
    sim = six_archetype_panel(seed=0)
    dm = distance_matrix(sim.panel, dims="action")
    base = cluster(dm, 6, seed=0, panel=sim.panel)
    rep = bootstrap_stability(
        sim.panel, base, reps=2, fraction=1.0, dims="action", cluster_fn=lambda d, k, s, p: base.labels
    )
    assert rep.ari_mean == 1.0 and rep.nmi_mean == pytest.approx(1.0)
    np.testing.assert_array_equal(rep.return_rate, 1.0)


def test_variance_limit_cases():
    from pggtypes.core import Panel, Trajectory

    trajs = [Trajectory(f"a{i}", np.zeros(4), np.zeros(4)) for i in range(3)]
    trajs += [Trajectory(f"b{i}", np.ones(4), np.ones(4)) for i in range(3)]
    panel = Panel(tuple(trajs))
    dm = distance_matrix(panel)
    sol = ClusterSolution(2, tuple(panel.uids), [1, 1, 1, 2, 2, 2])
    rep = heterogeneity(dm, sol, panel)
    assert rep.within_variance == pytest.approx(0.0, abs=1e-12)
    assert rep.between_variance > 0
    assert rep.between_variance_share == pytest.approx(1.0)
    flat = Panel(tuple(Trajectory(f"c{i}", np.full(4, 0.5), np.full(4, 0.5)) for i in range(4)))
    rep = heterogeneity(distance_matrix(flat), ClusterSolution(2, tuple(flat.uids), [1, 1, 2, 2]), flat)
    assert rep.degenerate and rep.total_variance == 0.0


def test_six_archetype_share_matches_loop_recomputation():
    sim = six_archetype_panel(seed=1)
    dm = distance_matrix(sim.panel, dims="action")
    sol = cluster(dm, 6, seed=1, panel=sim.panel)
    rep = heterogeneity(dm, sol, sim.panel, dims="action")
    share, _ = brute_force_shares(sim.panel.stacked((0,)), sol.labels.tolist(), rep.global_center, rep.centers)
    assert rep.between_variance_share == pytest.approx(share, abs=1e-9)


def test_welch_reference_cases():
    x = [0.1, 0.4, 0.2, 0.9]
    t, _, p = welch_t_test(x, list(x))
    assert t == 0.0 and p == 1.0
    jitter = np.array([1e-3, -1e-3, 2e-3, -2e-3])
    assert welch_t_test(np.zeros(4) + jitter, np.ones(4) + jitter)[2] < 0.001
    perm = welch_t_test(x[::-1], [0.3, 0.2, 0.8, 0.5][::-1])
    assert perm == pytest.approx(welch_t_test(x, [0.3, 0.2, 0.8, 0.5]))
