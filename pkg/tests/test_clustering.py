import numpy as np
import pytest
from sklearn.metrics import silhouette_samples

from conftest import six_archetype_panel
from pggtypes.clustering import (
    ALGORITHMS,
    ClusterSolution,
    affinity_bandwidth,
    build_cvi_report,
    calinski_harabasz,
    cluster,
    cvi_report,
    dispersion,
    load_solution,
    order_labels,
    pam,
    save_solution,
    select_k,
    silhouette,
)
from pggtypes.core import Panel, Trajectory
from pggtypes.dtw import DistanceMatrix, distance_matrix
from pggtypes.errors import ConstraintError, DegenerateAffinityError, DomainError
from pggtypes.stability import adjusted_rand_index


def two_blob_panel(n=10, T=6, seed=0):
    rng = np.random.default_rng(seed)
    trajs = []
    for i in range(n):
        level = 0.05 if i < n // 2 else 0.95
        a = np.clip(level + rng.normal(0, 0.02, T), 0, 1)
        trajs.append(Trajectory(f"u{i:02d}", a, a))
    return Panel(tuple(trajs))


def textbook_silhouette(D, labels):
    """Per-point a(i), b(i) loops written out directly."""
    out = []
    for i in range(len(labels)):
        own = [j for j in range(len(labels)) if labels[j] == labels[i] and j != i]
        if not own:
            out.append(0.0)
            continue
        a = np.mean([D[i, j] for j in own])
        b = min(
            np.mean([D[i, j] for j in range(len(labels)) if labels[j] == c])
            for c in set(labels) if c != labels[i]
        )
        out.append((b - a) / max(a, b) if max(a, b) > 0 else 0.0)
    return np.array(out)


@pytest.mark.parametrize("algorithm", ALGORITHMS)
def test_two_blobs_are_recovered_exactly(algorithm):
    panel = two_blob_panel()
    dm = distance_matrix(panel)
    sol = cluster(dm, 2, algorithm, seed=0, panel=panel)
    truth = [1] * 5 + [2] * 5
    np.testing.assert_array_equal(sol.labels, truth)


def test_labels_ordered_by_mean_action():
    raw = np.array([7, 7, 3, 3, 9])
    means = np.array([0.9, 0.8, 0.1, 0.2, 0.5])
    np.testing.assert_array_equal(order_labels(raw, means), [3, 3, 1, 1, 2])


def test_silhouette_matches_textbook_and_sklearn():
    rng = np.random.default_rng(1)
    P = rng.random((12, 2))
    D = np.sqrt(((P[:, None] - P[None]) ** 2).sum(-1))
    labels = np.array([1, 1, 1, 2, 2, 2, 2, 3, 3, 3, 3, 1])
    res = silhouette(DistanceMatrix(D), labels)
    np.testing.assert_allclose(res.scores, textbook_silhouette(D, labels), atol=1e-12)
    np.testing.assert_allclose(res.scores, silhouette_samples(D, labels, metric="precomputed"), atol=1e-12)


def test_silhouette_singleton_scores_zero():
    D = np.array([[0, 1, 5], [1, 0, 5], [5, 5, 0]], dtype=float)
    res = silhouette(DistanceMatrix(D), [1, 1, 2])
    assert res.scores[2] == 0.0


def test_calinski_harabasz_formula():
    assert calinski_harabasz(10.0, 4.0, 12, 3) == pytest.approx((10 / 2) / (4 / 9))
    assert calinski_harabasz(1.0, 0.0, 5, 2) == float("inf")


def test_dispersion_of_tight_blobs():
    panel = two_blob_panel()
    dm = distance_matrix(panel)
    sol = cluster(dm, 2, "spectral", panel=panel)
    B, W = dispersion(panel, sol)
    assert B > 100 * W


def test_pam_on_line():
    x = np.array([0.0, 0.1, 0.2, 5.0, 5.1, 5.2])
    D = np.abs(x[:, None] - x[None])
    assert sorted(pam(D, 2).tolist()) == [1, 4]


def test_spectral_degenerate_affinity():
    t = Trajectory("a", [0.5, 0.5], [0.5, 0.5])
    panel = Panel((t, Trajectory("b", [0.5, 0.5], [0.5, 0.5]), Trajectory("c", [0.5, 0.5], [0.5, 0.5])))
    with pytest.raises(DegenerateAffinityError):
        affinity_bandwidth(distance_matrix(panel))


def test_k_validation():
    dm = distance_matrix(two_blob_panel())
    with pytest.raises(DomainError):
        cluster(dm, 1)
    with pytest.raises(DomainError):
        cluster(dm, 11)
    with pytest.raises(DomainError):
        cluster(dm, 2, "nope")


def test_cvi_report_prefers_two_blobs():
    panel = two_blob_panel(n=12)
    dm = distance_matrix(panel)
    rep = cvi_report(dm, panel, range(2, 5))
    assert rep.best_k() == 2
    assert np.all((rep.mean >= 0) & (rep.mean <= 1))


def test_infinite_ch_ties_the_best_finite_score():
    rep = build_cvi_report([2, 3, 4], [0.5, 0.4, 0.3], [np.inf, 10.0, 5.0], [1.0, 2.0, 3.0], [(1, 1)] * 3)
    np.testing.assert_allclose(rep.ch_n, [1.0, 1.0, 0.0])


def test_select_k_size_floor():
    rep = build_cvi_report([2, 3], [0.1, 0.9], [1.0, 2.0], [2.0, 1.0], [(40, 40), (40, 30, 10)])
    assert select_k(rep, min_cluster_size=10) == 3
    assert select_k(rep, min_cluster_size=30) == 2
    with pytest.raises(ConstraintError):
        select_k(rep, min_cluster_size=50)


def test_solution_validation_and_roundtrip(tmp_path):
    with pytest.raises(DomainError):
        ClusterSolution(3, ("a", "b"), [1, 2])
    sol = ClusterSolution(2, ("a", "b", "c"), [1, 2, 1])
    assert sol.member_uids(1) == ["a", "c"]
    save_solution(sol, tmp_path / "c.csv")
    again = load_solution(tmp_path / "c.csv")
    assert again.assignment == sol.assignment


def test_six_archetypes_are_mostly_recovered():
    sim = six_archetype_panel(seed=1)
    dm = distance_matrix(sim.panel, dims="action")
    sol = cluster(dm, 6, "spectral", seed=1, panel=sim.panel)
    assert adjusted_rand_index(sim.label_array(), sol.labels) >= 0.6


def test_barycenters_attached():
    panel = two_blob_panel()
    sol = cluster(distance_matrix(panel), 2, panel=panel).with_barycenters(panel)
    assert len(sol.barycenters) == 2
    assert sol.barycenters[0].actions.mean() < sol.barycenters[1].actions.mean()


def constant_groups():
    trajs = [Trajectory(f"z{i}", np.zeros(5), np.zeros(5)) for i in range(10)]
    trajs += [Trajectory(f"o{i}", np.ones(5), np.zeros(5)) for i in range(10)]
    return Panel(tuple(trajs))


@pytest.mark.parametrize("algorithm", ["spectral", "kmedoids", "average"])
def test_constant_groups_split_perfectly(algorithm):
    panel = constant_groups()
    sol = cluster(distance_matrix(panel, dims="action"), 2, algorithm, panel=panel)
    truth = [2 if u.startswith("o") else 1 for u in sol.uids]
    assert adjusted_rand_index(truth, sol.labels) == 1.0


@pytest.mark.parametrize("algorithm", ALGORITHMS)
def test_k_equal_n_gives_singletons(algorithm):
    panel = two_blob_panel(n=4)
    sol = cluster(distance_matrix(panel), 4, algorithm, panel=panel)
    assert sorted(sol.labels.tolist()) == [1, 2, 3, 4]


@pytest.mark.parametrize("algorithm, floor", [("kmedoids", 0.7), ("average", 0.6)])
def test_six_archetypes_other_algorithms(algorithm, floor):
    sim = six_archetype_panel(seed=0)
    dm = distance_matrix(sim.panel, dims="action")
    sol = cluster(dm, 6, algorithm, seed=0, panel=sim.panel)
    assert adjusted_rand_index(sim.label_array(), sol.labels) >= floor


def test_silhouette_limits():
    D = np.full((4, 4), 100.0)
    D[0, 1] = D[1, 0] = D[2, 3] = D[3, 2] = 0.01
    np.fill_diagonal(D, 0)
    assert np.all(silhouette(DistanceMatrix(D), [1, 1, 2, 2]).scores > 0.99)
    # point 0 sits as far from its own cluster as from the other one
    D = np.array([[0, 2, 2, 2], [2, 0, 5, 5], [2, 5, 0, 1], [2, 5, 1, 0]], dtype=float)
    assert silhouette(DistanceMatrix(D), [1, 1, 2, 2]).scores[0] == 0.0


def test_normalized_scores_span_unit_interval():
    panel = two_blob_panel(n=12)
    rep = cvi_report(distance_matrix(panel), panel, range(2, 6))
    for v in (rep.sil_n, rep.ch_n, rep.icv_n):
        assert v.min() == 0.0 and v.max() == 1.0


def test_single_candidate_report():
    rep = build_cvi_report([4], [0.2], [3.0], [1.0], [(30, 30, 30, 30)])
    assert select_k(rep, min_cluster_size=1) == 4


def test_six_archetypes_size_floor_picks_best_admissible_k():
    sim = six_archetype_panel(seed=2)
    dm = distance_matrix(sim.panel, dims="action")
    rep = cvi_report(dm, sim.panel, range(2, 9), seed=2, dims="action")
    k = select_k(rep, min_cluster_size=10)
    admissible = [i for i, sz in enumerate(rep.sizes) if min(sz) >= 10]
    assert k == rep.ks[max(admissible, key=lambda i: rep.mean[i])]
    assert min(rep.sizes[list(rep.ks).index(k)]) >= 10
    assert k <= rep.best_k()
