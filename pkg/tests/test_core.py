import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pggtypes.core import (
    GameConfig,
    Panel,
    Trajectory,
    bin_index,
    discretize,
    load_config,
    load_panel,
    normalize,
    others_average,
    payoff,
    save_panel,
)
from pggtypes.errors import DomainError, IngestionError


def test_payoff_formula():
    cfg = GameConfig(endowment=10, multiplier=0.4, group_size=4)
    assert payoff(cfg, 10, [10, 10, 10, 10]) == pytest.approx(16.0)
    assert payoff(cfg, 0, [0, 10, 10, 10]) == pytest.approx(22.0)
    assert payoff(cfg, 0, [0, 0, 0, 0]) == pytest.approx(10.0)


def test_payoff_rejects_out_of_range():
    cfg = GameConfig()
    with pytest.raises(DomainError):
        payoff(cfg, 11, [11, 0, 0, 0])
    with pytest.raises(DomainError):
        payoff(cfg, 5, [1, 2, 3, 4])


def test_game_config_validation():
    with pytest.raises(DomainError):
        GameConfig(multiplier=1.0)
    with pytest.raises(DomainError):
        GameConfig(group_size=1)
    with pytest.raises(DomainError):
        GameConfig(endowment=0)


def test_others_average():
    cfg = GameConfig()
    assert others_average(cfg, [4, 2, 6, 10], 0) == pytest.approx(6.0)
    with pytest.raises(DomainError):
        others_average(cfg, [1, 2], 5)


def test_normalize():
    assert normalize(5, 10) == 0.5
    with pytest.raises(DomainError):
        normalize(12, 10)


def test_bin_edges():
    assert bin_index(0.0) == 0
    assert bin_index(0.2) == 1
    assert bin_index(0.1999) == 0
    assert bin_index(1.0) == 4
    assert bin_index(0.8) == 4
    np.testing.assert_array_equal(bin_index(np.array([0.39, 0.4, 0.61])), [1, 2, 3])


@given(st.floats(0.0, 1.0))
def test_bin_range(v):
    b = bin_index(v)
    assert 0 <= b <= 4
    assert b / 5 <= v or b == 4


def test_trajectory_validation():
    with pytest.raises(DomainError):
        Trajectory("a", [0.1, 0.2], [0.1])
    with pytest.raises(DomainError):
        Trajectory("a", [1.2], [0.1])
    with pytest.raises(DomainError):
        Trajectory("a", [], [])
    t = Trajectory("a", [0.1, 0.2], [0.3, 0.4])
    with pytest.raises(ValueError):
        t.actions[0] = 0.5


def test_discretize_drops_first_round():
    t = Trajectory("a", [0.0, 0.5, 1.0, 0.3], [0.9, 0.1, 0.45, 0.7])
    d = discretize(t)
    assert len(d) == 3
    assert d.triplets == [(4, 2, 0), (0, 4, 2), (2, 1, 3)]


@settings(max_examples=50)
@given(st.lists(st.floats(0, 1), min_size=2, max_size=12))
def test_discretize_chains(values):
    t = Trajectory("a", values, values[::-1])
    d = discretize(t)
    assert len(d) == len(values) - 1
    np.testing.assert_array_equal(d.next_states[:-1], d.states[1:])


def test_panel_rejects_duplicate_uids_and_mixed_lengths():
    a = Trajectory("a", [0.1, 0.2], [0.1, 0.2])
    with pytest.raises(DomainError):
        Panel((a, a))
    with pytest.raises(DomainError):
        Panel((a, Trajectory("b", [0.1], [0.1])))


def test_panel_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    trajs = tuple(Trajectory(f"u{i}", rng.integers(0, 11, 5) / 10, rng.integers(0, 11, 5) / 10) for i in range(3))
    panel = Panel(trajs)
    path = tmp_path / "panel.csv"
    save_panel(panel, path, endowment=10)
    again = load_panel(path, endowment=10)
    assert list(again.uids) == list(panel.uids)
    np.testing.assert_allclose(again.actions(), panel.actions())
    np.testing.assert_allclose(again.states(), panel.states())


def test_load_panel_computes_missing_others_avg(tmp_path):
    path = tmp_path / "p.csv"
    rows = ["uid,round,contribution,others_avg,game_length,group_id"]
    for r, (x, y) in enumerate([(10, 0), (4, 6)], start=1):
        rows.append(f"a,{r},{x},,2,g")
        rows.append(f"b,{r},{y},,2,g")
    path.write_text("\n".join(rows) + "\n")
    panel = load_panel(path, endowment=10)
    a = panel[panel.uids.index("a")]
    np.testing.assert_allclose(a.states, [0.0, 0.6])


def test_load_panel_errors(tmp_path):
    path = tmp_path / "p.csv"
    path.write_text("uid,round,contribution\n")
    with pytest.raises(IngestionError):
        load_panel(path, endowment=10)
    path.write_text("uid,round,contribution,others_avg,game_length\na,1,x,1,2\n")
    with pytest.raises(IngestionError):
        load_panel(path, endowment=10)
    path.write_text("uid,round,contribution,others_avg,game_length\na,1,11,1,1\n")
    with pytest.raises(IngestionError):
        load_panel(path, endowment=10)


def test_load_config(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("endowment=20\nmultiplier=0.5\nseed=7\n")
    cfg, seed = load_config(path)
    assert cfg.endowment == 20 and cfg.multiplier == 0.5 and seed == 7


def test_reference_values():
    cfg = GameConfig()
    assert others_average(cfg, [10, 0, 0, 0], 0) == 0.0
    assert others_average(cfg, [10, 0, 0, 0], 1) == pytest.approx(10 / 3)
    assert others_average(cfg, [5, 5, 5, 5], 2) == 5.0
    assert (normalize(10, 10), normalize(0, 10), normalize(4, 10)) == (1.0, 0.0, 0.4)
    assert bin_index(0.5) == 2


def test_hand_traced_triplets():
    d = discretize(Trajectory("a", [1.0, 0.0, 0.0], [0.5, 0.5, 0.2]))
    assert d.triplets == [(2, 0, 2), (2, 0, 1)]
