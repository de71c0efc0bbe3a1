import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np
import pytest

from conftest import csv_files, run_pipeline
from pggtypes.cli import EXIT_INVALID, main, parse_range


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    return root, run_pipeline(root, fit_extra=("--k-range", "1..2"))


def test_every_subcommand_succeeds(pipeline):
    _, codes = pipeline
    assert codes == [0, 0, 0, 0, 0]


def test_expected_outputs(pipeline):
    root, _ = pipeline
    for name in ("sim/panel.csv", "sim/labels.csv", "sim/intentions.csv"):
        assert (root / name).exists()
    for name in ("cvi.csv", "clusters.csv", "barycenters.csv", "heterogeneity.csv", "stability.csv", "drop_rounds.csv"):
        assert (root / "cl" / name).exists()
    for name in ("k_selection.csv", "model_global.txt", "posteriors_global.csv", "fit_report.csv", "model_c1.txt"):
        assert (root / "fit" / name).exists()
    assert (root / "cls/metrics.csv").exists()
    assert (root / "rep/report.svg").exists()
    for sub in ("sim", "cl", "fit", "cls", "rep"):
        manifest = (root / sub / "manifest.txt").read_text()
        assert "seed=3" in manifest and "version=" in manifest


def test_svgs_parse(pipeline):
    root, _ = pipeline
    svgs = list(Path(root).rglob("*.svg"))
    assert svgs
    for path in svgs:
        ET.parse(path)
        assert "generated" not in path.read_text()


def test_rerun_is_byte_identical(pipeline, tmp_path):
    root, _ = pipeline
    assert run_pipeline(tmp_path, fit_extra=("--k-range", "1..2")) == [0, 0, 0, 0, 0]
    assert csv_files(root) == csv_files(tmp_path)


def test_missing_panel_exits_invalid(tmp_path):
    assert main(["cluster", "--panel", str(tmp_path / "nope.csv"), "--out", str(tmp_path)]) == EXIT_INVALID


def test_empty_panel_exits_invalid(tmp_path, capsys):
    path = tmp_path / "empty.csv"
    path.write_text("uid,round,contribution,others_avg,game_length\n")
    assert main(["cluster", "--panel", str(path), "--out", str(tmp_path / "o")]) == EXIT_INVALID
    assert "empty panel" in capsys.readouterr().err


def test_bad_census_exits_invalid(tmp_path):
    assert main(["simulate", "--census", "pirate=4", "--out", str(tmp_path)]) == EXIT_INVALID


def test_parse_range():
    assert parse_range("2..4") == [2, 3, 4]
    assert parse_range("2-3") == [2, 3]
    assert parse_range("2,5") == [2, 5]


def test_six_archetype_figures_sorted_by_mean_action(tmp_path):
    import re

    from pggtypes.clustering import load_solution
    from pggtypes.core import load_panel
    from pggtypes.figures import ramp

    common = ["--seed", "0", "--threads", "1", "--deterministic"]
    assert main(["simulate", "--out", str(tmp_path / "sim"), *common]) == 0
    panel_path = str(tmp_path / "sim/panel.csv")
    assert main(["cluster", "--panel", panel_path, "--k", "6", "--dims", "action", "--out", str(tmp_path / "cl"), *common]) == 0
    out = tmp_path / "cl"
    assert len(list(out.glob("heatmap_actions_c*.svg"))) == 6
    assert len(list(out.glob("heatmap_states_c*.svg"))) == 6
    assert len(list(out.glob("barycenter_c*.svg"))) == 6
    panel = load_panel(panel_path, endowment=10)
    sol = load_solution(out / "clusters.csv")
    actions = {t.uid: t.actions for t in panel}
    for c in range(1, 7):
        rows = sorted(sol.member_uids(c), key=lambda u: float(np.mean(actions[u])))
        expected = [ramp(v) for u in rows for v in actions[u]]
        fills = re.findall(r'<rect x="[^"]+" y="[^"]+" width="[^"]+" height="[^"]+" fill="(#[0-9a-f]{6})"', (out / f"heatmap_actions_c{c}.svg").read_text())
        assert fills == expected


def test_euclidean_run_marks_drop_rounds(tmp_path):
    common = ["--seed", "0", "--threads", "1", "--deterministic"]
    assert main(["simulate", "--census", "threshold_switcher=12", "--out", str(tmp_path / "sim"), *common]) == 0
    assert main(
        ["cluster", "--panel", str(tmp_path / "sim/panel.csv"), "--k", "2", "--distance", "euclidean",
         "--dims", "action", "--out", str(tmp_path / "cl"), *common]
    ) == 0
    drops = (tmp_path / "cl/drop_rounds.csv").read_text().splitlines()
    assert drops[0] == "uid,cluster,drop_round" and all(line.split(",")[2] for line in drops[1:])
    assert any('stroke="#c00"' in p.read_text() for p in (tmp_path / "cl").glob("barycenter_c*.svg"))
