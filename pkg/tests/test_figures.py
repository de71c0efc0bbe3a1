import xml.etree.ElementTree as ET

import numpy as np
import pytest

from pggtypes.figures import band_plot, grid, heatmap, ramp, render, scatter, stack, transition_diagram, write_svg


def test_ramp_endpoints():
    assert ramp(0.0) == "#2c3e9f"
    assert ramp(1.0) == "#fde725"
    assert ramp(float("nan")) == ramp(0.0)
    assert ramp(2.0) == ramp(1.0)


def test_heatmap_has_one_cell_per_value():
    fig = heatmap(np.random.default_rng(0).random((3, 4)), "h")
    assert sum(el.startswith("<rect") for el in fig.body) == 12


def test_documents_parse_and_timestamp_is_optional(tmp_path):
    figs = [
        heatmap(np.eye(3)),
        band_plot([("c1", np.linspace(0, 1, 5), np.zeros(5), np.ones(5), "#123456")], "b", markers=[3]),
        scatter([(0.1, 0.5, "c1", True)], 0.15, 0.35, "s"),
        transition_diagram(np.array([[0.7, 0.3], [0.4, 0.6]])),
    ]
    doc = stack([grid(figs, 2)], title="t & <x>")
    ET.fromstring(render(doc, deterministic=True).split("\n", 1)[1])
    assert "generated" not in render(doc, deterministic=True)
    assert "generated" in render(doc)
    write_svg(doc, tmp_path / "f.svg", deterministic=True)
    assert ET.parse(tmp_path / "f.svg").getroot().tag.endswith("svg")


def test_transition_labels_show_probabilities():
    body = "".join(transition_diagram(np.array([[0.25, 0.75], [0.5, 0.5]])).body)
    assert "0.75" in body and "0.25" in body


def test_grid_validation():
    with pytest.raises(ValueError):
        grid([], 0)
