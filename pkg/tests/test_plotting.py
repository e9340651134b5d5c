import csv
import json
import logging
import math

import numpy as np
import pytest

from mmsa.plotting import Z95, aggregate, ci_half_width, plot_runs


def _run(tmp_path, name, steps, values):
    d = tmp_path / name
    d.mkdir()
    with open(d / "metrics.jsonl", "w") as fh:
        fh.write(json.dumps({"kind": "train", "step": 1}) + "\n")
        for s, v in zip(steps, values):
            fh.write(json.dumps({"kind": "eval", "step": s, "mean_return": v}) + "\n")
    return d


def test_ci_half_width_uses_sample_std():
    v = [1.0, 2.0, 3.0, 4.0]
    assert np.isclose(ci_half_width(v), Z95 * np.std(v, ddof=1) / math.sqrt(4))
    assert ci_half_width([5.0]) == 0.0


def test_aggregate_on_shared_grid():
    a = aggregate("x", [([0, 10], [0.0, 1.0]), ([0, 10], [0.0, 3.0])])
    assert np.allclose(a.mean, [0.0, 2.0])
    assert np.isclose(a.half[1], Z95 * np.std([1.0, 3.0], ddof=1) / math.sqrt(2))


def test_aggregate_resamples_with_warning(caplog):
    with caplog.at_level(logging.WARNING):
        a = aggregate("x", [([0, 10, 20], [0.0, 1.0, 2.0]), ([0, 20], [0.0, 4.0])])
    assert "resampling" in caplog.text
    assert list(a.steps) == [0, 20]
    assert np.allclose(a.mean, [0.0, 3.0])


def test_aggregate_rejects_disjoint_ranges():
    with pytest.raises(ValueError):
        aggregate("x", [([0, 1], [0, 0]), ([5, 6], [0, 0])])


def test_plot_runs_writes_csv_and_svg(tmp_path):
    groups = {
        "full": [_run(tmp_path, f"f{i}", [10, 20], [0.1 * i, 0.5]) for i in range(3)],
        "no_wm": [_run(tmp_path, f"n{i}", [10, 20], [0.0, 0.2 * i]) for i in range(3)],
    }
    out = tmp_path / "plots"
    plot_runs(groups, out, title="a < b")
    rows = list(csv.DictReader(open(out / "curves.csv")))
    assert len(rows) == 4 and rows[0]["n"] == "3"
    svg = (out / "curves.svg").read_text()
    assert svg.count('class="series"') == 2
    assert "a &lt; b" in svg
