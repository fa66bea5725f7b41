"""Command-line interface."""
import json

import numpy as np
import pytest

from snac import cli, scenario
from snac.correlation import LandmarkDatabase
from snac.harmonics import fibonacci_sphere
from snac.truth import generate_body


def test_selftest_passes(capsys):
    assert cli.main(["selftest"]) == 0
    out = capsys.readouterr().out
    assert "3/3 checks passed" in out and "FAIL" not in out


def test_run_and_report(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    scenario.ScenarioConfig(n_orbits=0.0).write_yaml(cfg)
    out_dir = tmp_path / "run"
    assert cli.main(["run", str(cfg), "-o", str(out_dir), "-q", "--orbits", "0.0068"]) == 0
    printed = capsys.readouterr().out
    assert "outputs written to" in printed
    assert cli.main(["report", str(out_dir), "--write"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["n_epochs"] == 2
    assert (out_dir / "plot_errors.csv").is_file()


def test_shape_fit_from_database(tmp_path, capsys):
    body = generate_body(0, degree=4)
    lon, lat = fibonacci_sphere(400)
    db = LandmarkDatabase()
    for p in body.surface_points(lon, lat):
        db.new(p, np.eye(3) * 4.0, {}, 0.0)
    path = tmp_path / "landmarks.csv"
    db.write_csv(path)
    truth_path = tmp_path / "truth_shape.txt"
    body.shape.write(truth_path)
    assert cli.main(["shape-fit", str(path), "--degree", "4", "--method", "none", "--truth", str(truth_path)]) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["n_points"] == 400 and res["rmse"] < 1e-6
    assert (tmp_path / "shape_fit_deg4.txt").is_file()


def test_error_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("nonsense: 1\n")
    assert cli.main(["run", str(bad)]) == 2
    assert cli.main(["run", str(tmp_path / "missing.yaml")]) == 1
    assert cli.main(["report", str(tmp_path)]) == 2
    assert "error" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        cli.main(["shape-fit", "x.csv"])
