import csv
import json
from dataclasses import fields

import numpy as np
import pytest
from hypothesis import given, strategies as st

from plasmoncell import cli
from plasmoncell.config import ConfigError, RunConfig, format_complex, parse_complex, parse_stages
from plasmoncell.geometry import generate_reference_mesh
from plasmoncell.io import load_deformation, mesh_hash, save_deformation, write_vtk
from plasmoncell.optimizer import IterationRecord

finite = st.floats(-1e3, 1e3, allow_nan=False)


def _write(tmp_path, text, name="run.ini"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def _run(argv, capsys):
    code = cli.main(argv)
    out = capsys.readouterr().out
    return code, out


@given(finite, finite)
def test_complex_round_trip(a, b):
    z = complex(a, b)
    assert parse_complex(format_complex(z)) == z


@pytest.mark.parametrize("text", ["1,2,3", "a,b", ""])
def test_bad_complex(text):
    with pytest.raises(ConfigError):
        parse_complex(text)


def test_stage_parsing():
    assert parse_stages("100:0.8; rest:0.1") == ((100, 0.8), (None, 0.1))
    with pytest.raises(ConfigError):
        parse_stages("100-0.8")


@given(
    st.floats(0.05, 0.45), st.integers(0, 6), st.floats(0.05, 2.0), st.floats(1.0, 500.0),
    finite, finite, st.floats(1e-6, 1.0), st.sampled_from(["", "100:0.8; rest:0.1", "5:0.4; 10:0.2"]),
)
def test_config_round_trip(radius, k, omega, tau, tr, ti, alpha, stages):
    cfg = RunConfig().replace(
        geometry={"radius": radius, "refinements": k},
        material={"omega": omega, "tau": tau},
        cost={"target_xy": complex(tr, ti), "alpha": alpha, "stages": stages},
    )
    back = RunConfig.from_string(cfg.to_string())
    assert back == cfg
    assert RunConfig.from_string(back.to_string()) == back


@pytest.mark.parametrize("text", [
    "[geometry]\nradius = 0.3\ncolour = red\n",
    "[plot]\nx = 1\n",
    "[geometry]\nrefinements = two\n",
    "[material]\neps_xy = 0,0\neps_xx = 1,-1\n",
    "[optimizer]\ntol = 0\n",
])
def test_config_rejections(text):
    with pytest.raises(ConfigError):
        RunConfig.from_string(text)


def test_defaults_mirror_experiment():
    cfg = RunConfig()
    c = cfg.cost_config()
    np.testing.assert_array_equal(c.target, [[0.5 + 0.01j, 0.05], [0.05, 0.5 + 0.01j]])
    assert (c.alpha, c.alpha_sigma, c.beta) == (1e-3, 10.0, 0.1)
    assert cfg.material_parameters().omega == 0.3


@pytest.mark.parametrize("k, cells", [(5, 13312), (6, 53248)])
def test_cli_mesh_counts(tmp_path, capsys, k, cells):
    cfgp = _write(tmp_path, f"[geometry]\nradius = 0.3\nrefinements = {k}\n")
    code, out = _run(["mesh", "--config", cfgp], capsys)
    assert code == 0
    assert f"cells: {cells}" in out


def test_cli_mesh_writes_file(tmp_path, capsys):
    cfgp = _write(tmp_path, "[geometry]\nrefinements = 1\n")
    code, _ = _run(["mesh", "--config", cfgp, "--out", str(tmp_path / "m.txt")], capsys)
    assert code == 0
    assert (tmp_path / "m.txt").read_text().startswith("unitcellmesh 1")


def test_cli_invalid_radius(tmp_path, capsys):
    cfgp = _write(tmp_path, "[geometry]\nradius = 0.6\n")
    code, out = _run(["mesh", "--config", cfgp], capsys)
    assert code == cli.EXIT_CONFIG
    assert json.loads(out)["exit_code"] == 2


def test_cli_missing_config(tmp_path, capsys):
    code, out = _run(["mesh", "--config", str(tmp_path / "nope.ini")], capsys)
    assert code == cli.EXIT_CONFIG and "nope.ini" in out


def test_cli_solve_cell_without_conductivity(tmp_path, capsys):
    cfgp = _write(tmp_path, "[geometry]\nrefinements = 2\n[material]\nomega_p = 0\n")
    code, out = _run(["solve-cell", "--config", cfgp, "--out", str(tmp_path / "cell")], capsys)
    assert code == 0
    e = json.loads(out)["eps_eff"]
    assert abs(e["xx"]["re"] - 1) < 1e-13 and abs(e["xx"]["im"]) < 1e-13
    assert abs(e["xy"]["re"]) < 1e-13 and abs(e["yy"]["re"] - 1) < 1e-13
    assert (tmp_path / "cell" / "corrector.vtk").exists()


def test_cli_solve_cell_degenerate(tmp_path, capsys):
    mesh = generate_reference_mesh(0.3, 2)
    q = np.zeros((mesh.n_vertices, 2))
    inner = np.flatnonzero(np.linalg.norm(mesh.vertices - 0.5, axis=1) < 0.1)
    q[inner, 0] = -np.sign(mesh.vertices[inner, 0] - 0.5) * 0.4
    save_deformation(tmp_path / "q.txt", q)
    cfgp = _write(tmp_path, f"[geometry]\nrefinements = 2\ndeformation = {tmp_path / 'q.txt'}\n")
    code, out = _run(["solve-cell", "--config", cfgp], capsys)
    assert code == cli.EXIT_DEGENERATE
    assert "error" in json.loads(out)


def test_cli_optimize_initial_only(tmp_path, capsys):
    cfgp = _write(tmp_path, "[geometry]\nrefinements = 2\n[optimizer]\ntol = 1\nmax_steps = 0\n")
    out_dir = tmp_path / "run"
    code, out = _run(["optimize", "--config", cfgp, "--out", str(out_dir)], capsys)
    assert code == 0
    report = json.loads((out_dir / "report.json").read_text())
    assert report["steps"] == 0 and len(report["records"]) == 1
    assert report["initial_deviation_percent"] == report["final_deviation_percent"]
    for name in ("config.ini", "report.json", "iterations.csv", "q_final.txt", "deformed_final.vtk"):
        assert (out_dir / name).exists()
    assert report["mesh_hash"] == mesh_hash(generate_reference_mesh(0.3, 2))
    assert RunConfig.load(out_dir / "config.ini") == RunConfig.load(cfgp)


def test_cli_optimize_stage_switch(tmp_path, capsys):
    cfgp = _write(tmp_path, "[geometry]\nrefinements = 2\n[cost]\nstages = 3:0.8; rest:0.1\n"
                  "[optimizer]\nmax_steps = 5\n[output]\nvtk_every = 2\n")
    out_dir = tmp_path / "run"
    code, _ = _run(["optimize", "--config", cfgp, "--out", str(out_dir), "--fixed-order"], capsys)
    assert code == 0
    with open(out_dir / "iterations.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == [f.name for f in fields(IterationRecord)]
    switch = [r for r in rows if float(r["beta"]) == 0.1]
    assert switch and switch[0]["step"] == "3"
    assert (out_dir / "deformed_00002.vtk").exists()


def test_cli_optimize_reproducible(tmp_path, capsys):
    cfgp = _write(tmp_path, "[geometry]\nrefinements = 1\n[optimizer]\nmax_steps = 3\n[output]\nvtk_every = 0\n")
    logs = []
    for name in ("a", "b"):
        _run(["optimize", "--config", cfgp, "--out", str(tmp_path / name), "--fixed-order"], capsys)
        logs.append((tmp_path / name / "iterations.csv").read_text())
    assert logs[0] == logs[1]


def test_cli_line_search_failure_exit(tmp_path, capsys, monkeypatch):
    from plasmoncell import optimizer

    def failing(*args, **kwargs):
        raise optimizer.LineSearchError("forced", 1e-13, -1.0, 1.0)

    monkeypatch.setattr(optimizer, "armijo_search", failing)
    cfgp = _write(tmp_path, "[geometry]\nrefinements = 1\n[optimizer]\nmax_steps = 3\n")
    code, out = _run(["optimize", "--config", cfgp, "--out", str(tmp_path / "r")], capsys)
    assert code == cli.EXIT_LINE_SEARCH
    assert json.loads(out)["line_search_failed"] is True


def test_cli_gradient_check_default(tmp_path, capsys):
    cfgp = _write(tmp_path, "[check]\ndirections = 3\n")
    code, out = _run(["gradient-check", "--config", cfgp, "--seed", "4", "--out", str(tmp_path / "g.json")], capsys)
    res = json.loads(out)
    assert code == 0 and res["passed"]
    assert all(len(d["sweep"]) >= 3 for d in res["directions"])
    assert json.loads((tmp_path / "g.json").read_text()) == res


def test_cli_gradient_check_pure_tikhonov(tmp_path, capsys):
    cfgp = _write(tmp_path, "[material]\nomega_p = 0\n[cost]\ntarget_xx = 1,0\ntarget_yy = 1,0\n"
                  "target_xy = 0\ntarget_yx = 0\nbeta = 0\n[check]\ndirections = 3\n")
    _, out = _run(["gradient-check", "--config", cfgp], capsys)
    assert json.loads(out)["max_best_error"] < 1e-10


def test_vtk_golden_header(tmp_path):
    mesh = generate_reference_mesh(0.3, 0)
    path = tmp_path / "m.vtk"
    write_vtk(path, mesh, point_data={"q": np.zeros((mesh.n_vertices, 2)), "s": np.ones(mesh.n_vertices)},
              cell_data={"min_J": np.ones(mesh.n_cells)})
    lines = path.read_text().splitlines()
    assert lines[:5] == ["# vtk DataFile Version 3.0", "unit cell", "ASCII", "DATASET UNSTRUCTURED_GRID", "POINTS 20 double"]
    assert "CELLS 13 65" in lines and "CELL_TYPES 13" in lines
    assert "POINT_DATA 20" in lines and "VECTORS q double" in lines and "CELL_DATA 13" in lines
    i = lines.index("CELL_TYPES 13")
    assert lines[i + 1:i + 14] == ["9"] * 13


def test_vtk_rejects_wrong_length(tmp_path):
    mesh = generate_reference_mesh(0.3, 0)
    with pytest.raises(ValueError):
        write_vtk(tmp_path / "m.vtk", mesh, point_data={"s": np.ones(3)})


def test_deformation_file_round_trip(tmp_path):
    q = np.random.default_rng(0).standard_normal((20, 2))
    save_deformation(tmp_path / "q.txt", q)
    assert np.array_equal(load_deformation(tmp_path / "q.txt", 20), q)
    with pytest.raises(ValueError):
        load_deformation(tmp_path / "q.txt", 21)
