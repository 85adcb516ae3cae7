import csv
import json

import numpy as np
import pytest

from inrsbm import cli
from inrsbm.config import load_config, make_field, parse_config, refine_spec
from inrsbm.errors import ConfigError, InputError
from inrsbm.io import centerline_points, read_vtk_summary, write_table, write_vtk

SMALL_TRAIN = dict(steps=20, n_surface=200, n_narrowband=200, n_uniform=400, batch_size=128,
                   widths=[16, 16], val_every=5, n_val=200)


def test_vtk_structure(tmp_path):
    pts = np.array([[0, 0], [1, 0], [2, 0], [0, 1], [1, 1], [2, 1]], float)
    cells = np.array([[0, 1, 3, 4], [1, 2, 4, 5]])
    p = tmp_path / "m.vtk"
    write_vtk(p, pts, cells, point_data={"velocity": pts, "pressure": pts[:, 0]},
              cell_data={"marker": [1, 3]})
    s = read_vtk_summary(p)
    assert s["sections"] == ["POINTS", "CELLS", "CELL_TYPES", "CELL_DATA", "POINT_DATA"]
    assert s["POINTS"] == 6 and s["CELLS"] == 2
    assert s["fields"] == ["marker", "velocity", "pressure"]
    lines = p.read_text().splitlines()
    # lexicographic corners are rewritten in counter-clockwise VTK order
    assert lines[lines.index("CELLS 2 10") + 1] == "4 0 1 4 3"
    assert lines[lines.index("CELL_TYPES 2") + 1] == "9"


def test_table_and_probe_lines(tmp_path):
    write_table(tmp_path / "t.csv", ["a", "b"], [[1, 0.1], [2, np.float64(1 / 3)]])
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert rows[2] == ["2", repr(1 / 3)]
    s, lines = centerline_points([0, 0], [1, 2], 5)
    np.testing.assert_allclose(lines["vertical"][:, 0], 0.5)
    np.testing.assert_allclose(lines["vertical"][:, 1], np.linspace(0, 2, 5))
    np.testing.assert_allclose(lines["diagonal"][-1], [1, 2])


def test_config_strict_keys_and_validation(tmp_path):
    with pytest.raises(ConfigError, match="Reynolds"):
        parse_config({"Reynolds": 10})
    with pytest.raises(ConfigError, match="config.refine"):
        parse_config({"refine": {"levels": 3}})
    with pytest.raises(ConfigError, match="dt"):
        parse_config({"dt": 0.0})
    with pytest.raises(ConfigError):
        parse_config({"domain": [[0, 0], [1, 0]]})
    with pytest.raises(ConfigError):
        parse_config({"bc": "couette"})
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(bad)
    with pytest.raises(InputError, match="missing.json"):
        load_config(tmp_path / "missing.json")


def test_geometry_blocks():
    cfg = parse_config({"geometry": {"shape": "sphere", "params": {"radius": 0.2}}})
    with pytest.raises(ConfigError, match="3-D"):
        make_field(cfg.geometry, 2)
    f = make_field(parse_config({"geometry": {"shape": "circle", "params": {"radius": 1 / 3},
                                              "offset": [0.5, 0.5], "scale": 0.5}}).geometry, 2)
    assert f(np.array([[0.5 + 1 / 6, 0.5]]))[0] == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(ConfigError):
        make_field(parse_config({"geometry": {"shape": "torus"}}).geometry, 3)
    spec = refine_spec(parse_config({"refine": {"base_level": 3, "regions": [
        {"shape": "circle", "radius": 0.1, "level": 6}]}}).refine)
    assert spec.regions[0].level == 6


def write_cfg(tmp_path, data, name="case.json"):
    p = tmp_path / name
    p.write_text(json.dumps(data))
    return p


def cavity_case(**kw):
    data = {"geometry": {"shape": "circle", "params": {"radius": 1 / 6, "center": [0.5, 0.5]}},
            "refine": {"base_level": 4}, "Re": 10.0, "dt": 0.5, "max_steps": 3, "vtk_every": 2,
            "probe_points": 17}
    data.update(kw)
    return data


def test_exit_codes(tmp_path, capsys):
    assert cli.main(["simulate", "--config", str(tmp_path / "nope.json"),
                     "--out", str(tmp_path / "o")]) == cli.EXIT_INPUT
    assert "nope.json" in capsys.readouterr().err
    p = write_cfg(tmp_path, {"dt": -1})
    assert cli.main(["simulate", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
    p = write_cfg(tmp_path, cavity_case(geometry={"shape": "sphere", "params": {"radius": 0.2}}))
    assert cli.main(["mesh", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
    diverge = dict(SMALL_TRAIN, steps=40, lr=5.0, lr_final=5.0, divergence_patience=3,
                   divergence_factor=2.0)
    p = write_cfg(tmp_path, {"geometry": {"shape": "circle", "params": {"radius": 0.5}},
                             "domain": [[-1, -1], [1, 1]], "train": diverge})
    assert cli.main(["train", "--config", str(p), "--out", str(tmp_path / "t")]) == \
        cli.EXIT_NUMERICAL


def test_simulate_outputs_and_determinism(tmp_path):
    p = write_cfg(tmp_path, cavity_case())
    outs = []
    for k in range(2):
        o = tmp_path / f"run{k}"
        assert cli.main(["simulate", "--config", str(p), "--out", str(o)]) == 0
        outs.append(o)
    for name in ("flow_00002.vtk", "flow_final.vtk", "probes.csv", "history.csv"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    hist = list(csv.DictReader(open(outs[0] / "history.csv")))
    assert len(hist) == 3 and list(hist[0]) == ["step", "t", "change", "newton_its",
                                                 "residual0", "residual", "divergence"]
    summary = json.loads((outs[0] / "summary.json").read_text())
    assert summary["steps"] == 3 and summary["n_faces"] > 0
    probes = list(csv.reader(open(outs[0] / "probes.csv")))
    assert probes[0] == ["line", "s", "x", "y", "u", "v", "p"] and len(probes) == 1 + 3 * 17
    assert read_vtk_summary(outs[0] / "flow_final.vtk")["fields"] == ["marker", "velocity",
                                                                      "pressure"]


def test_mesh_command(tmp_path):
    p = write_cfg(tmp_path, cavity_case())
    assert cli.main(["mesh", "--config", str(p), "--out", str(tmp_path)]) == 0
    s = json.loads((tmp_path / "mesh_summary.json").read_text())
    # solid leaves are pruned from the 16 x 16 grid
    assert 200 < s["leaves"] < 256 and s["faces"] > 0
    assert sum(s[k] for k in ("Interior", "Exterior", "TrueIntercepted", "FalseIntercepted",
                              "NeighborsFalseIntercepted")) == s["leaves"]
    rows = list(csv.reader(open(tmp_path / "boundary.csv")))
    assert rows[0] == ["leaf", "face", "qx", "qy", "dx", "dy"]
    assert len(rows) == 1 + 2 * s["faces"]


def test_train_is_deterministic(tmp_path):
    p = write_cfg(tmp_path, {"geometry": {"shape": "circle", "params": {"radius": 0.5}},
                             "domain": [[-1, -1], [1, 1]], "seed": 4, "train": SMALL_TRAIN})
    for k in range(2):
        assert cli.main(["train", "--config", str(p), "--out", str(tmp_path / f"t{k}")]) == 0
    a, b = (tmp_path / f"t{k}" / "model.inr" for k in range(2))
    assert a.read_bytes() == b.read_bytes()
    assert (tmp_path / "t0" / "train_log.csv").exists()


def test_eval_inr_self_reference(tmp_path):
    geo = {"shape": "circle", "params": {"radius": 0.5}}
    p = write_cfg(tmp_path, {"geometry": geo, "domain": [[-1, -1], [1, 1]],
                             "eval": {"level": 5, "grid_res": 64, "delta": 0.05, "reference": geo,
                                      "name": "circle"}})
    assert cli.main(["eval-inr", "--config", str(p), "--out", str(tmp_path)]) == 0
    row = next(csv.DictReader(open(tmp_path / "metrics.csv")))
    assert row["geometry"] == "circle"
    assert float(row["nmse"]) == 0.0 and float(row["cos_mean"]) == pytest.approx(1.0)
    p = write_cfg(tmp_path, {"geometry": geo, "domain": [[-1, -1], [1, 1]]})
    assert cli.main(["eval-inr", "--config", str(p), "--out", str(tmp_path)]) == 2


def test_bench_zero_queries(tmp_path):
    p = write_cfg(tmp_path, {"bench": {"subdivisions": [1, 2], "queries": 0,
                                       "widths": [8, 8]}})
    assert cli.main(["bench-geometry", "--config", str(p), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "bench.csv").read_text().splitlines() == [
        "subdivisions,triangles,queries,oracle_ns_per_query,inference_ns_per_query"]


def test_config_copy_written(tmp_path):
    p = write_cfg(tmp_path, cavity_case())
    cli.main(["mesh", "--config", str(p), "--out", str(tmp_path / "m")])
    saved = json.loads((tmp_path / "m" / "config.json").read_text())
    assert saved["Re"] == 10.0 and saved["refine"]["base_level"] == 4
