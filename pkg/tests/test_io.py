import json

import numpy as np
import pytest

from spafh.io import (
    DataError, RunConfig, delta_log_transform, load_adjacency, load_config, load_dataset,
    log_transform_dataset, save_adjacency, save_dataset,
)
from spafh.simulation import ScenarioSpec, build_lattice, gen_dataset

from conftest import random_dataset


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def small_files(tmp_path, variance="area_id,v1_1,v2_1,v2_2\nA001,0.04,0,0.09\nA002,1,0.2,1\n"):
    est = write(tmp_path, "est.csv", "area_id,y1,y2\nA001,1.0,2.0\nA002,3.0,4.0\n")
    des = write(tmp_path, "des.csv", "area_id,response_index,x1,x2\n"
                "A001,1,1,0\nA001,2,0,1\nA002,1,1,0\nA002,2,0,1\n")
    var = write(tmp_path, "var.csv", variance)
    return est, des, var


def test_lower_triangle_unpack(tmp_path):
    data = load_dataset(*small_files(tmp_path))
    np.testing.assert_array_equal(data.V[0], [[0.04, 0.0], [0.0, 0.09]])
    np.testing.assert_array_equal(data.V[1], [[1.0, 0.2], [0.2, 1.0]])
    assert data.area_ids == ("A001", "A002")


def test_diagonal_only_variance(tmp_path):
    data = load_dataset(*small_files(tmp_path, "area_id,v1,v2\nA002,1,2\nA001,3,4\n"))
    np.testing.assert_array_equal(data.V[0], np.diag([3.0, 4.0]))


def test_duplicate_area_names_id_and_line(tmp_path):
    _, des, var = small_files(tmp_path)
    est = write(tmp_path, "est.csv", "area_id,y1,y2\nA001,1,2\nA001,3,4\n")
    with pytest.raises(DataError, match=r"est\.csv:3.*'A001'"):
        load_dataset(est, des, var)


@pytest.mark.parametrize("variance,pattern", [
    ("area_id,v1_1,v2_1,v2_2\nA001,1,0,1\n", "A002"),
    ("area_id,v1_1,v2_1,v2_2\nA001,1,0,1\nA002,1,2,1\n", r"var\.csv:3.*not positive definite"),
    ("area_id,v1_1,v2_1,v2_2\nA001,1,0\nA002,1,0,1\n", r"var\.csv:2.*expected 4"),
    ("area_id,v1_1,v2_1,v2_2\nA001,1,0,1\nZ9,1,0,1\n", r"var\.csv:3.*'Z9'"),
])
def test_variance_errors(tmp_path, variance, pattern):
    with pytest.raises(DataError, match=pattern):
        load_dataset(*small_files(tmp_path, variance))


def test_missing_design_rows(tmp_path):
    est, _, var = small_files(tmp_path)
    des = write(tmp_path, "des.csv", "area_id,response_index,x1,x2\nA001,1,1,0\nA001,2,0,1\nA002,1,1,0\n")
    with pytest.raises(DataError, match="'A002'"):
        load_dataset(est, des, var)


def test_non_numeric_value(tmp_path):
    _, des, var = small_files(tmp_path)
    est = write(tmp_path, "est.csv", "area_id,y1,y2\nA001,1,abc\nA002,3,4\n")
    with pytest.raises(DataError, match=r"est\.csv:2"):
        load_dataset(est, des, var)


def test_dataset_round_trip(tmp_path, rng):
    data = random_dataset(rng, 7, k=3, s=4)
    paths = [tmp_path / n for n in ("e.csv", "d.csv", "v.csv")]
    save_dataset(data, *paths)
    back = load_dataset(*paths)
    for name in ("y", "X", "V"):
        np.testing.assert_allclose(getattr(back, name), getattr(data, name), rtol=0, atol=1e-12)
    assert back.area_ids == data.area_ids


def test_adjacency_symmetrized(tmp_path):
    p = write(tmp_path, "adj.csv", "area_id_1,area_id_2\n1,2\n2,1\n")
    s = load_adjacency(p, ["1", "2"])
    assert len(s.edges) == 1 and s.dense_W()[0, 1] == s.dense_W()[1, 0] == 1


def test_adjacency_island_named(tmp_path):
    p = write(tmp_path, "adj.csv", "area_id_1,area_id_2\n1,2\n")
    with pytest.raises(DataError, match="'3'"):
        load_adjacency(p, ["1", "2", "3"])


def test_adjacency_unknown_and_self(tmp_path):
    with pytest.raises(DataError, match=r"adj\.csv:3.*'9'"):
        load_adjacency(write(tmp_path, "adj.csv", "a,b\n1,2\n2,9\n"), ["1", "2"])
    with pytest.raises(DataError, match="self-edge"):
        load_adjacency(write(tmp_path, "adj.csv", "a,b\n1,2\n2,2\n"), ["1", "2"])


def test_lattice_round_trip(tmp_path):
    s = build_lattice(100)
    ids = [str(i + 1) for i in range(100)]
    save_adjacency(s, ids, tmp_path / "adj.csv")
    back = load_adjacency(tmp_path / "adj.csv", ids)
    assert back == s
    np.testing.assert_array_equal(back.dense_W(), s.dense_W())


def test_delta_log_values(rng):
    ly, lv = delta_log_transform(10.0, 4.0)
    assert ly == pytest.approx(np.log(10)) and lv == pytest.approx(0.04)
    assert delta_log_transform(1.0, 0.3)[1] == 0.3
    with pytest.raises(ValueError):
        delta_log_transform(0.0, 1.0)
    sample = 100 + rng.standard_normal(200_000)
    assert np.var(np.log(sample)) == pytest.approx(1e-4, rel=0.05)


def test_log_transform_dataset():
    data, _, _ = gen_dataset(None, ScenarioSpec(m=20))
    pos = data.with_y(np.abs(data.y) + 1)
    out = log_transform_dataset(pos)
    np.testing.assert_allclose(out.y, np.log(pos.y))
    np.testing.assert_allclose(out.V[:, 0, 0], pos.V[:, 0, 0] / pos.y[:, 0] ** 2)


def test_config_round_trip(tmp_path):
    cfg = RunConfig(command="fit", variant="SpaGa", eta=50.0, n_total=300, m=[20, 50], store_draws=True)
    p = tmp_path / "c.json"
    p.write_text(cfg.to_json())
    assert RunConfig.from_dict(load_config(p)) == cfg


def test_config_errors(tmp_path):
    p = write(tmp_path, "c.json", '{"command": "fit",\n "bogus": 1}')
    with pytest.raises(DataError, match="bogus"):
        RunConfig.from_dict(load_config(p))
    with pytest.raises(DataError, match=r"c2\.json:2"):
        load_config(write(tmp_path, "c2.json", '{\n "a": }'))
    assert json.loads(RunConfig(command="simulate").to_json())["n_reps"] == 50
