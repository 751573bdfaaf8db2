import json

import numpy as np
import pytest

import polygonizer as pg

SQUARE = [(10.0, 10.0), (30.0, 10.0), (30.0, 30.0), (10.0, 30.0)]


def test_version():
    assert pg.__version__ == "0.1.0"


def test_codec_round_trip():
    tokens = pg.encode_polygon(SQUARE, 64)
    assert tokens[0] == 64 and tokens[-1] == 65
    assert len(tokens) == 2 * len(SQUARE) + 2
    ring, terminated = pg.decode_tokens(tokens, 64)
    assert terminated
    assert len(ring) == 4
    for (x, y), (u, v) in zip(ring, SQUARE):
        assert abs(x - u) <= 0.5 and abs(y - v) <= 0.5


def test_malformed_tokens_raise():
    with pytest.raises(pg.PolygonizerError):
        pg.decode_tokens([64, 3, 65], 64)


def test_metrics():
    assert pg.iou(SQUARE, SQUARE) == 1.0
    shifted = [(x + 10.0, y) for x, y in SQUARE]
    assert abs(pg.iou(SQUARE, shifted) - 1.0 / 3.0) < 0.02
    assert pg.max_tangent_angle_error(SQUARE, SQUARE) == 0.0
    assert pg.c_iou(0.8, 6, 4) == pytest.approx(0.8 * (1 - 2 / 10))


def test_rasterize():
    mask = pg.rasterize(SQUARE, 64)
    assert mask.shape == (64, 64)
    assert mask.dtype == np.uint8
    assert int(mask.sum()) == 400


def test_generate_dataset_is_deterministic():
    a = pg.generate_dataset(3, seed=5)
    b = pg.generate_dataset(3, seed=5)
    assert [s["id"] for s in a] == [s["id"] for s in b]
    assert a[0]["image"].shape == (3, 64, 64)
    assert a[0]["image"].dtype == np.float32
    assert np.array_equal(a[2]["image"], b[2]["image"])
    assert a[1]["ring"] == b[1]["ring"]


def test_model_predict(tmp_path):
    model = pg.desk_model(seed=1)
    assert pg.model_config(model)["lstm_layers"] == 3
    assert model.grid_size == 64
    samples = pg.generate_dataset(2, seed=3)
    preds = model.predict([s["image"] for s in samples])
    assert len(preds) == 2
    for p in preds:
        assert (p["ring"] is None) == (p["failure"] is not None)
    path = str(tmp_path / "m.plgz")
    model.save(path)
    again = pg.Model.load(path).predict([s["image"] for s in samples])
    assert [p["tokens"] for p in again] == [p["tokens"] for p in preds]


def test_run_cli(tmp_path):
    code, out, err = pg.run_cli(["generate", "--n", "4", "--seed", "2", "--out", str(tmp_path / "d")])
    assert code == 0, err
    assert json.loads(out.splitlines()[0])["command"] == "generate"
    code, out, err = pg.run_cli(["eval", "--predictor", "ground-truth", "--data", str(tmp_path / "d"),
                                 "--out", str(tmp_path / "e.json")])
    assert code == 0, err
    assert json.loads((tmp_path / "e.json").read_text())["rows"][0]["ap"] == 1.0
    code, _, err = pg.run_cli(["frobnicate"])
    assert code == 2
    assert json.loads(err)["error"] == "usage"
