import numpy as np
import pytest

import sdah


def test_default_config_sections():
    cfg = sdah.default_config()
    assert set(cfg) == {"model", "train", "sliding"}
    assert cfg["model"]["deform_flags"] == "DDDD"
    assert cfg["train"]["max_steps"] == 2000


def test_micro_counts():
    assert sdah.Model().num_params == 145562
    assert sdah.count_flops() == 1855540
    assert sdah.count_flops(height=64, width=64) == 4 * 1855540


def test_paper_schedule():
    paper = {"decay_start_step": 50000, "decay_every": 10000}
    assert sdah.lr_at(0, paper) == pytest.approx(2e-4, abs=1e-15)
    assert sdah.lr_at(50000, paper) == pytest.approx(1e-4, abs=1e-15)
    assert sdah.lr_at(69999, paper) == pytest.approx(5e-5, abs=1e-15)


def test_unknown_config_field_raises():
    with pytest.raises(sdah.DataError):
        sdah.Model({"widths": [1]})


def test_metrics():
    a = np.zeros((8, 8), np.uint8)
    b = np.zeros((8, 8), np.uint8)
    a[0, 0] = 1
    b[3, 4] = 1
    assert sdah.dsc(a, a) == 1.0
    assert sdah.dsc(a, b) == 0.0
    assert sdah.hd95(a, b) == pytest.approx(5.0)
    assert sdah.hd95(a, np.zeros((8, 8), np.uint8)) is None
    r = sdah.paired_t_test([1.0, 2.2, 3.1, 4.3], [0.5, 1.0, 2.9, 3.0])
    assert r["dof"] == 3 and r["t"] > 0 and 0 < r["p"] < 1


def test_selfcheck_passes():
    results = sdah.selfcheck()
    assert results and all(ok for _, ok, _ in results)


def test_train_predict_save_load_explain(tmp_path):
    data = sdah.synth(8, 32, 2, 3)
    images = [img for img, _ in data]
    labels = [lab for _, lab in data]
    assert images[0].shape == (1, 32, 32) and images[0].dtype == np.float32
    assert labels[0].shape == (32, 32) and labels[0].dtype == np.uint8

    m = sdah.Model({"seed": 4})
    losses = m.train(images, labels, {"max_steps": 6, "batch_size": 2})
    assert len(losses) == 6 and all(np.isfinite(losses))
    assert m.step == 6

    probs, mask = m.predict(images[0])
    assert probs.shape == (2, 32, 32)
    np.testing.assert_allclose(probs.sum(axis=0), 1.0, atol=1e-5)
    assert mask.shape == (32, 32)
    np.testing.assert_array_equal(mask, probs.argmax(axis=0))

    path = tmp_path / "m.sdck"
    m.save(path, {"max_steps": 6, "batch_size": 2})
    back = sdah.Model.load(path)
    assert back.step == 6
    np.testing.assert_array_equal(back.predict_logits(images[1]), m.predict_logits(images[1]))
    assert back.param_names() == m.param_names()

    files = m.explain(tmp_path / "x", images[0], "c0")
    assert len(files) == 35
    assert all((tmp_path / "x" / "c0").exists() for _ in files)
