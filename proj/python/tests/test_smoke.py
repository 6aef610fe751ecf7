import json
import math

import numpy as np
import pytest

import bsnet


@pytest.fixture(autouse=True)
def f64():
    bsnet.set_numeric_mode("f64")


def test_synthetic_dataset_and_splits():
    ds = bsnet.generate_synthetic(classes=8, images_per_class=3, variation=0.1, seed=2)
    assert len(ds) == 24
    img = ds.image(0)
    assert img.shape == (84, 84, 3)
    assert 0.0 <= img.min() and img.max() <= 1.0
    train, val, test = bsnet.split_dataset(ds, seed=1)
    assert [len(s.classes) for s in (train, val, test)] == [4, 2, 2]
    assert not set(train.classes) & set(test.classes)


def test_model_scores_and_prediction():
    ds = bsnet.generate_synthetic(classes=3, images_per_class=2, seed=4)
    support = ds.batch([0, 2, 4])
    query = ds.batch([1, 3, 5])
    assert support.shape == (3, 3, 84, 84)
    model = bsnet.Model(heads=["relation", "cosine"], seed=3)
    assert model.heads == ["relation", "cosine"]
    assert model.feature_shape == [64, 19, 19]
    scores = model.scores(support, query, way=3, shot=1)
    assert scores.shape == (3, 3, 2)
    assert np.all((scores >= 0) & (scores <= 1))
    preds = bsnet.predict(scores)
    assert preds == list(np.argmax(scores.mean(axis=2), axis=1))


def test_prediction_ties_go_to_lowest_class():
    scores = np.array([[[0.5], [0.9], [0.9]]])
    assert bsnet.predict(scores) == [1]


def test_statistics():
    assert math.isclose(bsnet.ci_half_width(10.0, 600), 1.96 * 10 / math.sqrt(600), rel_tol=1e-15)
    s = bsnet.accuracy_stats([0.5, 0.7, 0.9])
    assert math.isclose(s["mean"], 0.7) and math.isclose(s["std"], 0.2)
    assert s["n"] == 3


def test_errors_map_to_python_exceptions():
    with pytest.raises(bsnet.ConfigError):
        bsnet.Model(heads=[])
    with pytest.raises(bsnet.ConfigError):
        bsnet.load_config(overrides=["no_such_key=1"])
    with pytest.raises(ValueError):
        bsnet.set_numeric_mode("f16")


def test_train_eval_round_trip(tmp_path):
    cfg = bsnet.load_config(
        overrides=[
            f"output={tmp_path / 'run'}",
            "heads=[prototype]",
            "way=2",
            "train_queries=1",
            "test_queries=1",
            "train_episodes=2",
            "eval_episodes=3",
            "synthetic.classes=8",
            "synthetic.images_per_class=3",
        ]
    )
    summary = bsnet.train(cfg)
    assert summary["episodes"] == 2
    report = bsnet.evaluate(cfg, summary["checkpoint"])
    assert report["n_episodes"] == 3
    saved = json.loads((tmp_path / "run" / "eval.json").read_text())
    assert saved == report
    model = bsnet.Model(heads=["prototype"], seed=99)
    assert model.load(summary["checkpoint"]) == 2


def test_rademacher_lab():
    assert bsnet.estimate_constant_family(n_sigma=20) == 1.0
    cfg = bsnet.load_config(
        overrides=["rademacher.n_sigma=8", "rademacher.restarts=4", "rademacher.steps=20",
                   "rademacher.witnesses=10"]
    )
    report = bsnet.rademacher(cfg)
    assert report["inequality_holds_all"] is True
    assert report["witnesses_exact"] == report["witnesses_checked"] == 10


def test_grad_cam_map():
    rng = np.random.default_rng(0)
    feature = rng.uniform(0.1, 1.0, size=(2, 4, 4))
    grad = np.zeros_like(feature)
    grad[0] = 1.0
    cam = bsnet.grad_cam_map(feature, grad)
    expected = (feature[0] - feature[0].min()) / (feature[0].max() - feature[0].min())
    np.testing.assert_allclose(cam, expected, atol=1e-12)
