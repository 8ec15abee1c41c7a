import csv

import numpy as np
import pytest

import cscunet


def test_model_forward_shape_and_count():
    m = cscunet.Model(variant="all", encode_unfoldings=1, decode_unfoldings=1,
                      widths=(4, 8, 8, 8, 8), seed=3)
    assert m.name == "CSC-Unet-All-1-1"
    x = np.random.default_rng(0).random((2, 3, 32, 32), dtype=np.float32)
    y = m.forward(x)
    assert y.shape == (2, 2, 32, 32)
    assert np.isfinite(y).all()
    np.testing.assert_array_equal(y, m.forward(x))
    base = cscunet.Model(widths=(4, 8, 8, 8, 8), seed=3)
    assert base.parameter_count() == m.parameter_count()


def test_bad_spatial_size_raises():
    m = cscunet.Model(widths=(4, 8, 8, 8, 8))
    with pytest.raises(cscunet.ShapeError, match="divisible by 16"):
        m.forward(np.zeros((1, 3, 40, 40), dtype=np.float32))


def test_conv_matches_numpy_correlation():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 2, 5, 6))
    w = rng.standard_normal((3, 2, 3, 3))
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    expected = np.zeros((1, 3, 5, 6))
    for o in range(3):
        for i in range(5):
            for j in range(6):
                expected[0, o, i, j] = np.sum(padded[0, :, i:i + 3, j:j + 3] * w[o])
    np.testing.assert_allclose(cscunet.conv2d(x, w), expected, atol=1e-12)


def test_conv_transpose_is_adjoint():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 3, 7, 7))
    y = rng.standard_normal((2, 4, 7, 7))
    w = rng.standard_normal((4, 3, 3, 3))
    lhs = np.sum(cscunet.conv2d(x, w) * y)
    rhs = np.sum(x * cscunet.conv_transpose2d(y, w))
    assert abs(lhs - rhs) <= 1e-10 * max(abs(lhs), 1.0)


def test_ista_identity_dictionary_soft_thresholds():
    rng = np.random.default_rng(3)
    y = rng.standard_normal((1, 2, 8, 8))
    delta = np.zeros((2, 2, 3, 3))
    delta[0, 0, 1, 1] = delta[1, 1, 1, 1] = 1.0
    code, objective = cscunet.ista_pursuit(y, delta, 0.3, step=0.9)
    np.testing.assert_allclose(code, np.maximum(y - 0.3, 0.0), atol=1e-8)
    assert all(b <= a + 1e-9 for a, b in zip(objective, objective[1:]))


def test_metrics_against_numpy():
    rng = np.random.default_rng(4)
    pred = rng.integers(0, 3, (16, 16), dtype=np.uint8)
    truth = rng.integers(0, 3, (16, 16), dtype=np.uint8)
    r = cscunet.compute_metrics(pred, truth, 3)
    assert r["pixel_acc"] == np.mean(pred == truth)
    ious = [np.sum((pred == c) & (truth == c)) / np.sum((pred == c) | (truth == c))
            for c in range(3)]
    np.testing.assert_allclose(r["iou"], ious, rtol=0, atol=1e-15)
    assert r["confusion"].sum() == 256


def test_train_eval_predict_round_trip(tmp_path):
    assert cscunet.gen_synthetic("shapes", 6, 32, 0, tmp_path / "data") == 6
    result = cscunet.train(tmp_path / "data", tmp_path / "run", widths=(4, 8, 8, 8, 8),
                           num_classes=3, epochs=2, lr0=1e-3, record_wall_time=False)
    assert [row["epoch"] for row in result["log"]] == [0, 1]
    with open(result["runlog"]) as f:
        header = next(csv.reader(f))
    assert header == ["epoch", "lr", "train_loss", "val_loss", "wall_seconds"]

    report = cscunet.evaluate(result["final_checkpoint"], tmp_path / "data", "train",
                              tmp_path / "metrics.csv")
    assert 0.0 <= report["mean_iou"] <= 1.0
    model = cscunet.load_checkpoint(result["final_checkpoint"])
    assert model.num_classes == 3

    written = cscunet.predict(result["final_checkpoint"], tmp_path / "data" / "images",
                              tmp_path / "pred")
    assert len(written) == 6


def test_missing_dataset_raises(tmp_path):
    with pytest.raises(cscunet.DataError):
        cscunet.train(tmp_path / "nope", tmp_path / "run", epochs=1)


def test_selftest_passes():
    checks = cscunet.selftest()
    failed = [c["name"] for c in checks if not c["passed"]]
    assert not failed
