from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eraseredraw import segharness as sh
from eraseredraw import tensorcore as tc


def brute_counts(pred, gt):
    tp = tn = fp = fn = 0
    for p, g in zip(np.ravel(pred), np.ravel(gt)):
        if p and g:
            tp += 1
        elif p and not g:
            fp += 1
        elif g:
            fn += 1
        else:
            tn += 1
    return tp, tn, fp, fn


def fraction_metrics(tp, tn, fp, fn):
    """Exact rational reference for the five metrics with the 0/0 convention."""
    no_pos = tp + fp + fn == 0

    def ratio(a, b):
        return (Fraction(1) if no_pos else Fraction(0)) if b == 0 else Fraction(a, b)

    p, r = ratio(tp, tp + fp), ratio(tp, tp + fn)
    f1 = (Fraction(1) if no_pos else Fraction(0)) if p + r == 0 else 2 * p * r / (p + r)
    return {"accuracy": Fraction(tp + tn, tp + tn + fp + fn), "precision": p, "recall": r,
            "f1": f1, "iou": ratio(tp, tp + fp + fn)}


def test_confusion_trivial():
    ones = np.ones((4, 4), np.uint8)
    assert sh.confusion(ones, ones) == sh.ConfusionCounts(16, 0, 0, 0)
    gt = (np.arange(16).reshape(4, 4) % 3 == 0).astype(np.uint8)
    c = sh.confusion(1 - gt, gt)
    assert c.tp == 0 and c.tn == 0


def test_hand_constructed_counts_and_metrics():
    pred = np.array([[1, 1, 1, 1, 0], [0, 0, 0, 0, 0]], np.uint8)
    gt = np.array([[1, 1, 1, 0, 1], [0, 0, 0, 0, 0]], np.uint8)
    c = sh.confusion(pred, gt)
    assert (c.tp, c.tn, c.fp, c.fn) == brute_counts(pred, gt) == (3, 5, 1, 1)
    m = sh.metrics(c)
    assert m["accuracy"] == 0.8 and m["precision"] == 0.75 and m["recall"] == 0.75
    assert m["f1"] == 0.75 and m["iou"] == 0.6


def test_metrics_degenerate():
    assert all(v == 1.0 for v in sh.metrics(sh.ConfusionCounts(0, 9, 0, 0)).values())
    perfect = sh.metrics(sh.confusion(np.eye(3, dtype=np.uint8), np.eye(3, dtype=np.uint8)))
    assert all(v == 1.0 for v in perfect.values())
    # prediction has positives, ground truth has none
    m = sh.metrics(sh.ConfusionCounts(0, 5, 4, 0))
    assert m["precision"] == 0.0 and m["recall"] == 0.0 and m["iou"] == 0.0


def test_confusion_dimension_mismatch():
    with pytest.raises(ValueError):
        sh.confusion(np.zeros((2, 3)), np.zeros((3, 2)))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0, 1), st.floats(0, 1))
def test_metrics_match_rational_oracle(seed, p_pred, p_gt):
    rng = np.random.default_rng(seed)
    pred = (rng.random((8, 8)) < p_pred).astype(np.uint8)
    gt = (rng.random((8, 8)) < p_gt).astype(np.uint8)
    c = sh.confusion(pred, gt)
    assert c.total == 64
    assert (c.tp, c.tn, c.fp, c.fn) == brute_counts(pred, gt)
    ref = fraction_metrics(c.tp, c.tn, c.fp, c.fn)
    got = sh.metrics(c)
    for k, v in ref.items():
        assert Fraction(got[k]) == Fraction(float(v)), k


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10**6), st.integers(0, 10**6), st.integers(0, 10**6))
def test_f1_iou_identity(tp, fp, fn):
    m = sh.metrics(sh.ConfusionCounts(tp, 0, fp, fn))
    assert abs(m["f1"] - 2 * m["iou"] / (1 + m["iou"])) <= 1e-12


# ---- network and training


def toy_set(n=16, seed=0):
    """Images whose red channel encodes the label: trivially learnable."""
    rng = np.random.default_rng(seed)
    labels = np.zeros((n, 16, 16), np.uint8)
    for i in range(n):
        r = int(rng.integers(4, 12))
        labels[i, r:] = 1
    imgs = rng.random((n, 16, 16, 3)) * 0.2
    imgs[..., 0] += labels * 0.7
    return imgs, labels


def test_seg_loss_gradient_8x8():
    rng = np.random.default_rng(1)
    net = sh.SegNet(seed=3)
    imgs = rng.random((2, 8, 8, 3))
    lbls = (rng.random((2, 8, 8)) < 0.5).astype(np.uint8)
    params = list(net.params.values())
    err = tc.grad_check(lambda: sh.seg_loss(net, imgs, lbls), params, eps=1e-5,
                        samples_per_param=8, rng=np.random.default_rng(0))
    assert err < 1e-4


def test_zero_epochs_unchanged():
    imgs, lbls = toy_set()
    net, curve = sh.train_segmenter(imgs, lbls, sh.SegConfig(epochs=0, seed=2))
    fresh = sh.SegNet(seed=2)
    assert curve == []
    assert all(np.array_equal(net.params[k].data, fresh.params[k].data) for k in fresh.params)


def test_training_deterministic_and_converges():
    imgs, lbls = toy_set(32)
    cfg = sh.SegConfig(epochs=12, lr=5e-3, batch_size=8, seed=4, log_every=4)
    a, ca = sh.train_segmenter(imgs, lbls, cfg)
    b, cb = sh.train_segmenter(imgs, lbls, cfg)
    assert ca == cb
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
    assert ca[-1][1] < 0.5 * ca[0][1]
    row = sh.evaluate(a, imgs, lbls, "toy")
    assert row.miou > 0.8


def test_predict_binary_and_deterministic():
    imgs, _ = toy_set(3)
    net = sh.SegNet(seed=1)
    p1, p2 = sh.predict(net, imgs[0]), sh.predict(net, imgs[0])
    assert p1.shape == (16, 16) and set(np.unique(p1)) <= {0, 1}
    assert np.array_equal(p1, p2)
    assert sh.predict(net, imgs).shape == (3, 16, 16)


def test_evaluate_single_image_equals_image_metrics():
    imgs, lbls = toy_set(1)
    net = sh.SegNet(seed=5)
    row = sh.evaluate(net, imgs, lbls, "one")
    m = sh.metrics(sh.confusion(sh.predict(net, imgs[0]), lbls[0]))
    assert (row.accuracy, row.precision, row.recall, row.f1, row.miou) == \
        (m["accuracy"], m["precision"], m["recall"], m["f1"], m["iou"])


def test_evaluate_is_mean_of_per_image_metrics():
    imgs, lbls = toy_set(5, seed=3)
    net = sh.SegNet(seed=6)
    row = sh.evaluate(net, imgs, lbls, "x", batch=2)
    per = [sh.metrics(sh.confusion(sh.predict(net, i), g)) for i, g in zip(imgs, lbls)]
    assert row.miou == pytest.approx(np.mean([p["iou"] for p in per]), abs=1e-15)
    assert row.f1 == pytest.approx(np.mean([p["f1"] for p in per]), abs=1e-15)


def test_table_order_csv_and_missing(tmp_path):
    imgs, lbls = toy_set(2)
    registry = ("standard", "basic", "cutout")
    nets = {k: sh.SegNet(seed=i) for i, k in enumerate(registry)}
    rows = sh.evaluate_table(["cutout", "standard", "basic"], nets, imgs, lbls, registry)
    assert [r.policy for r in rows] == list(registry)
    sh.write_table_csv(tmp_path / "t.csv", rows)
    text = (tmp_path / "t.csv").read_text().splitlines()
    assert text[0] == "policy,accuracy,precision,recall,f1,miou"
    back = sh.read_table_csv(tmp_path / "t.csv")
    assert [r.policy for r in back] == list(registry)
    assert back[0].miou == pytest.approx(rows[0].miou, abs=5e-7)
    with pytest.raises(KeyError):
        sh.evaluate_table(["gridmask"], nets, imgs, lbls)


def test_segnet_checkpoint(tmp_path):
    net = sh.SegNet(seed=8)
    sh.save_segnet(tmp_path / "s.rfck", net)
    back = sh.load_segnet(tmp_path / "s.rfck")
    assert all(np.array_equal(back.params[k].data, v.data) for k, v in net.params.items())
