"""Free-space segmenter, pixel metrics and the per-policy results table."""
from __future__ import annotations

import csv
from dataclasses import astuple, dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import imaging
from . import tensorcore as tc
from .rng import make_rng


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: ConfusionCounts) -> ConfusionCounts:
        return ConfusionCounts(*(a + b for a, b in zip(astuple(self), astuple(other))))


@dataclass(frozen=True)
class MetricsRow:
    policy: str
    accuracy: float
    precision: float
    recall: float
    f1: float
    miou: float


CSV_COLUMNS = ("policy", "accuracy", "precision", "recall", "f1", "miou")


def confusion(pred, gt) -> ConfusionCounts:
    """Pixel counts with free space (1) as the positive class."""
    p = imaging.as_mask(pred).astype(bool)
    g = imaging.as_mask(gt).astype(bool)
    if p.shape != g.shape:
        raise ValueError(f"dimension mismatch: {p.shape} vs {g.shape}")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, p.size - tp - fp - fn, fp, fn)


def _ratio(num: int, den: int, both_empty: bool) -> float:
    if den == 0:
        return 1.0 if both_empty else 0.0
    return num / den


def metrics(c: ConfusionCounts) -> dict[str, float]:
    """Accuracy, precision, recall, F1 and IoU from confusion counts.

    A 0/0 ratio is 1.0 when prediction and ground truth both have no
    positives, else 0.0. F1 is evaluated as ``2TP / (2TP + FP + FN)``, which
    equals ``2PR / (P + R)`` and needs a single rounding.
    """
    no_pos = c.tp + c.fp + c.fn == 0
    return {
        "accuracy": _ratio(c.tp + c.tn, c.total, True),
        "precision": _ratio(c.tp, c.tp + c.fp, no_pos),
        "recall": _ratio(c.tp, c.tp + c.fn, no_pos),
        "f1": _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, no_pos),
        "iou": _ratio(c.tp, c.tp + c.fp + c.fn, no_pos),
    }


# ---------------------------------------------------------------- network

class SegNet:
    """Tiny U-Net: 8 and 16 channel encoder levels, additive skips, sigmoid head."""

    def __init__(self, seed: int = 0, c1: int = 8, c2: int = 16):
        self.c1, self.c2 = c1, c2
        rng = make_rng(seed, "segnet-init")
        p = {}
        p["e1_w"], p["e1_b"] = tc.he_conv(rng, c1, 3, 3, "e1_w"), tc.zeros((c1,), "e1_b")
        p["e2_w"], p["e2_b"] = tc.he_conv(rng, c2, c1, 3, "e2_w"), tc.zeros((c2,), "e2_b")
        p["b_w"], p["b_b"] = tc.he_conv(rng, c2, c2, 3, "b_w"), tc.zeros((c2,), "b_b")
        p["d2_w"], p["d2_b"] = tc.he_conv(rng, c1, c2, 3, "d2_w"), tc.zeros((c1,), "d2_b")
        p["d1_w"], p["d1_b"] = tc.he_conv(rng, c1, c1, 3, "d1_w"), tc.zeros((c1,), "d1_b")
        p["head_w"], p["head_b"] = tc.he_conv(rng, 1, c1, 1, "head_w"), tc.zeros((1,), "head_b")
        self.params: dict[str, tc.Tensor] = p

    @property
    def n_params(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state) -> None:
        for k, v in self.params.items():
            if state[k].shape != v.shape:
                raise ValueError(f"parameter {k}: shape {state[k].shape} != {v.shape}")
            v.data = np.array(state[k], dtype=np.float64)

    def __call__(self, images) -> tc.Tensor:
        """Probability map ``(N, 1, H, W)`` for ``(N, H, W, 3)`` images in [0,1]."""
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        p = self.params
        x = tc.Tensor(imaging.to_chw(images) * 2.0 - 1.0)

        def block(inp, k, pad=1):
            return tc.relu(tc.add_bias(tc.conv2d(inp, p[k + "_w"], padding=pad), p[k + "_b"]))

        h1 = block(x, "e1")
        h2 = block(tc.avg_pool2(h1), "e2")
        hb = block(tc.avg_pool2(h2), "b")
        u2 = block(tc.add(tc.upsample2(hb), h2), "d2")
        u1 = block(tc.add(tc.upsample2(u2), h1), "d1")
        logits = tc.add_bias(tc.conv2d(u1, p["head_w"]), p["head_b"])
        return tc.sigmoid(logits)


def seg_loss(net: SegNet, images, labels) -> tc.Tensor:
    prob = net(images)
    target = np.asarray(labels, dtype=np.float64)[:, None]
    return tc.bce(prob, tc.Tensor(target))


def predict(net: SegNet, image) -> np.ndarray:
    """Binary free-space mask: probability thresholded at 0.5."""
    with tc.no_grad():
        prob = net(image).data
    out = (prob[:, 0] > 0.5).astype(np.uint8)
    return out[0] if np.asarray(image).ndim == 3 else out


@dataclass
class SegConfig:
    epochs: int = 40
    lr: float = 1e-3
    batch_size: int = 8
    seed: int = 0
    log_every: int = 20

    def __post_init__(self):
        if self.epochs < 0 or self.lr <= 0 or self.batch_size < 1 or self.log_every < 1:
            raise ValueError("invalid segmenter config")


class DivergenceError(RuntimeError):
    pass


def train_segmenter(images: np.ndarray, labels: np.ndarray, cfg: SegConfig,
                    progress: Callable[[str], None] | None = None) -> tuple[SegNet, list[tuple[int, float]]]:
    """Adam on pixel BCE; returns the net and ``(step, mean loss)`` curve."""
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    if len(images) == 0:
        raise ValueError("empty training set")
    net = SegNet(seed=cfg.seed)
    rng = make_rng(cfg.seed, "segnet-train")
    state = tc.OptimizerState(cfg.lr, adaptive=True)
    names = list(net.params)
    curve: list[tuple[int, float]] = []
    window: list[float] = []
    step = 0
    for epoch in range(cfg.epochs):
        epoch_losses = []
        order = rng.permutation(len(images))
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            step += 1
            try:
                loss = seg_loss(net, images[idx], labels[idx])
                grads = tc.backward(loss, [net.params[k] for k in names])
            except FloatingPointError as exc:
                raise DivergenceError(f"segmenter diverged at step {step}: {exc}") from exc
            tc.sgd_step(net.params, {k: grads[net.params[k]] for k in names}, state)
            window.append(loss.item())
            epoch_losses.append(window[-1])
            if step % cfg.log_every == 0:
                curve.append((step, float(np.mean(window))))
                window = []
        if progress:
            progress(f"segmenter epoch {epoch + 1}/{cfg.epochs} mean loss {np.mean(epoch_losses):.4f}")
    if window:
        curve.append((step, float(np.mean(window))))
    return net, curve


def evaluate(net: SegNet, images, labels, policy: str = "", batch: int = 32) -> MetricsRow:
    """Mean of per-image metrics over a test set (so miou is the mean per-image IoU)."""
    keys = ("accuracy", "precision", "recall", "f1", "iou")
    per_image = []
    for s in range(0, len(images), batch):
        preds = predict(net, np.asarray(images[s:s + batch]))
        for pr, gt in zip(preds, labels[s:s + batch]):
            m = metrics(confusion(pr, gt))
            per_image.append([m[k] for k in keys])
    if not per_image:
        raise ValueError("empty test set")
    mean = np.mean(np.array(per_image), axis=0)
    return MetricsRow(policy, *(float(v) for v in mean))


def evaluate_table(policies: Sequence[str], nets: dict, images, labels, registry: Sequence[str] | None = None) -> list[MetricsRow]:
    missing = [p for p in policies if p not in nets]
    if missing:
        raise KeyError(f"no trained segmenter for {missing}")
    order = list(registry) if registry is not None else list(policies)
    ranked = sorted(policies, key=lambda p: order.index(p) if p in order else len(order))
    return [evaluate(nets[p], images, labels, policy=p) for p in ranked]


def write_table_csv(path, rows: Sequence[MetricsRow]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow([r.policy] + [f"{getattr(r, f.name):.6f}" for f in fields(r)[1:]])


def read_table_csv(path) -> list[MetricsRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        rd = csv.DictReader(fh)
        if tuple(rd.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"unexpected columns {rd.fieldnames}")
        return [MetricsRow(r["policy"], *(float(r[c]) for c in CSV_COLUMNS[1:])) for r in rd]


def write_curve_csv(path, curve) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("step", "loss"))
        for step, loss in curve:
            w.writerow((step, repr(float(loss))))


def save_segnet(path, net: SegNet) -> None:
    state = net.state_dict()
    state["__meta__.arch"] = np.array([net.c1, net.c2], dtype=np.float64)
    tc.save_checkpoint(path, state)


def load_segnet(path) -> SegNet:
    state = tc.load_checkpoint(path)
    c1, c2 = (int(v) for v in state.pop("__meta__.arch"))
    net = SegNet(c1=c1, c2=c2)
    net.load_state_dict(state)
    return net
