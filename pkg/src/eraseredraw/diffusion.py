"""Masked denoising diffusion: schedule, forward noising, denoiser, training, inpainting.

Conventions
-----------
* Arrays handled here are channel-last, ``(H, W, 3)`` or batched
  ``(N, H, W, 3)``; masks are ``(H, W)`` / ``(N, H, W)``.
* ``q_sample``, ``masked_q_sample``, ``diffusion_loss`` and ``p_sample_step``
  work in model space, where pixel values live in [-1, 1]. ``inpaint`` and
  ``sample_unmasked`` take and return ordinary [0, 1] images and convert at
  the boundary with :func:`to_model_space` / :func:`from_model_space`.
* Steps are 1-based: ``t`` runs from 1 to ``T``.
* The denoiser is fully convolutional. Training and inpainting run on a
  square window (``crop`` px, default 32) around the mask; pixels outside
  the window are never touched.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import imaging
from . import tensorcore as tc
from .rng import make_rng
from .scenes import CLASSES, SceneSample

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


# ---------------------------------------------------------------- schedule

@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray
    beta_start: float
    beta_end: float

    def _i(self, t: int) -> int:
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")
        return t - 1

    def beta_at(self, t: int) -> float:
        return float(self.beta[self._i(t)])

    def alpha_at(self, t: int) -> float:
        return float(self.alpha[self._i(t)])

    def alpha_bar_at(self, t: int) -> float:
        return float(self.alpha_bar[self._i(t)])

    def sigma_at(self, t: int) -> float:
        return float(self.sigma[self._i(t)])


def make_schedule(T: int = 200, beta_start: float = 1e-4, beta_end: float = 0.04) -> NoiseSchedule:
    """Linear beta schedule with running-product ``alpha_bar``."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    if T == 1:
        beta = np.array([beta_start], dtype=np.float64)
    else:
        beta = beta_start + np.arange(T) / (T - 1) * (beta_end - beta_start)
    alpha = 1.0 - beta
    alpha_bar = np.empty(T)
    running = 1.0
    for i in range(T):
        running = alpha[i] * running
        alpha_bar[i] = running
    return NoiseSchedule(T, beta, alpha, alpha_bar, np.sqrt(beta), float(beta_start), float(beta_end))


# ---------------------------------------------------------------- forward process

def to_model_space(img) -> np.ndarray:
    return np.asarray(img, dtype=np.float64) * 2.0 - 1.0


def from_model_space(x) -> np.ndarray:
    return (np.asarray(x) + 1.0) / 2.0


def _select(a, b, m) -> np.ndarray:
    """Batch-aware masked select (``a`` where m=1, ``b`` elsewhere)."""
    m = np.asarray(m)
    if m.ndim == 2:
        return imaging.compose(a, b, m)
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape or a.shape[:3] != m.shape:
        raise ValueError(f"dimension mismatch: {a.shape}, {b.shape}, mask {m.shape}")
    return np.where(m.astype(bool)[..., None], a, b)


def q_sample(x0, t: int, eps, sched: NoiseSchedule) -> np.ndarray:
    """``sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps`` (model space, unclamped)."""
    ab = sched.alpha_bar_at(t)
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"noise shape {eps.shape} != image shape {x0.shape}")
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def masked_q_sample(x0, m, t: int, eps, sched: NoiseSchedule) -> np.ndarray:
    """Noise only the pixels inside ``m``; everything else is ``x0`` verbatim."""
    return _select(q_sample(x0, t, eps, sched), x0, m)


# ---------------------------------------------------------------- denoiser

def timestep_features(t, dim: int = 16) -> np.ndarray:
    """Sinusoidal features of integer timesteps, shape ``(N, dim)``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(1000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class DenoiserNet:
    """Small U-shaped noise predictor conditioned on timestep and class token.

    Input is the noisy image plus the mask as a fourth channel. Two 2x
    average-pool stages (16 then 32 channels) lead to a 32-channel
    bottleneck; two nearest-upsample stages with additive skips come back to
    full resolution. The conditioning vector (projected timestep features
    plus a learned class embedding) enters every encoder level as a
    per-channel bias. Spatial size must be divisible by 4.
    """

    def __init__(self, seed: int = 0, base: int = 16, mid: int = 32, emb: int = 16, n_classes: int = len(CLASSES)):
        self.base, self.mid, self.emb, self.n_classes = base, mid, emb, n_classes
        rng = make_rng(seed, "denoiser-init")
        b, m, e = base, mid, emb
        p = {}
        p["t_w"] = tc.he_linear(rng, e, e, "t_w")
        p["t_b"] = tc.zeros((e,), "t_b")
        p["class_emb"] = tc.Tensor(rng.normal(0, 1.0, (n_classes, e)), True, "class_emb")
        p["c1_w"] = tc.he_linear(rng, e, b, "c1_w")
        p["c2_w"] = tc.he_linear(rng, e, m, "c2_w")
        p["c3_w"] = tc.he_linear(rng, e, m, "c3_w")
        p["in_w"], p["in_b"] = tc.he_conv(rng, b, 4, 3, "in_w"), tc.zeros((b,), "in_b")
        p["d1_w"], p["d1_b"] = tc.he_conv(rng, m, b, 3, "d1_w"), tc.zeros((m,), "d1_b")
        p["m1_w"], p["m1_b"] = tc.he_conv(rng, m, m, 3, "m1_w"), tc.zeros((m,), "m1_b")
        p["m2_w"], p["m2_b"] = tc.he_conv(rng, m, m, 3, "m2_w"), tc.zeros((m,), "m2_b")
        p["u2_w"], p["u2_b"] = tc.he_conv(rng, b, m, 3, "u2_w"), tc.zeros((b,), "u2_b")
        p["u1_w"], p["u1_b"] = tc.he_conv(rng, b, b, 3, "u1_w"), tc.zeros((b,), "u1_b")
        p["out_w"], p["out_b"] = tc.he_conv(rng, 3, b, 3, "out_w"), tc.zeros((3,), "out_b")
        p["out_w"].data *= 0.1
        self.params: dict[str, tc.Tensor] = p

    @property
    def n_params(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, v in self.params.items():
            if k not in state:
                raise KeyError(f"missing parameter {k}")
            if state[k].shape != v.shape:
                raise ValueError(f"parameter {k}: shape {state[k].shape} != {v.shape}")
            v.data = np.array(state[k], dtype=np.float64)

    def __call__(self, x_t, t, token, m) -> tc.Tensor:
        """Predicted noise, channel-first ``(N, 3, H, W)``.

        ``x_t``: ``(N, H, W, 3)`` model-space images; ``t``: int or ``(N,)``;
        ``token``: class index or ``(N,)``; ``m``: ``(N, H, W)`` mask.
        """
        x_t = np.asarray(x_t, dtype=np.float64)
        m = np.asarray(m, dtype=np.float64)
        if x_t.ndim == 3:
            x_t, m = x_t[None], m[None]
        n, h, w, _ = x_t.shape
        if h % 4 or w % 4:
            raise ValueError(f"denoiser input {h}x{w} must be divisible by 4")
        t = np.broadcast_to(np.asarray(t), (n,))
        token = np.broadcast_to(np.asarray(token, dtype=np.int64), (n,))
        p = self.params
        x = tc.Tensor(np.concatenate([imaging.to_chw(x_t), m[:, None]], axis=1))

        temb = tc.silu(tc.add_bias(tc.matmul(tc.Tensor(timestep_features(t, self.emb)), p["t_w"]), p["t_b"]))
        cond = tc.add(temb, tc.embedding(p["class_emb"], token))

        def block(inp, wk, bk, ck=None):
            y = tc.add_bias(tc.conv2d(inp, p[wk], padding=1), p[bk])
            if ck is not None:
                y = tc.add_channel_bias(y, tc.matmul(cond, p[ck]))
            return tc.silu(y)

        h1 = block(x, "in_w", "in_b", "c1_w")
        h2 = block(tc.avg_pool2(h1), "d1_w", "d1_b", "c2_w")
        h3 = block(tc.avg_pool2(h2), "m1_w", "m1_b", "c3_w")
        h3 = block(h3, "m2_w", "m2_b")
        h4 = block(tc.add(tc.upsample2(h3), h2), "u2_w", "u2_b")
        h5 = block(tc.add(tc.upsample2(h4), h1), "u1_w", "u1_b")
        return tc.add_bias(tc.conv2d(h5, p["out_w"], padding=1), p["out_b"])


DenoiserFn = Callable[..., tc.Tensor]


def diffusion_loss(net: DenoiserFn, x0, m, token, t, eps, sched: NoiseSchedule) -> tc.Tensor:
    """Masked noise-prediction MSE, averaged over masked pixels and channels.

    All array arguments are batched (``(N, H, W, 3)`` images, ``(N, H, W)``
    masks, ``(N,)`` timesteps and tokens); the result is the batch mean.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    m = np.asarray(m)
    if x0.ndim == 3:
        x0, eps, m = x0[None], eps[None], m[None]
    n = x0.shape[0]
    t = np.broadcast_to(np.asarray(t), (n,))
    if np.any(m.reshape(n, -1).sum(axis=1) == 0):
        raise ValueError("diffusion_loss: empty mask")
    x_t = np.empty_like(x0)
    for i in range(n):
        x_t[i] = masked_q_sample(x0[i], m[i], int(t[i]), eps[i], sched)
    pred = net(x_t, t, token, m)
    return tc.masked_mse(pred, tc.Tensor(imaging.to_chw(eps)), m)


def p_sample_step(net: DenoiserFn, x_t, t: int, token, m, sched: NoiseSchedule, z=None) -> np.ndarray:
    """One reverse step: ``mu + sigma_t * z`` with the noise-prediction mean.

    ``z`` is ignored (treated as zero) at ``t == 1``.
    """
    beta, alpha, ab = sched.beta_at(t), sched.alpha_at(t), sched.alpha_bar_at(t)
    x_t = np.asarray(x_t, dtype=np.float64)
    single = x_t.ndim == 3
    with tc.no_grad():
        eps_hat = net(x_t[None] if single else x_t, t, token, np.asarray(m)[None] if single else m).data
    eps_hat = imaging.to_hwc(eps_hat)
    if single:
        eps_hat = eps_hat[0]
    mu = (x_t - (beta / math.sqrt(1.0 - ab)) * eps_hat) / math.sqrt(alpha)
    if t == 1 or z is None:
        return mu
    return mu + sched.sigma_at(t) * np.asarray(z)


# ---------------------------------------------------------------- windows

def crop_window(m, crop: int = 32) -> tuple[int, int, int, int]:
    """Square window ``(y0, x0, y1, x1)`` containing the mask bbox, centred on it."""
    h, w = m.shape
    box = imaging.bbox(m)
    if box is None:
        raise ValueError("empty mask has no window")
    y0, x0, y1, x1 = box
    side = max(crop, int(math.ceil(max(y1 - y0, x1 - x0) / 4.0)) * 4)
    side_h = min(side, h - h % 4)
    side_w = min(side, w - w % 4)
    cy, cx = (y0 + y1) // 2, (x0 + x1) // 2
    wy = int(np.clip(cy - side_h // 2, 0, h - side_h))
    wx = int(np.clip(cx - side_w // 2, 0, w - side_w))
    return wy, wx, wy + side_h, wx + side_w


# ---------------------------------------------------------------- training

@dataclass
class DiffusionTrainConfig:
    batch_size: int = 8
    steps: int = 2000
    lr: float = 2e-3
    ema_decay: float | None = None
    seed: int = 0
    crop: int = 32
    jitter: int = 4
    log_every: int = 50

    def __post_init__(self):
        if self.batch_size < 1 or self.steps < 0 or self.lr <= 0 or self.crop < 4 or self.log_every < 1:
            raise ValueError("invalid diffusion training config")
        if self.ema_decay is not None and not 0 < self.ema_decay < 1:
            raise ValueError("ema_decay must lie in (0, 1)")


def _fits(m, crop: int) -> bool:
    y0, x0, y1, x1 = crop_window(m, crop)
    return y1 - y0 == min(crop, m.shape[0]) and x1 - x0 == min(crop, m.shape[1])


def _training_batch(samples: Sequence[SceneSample], sched, cfg, rng):
    # only instances that fit one crop, so every batch item has the same window size
    pool = [(si, ii) for si, s in enumerate(samples) for ii, inst in enumerate(s.instances)
            if _fits(inst.mask, cfg.crop)]
    if not pool:
        raise ValueError(f"dataset has no instance masks fitting a {cfg.crop}px crop")
    x0s, ms, toks, ts, epss = [], [], [], [], []
    for _ in range(cfg.batch_size):
        si, ii = pool[int(rng.integers(len(pool)))]
        s = samples[si]
        inst = s.instances[ii]
        y0, x0, y1, x1 = crop_window(inst.mask, cfg.crop)
        h, w = inst.mask.shape
        if cfg.jitter:
            dy, dx = rng.integers(-cfg.jitter, cfg.jitter + 1, size=2)
            y0n = int(np.clip(y0 + dy, 0, h - (y1 - y0)))
            x0n = int(np.clip(x0 + dx, 0, w - (x1 - x0)))
            if imaging.area(inst.mask[y0n:y0n + y1 - y0, x0n:x0n + x1 - x0]) == imaging.area(inst.mask):
                y1, x1, y0, x0 = y0n + y1 - y0, x0n + x1 - x0, y0n, x0n
        x0s.append(to_model_space(s.image[y0:y1, x0:x1]))
        ms.append(inst.mask[y0:y1, x0:x1])
        toks.append(CLASSES.index(inst.cls))
        ts.append(int(rng.integers(1, sched.T + 1)))
        epss.append(rng.standard_normal(x0s[-1].shape))
    return np.stack(x0s), np.stack(ms), np.array(toks), np.array(ts), np.stack(epss)


def train_diffusion(net: DenoiserNet, samples: Sequence[SceneSample], sched: NoiseSchedule,
                    cfg: DiffusionTrainConfig, checkpoint: str | Path | None = None,
                    progress: Callable[[str], None] | None = None):
    """Adam on the masked loss; returns ``(net, curve)``.

    ``curve`` holds ``(step, mean loss over the preceding log_every steps)``.
    Every batch element draws a scene, one of its instances, a uniform
    timestep and fresh Gaussian noise. Windows have a fixed ``cfg.crop``
    size so the batch can be stacked; instances larger than that are not
    used for training.
    """
    samples = [s for s in samples if s.instances]
    rng = make_rng(cfg.seed, "diffusion-train")
    state = tc.OptimizerState(cfg.lr, adaptive=True)
    ema = {k: v.data.copy() for k, v in net.params.items()} if cfg.ema_decay else None
    curve: list[tuple[int, float]] = []
    window: list[float] = []
    names = list(net.params)
    for step in range(1, cfg.steps + 1):
        x0, m, tok, t, eps = _training_batch(samples, sched, cfg, rng)
        try:
            loss = diffusion_loss(net, x0, m, tok, t, eps, sched)
            grads = tc.backward(loss, [net.params[k] for k in names])
        except FloatingPointError as exc:
            raise DivergenceError(f"diffusion training diverged at step {step}: {exc}") from exc
        value = loss.item()
        if not math.isfinite(value):
            raise DivergenceError(f"diffusion training diverged at step {step}: loss {value}")
        tc.sgd_step(net.params, {k: grads[net.params[k]] for k in names}, state)
        if ema is not None:
            d = cfg.ema_decay
            for k, v in net.params.items():
                ema[k] = d * ema[k] + (1.0 - d) * v.data
        window.append(value)
        if step % cfg.log_every == 0:
            curve.append((step, float(np.mean(window))))
            window = []
            if progress:
                progress(f"diffusion step {step}/{cfg.steps} loss {curve[-1][1]:.4f}")
    if ema is not None and cfg.steps > 0:
        net.load_state_dict(ema)
    if checkpoint is not None:
        save_denoiser(checkpoint, net, sched)
    return net, curve


# ---------------------------------------------------------------- reverse process

def _reverse_chain(net, xc, mc, tokens, sched, rngs, start_t):
    """Batched masked reverse loop in model space; background re-imposed each step."""
    x = np.empty_like(xc)
    for i, r in enumerate(rngs):
        x[i] = masked_q_sample(xc[i], mc[i], start_t, r.standard_normal(xc[i].shape), sched)
    for t in range(start_t, 0, -1):
        z = np.stack([r.standard_normal(xc[i].shape) for i, r in enumerate(rngs)]) if t > 1 else None
        x = p_sample_step(net, x, t, tokens, mc, sched, z)
        x = _select(x, xc, mc)
    return x


def inpaint_batch(net: DenoiserFn, images: Sequence[np.ndarray], masks: Sequence[np.ndarray],
                  tokens: Sequence[int], sched: NoiseSchedule, rngs: Sequence[np.random.Generator],
                  start_t: int | None = None, crop: int = 32) -> list[np.ndarray]:
    """Redraw each masked region; outputs equal the inputs outside their masks.

    Items are grouped by window size and run through the reverse chain
    together. Each item draws noise only from its own generator.
    """
    start_t = sched.T if start_t is None else int(start_t)
    if not 1 <= start_t <= sched.T:
        raise ValueError(f"start_t {start_t} outside [1, {sched.T}]")
    outs: list[np.ndarray | None] = [None] * len(images)
    groups: dict[tuple[int, int], list[int]] = {}
    windows = {}
    for i, (img, m) in enumerate(zip(images, masks)):
        m = imaging.as_mask(m)
        if not m.any():
            warnings.warn("inpaint: empty mask, returning the input unchanged", stacklevel=2)
            outs[i] = np.array(img, dtype=np.float64, copy=True)
            continue
        win = crop_window(m, crop)
        windows[i] = win
        groups.setdefault((win[2] - win[0], win[3] - win[1]), []).append(i)
    for idx in groups.values():
        xc = np.stack([to_model_space(images[i][windows[i][0]:windows[i][2], windows[i][1]:windows[i][3]]) for i in idx])
        mc = np.stack([imaging.as_mask(masks[i])[windows[i][0]:windows[i][2], windows[i][1]:windows[i][3]] for i in idx])
        tok = np.array([tokens[i] for i in idx], dtype=np.int64)
        x = _reverse_chain(net, xc, mc, tok, sched, [rngs[i] for i in idx], start_t)
        redrawn = np.clip(from_model_space(x), 0.0, 1.0)
        for j, i in enumerate(idx):
            y0, x0, y1, x1 = windows[i]
            out = np.array(images[i], dtype=np.float64, copy=True)
            out[y0:y1, x0:x1] = imaging.compose(redrawn[j], out[y0:y1, x0:x1], mc[j])
            outs[i] = out
    return outs


def inpaint(net: DenoiserFn, x0, m, token: int, sched: NoiseSchedule, rng: np.random.Generator,
            start_t: int | None = None, crop: int = 32) -> np.ndarray:
    """Erase ``m`` in the [0,1] image ``x0`` and redraw it conditioned on ``token``."""
    x0 = imaging.check_image(x0)
    m = imaging.as_mask(m)
    if m.shape != x0.shape[:2]:
        raise ValueError(f"dimension mismatch: image {x0.shape}, mask {m.shape}")
    if not m.any():
        warnings.warn("inpaint: empty mask, returning the input unchanged", stacklevel=2)
        return x0.copy()
    return inpaint_batch(net, [x0], [m], [token], sched, [rng], start_t, crop)[0]


def sample_unmasked(net: DenoiserFn, token: int, sched: NoiseSchedule, rng: np.random.Generator,
                    shape: tuple[int, int] = (64, 64)) -> np.ndarray:
    """Full reverse chain from pure noise with an all-ones mask."""
    h, w = shape
    x = rng.standard_normal((1, h, w, 3))
    m = np.ones((1, h, w), dtype=np.uint8)
    tok = np.array([token])
    for t in range(sched.T, 0, -1):
        z = rng.standard_normal(x.shape) if t > 1 else None
        x = p_sample_step(net, x, t, tok, m, sched, z)
    return np.clip(from_model_space(x[0]), 0.0, 1.0)


# ---------------------------------------------------------------- checkpoints

def save_denoiser(path, net: DenoiserNet, sched: NoiseSchedule) -> None:
    """RFCK container; schedule and widths ride along as ``__meta__`` entries."""
    params = dict(net.state_dict())
    params["__meta__.schedule"] = np.array([sched.T, sched.beta_start, sched.beta_end])
    params["__meta__.arch"] = np.array([net.base, net.mid, net.emb, net.n_classes], dtype=np.float64)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    tc.save_checkpoint(path, params)


def load_denoiser(path) -> tuple[DenoiserNet, NoiseSchedule]:
    state = tc.load_checkpoint(path)
    T, b0, b1 = state.pop("__meta__.schedule")
    base, mid, emb, ncls = (int(v) for v in state.pop("__meta__.arch"))
    net = DenoiserNet(base=base, mid=mid, emb=emb, n_classes=ncls)
    net.load_state_dict(state)
    return net, make_schedule(int(T), float(b0), float(b1))
