"""Classical augmentation baselines: basic, random erasing, cutout, cutmix, gridmask.

All functions take images as ``(H, W, 3)`` float arrays and free-space labels
as ``(H, W)`` 0/1 masks, and never modify their inputs. Randomness comes only
from the ``numpy.random.Generator`` passed in.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import imaging

POLICY_REGISTRY = ("standard", "basic", "random_erasing", "cutout", "cutmix", "gridmask", "erase_redraw")

# defaults per policy; anything here can be overridden from the run config
DEFAULT_PARAMS = {
    "standard": {},
    "basic": {
        "p_flip": 0.5, "p_rotate": 0.5, "p_photometric": 0.8, "p_elastic": 0.5,
        "max_angle": 15.0, "brightness": [0.8, 1.2], "contrast": [0.8, 1.2],
        "elastic_max": 3.0, "elastic_sigma": 4.0,
    },
    "random_erasing": {"prob": 1.0, "area": [0.02, 0.2], "aspect": [0.3, 3.3]},
    "cutout": {"size": None},
    "cutmix": {"area": [0.1, 0.4]},
    "gridmask": {"d_range": [8, 32], "ratio": 0.6},
    "erase_redraw": {"token_mode": "same", "instances": 1},
}


@dataclass
class AugPolicy:
    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in POLICY_REGISTRY:
            raise ValueError(f"unknown policy {self.kind!r}; choose from {POLICY_REGISTRY}")
        unknown = set(self.params) - set(DEFAULT_PARAMS[self.kind])
        if unknown:
            raise ValueError(f"unknown parameters for {self.kind}: {sorted(unknown)}")
        self.params = {**DEFAULT_PARAMS[self.kind], **self.params}
        validate_params(self.kind, self.params)


def _in_range(name, lo_hi, lo, hi):
    a, b = lo_hi
    if not (lo <= a <= b <= hi):
        raise ValueError(f"{name} range {lo_hi} must satisfy {lo} <= a <= b <= {hi}")


def validate_params(kind: str, p: dict) -> None:
    if kind == "basic":
        for k in ("p_flip", "p_rotate", "p_photometric", "p_elastic"):
            if not 0 <= p[k] <= 1:
                raise ValueError(f"{k} must be a probability")
        if not 0 <= p["max_angle"] <= 15:
            raise ValueError("max_angle must lie in [0, 15] degrees")
        _in_range("brightness", p["brightness"], 0.8, 1.2)
        _in_range("contrast", p["contrast"], 0.8, 1.2)
        if not 0 <= p["elastic_max"] <= 3:
            raise ValueError("elastic_max must lie in [0, 3] px")
    elif kind == "random_erasing":
        if not 0 <= p["prob"] <= 1:
            raise ValueError("prob must be a probability")
        _in_range("area", p["area"], 0.02, 0.2)
        _in_range("aspect", p["aspect"], 0.3, 3.3)
    elif kind == "cutout":
        if p["size"] is not None and p["size"] <= 0:
            raise ValueError("cutout size must be positive")
    elif kind == "cutmix":
        _in_range("area", p["area"], 0.1, 0.4)
    elif kind == "gridmask":
        _in_range("d_range", p["d_range"], 8, 32)
        if not 0 <= p["ratio"] <= 1:
            raise ValueError("ratio must lie in [0, 1]")
    elif kind == "erase_redraw":
        if p["token_mode"] not in ("same", "restyle"):
            raise ValueError("token_mode must be 'same' or 'restyle'")
        if int(p["instances"]) < 1:
            raise ValueError("instances must be >= 1")


# ---------------------------------------------------------------- basic

def warp(img, label, flip: bool = False, angle_deg: float = 0.0, displacement=None):
    """Geometric transform shared by image (bilinear) and label (nearest).

    Output pixel ``(y, x)`` samples the source at the inverse-mapped
    location: elastic offset, then rotation about the image centre, then
    horizontal flip.
    """
    img = imaging.check_image(img)
    label = imaging.as_mask(label)
    h, w = label.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    if displacement is not None:
        ys = ys + displacement[0]
        xs = xs + displacement[1]
    th = np.deg2rad(angle_deg)
    dy, dx = ys - cy, xs - cx
    sy = cy + np.cos(th) * dy - np.sin(th) * dx
    sx = cx + np.sin(th) * dy + np.cos(th) * dx
    if flip:
        sx = (w - 1) - sx
    coords = np.stack([sy, sx])
    out = np.stack([ndimage.map_coordinates(img[:, :, c], coords, order=1, mode="nearest")
                    for c in range(img.shape[2])], axis=-1)
    lab = ndimage.map_coordinates(label.astype(np.float64), coords, order=0, mode="nearest")
    return np.clip(out, 0.0, 1.0), (lab > 0.5).astype(np.uint8)


def elastic_field(shape, rng, max_disp: float = 3.0, sigma: float = 4.0) -> np.ndarray:
    """Gaussian-smoothed noise displacement ``(2, H, W)`` scaled to ``max_disp`` px."""
    field_ = np.stack([ndimage.gaussian_filter(rng.standard_normal(shape), sigma) for _ in range(2)])
    peak = np.abs(field_).max()
    return field_ * (max_disp / peak) if peak > 0 else field_


def photometric(img, brightness: float, contrast: float) -> np.ndarray:
    mean = img.mean()
    return np.clip(((img - mean) * contrast + mean) * brightness, 0.0, 1.0)


def basic(img, label, rng: np.random.Generator, **params):
    p = {**DEFAULT_PARAMS["basic"], **params}
    validate_params("basic", p)
    img = imaging.check_image(img)
    label = imaging.as_mask(label)
    flip = rng.random() < p["p_flip"]
    angle = rng.uniform(-p["max_angle"], p["max_angle"]) if rng.random() < p["p_rotate"] else 0.0
    disp = None
    if rng.random() < p["p_elastic"]:
        disp = elastic_field(label.shape, rng, p["elastic_max"], p["elastic_sigma"])
    out_img, out_lbl = img.copy(), label.copy()
    if flip and angle == 0.0 and disp is None:
        out_img, out_lbl = img[:, ::-1].copy(), label[:, ::-1].copy()
    elif flip or angle != 0.0 or disp is not None:
        out_img, out_lbl = warp(img, label, flip, angle, disp)
    if rng.random() < p["p_photometric"]:
        out_img = photometric(out_img, rng.uniform(*p["brightness"]), rng.uniform(*p["contrast"]))
    return out_img, out_lbl


def hflip(img, label):
    return np.asarray(img)[:, ::-1].copy(), np.asarray(label)[:, ::-1].copy()


# ---------------------------------------------------------------- erasing family

def sample_erasing_box(shape, rng, area=(0.02, 0.2), aspect=(0.3, 3.3), tries: int = 10):
    h, w = shape[:2]
    for _ in range(tries):
        target = rng.uniform(*area) * h * w
        ratio = np.exp(rng.uniform(np.log(aspect[0]), np.log(aspect[1])))
        bh = int(round(np.sqrt(target * ratio)))
        bw = int(round(np.sqrt(target / ratio)))
        if 0 < bh < h and 0 < bw < w:
            y0 = int(rng.integers(0, h - bh + 1))
            x0 = int(rng.integers(0, w - bw + 1))
            return y0, x0, y0 + bh, x0 + bw
    return None


def random_erasing(img, rng: np.random.Generator, prob: float = 1.0, area=(0.02, 0.2),
                   aspect=(0.3, 3.3), return_box: bool = False):
    """Replace one random rectangle with i.i.d. Uniform[0,1] values per channel."""
    img = imaging.check_image(img)
    out = img.copy()
    box = None
    if rng.random() < prob:
        box = sample_erasing_box(img.shape, rng, area, aspect)
        if box is not None:
            y0, x0, y1, x1 = box
            out[y0:y1, x0:x1] = rng.random((y1 - y0, x1 - x0, img.shape[2]))
    return (out, box) if return_box else out


def cutout(img, rng: np.random.Generator, size: int | None = None, center=None):
    """Zero a ``size`` square centred on a random pixel; it may hang off the edge."""
    img = imaging.check_image(img)
    h, w = img.shape[:2]
    size = h // 4 if size is None else int(size)
    if size <= 0:
        raise ValueError("cutout size must be positive")
    if center is None:
        center = (int(rng.integers(0, h)), int(rng.integers(0, w)))
    cy, cx = center
    y0, x0 = cy - size // 2, cx - size // 2
    out = img.copy()
    out[max(y0, 0):max(min(y0 + size, h), 0), max(x0, 0):max(min(x0 + size, w), 0)] = 0.0
    return out


def sample_cutmix_box(shape, rng, area=(0.1, 0.4)):
    h, w = shape[:2]
    frac = rng.uniform(*area)
    ratio = np.exp(rng.uniform(np.log(0.5), np.log(2.0)))
    bh = int(np.clip(round(np.sqrt(frac * h * w * ratio)), 1, h))
    bw = int(np.clip(round(np.sqrt(frac * h * w / ratio)), 1, w))
    y0 = int(rng.integers(0, h - bh + 1))
    x0 = int(rng.integers(0, w - bw + 1))
    return y0, x0, y0 + bh, x0 + bw


def swap_box(a, b, box):
    """Exchange one rectangle between two (image, label) pairs."""
    (ia, la), (ib, lb) = a, b
    ia, ib = imaging.check_image(ia), imaging.check_image(ib)
    la, lb = imaging.as_mask(la), imaging.as_mask(lb)
    if ia.shape != ib.shape or la.shape != lb.shape or ia.shape[:2] != la.shape:
        raise ValueError("cutmix: dimension mismatch")
    y0, x0, y1, x1 = box
    oa, ob, ma, mb = ia.copy(), ib.copy(), la.copy(), lb.copy()
    oa[y0:y1, x0:x1], ob[y0:y1, x0:x1] = ib[y0:y1, x0:x1], ia[y0:y1, x0:x1]
    ma[y0:y1, x0:x1], mb[y0:y1, x0:x1] = lb[y0:y1, x0:x1], la[y0:y1, x0:x1]
    return (oa, ma), (ob, mb)


def cutmix(a, b, rng: np.random.Generator, area=(0.1, 0.4), return_box: bool = False):
    """Swap a random rectangle between two samples, images and labels alike."""
    box = sample_cutmix_box(np.shape(a[0]), rng, area)
    out = swap_box(a, b, box)
    return (out, box) if return_box else out


def grid_zero_mask(shape, d: int, ratio: float, phase=(0, 0)) -> np.ndarray:
    """1 where GridMask zeroes: a ``round((1-ratio)*d)`` square per period ``d``."""
    h, w = shape[:2]
    side = int(round((1.0 - ratio) * d))
    ys = (np.arange(h) - phase[0]) % d < side
    xs = (np.arange(w) - phase[1]) % d < side
    return (ys[:, None] & xs[None, :]).astype(np.uint8)


def gridmask(img, rng: np.random.Generator, d_range=(8, 32), ratio: float = 0.6, d: int | None = None, phase=None):
    img = imaging.check_image(img)
    if d is None:
        d = int(rng.integers(d_range[0], d_range[1] + 1))
    if phase is None:
        phase = (int(rng.integers(0, d)), int(rng.integers(0, d)))
    zero = grid_zero_mask(img.shape, d, ratio, phase)
    return imaging.compose(np.zeros_like(img), img, zero)


def standard_duplicate(dataset: list, k: int = 3) -> list:
    """Each sample repeated ``k`` times in place."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return [s for s in dataset for _ in range(k)]


def apply_classic(kind: str, params: dict, img, label, rng, partner=None):
    """One synthetic (image, label) from a classical policy."""
    if kind == "standard":
        return img.copy(), label.copy()
    if kind == "basic":
        return basic(img, label, rng, **params)
    if kind == "random_erasing":
        return random_erasing(img, rng, params["prob"], params["area"], params["aspect"]), label.copy()
    if kind == "cutout":
        return cutout(img, rng, params["size"]), label.copy()
    if kind == "cutmix":
        if partner is None:
            raise ValueError("cutmix needs a partner sample")
        (oi, ol), _ = cutmix((img, label), partner, rng, params["area"])
        return oi, ol
    if kind == "gridmask":
        return gridmask(img, rng, params["d_range"], params["ratio"]), label.copy()
    raise ValueError(f"{kind!r} is not a classical policy")
