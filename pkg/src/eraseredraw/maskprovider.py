"""Background instance masks for the erase step.

Two providers: ``oracle_masks`` passes ground-truth annotations through, and
``heuristic_masks`` finds objects by palette quantisation plus connected
components. Both go through :func:`filter_foreground`, so no proposal ever
touches the free-space label.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import imaging
from .scenes import ACCENTS, BACKGROUND_COLORS, CLASSES, SceneSample, SceneSpec

FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


@dataclass
class InstanceProposal:
    mask: np.ndarray
    cls: str
    source: str  # "oracle" | "heuristic"


def filter_foreground(proposals: list[InstanceProposal], free_space) -> list[InstanceProposal]:
    """Remove free-space pixels from every proposal and drop the emptied ones."""
    out = []
    for p in proposals:
        m = imaging.difference(p.mask, free_space)
        if m.any():
            out.append(InstanceProposal(m, p.cls, p.source))
    return out


def oracle_masks(sample: SceneSample) -> list[InstanceProposal]:
    props = [InstanceProposal(imaging.as_mask(i.mask), i.cls, "oracle") for i in sample.instances]
    return filter_foreground(props, sample.free_space)


def label_components(binary) -> tuple[np.ndarray, int]:
    """4-connected component labels (0 = background) and component count."""
    labels, n = ndimage.label(np.asarray(binary, dtype=bool), structure=FOUR_CONNECTED)
    return labels, int(n)


def reference_colors(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Quantisation table: (colors[K, 3], class id per color, -1 for background)."""
    colors, owner = [], []
    for ci, cls in enumerate(CLASSES):
        for c in spec.palettes[cls]:
            colors.append(c)
            owner.append(ci)
        if cls in ACCENTS:
            colors.append(ACCENTS[cls])
            owner.append(ci)
    sky_mid = tuple((np.array(BACKGROUND_COLORS["sky_top"]) + BACKGROUND_COLORS["sky_bottom"]) / 2)
    for c in (*BACKGROUND_COLORS.values(), sky_mid):
        colors.append(c)
        owner.append(-1)
    return np.array(colors, dtype=np.float64), np.array(owner)


def heuristic_masks(image, free_space, spec: SceneSpec, min_area: int = 8) -> list[InstanceProposal]:
    """Proposals from nearest-palette quantisation and 4-connected components."""
    image = imaging.check_image(image)
    free = imaging.as_mask(free_space).astype(bool)
    colors, owner = reference_colors(spec)
    d = ((image[:, :, None, :] - colors[None, None, :, :]) ** 2).sum(axis=-1)
    cls_map = owner[np.argmin(d, axis=-1)]
    cls_map[free] = -1

    proposals = []
    for ci, cls in enumerate(CLASSES):
        labels, n = label_components(cls_map == ci)
        if n == 0:
            continue
        sizes = np.bincount(labels.ravel(), minlength=n + 1)
        for lab in range(1, n + 1):
            if sizes[lab] < min_area:
                continue
            proposals.append(InstanceProposal((labels == lab).astype(np.uint8), cls, "heuristic"))
    return filter_foreground(proposals, free)


def propose(sample: SceneSample, kind: str, spec: SceneSpec | None = None, min_area: int = 8) -> list[InstanceProposal]:
    if kind == "oracle":
        return oracle_masks(sample)
    if kind == "heuristic":
        if spec is None:
            raise ValueError("heuristic provider needs the scene spec palette table")
        return heuristic_masks(sample.image, sample.free_space, spec, min_area=min_area)
    raise ValueError(f"unknown mask provider {kind!r}")
