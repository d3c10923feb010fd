"""Erase-then-redraw augmentation and the dataset-level augmentation protocol.

Every policy emits ``k`` synthetic samples per source sample; the training
manifest for a policy is the ``n`` originals followed by those ``n * k``
synthetics, so all policies train on the same number of samples.
"""
from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import classic_aug, diffusion, imaging
from .classic_aug import AugPolicy
from .maskprovider import InstanceProposal, propose
from .rng import derive_seed, make_rng
from .scenes import CLASSES, SceneSample, SceneSpec, load_sample, read_manifest, write_manifest

log = logging.getLogger(__name__)


@dataclass
class AugmentedSample:
    image: np.ndarray
    label: np.ndarray
    provenance: dict = field(default_factory=dict)


@dataclass
class RedrawPlan:
    proposals: list[InstanceProposal]
    tokens: list[int]


def plan_redraw(proposals: Sequence[InstanceProposal], token_mode: str, rng: np.random.Generator,
                instances: int = 1) -> RedrawPlan:
    """Pick which proposals to erase and which class token redraws each."""
    if token_mode not in ("same", "restyle"):
        raise ValueError(f"unknown token mode {token_mode!r}")
    if not proposals:
        return RedrawPlan([], [])
    k = min(instances, len(proposals))
    chosen = [proposals[int(i)] for i in rng.choice(len(proposals), size=k, replace=False)]
    if token_mode == "same":
        tokens = [CLASSES.index(p.cls) for p in chosen]
    else:
        tokens = [int(rng.integers(len(CLASSES))) for _ in chosen]
    return RedrawPlan(chosen, tokens)


def _describe(p: InstanceProposal, token: int) -> dict:
    y0, x0, y1, x1 = imaging.bbox(p.mask)
    return {"class": p.cls, "source": p.source, "bbox": [y0, x0, y1, x1],
            "area": imaging.area(p.mask), "token": CLASSES[token]}


def erase_then_redraw(sample: SceneSample, provider, net, sched, token_mode: str = "same",
                      rng: np.random.Generator | None = None, spec: SceneSpec | None = None,
                      min_area: int = 8, instances: int = 1, start_t: int | None = None,
                      crop: int = 32) -> AugmentedSample:
    """Erase background instance(s) and redraw them with the diffusion model.

    ``provider`` is ``"oracle"``, ``"heuristic"`` or a callable returning
    proposals for a sample. With no proposal the original is returned
    unchanged (and the fallback is logged). The label is always copied from
    the source.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    proposals = provider(sample) if callable(provider) else propose(sample, provider, spec, min_area)
    plan = plan_redraw(proposals, token_mode, rng, instances)
    prov = {"policy": "erase_redraw", "index": sample.index, "erased": []}
    if not plan.proposals:
        log.warning("sample %d: no instance proposals, keeping the original", sample.index)
        prov["fallback"] = "no_proposal"
        return AugmentedSample(sample.image.copy(), sample.free_space.copy(), prov)
    img = sample.image
    for p, tok in zip(plan.proposals, plan.tokens):
        img = diffusion.inpaint(net, img, p.mask, tok, sched, rng, start_t=start_t, crop=crop)
        prov["erased"].append(_describe(p, tok))
    return AugmentedSample(img, sample.free_space.copy(), prov)


# ---------------------------------------------------------------- dataset protocol

@dataclass
class AugmentOptions:
    k: int = 3
    seed: int = 0
    provider: str = "oracle"
    min_area: int = 8
    start_t: int | None = None
    crop: int = 32
    inpaint_batch: int = 128
    threads: int = 1


def sample_seed(seed: int, policy: str, index: int, replica: int) -> int:
    return derive_seed(seed, "augment", policy, index, replica)


def _redraw_all(sources: list[SceneSample], policy: AugPolicy, opts: AugmentOptions, net, sched, spec,
                progress) -> list[AugmentedSample]:
    jobs = []
    for s in sources:
        props = propose(s, opts.provider, spec, opts.min_area)
        for r in range(opts.k):
            seed = sample_seed(opts.seed, policy.kind, s.index, r)
            rng = make_rng(seed)
            plan = plan_redraw(props, policy.params["token_mode"], rng, int(policy.params["instances"]))
            jobs.append({"src": s, "rng": rng, "plan": plan, "img": s.image, "seed": seed})
    rounds = max((len(j["plan"].proposals) for j in jobs), default=0)
    for rnd in range(rounds):
        todo = [j for j in jobs if len(j["plan"].proposals) > rnd]
        for c in range(0, len(todo), opts.inpaint_batch):
            chunk = todo[c:c + opts.inpaint_batch]
            outs = diffusion.inpaint_batch(
                net, [j["img"] for j in chunk], [j["plan"].proposals[rnd].mask for j in chunk],
                [j["plan"].tokens[rnd] for j in chunk], sched, [j["rng"] for j in chunk],
                start_t=opts.start_t, crop=opts.crop)
            for j, o in zip(chunk, outs):
                j["img"] = o
            if progress:
                progress(f"erase_redraw round {rnd + 1}: {min(c + len(chunk), len(todo))}/{len(todo)} redrawn")
    out = []
    for j in jobs:
        s = j["src"]
        prov = {"policy": "erase_redraw", "seed": j["seed"],
                "erased": [_describe(p, t) for p, t in zip(j["plan"].proposals, j["plan"].tokens)]}
        if not j["plan"].proposals:
            log.warning("sample %d: no instance proposals, keeping the original", s.index)
            prov["fallback"] = "no_proposal"
        out.append(AugmentedSample(j["img"], s.free_space.copy(), prov))
    return out


def _classic_one(sources, policy: AugPolicy, opts: AugmentOptions, si: int, r: int) -> AugmentedSample:
    s = sources[si]
    seed = sample_seed(opts.seed, policy.kind, s.index, r)
    rng = make_rng(seed)
    partner = None
    prov = {"policy": policy.kind, "seed": seed}
    if policy.kind == "cutmix":
        pj = int(rng.integers(len(sources) - 1)) if len(sources) > 1 else 0
        if len(sources) > 1 and pj >= si:
            pj += 1
        partner = (sources[pj].image, sources[pj].free_space)
        prov["partner_index"] = sources[pj].index
    img, lbl = classic_aug.apply_classic(policy.kind, policy.params, s.image, s.free_space, rng, partner)
    return AugmentedSample(img, lbl, prov)


def augment_dataset(manifest_path, policy: AugPolicy, out_dir, opts: AugmentOptions | None = None,
                    net=None, sched=None, spec: SceneSpec | None = None,
                    progress: Callable[[str], None] | None = None) -> list[dict]:
    """Write ``k`` synthetics per source plus a training manifest (originals first).

    Output files go to ``out_dir/images`` and ``out_dir/labels``; the
    manifest at ``out_dir/manifest.jsonl`` uses paths relative to
    ``out_dir``. Returns the manifest records.
    """
    opts = opts or AugmentOptions()
    if opts.k < 1:
        raise ValueError("k must be >= 1")
    if policy.kind == "erase_redraw" and (net is None or sched is None):
        raise FileNotFoundError("erase_redraw needs a trained denoiser checkpoint")
    manifest_path = Path(manifest_path)
    src_dir = manifest_path.parent
    records = read_manifest(manifest_path)
    sources = [load_sample(r, src_dir) for r in records]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if policy.kind == "erase_redraw":
        synth = _redraw_all(sources, policy, opts, net, sched, spec, progress)
    else:
        jobs = [(si, r) for si in range(len(sources)) for r in range(opts.k)]
        if opts.threads > 1:
            with ThreadPoolExecutor(opts.threads) as ex:
                synth = list(ex.map(lambda a: _classic_one(sources, policy, opts, *a), jobs))
        else:
            synth = [_classic_one(sources, policy, opts, si, r) for si, r in jobs]

    def rel(p):
        return os.path.relpath(src_dir / p, out_dir).replace(os.sep, "/")

    manifest = []
    for rec in records:
        manifest.append({
            "image": rel(rec["image"]), "label": rel(rec["label"]),
            "instances": [{"mask": rel(i["mask"]), "class": i["class"]} for i in rec["instances"]],
            "seed": rec["seed"], "index": rec["index"],
            "provenance": {"policy": "original", "source_index": rec["index"]},
        })
    for n, aug in enumerate(synth):
        si, r = divmod(n, opts.k)
        rec = records[si]
        stem = f"{rec['index']:05d}_{r}"
        imaging.save_image(out_dir / f"images/{stem}.ppm", np.clip(aug.image, 0.0, 1.0))
        imaging.save_mask(out_dir / f"labels/{stem}.pgm", aug.label)
        keeps_geometry = policy.kind not in ("basic", "cutmix")
        instances = [{"mask": rel(i["mask"]), "class": i["class"]} for i in rec["instances"]] if keeps_geometry else []
        prov = {"source_index": rec["index"], "replica": r, **aug.provenance}
        manifest.append({"image": f"images/{stem}.ppm", "label": f"labels/{stem}.pgm", "instances": instances,
                         "seed": rec["seed"], "index": rec["index"], "provenance": prov})
    write_manifest(out_dir / "manifest.jsonl", manifest)
    return manifest


def load_training_arrays(manifest_path) -> tuple[np.ndarray, np.ndarray]:
    """Stack every (image, label) of a manifest into ``(N,H,W,3)`` / ``(N,H,W)``."""
    manifest_path = Path(manifest_path)
    recs = read_manifest(manifest_path)
    if not recs:
        raise ValueError(f"{manifest_path}: empty manifest")
    imgs = np.stack([imaging.load_image(manifest_path.parent / r["image"]) for r in recs])
    lbls = np.stack([imaging.load_mask(manifest_path.parent / r["label"]) for r in recs])
    return imgs, lbls
