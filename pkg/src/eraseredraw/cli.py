"""Command-line orchestration of the full experiment.

    python -m eraseredraw <stage> --config CONFIG --out DIR [--seed N] [--threads N]

Stages: gen-scenes, train-diffusion, augment, train-seg, evaluate, run-all.
Exit status: 0 on success, 1 on a config/validation error, 2 on a runtime
failure (including missing upstream artifacts). Progress goes to stderr;
results only to files under ``--out``.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import diffusion, pipeline, scenes, segharness
from .classic_aug import POLICY_REGISTRY
from .config import ConfigError, RunConfig, load_config
from .scenes import SceneSpec

log = logging.getLogger("eraseredraw")

STAGES = ("gen-scenes", "train-diffusion", "augment", "train-seg", "evaluate")


class MissingArtifact(RuntimeError):
    pass


@dataclasses.dataclass
class Layout:
    root: Path

    @property
    def train_manifest(self) -> Path:
        return self.root / "scenes" / "train" / "manifest.jsonl"

    @property
    def test_manifest(self) -> Path:
        return self.root / "scenes" / "test" / "manifest.jsonl"

    @property
    def denoiser(self) -> Path:
        return self.root / "diffusion" / "denoiser.rfck"

    @property
    def diffusion_curve(self) -> Path:
        return self.root / "diffusion" / "loss.csv"

    def augment_dir(self, policy: str) -> Path:
        return self.root / "augment" / policy

    def segnet(self, policy: str) -> Path:
        return self.root / "seg" / f"{policy}.rfck"

    def seg_curve(self, policy: str) -> Path:
        return self.root / "seg" / f"{policy}_loss.csv"

    @property
    def table(self) -> Path:
        return self.root / "results" / "table.csv"


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"missing upstream artifact {path} (run '{stage}' first)")
    return path


def _progress(msg: str) -> None:
    log.info(msg)


def scene_spec(cfg: RunConfig) -> SceneSpec:
    s = cfg.scenes
    return SceneSpec(height=s.height, width=s.width, min_objects=s.min_objects,
                     max_objects=s.max_objects, seed=cfg.seed)


def _policies(cfg: RunConfig) -> list[str]:
    names = [p["kind"] for p in cfg.policies]
    return sorted(names, key=POLICY_REGISTRY.index)


# ---------------------------------------------------------------- stages

def stage_gen_scenes(cfg: RunConfig, lay: Layout, threads: int = 1) -> None:
    spec = scene_spec(cfg)
    n_train, n_test = cfg.scenes.n_train, cfg.scenes.n_test
    _progress(f"generating {n_train} train + {n_test} test scenes")
    scenes.generate_dataset(spec, n_train, lay.train_manifest.parent, 0, threads)
    scenes.generate_dataset(spec, n_test, lay.test_manifest.parent, n_train, threads)


def stage_train_diffusion(cfg: RunConfig, lay: Layout, threads: int = 1) -> None:
    recs = scenes.read_manifest(_require(lay.train_manifest, "gen-scenes"))
    samples = [scenes.load_sample(r, lay.train_manifest.parent) for r in recs]
    d = cfg.diffusion
    sched = diffusion.make_schedule(d.T, d.beta_start, d.beta_end)
    tcfg = diffusion.DiffusionTrainConfig(batch_size=d.batch_size, steps=d.steps, lr=d.lr,
                                          ema_decay=d.ema_decay, seed=cfg.seed, crop=d.crop)
    net = diffusion.DenoiserNet(seed=cfg.seed)
    _progress(f"training denoiser ({net.n_params} parameters, {d.steps} steps)")
    net, curve = diffusion.train_diffusion(net, samples, sched, tcfg, checkpoint=lay.denoiser, progress=_progress)
    segharness.write_curve_csv(lay.diffusion_curve, curve)


def stage_augment(cfg: RunConfig, lay: Layout, threads: int = 1) -> None:
    _require(lay.train_manifest, "gen-scenes")
    spec = scene_spec(cfg)
    d = cfg.diffusion
    opts = pipeline.AugmentOptions(k=cfg.k, seed=cfg.seed, provider=cfg.mask_provider.kind,
                                   min_area=cfg.mask_provider.min_area, start_t=d.start_t, crop=d.crop,
                                   inpaint_batch=d.inpaint_batch, threads=threads)
    net = sched = None
    for policy in sorted(cfg.aug_policies(), key=lambda p: POLICY_REGISTRY.index(p.kind)):
        if policy.kind == "erase_redraw" and net is None:
            net, sched = diffusion.load_denoiser(_require(lay.denoiser, "train-diffusion"))
        _progress(f"augmenting with policy {policy.kind} (k={cfg.k})")
        pipeline.augment_dataset(lay.train_manifest, policy, lay.augment_dir(policy.kind), opts,
                                 net=net, sched=sched, spec=spec, progress=_progress)


def stage_train_seg(cfg: RunConfig, lay: Layout, threads: int = 1) -> None:
    g = cfg.segmenter
    scfg = segharness.SegConfig(epochs=g.epochs, lr=g.lr, batch_size=g.batch_size, seed=cfg.seed)
    for policy in _policies(cfg):
        manifest = _require(lay.augment_dir(policy) / "manifest.jsonl", "augment")
        imgs, lbls = pipeline.load_training_arrays(manifest)
        _progress(f"training segmenter for {policy} on {len(imgs)} samples")
        net, curve = segharness.train_segmenter(imgs, lbls, scfg, progress=_progress)
        lay.segnet(policy).parent.mkdir(parents=True, exist_ok=True)
        segharness.save_segnet(lay.segnet(policy), net)
        segharness.write_curve_csv(lay.seg_curve(policy), curve)


def stage_evaluate(cfg: RunConfig, lay: Layout, threads: int = 1) -> None:
    imgs, lbls = pipeline.load_training_arrays(_require(lay.test_manifest, "gen-scenes"))
    nets = {p: segharness.load_segnet(_require(lay.segnet(p), "train-seg")) for p in _policies(cfg)}
    rows = segharness.evaluate_table(list(nets), nets, imgs, lbls, registry=POLICY_REGISTRY)
    segharness.write_table_csv(lay.table, rows)
    for r in rows:
        _progress(f"{r.policy:>15s}  acc {r.accuracy:.4f}  P {r.precision:.4f}  R {r.recall:.4f}  "
                  f"F1 {r.f1:.4f}  mIoU {r.miou:.4f}")


STAGE_FUNCS = {
    "gen-scenes": stage_gen_scenes,
    "train-diffusion": stage_train_diffusion,
    "augment": stage_augment,
    "train-seg": stage_train_seg,
    "evaluate": stage_evaluate,
}


def run_stage(name: str, cfg: RunConfig, out: Path, threads: int = 1) -> None:
    lay = Layout(Path(out))
    names = STAGES if name == "run-all" else (name,)
    for stage in names:
        t0 = time.time()
        _progress(f"== {stage}")
        STAGE_FUNCS[stage](cfg, lay, threads)
        _progress(f"== {stage} done in {time.time() - t0:.1f}s")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eraseredraw", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="stage", required=True)
    for name in STAGES + ("run-all",):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="JSON run config")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                        help="worker threads for per-sample stages")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be >= 0")
            cfg.seed = args.seed
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return 1
    np.seterr(all="ignore")
    try:
        run_stage(args.stage, cfg, Path(args.out), args.threads)
    except (MissingArtifact, FileNotFoundError) as exc:
        log.error("%s", exc)
        return 2
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        log.exception("runtime failure: %s", exc)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
