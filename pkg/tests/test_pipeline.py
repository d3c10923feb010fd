import hashlib

import numpy as np
import pytest

from eraseredraw import diffusion as df
from eraseredraw import imaging, pipeline, scenes
from eraseredraw.classic_aug import POLICY_REGISTRY, AugPolicy
from eraseredraw.maskprovider import InstanceProposal
from eraseredraw.scenes import CLASSES, SceneSpec, generate_scene


@pytest.fixture(scope="module")
def source(tmp_path_factory):
    d = tmp_path_factory.mktemp("scenes")
    spec = SceneSpec(seed=13)
    scenes.generate_dataset(spec, 10, d)
    return d / "manifest.jsonl", spec


@pytest.fixture(scope="module")
def tiny_net():
    return df.DenoiserNet(seed=0), df.make_schedule(4, 1e-3, 0.3)


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_erase_then_redraw_contract(tiny_net):
    net, sched = tiny_net
    s = generate_scene(SceneSpec(seed=2), 5)
    out = pipeline.erase_then_redraw(s, "oracle", net, sched, rng=np.random.default_rng(0))
    assert np.array_equal(out.label, s.free_space)
    (erased,) = out.provenance["erased"]
    mask = next(i.mask for i in s.instances if imaging.bbox(i.mask) == tuple(erased["bbox"]))
    assert np.array_equal(out.image[mask == 0], s.image[mask == 0])
    assert erased["token"] == erased["class"]


def test_erase_then_redraw_restyle_and_fallback(tiny_net):
    net, sched = tiny_net
    s = generate_scene(SceneSpec(seed=2), 6)
    out = pipeline.erase_then_redraw(s, "oracle", net, sched, token_mode="restyle", rng=np.random.default_rng(1),
                                     instances=len(s.instances))
    assert len(out.provenance["erased"]) == len(s.instances)
    assert all(e["token"] in CLASSES for e in out.provenance["erased"])
    union = np.zeros_like(s.free_space)
    for i in s.instances:
        union |= i.mask
    assert np.array_equal(out.image[union == 0], s.image[union == 0])
    none = pipeline.erase_then_redraw(s, lambda _: [], net, sched)
    assert none.provenance["fallback"] == "no_proposal"
    assert np.array_equal(none.image, s.image) and np.array_equal(none.label, s.free_space)


def test_plan_redraw_token_modes():
    m = np.ones((2, 2), np.uint8)
    props = [InstanceProposal(m, "tree", "oracle"), InstanceProposal(m, "car", "oracle")]
    same = pipeline.plan_redraw(props, "same", np.random.default_rng(0), instances=2)
    assert sorted(CLASSES[t] for t in same.tokens) == ["car", "tree"]
    assert [CLASSES[t] for t in same.tokens] == [p.cls for p in same.proposals]
    with pytest.raises(ValueError):
        pipeline.plan_redraw(props, "bogus", np.random.default_rng(0))


@pytest.mark.parametrize("kind", POLICY_REGISTRY)
def test_augment_dataset_protocol(kind, source, tiny_net, tmp_path):
    manifest, spec = source
    net, sched = tiny_net
    opts = pipeline.AugmentOptions(k=3, seed=5)
    recs = pipeline.augment_dataset(manifest, AugPolicy(kind), tmp_path / kind, opts, net=net, sched=sched, spec=spec)
    assert len(recs) == 10 * (3 + 1)
    assert len(scenes.read_manifest(tmp_path / kind / "manifest.jsonl")) == 40
    synth = recs[10:]
    assert len(synth) == 30
    imgs, lbls = pipeline.load_training_arrays(tmp_path / kind / "manifest.jsonl")
    assert imgs.shape == (40, 64, 64, 3) and lbls.shape == (40, 64, 64)
    src = scenes.read_manifest(manifest)
    for r in synth:
        orig = src[r["index"]]
        same_label = digest(tmp_path / kind / r["label"]) == digest(manifest.parent / orig["label"])
        if kind not in ("basic", "cutmix"):
            assert same_label
        if kind == "standard":
            assert digest(tmp_path / kind / r["image"]) == digest(manifest.parent / orig["image"])


def test_augment_deterministic(source, tiny_net, tmp_path):
    manifest, spec = source
    net, sched = tiny_net
    opts = pipeline.AugmentOptions(k=2, seed=1)
    for kind in ("cutmix", "erase_redraw"):
        a = pipeline.augment_dataset(manifest, AugPolicy(kind), tmp_path / "a" / kind, opts, net, sched, spec)
        b = pipeline.augment_dataset(manifest, AugPolicy(kind), tmp_path / "b" / kind, opts, net, sched, spec)
        assert [r["provenance"] for r in a] == [r["provenance"] for r in b]
        for r in a[10:]:
            assert digest(tmp_path / "a" / kind / r["image"]) == digest(tmp_path / "b" / kind / r["image"])


def test_redraw_only_touches_erased_mask(source, tiny_net, tmp_path):
    manifest, spec = source
    net, sched = tiny_net
    recs = pipeline.augment_dataset(manifest, AugPolicy("erase_redraw"), tmp_path, pipeline.AugmentOptions(k=1),
                                    net, sched, spec)
    src = scenes.read_manifest(manifest)
    for r in recs[10:]:
        s = scenes.load_sample(src[r["index"]], manifest.parent)
        out = imaging.load_image(tmp_path / r["image"])
        (e,) = r["provenance"]["erased"]
        m = next(i.mask for i in s.instances if imaging.bbox(i.mask) == tuple(e["bbox"]))
        assert np.array_equal(out[m == 0], s.image[m == 0])


def test_augment_needs_net(source, tmp_path):
    manifest, spec = source
    with pytest.raises(FileNotFoundError):
        pipeline.augment_dataset(manifest, AugPolicy("erase_redraw"), tmp_path, spec=spec)
