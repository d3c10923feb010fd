"""The classic augmentation baselines applied to one scene.

Run: python3 demos/classic_baselines.py [out_dir]
Each output is written next to the source so the effects can be compared.
"""
import sys
from pathlib import Path

import numpy as np

from eraseredraw import classic_aug as ca
from eraseredraw import imaging
from eraseredraw.scenes import SceneSpec, generate_scene

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out") / "baselines"
out.mkdir(parents=True, exist_ok=True)
spec = SceneSpec(seed=7)
a, b = generate_scene(spec, 0), generate_scene(spec, 1)
imaging.save_image(out / "source.ppm", a.image)

rng = np.random.default_rng(0)
for kind in ca.POLICY_REGISTRY:
    if kind in ("standard", "erase_redraw"):
        continue  # plain duplication, and the diffusion policy has its own demo
    img, lbl = ca.apply_classic(kind, ca.AugPolicy(kind).params, a.image, a.free_space, rng,
                                partner=(b.image, b.free_space))
    changed = np.mean(np.any(img != a.image, axis=2))
    relabelled = np.mean(lbl != a.free_space)
    print(f"{kind:14s} pixels changed {changed:6.1%}  label pixels changed {relabelled:6.1%}")
    imaging.save_image(out / f"{kind}.ppm", img)

# GridMask zeroes a (1-r)^2 share of the image whatever the period.
for d in (8, 16, 32):
    frac = ca.grid_zero_mask((64, 64), d, 0.6).mean()
    print(f"gridmask d={d:2d}: zeroed fraction {frac:.4f} (ideal {(1 - 0.6) ** 2:.4f})")
