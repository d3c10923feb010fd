"""The forward noising process and its masked variant.

Run: python3 demos/forward_noise.py
Checks the closed-form marginal by sampling and shows that the masked
process leaves the background untouched.
"""
import numpy as np

from eraseredraw import diffusion as df
from eraseredraw.scenes import SceneSpec, generate_scene

sched = df.make_schedule()
print(f"T={sched.T}, beta in [{sched.beta[0]:.0e}, {sched.beta[-1]:.2f}], final alpha_bar {sched.alpha_bar[-1]:.4f}")

rng = np.random.default_rng(0)
x0 = rng.uniform(-1, 1, 3)
for target in (0.9, 0.5, 0.1):
    t = int(np.argmin(np.abs(sched.alpha_bar - target))) + 1
    ab = sched.alpha_bar_at(t)
    xt = np.array([df.q_sample(x0, t, rng.standard_normal(3), sched) for _ in range(10_000)])
    print(f"t={t:3d} alpha_bar={ab:.3f}: mean {np.round(xt.mean(0), 3)} vs {np.round(np.sqrt(ab) * x0, 3)}, "
          f"std {np.round(xt.std(0), 3)} vs {np.sqrt(1 - ab):.3f}")

s = generate_scene(SceneSpec(seed=7), 0)
x = df.to_model_space(s.image)
m = s.instances[0].mask
xt = df.masked_q_sample(x, m, sched.T, rng.standard_normal(x.shape), sched)
print(f"masked noising of a {s.instances[0].cls}: background unchanged = {np.array_equal(xt[m == 0], x[m == 0])}, "
      f"masked std {xt[m == 1].std():.2f}")
