# %% [markdown]
# # A fish school locating a predator
#
# Each fish takes noisy distance and bearing readings, runs a local gradient
# step on its predator estimate and averages with the fish within sight.
# The neighbourhood is rebuilt from positions every round.

# %%
import numpy as np

from defog import algorithms as alg

rng = np.random.default_rng(0)
starts = np.array([6.0, 6.0]) + rng.uniform(-3, 3, (10, 2))
for mode in ("stationary", "escape", "encircle"):
    cfg = alg.FishConfig(predator=(0.0, 0.0), noise=0.05, radius=4.0, mode=mode, seed=1)
    res = alg.fish_school(starts, 150, cfg)
    err = np.linalg.norm(res["estimate"][-1], axis=1).max()
    spread = np.linalg.norm(res["position"][-1], axis=1)
    print(f"{mode:<10} estimate error {err:.3f}  distance to predator {spread.min():.2f}..{spread.max():.2f}")
