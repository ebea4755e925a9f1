# %% [markdown]
# # Asynchronous push-sum with one-sided windows
#
# Ranks never wait for each other inside the loop: each one accumulates a
# share of ``[x, p]`` into its out-neighbours' windows and folds in whatever
# has arrived. Random link delays change the order of events, not the result.

# %%
import numpy as np

from defog import algorithms as alg
from defog.topology import exponential_two_graph
from defog.transport import SimNetwork

n = 8
x0 = np.random.default_rng(2).standard_normal((n, 2))
for seed in range(3):
    y = alg.async_push_sum_consensus(x0, exponential_two_graph(n), 60, network=SimNetwork.random(n, seed))
    print(f"delay schedule {seed}: max error {np.abs(y - x0.mean(axis=0)).max():.2e}")
