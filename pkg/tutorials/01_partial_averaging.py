# %% [markdown]
# # Partial averaging on a static topology
#
# Every rank holds one row of X. One call to ``neighbor_allreduce`` replaces
# each row with its weighted neighbourhood average, which is exactly ``W @ X``.

# %%
import numpy as np

import defog

n = 8
topo = defog.exponential_two_graph(n)
X = np.random.default_rng(0).standard_normal((n, 3))
print("in-neighbours of rank 0:", topo.in_neighbors(0))


def step(ctx):
    ctx.set_topology(topo)
    return ctx.neighbor_allreduce(X[ctx.rank], "x")


out = np.stack(defog.run_sim(n, step))
print("max |out - W X| =", np.abs(out - topo.weights @ X).max())

# %% [markdown]
# Repeating the step drives every row to the global mean, since W is doubly
# stochastic.

# %%
def gossip(ctx, rounds=30):
    ctx.set_topology(topo)
    x = X[ctx.rank]
    for _ in range(rounds):
        x = ctx.neighbor_allreduce(x, "x")
    return x


out = np.stack(defog.run_sim(n, gossip))
print("distance to mean after 30 rounds:", np.abs(out - X.mean(axis=0)).max())
