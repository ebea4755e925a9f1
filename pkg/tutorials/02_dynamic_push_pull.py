# %% [markdown]
# # Dynamic topologies with per-round weight schemes
#
# A ``WeightScheme`` is one rank's own view of a round: its self weight, the
# ranks it pulls from and the ranks it pushes to. No rank needs the global
# matrix; ``assemble_weight_matrix`` rebuilds it only for checking.

# %%
import numpy as np

import defog

n = 8
X = np.random.default_rng(1).standard_normal((n, 2))


def one_peer(ctx, rounds=3):
    x = X[ctx.rank]
    for k in range(rounds):
        x = ctx.neighbor_allreduce(x, "x", scheme=defog.one_peer_exponential_scheme(n, ctx.rank, k).pull())
    return x


out = np.stack(defog.run_sim(n, one_peer))
# after log2(n) one-peer rounds every rank holds the exact mean
print("one-peer error after 3 rounds:", np.abs(out - X.mean(axis=0)).max())

# %% [markdown]
# Push-only schemes with uneven weights give a column-stochastic round: the
# sum over ranks is preserved, yet repeating the round does not bring every
# row to the mean. Pushing a weight p alongside x and dividing by it does.

# %%
keep = np.linspace(0.2, 0.8, n)
schemes = [defog.WeightScheme(keep[i], dst_weights={(i + 1) % n: 1 - keep[i]}) for i in range(n)]
W = defog.assemble_weight_matrix(schemes)
print(defog.classify_weight_matrix(W))


def push_rounds(ctx, rounds=200):
    xp = np.append(X[ctx.rank], 1.0)
    for _ in range(rounds):
        xp = ctx.neighbor_allreduce(xp, "xp", scheme=schemes[ctx.rank])
    return xp


out = np.stack(defog.run_sim(n, push_rounds))
print("sum preserved:", np.allclose(out[:, :-1].sum(axis=0), X.sum(axis=0)))
print("plain x, distance to mean:", np.abs(out[:, :-1] - X.mean(axis=0)).max())
print("x / p, distance to mean:  ", np.abs(out[:, :-1] / out[:, -1:] - X.mean(axis=0)).max())
