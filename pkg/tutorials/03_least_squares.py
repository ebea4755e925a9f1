# %% [markdown]
# # Decentralized least squares: DGD, exact diffusion and gradient tracking
#
# Eight ranks each own a block of rows of a least-squares problem. Plain DGD
# stops at a point whose distance to the optimum shrinks with the step size;
# the two bias-corrected methods converge to the optimum itself.

# %%
import numpy as np

from defog import algorithms as alg
from defog.topology import exponential_two_graph, mesh_grid_2d

p = alg.make_least_squares(8, d=10, m=20, noise=1.0, seed=0)
gamma = 0.5 / p.smoothness()
topo = exponential_two_graph(8)


def dist(traj):
    return np.linalg.norm(traj[-1] - p.x_star, axis=1).max()


print("DGD            ", dist(alg.dgd(p, topo, gamma, 400)))
print("DGD, half step ", dist(alg.dgd(p, topo, gamma / 2, 800)))
print("exact diffusion", dist(alg.exact_diffusion(p, topo, gamma, 400)))

# %% [markdown]
# Push-sum gradient tracking uses one-peer rounds over a 2x2 mesh. The rounds
# are only column-stochastic, so each rank carries a weight v whose sum stays
# equal to the number of ranks.

# %%
q = alg.make_least_squares(4, d=10, m=20, noise=1.0, seed=0)
x, v = alg.push_sum_gradient_tracking(q, mesh_grid_2d(4), 0.5 / q.smoothness(), 300)
print("gradient tracking", np.linalg.norm(x[-1] - q.x_star, axis=1).max())
print("sum of v, first rounds:", v.sum(axis=1)[:4])
