"""defog: decentralized collective communication and optimization.

Typical use inside a simulated world::

    import defog

    def step(ctx):
        ctx.set_topology(defog.exponential_two_graph(ctx.size))
        return ctx.neighbor_allreduce([float(ctx.rank)])

    defog.run_sim(8, step)
"""
from .collective import CommHandle, fuse, defuse, plan_batches
from .context import Context, SimWorld, current, init, run_sim
from .core import (NeighborSets, Stochasticity, Topology, WeightScheme, as_tensor,
                   assemble_weight_matrix, classify_weight_matrix, dense_partial_average_oracle,
                   neighbor_sets)
from .errors import *  # noqa: F401,F403
from .topology import (DynamicTopologyGenerator, exponential_two_graph, full_graph,
                       inner_outer_exp2_scheme, mesh_grid_2d, metropolis_hastings_weights,
                       one_peer_exponential_scheme, one_peer_scheme_of_graph, ring_graph, star_graph,
                       static_topology)
from .transport import SimNetwork

__version__ = "0.1.0"
