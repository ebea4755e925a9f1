# %% [markdown]
# # Running on real processes
#
# The same program runs on the simulator or as separate processes over TCP
# on localhost::
#
#     dfrun -n 4 --backend tcp -- tutorials/07_tcp_launch.py
#     dfrun -n 4 --backend tcp --local-size 2 -- tutorials/07_tcp_launch.py
#
# ``defog.init()`` reads the rank layout that ``dfrun`` puts in the environment.
# ``--backend sim`` runs the ranks inside one process instead.

# %%
import numpy as np

import defog

ctx = defog.init()
ctx.set_topology(defog.ring_graph(ctx.size))
x = np.array([float(ctx.rank)])
print(f"rank {ctx.rank}: neighbour average {ctx.neighbor_allreduce(x, 'x')[0]:.3f}", flush=True)
if ctx.local_size > 1:
    ctx.set_machine_topology(defog.ring_graph(ctx.size // ctx.local_size))
    print(f"rank {ctx.rank}: hierarchical {ctx.hierarchical_neighbor_allreduce(x, 'h')[0]:.3f}", flush=True)
ctx.shutdown()
