# %% [markdown]
# # Overlapping communication with the backward pass
#
# A three-layer gradient oracle sleeps ``comp`` seconds per layer; every
# neighbour exchange costs ``comm`` seconds of link latency. Adapt-while-combine
# launches the combine of every layer before the backward pass starts, so the
# step takes about ``max(3 comp, comm)`` instead of ``3 (comm + comp)``.

# %%
import numpy as np

from defog import algorithms as alg
from defog.context import run_sim
from defog.topology import ring_graph
from defog.transport import SimNetwork

comm, comp = 2.5e-3, 1e-3
oracle = alg.LayeredGradientOracle.random((4, 3, 5), seed=0, compute_time=comp)


def step_time(step, blocking):
    def body(ctx):
        ctx.set_topology(ring_graph(4))
        x = [np.ones(s) * ctx.rank for s in (4, 3, 5)]
        ctx.barrier()
        t0 = ctx.now()
        step(ctx, x, oracle, 0.1, blocking=blocking)
        return ctx.now() - t0
    return max(run_sim(4, body, network=SimNetwork(latency=comm)))


for label, step, blocking in (("AWC blocking", alg.awc_step, True), ("ATC", alg.atc_step, False),
                              ("AWC", alg.awc_step, False)):
    print(f"{label:<13}{step_time(step, blocking) * 1e3:.2f} ms")
