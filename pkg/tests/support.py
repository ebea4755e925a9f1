"""Helpers shared by several test modules."""
import numpy as np

from defog.transport import MsgKind


def stacked(results):
    return np.stack([np.asarray(r) for r in results])


def mass_observer(world, name, totals):
    """Scheduler hook: append the system-wide mass of window ``name`` at every quiescent point.

    Mass counts every rank's window contents, accumulates not yet folded in,
    and accumulate payloads still on the wire.
    """
    def observe(now):
        live = [c for c in world.contexts if c is not None and name in c.windows.windows]
        if len(live) != world.size:
            return
        s = sum(c.windows.windows[name].mass() + c.windows.pending_mass(name) for c in live)
        s = s + sum((e.payload for e in world.fabric.in_flight([MsgKind.WINDOW_ACCUMULATE])
                     if e.op_name == name), np.zeros_like(s))
        totals.append(s.copy())
    return observe
