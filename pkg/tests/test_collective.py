import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import defog
from defog.collective import defuse, fuse, plan_batches
from defog.core import WeightScheme, assemble_weight_matrix, dense_partial_average_oracle
from defog.errors import OpMismatchError, ShapeMismatchError, TopologyMismatchError
from defog.topology import STATIC_TOPOLOGIES, full_graph, ring_graph, static_topology
from defog.transport import SimNetwork
from defog.context import SimWorld, run_sim


def stacked(results):
    return np.stack([np.asarray(r) for r in results])


def test_set_topology_and_self_weights():
    def body(ctx):
        default = ctx.topology.name
        ok = ctx.set_topology(ring_graph(4))
        bad = ctx.set_topology(ring_graph(5))
        return default, ok, bad, ctx.self_weights()
    default, ok, bad, sw = run_sim(4, body)[0]
    assert default == "full(4)"
    assert ok and not bad
    assert sw.self_weight == pytest.approx(1 / 3)
    assert dict(sw.src_weights) == pytest.approx({1: 1 / 3, 3: 1 / 3})


def test_allreduce_examples(rng):
    assert np.array_equal(run_sim(1, lambda ctx: ctx.allreduce([7.0, 8.0]))[0], [7.0, 8.0])
    res = run_sim(4, lambda ctx: ctx.allreduce(float(ctx.rank + 1)))
    assert all(r[0] == 2.5 for r in res)
    X = rng.standard_normal((5, 3, 2))
    out = stacked(run_sim(5, lambda ctx: ctx.allreduce(X[ctx.rank])))
    expect = dense_partial_average_oracle(np.full((5, 5), 0.2), X.reshape(5, -1)).reshape(X.shape)
    assert np.allclose(out, expect, atol=1e-10)


def test_allgather():
    res = run_sim(3, lambda ctx: ctx.allgather([ctx.rank, 10.0 * ctx.rank]))
    for r in res:
        assert np.array_equal(r, [[0, 0], [1, 10], [2, 20]])


def test_neighbor_allreduce_isolated_and_full():
    iso = WeightScheme(1.0, {})
    res = run_sim(3, lambda ctx: ctx.neighbor_allreduce([ctx.rank + 0.5], scheme=iso))
    assert [r[0] for r in res] == [0.5, 1.5, 2.5]

    def body(ctx):
        ctx.set_topology(full_graph(4))
        return ctx.neighbor_allreduce(float(ctx.rank + 1)), ctx.allreduce(float(ctx.rank + 1))
    for a, b in run_sim(4, body):
        assert a[0] == pytest.approx(2.5) and b[0] == 2.5


@pytest.mark.parametrize("name", STATIC_TOPOLOGIES)
@pytest.mark.parametrize("n", [2, 3, 6, 9])
def test_static_oracle(name, n, rng):
    topo = static_topology(name, n)
    X = rng.standard_normal((n, 4))

    def body(ctx):
        ctx.set_topology(topo)
        return ctx.neighbor_allreduce(X[ctx.rank])
    out = stacked(run_sim(n, body, network=SimNetwork.random(n, seed=n)))
    assert np.allclose(out, topo.weights @ X, atol=1e-10)
    # doubly stochastic: the global mean survives
    assert np.allclose(out.mean(axis=0), X.mean(axis=0), atol=1e-10)


def test_push_only_matches_assembled_oracle(rng):
    n = 5
    schemes = []
    for i in range(n):
        dst = rng.choice([j for j in range(n) if j != i], size=2, replace=False)
        w = rng.dirichlet(np.ones(3))
        schemes.append(WeightScheme(w[0], dst_weights={int(dst[0]): w[1], int(dst[1]): w[2]}))
    X = rng.standard_normal((n, 3))
    out = stacked(run_sim(n, lambda ctx: ctx.neighbor_allreduce(X[ctx.rank], scheme=schemes[ctx.rank])))
    W = assemble_weight_matrix(schemes)
    assert np.allclose(out, W @ X, atol=1e-10)
    assert np.allclose(out.sum(axis=0), X.sum(axis=0), atol=1e-10)


def test_nonblocking_equals_blocking_bitwise(rng):
    X = rng.standard_normal((6, 7))

    def blocking(ctx):
        ctx.set_topology(static_topology("exp2", 6))
        return ctx.neighbor_allreduce(X[ctx.rank], "v")

    def nonblocking(ctx):
        ctx.set_topology(static_topology("exp2", 6))
        return ctx.wait(ctx.neighbor_allreduce_nonblocking(X[ctx.rank], "v"))
    a, b = stacked(run_sim(6, blocking)), stacked(run_sim(6, nonblocking))
    assert a.tobytes() == b.tobytes()


def test_nonblocking_snapshots_input():
    def body(ctx):
        x = np.full(3, ctx.rank + 1.0)
        h = ctx.allreduce_nonblocking(x, "snap")
        x[:] = 1000.0
        return ctx.wait(h)
    for r in run_sim(4, body, network=SimNetwork(latency=1e-3)):
        assert np.all(r == 2.5)


def test_two_handles_resolve_independently():
    def body(ctx):
        h1 = ctx.allreduce_nonblocking(float(ctx.rank), "one")
        h2 = ctx.neighbor_allreduce_nonblocking(float(ctx.rank) * 10, "two",
                                                scheme=WeightScheme(1.0, {}))
        polled = ctx.poll(h1) in (True, False)
        return ctx.wait(h2)[0], ctx.wait(h1)[0], polled
    for r, (two, one, polled) in enumerate(run_sim(3, body, network=SimNetwork(latency=1e-3))):
        assert two == 10.0 * r and one == 1.0 and polled


def test_hierarchical_two_by_two():
    vals = [1.0, 3.0, 5.0, 7.0]

    def body(ctx):
        ctx.set_machine_topology(full_graph(2))
        return ctx.hierarchical_neighbor_allreduce(vals[ctx.rank])
    assert [r[0] for r in run_sim(4, body, local_size=2)] == [4.0] * 4


def test_hierarchical_single_machine_is_local_mean():
    res = run_sim(3, lambda ctx: ctx.hierarchical_neighbor_allreduce(float(ctx.rank)), local_size=3)
    assert [r[0] for r in res] == [1.0] * 3


@pytest.mark.parametrize("machines,local", [(3, 2), (4, 2), (2, 3)])
def test_hierarchical_kronecker_oracle(machines, local, rng):
    mt = ring_graph(machines)
    n = machines * local
    X = rng.standard_normal((n, 3))

    def body(ctx):
        ctx.set_machine_topology(mt)
        return ctx.hierarchical_neighbor_allreduce(X[ctx.rank])
    out = stacked(run_sim(n, body, local_size=local, network=SimNetwork.random(n, seed=1)))
    K = np.kron(mt.weights, np.full((local, local), 1.0 / local))
    assert np.allclose(out, K @ X, atol=1e-10)


def test_negotiation_pairs_by_name():
    def body(ctx):
        a, b = np.array([ctx.rank + 1.0]), np.array([10.0 * (ctx.rank + 1)])
        if ctx.rank == 0:
            ha = ctx.allreduce_nonblocking(a, "A")
            hb = ctx.allreduce_nonblocking(b, "B")
        else:
            hb = ctx.allreduce_nonblocking(b, "B")
            ha = ctx.allreduce_nonblocking(a, "A")
        return ctx.wait(ha)[0], ctx.wait(hb)[0]
    assert run_sim(2, body) == [(1.5, 15.0), (1.5, 15.0)]


def test_topology_mismatch_is_diagnosed():
    def body(ctx):
        sc = WeightScheme(0.5, None, {1: 0.5}) if ctx.rank == 0 else WeightScheme(1.0, {})
        return ctx.neighbor_allreduce(np.ones(2), "bad", scheme=sc)
    with pytest.raises(TopologyMismatchError, match="rank 0 sends to rank 1"):
        run_sim(2, body)


def test_shape_and_op_mismatch():
    with pytest.raises(ShapeMismatchError, match=r"\[1, 2\]"):
        run_sim(3, lambda ctx: ctx.allreduce(np.ones(ctx.rank + 1), "s"))
    with pytest.raises(OpMismatchError):
        run_sim(2, lambda ctx: ctx.allreduce(1.0, "x") if ctx.rank else ctx.allgather(1.0, "x"))


def test_check_disabled_gives_same_results(rng):
    X = rng.standard_normal((4, 3))

    def body(ctx):
        out = []
        for k in range(4):
            sc = defog.one_peer_exponential_scheme(4, ctx.rank, k).pull()
            out.append(ctx.neighbor_allreduce(X[ctx.rank], "dyn", scheme=sc))
        return np.concatenate(out)
    on = stacked(run_sim(4, body, topo_check=True))
    off = stacked(run_sim(4, body, topo_check=False))
    assert on.tobytes() == off.tobytes()


def test_plan_batches_and_fuse():
    assert plan_batches([32, 32, 32], 64) == [[0, 1], [2]]
    assert plan_batches([8], 64) == [[0]]
    assert plan_batches([8, 8], 0) == [[0], [1]]
    parts = [np.arange(3.0), np.ones((2, 2))]
    buf, shapes = fuse(parts)
    back = defuse(buf, shapes)
    assert all(np.array_equal(a, b) for a, b in zip(parts, back))


@pytest.mark.parametrize("fusion", [0, 64, 1 << 20])
def test_fused_scalars_equal_separate(fusion):
    def body(ctx):
        hs = [ctx.allreduce_nonblocking(np.full(4, ctx.rank + k), f"s{k}") for k in range(3)]
        return [ctx.wait(h) for h in hs], dict(ctx.engine.stats)
    res = run_sim(3, body, fusion_bytes=fusion)
    vals = [np.concatenate(r[0]) for r in res]
    ref = [np.concatenate([np.full(4, 1.0 + k) for k in range(3)])] * 3
    assert all(v.tobytes() == r.tobytes() for v, r in zip(vals, ref))
    stats = res[0][1]
    if fusion == 0:
        assert stats.get("fused_execs", 0) == 0
    if fusion == 64:
        # three 32-byte tensors under a 64-byte buffer: at most two per batch
        assert stats["execs"] >= 2


def test_no_deadlock_under_adversarial_delays():
    for n in (2, 5, 8, 13, 16):
        for name in STATIC_TOPOLOGIES:
            topo = static_topology(name, n)
            net = SimNetwork.random(n, seed=n * 7 + len(name), low=1e-5, high=2e-2, jitter=1e-2)

            def body(ctx):
                ctx.set_topology(topo)
                x = np.array([float(ctx.rank)])
                h = ctx.neighbor_allreduce_nonblocking(x, "a")
                y = ctx.allreduce(x, "b")
                return ctx.wait(h), y
            res = run_sim(n, body, network=net)
            assert np.allclose(stacked([r[0] for r in res])[:, 0], topo.weights @ np.arange(n))


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 7), st.integers(0, 2**31))
def test_random_weights_mean_preserved(n, seed):
    rng = np.random.default_rng(seed)
    lam = rng.dirichlet(np.ones(4))
    W = sum(l * np.eye(n)[rng.permutation(n)] for l in lam)
    topo = defog.Topology.from_weights(W)
    X = rng.standard_normal((n, 2))

    def body(ctx):
        ctx.set_topology(topo)
        return ctx.neighbor_allreduce(X[ctx.rank])
    out = stacked(run_sim(n, body))
    assert np.allclose(out, W @ X, atol=1e-10)
    assert np.allclose(out.mean(axis=0), X.mean(axis=0), atol=1e-10)
