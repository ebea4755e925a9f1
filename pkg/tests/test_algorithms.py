import numpy as np
import pytest

from defog import algorithms as alg
from defog.context import run_sim
from defog.core import WeightScheme
from defog.errors import ConfigurationError, DegeneracyError, DivergenceError
from defog.topology import exponential_two_graph, full_graph, mesh_grid_2d, metropolis_hastings_weights, ring_graph
from defog.transport import SimNetwork


def homogeneous(n, d=4, m=12, seed=0):
    one = alg.make_least_squares(1, d, m, 0.3, seed)
    return alg.LeastSquaresProblem(one.A * n, one.b * n)


def gradient_descent(A, b, gamma, iters):
    x = np.zeros(A.shape[1])
    out = [x]
    for _ in range(iters):
        x = x - gamma * (A.T @ (A @ x - b))
        out.append(x)
    return np.array(out)


def dist(traj, x_star):
    return np.linalg.norm(traj[-1] - x_star, axis=1).max()


def test_problem_oracle():
    p = alg.make_least_squares(3, 4, 10, 0.1, seed=2)
    H = sum(a.T @ a for a in p.A)
    g = sum(a.T @ b for a, b in zip(p.A, p.b))
    assert np.allclose(H @ p.x_star, g)
    assert sum(p.grad(i, p.x_star) for i in range(3)) == pytest.approx(np.zeros(4), abs=1e-10)
    with pytest.raises(ConfigurationError):
        alg.LeastSquaresProblem((np.ones((1, 3)),), (np.ones(1),))


def test_dgd_homogeneous_matches_gradient_descent():
    p = homogeneous(4)
    gamma = 0.5 / p.smoothness()
    traj = alg.dgd(p, ring_graph(4), gamma, 40)
    ref = gradient_descent(p.A[0], p.b[0], gamma, 40)
    for r in range(4):
        assert np.allclose(traj[:, r], ref, atol=1e-12)


def test_dgd_zero_step_is_constant():
    p = alg.make_least_squares(4, 3, 8, seed=1)

    def body(ctx):
        ctx.set_topology(ring_graph(4))
        return alg.dgd_rank(ctx, p.A[ctx.rank], p.b[ctx.rank], 0.0, 10, x0=np.full(3, 2.0))
    for t in run_sim(4, body):
        assert np.allclose(t, 2.0)


def test_dgd_bias_shrinks_with_step():
    p = alg.make_least_squares(8, 10, 20, 1.0, seed=4)
    L = p.smoothness()
    biases = []
    for gamma in (0.5 / L, 0.25 / L):
        traj = alg.dgd(p, exponential_two_graph(8), gamma, 700)
        assert alg.consensus_residual(traj[-1]) < 1e-1
        assert np.abs(traj[-1] - traj[-2]).max() < 1e-12  # stationary
        biases.append(np.linalg.norm(traj[-1].mean(axis=0) - p.x_star))
    assert biases[0] / biases[1] >= 1.8


def test_dgd_divergence_detected():
    p = alg.make_least_squares(2, 3, 8, seed=0)
    with pytest.raises(DivergenceError, match="smaller step"):
        alg.dgd(p, ring_graph(2), 10.0 / p.smoothness(), 200)


def test_exact_diffusion_homogeneous_matches_dgd():
    p = homogeneous(4)
    gamma = 0.5 / p.smoothness()
    e = alg.exact_diffusion(p, ring_graph(4), gamma, 30)
    d = alg.dgd(p, ring_graph(4), gamma, 30)
    assert np.allclose(e, d, atol=1e-12)


def test_exact_diffusion_single_rank_is_gradient_descent():
    p = alg.make_least_squares(1, 4, 10, seed=5)
    gamma = 0.5 / p.smoothness()
    traj = run_sim(1, lambda ctx: alg.exact_diffusion_rank(ctx, p.A[0], p.b[0], gamma, 25))[0]
    assert np.allclose(traj, gradient_descent(p.A[0], p.b[0], gamma, 25), atol=1e-12)


def test_exact_diffusion_converges_exactly_on_ring():
    p = alg.make_least_squares(8, 10, 20, 1.0, seed=3)
    traj = alg.exact_diffusion(p, ring_graph(8), 0.5 / p.smoothness(), 700)
    assert dist(traj, p.x_star) < 1e-8


def test_bias_correction_ordering():
    p = alg.make_least_squares(4, 10, 20, 1.0, seed=3)
    gamma = 0.5 / p.smoothness()
    topo = mesh_grid_2d(4)
    d = alg.dgd(p, topo, gamma, 400)
    e = alg.exact_diffusion(p, topo, gamma, 400)
    g, _ = alg.push_sum_gradient_tracking(p, topo, gamma, 400)
    assert dist(d, p.x_star) > 1e-3
    assert dist(e, p.x_star) < 1e-6
    assert dist(g, p.x_star) < 1e-6


def test_gradient_tracking_mass_and_convergence():
    p = alg.make_least_squares(4, 10, 20, 1.0, seed=3)
    x, v = alg.push_sum_gradient_tracking(p, mesh_grid_2d(4), 0.5 / p.smoothness(), 300)
    assert np.abs(v.sum(axis=1) - 4).max() < 1e-9
    assert v.std() > 0  # the one-peer rounds really are column-stochastic only
    assert dist(x, p.x_star) < 1e-6


def test_gradient_tracking_static_doubly_keeps_unit_weights():
    p = alg.make_least_squares(4, 5, 10, 1.0, seed=1)
    _, v = alg.push_sum_gradient_tracking(p, full_graph(4), 0.3 / p.smoothness(), 30, static=True)
    assert np.all(v == 1.0)


def test_gradient_tracking_needs_a_schedule():
    p = alg.make_least_squares(2, 3, 6, seed=0)
    with pytest.raises(ConfigurationError):
        run_sim(2, lambda ctx: alg.gradient_tracking_rank(ctx, p.A[ctx.rank], p.b[ctx.rank], 0.1, 3))


def test_algorithms_are_bit_reproducible():
    p = alg.make_least_squares(5, 4, 9, 0.5, seed=8)
    net = SimNetwork.random(5, seed=3)
    a, _ = alg.push_sum_gradient_tracking(p, ring_graph(5), 0.1 / p.smoothness(), 20, network=net)
    b, _ = alg.push_sum_gradient_tracking(p, ring_graph(5), 0.1 / p.smoothness(), 20, network=net)
    assert a.tobytes() == b.tobytes()


# -- push-sum --------------------------------------------------------------------------

def test_push_sum_single_rank():
    y = alg.async_push_sum_consensus([np.array([4.0, 5.0])], full_graph(2).__class__.from_weights(np.eye(1)), 3)
    assert np.array_equal(y, [[4.0, 5.0]])


@pytest.mark.parametrize("seed", range(4))
def test_push_sum_exp2_four(seed):
    x0 = [np.array([v]) for v in (1.0, 2.0, 3.0, 4.0)]
    y = alg.async_push_sum_consensus(x0, exponential_two_graph(4), 40, network=SimNetwork.random(4, seed))
    assert np.abs(y - 2.5).max() < 1e-6


def directed_topology(n=5):
    # directed ring plus a chord 3 -> 0; uniform row weights are not column-stochastic
    W = 0.5 * np.eye(n) + 0.5 * np.roll(np.eye(n), 1, axis=0)
    W[0, 0], W[0, 4], W[0, 3] = 0.5, 0.25, 0.25
    return full_graph(n).__class__.from_weights(W)


def test_push_sum_corrects_directed_bias_under_asymmetric_delays():
    n = 5
    topo = directed_topology(n)
    x0 = [np.array([float(i) ** 2]) for i in range(n)]
    mean = np.mean([v[0] for v in x0])
    # plain gossip with the row weights converges to a biased point
    gossip = np.linalg.matrix_power(topo.weights, 500) @ np.array([v[0] for v in x0])
    assert abs(gossip[0] - mean) > 0.1
    net = SimNetwork(edge_latency={(s, d): 1e-4 * (1 + 4 * ((s * 3 + d) % 4)) for s in range(n) for d in range(n)})
    y = alg.async_push_sum_consensus(x0, topo, 150, network=net, compute_time=1e-2)
    assert np.abs(y - mean).max() < 1e-6


def test_push_sum_starved_rank_is_degenerate():
    # slow ranks outlive their in-neighbours and keep giving away mass
    x0 = [np.array([1.0])] * 5
    with pytest.raises(DegeneracyError, match="collapsed"):
        alg.async_push_sum_consensus(x0, directed_topology(), 150, compute_time=lambda r: 1e-4 * (r + 1))


# -- dsgd and fish ---------------------------------------------------------------------

def test_fish_noiseless_fully_connected_finds_predator():
    starts = np.array([[5.0, 1.0], [1.0, 6.0], [-4.0, 3.0], [2.0, -5.0]])
    cfg = alg.FishConfig(predator=(0.5, -0.5), noise=0.0, fully_connected=True, gamma=0.3)
    res = alg.fish_school(starts, 200, cfg)
    assert np.linalg.norm(res["estimate"][-1] - [0.5, -0.5], axis=1).max() < 1e-6


def fish_oracle(starts, iters, cfg):
    n = len(starts)
    rngs = [np.random.default_rng([cfg.seed, r]) for r in range(n)]
    P = np.asarray(starts, dtype=float)
    dist = np.linalg.norm(P[:, None] - P[None], axis=2)
    adj = (dist <= cfg.radius) & ~np.eye(n, dtype=bool)
    deg = adj.sum(axis=1)
    W = np.zeros((n, n))
    for i in range(n):
        for j in np.flatnonzero(adj[i]):
            W[i, j] = 1.0 / (1 + max(deg[i], deg[j]))
        W[i, i] = 1.0 - W[i].sum()
    w = np.zeros((n, 2))
    out = [w.copy()]
    for _ in range(iters):
        g = np.zeros((n, 2))
        for i in range(n):
            rel = P[i] - cfg.predator
            d = np.linalg.norm(rel) + cfg.noise * rngs[i].standard_normal()
            th = np.arctan2(rel[1], rel[0]) + cfg.noise * rngs[i].standard_normal()
            u = np.array([np.cos(th), np.sin(th)])
            g[i] = (d - u @ (P[i] - w[i])) * u
        w = W @ (w - cfg.gamma * g)
        out.append(w.copy())
    return np.array(out)


def test_stationary_fish_matches_dsgd_oracle():
    starts = np.array([[3.0, 3.0], [4.5, 3.0], [3.0, 5.0], [6.0, 6.0], [5.5, 4.5]])
    cfg = alg.FishConfig(predator=(0.0, 0.0), noise=0.1, radius=2.2, mode="stationary", seed=7)
    res = alg.fish_school(starts, 60, cfg)
    assert np.allclose(res["estimate"], fish_oracle(starts, 60, cfg), atol=1e-12)
    assert np.array_equal(res["position"][-1], starts)


def test_single_fish_is_plain_sgd():
    cfg = alg.FishConfig(predator=(1.0, 2.0), noise=0.05, seed=3)
    res = alg.fish_school(np.array([[4.0, 4.0]]), 30, cfg)
    assert np.allclose(res["estimate"], fish_oracle(np.array([[4.0, 4.0]]), 30, cfg), atol=1e-13)


@pytest.mark.parametrize("mode", ["escape", "encircle"])
def test_fish_motion_modes(mode):
    starts = np.array([[4.0, 0.0], [0.0, 4.0], [3.0, 3.0]])
    cfg = alg.FishConfig(noise=0.0, fully_connected=True, mode=mode, orbit=5.0)
    res = alg.fish_school(starts, 120, cfg)
    r0 = np.linalg.norm(res["position"][0], axis=1)
    r1 = np.linalg.norm(res["position"][-1], axis=1)
    if mode == "escape":
        assert np.all(r1 > r0 + 0.5)
    else:
        assert np.all(np.abs(r1 - 5.0) < np.abs(r0 - 5.0))
    with pytest.raises(ConfigurationError):
        alg.fish_school(starts, 2, alg.FishConfig(mode="dance"))


def test_dsgd_time_varying_generic():
    target = np.array([1.0, -2.0])

    def body(ctx):
        sc = lambda k: metropolis_hastings_weights([j for j in range(3) if j != ctx.rank], {0: 2, 1: 2, 2: 2}, 2)
        return alg.dsgd_time_varying(ctx, lambda k, w: w - target * (ctx.rank + 1) / 2, np.zeros(2), sc, 0.2, 200)
    out = np.stack(run_sim(3, body), axis=1)
    assert np.allclose(out[-1], target, atol=1e-6)


# -- ATC / AWC -------------------------------------------------------------------------

def oracle_for(seed, sizes=(3, 2, 4), compute=0.0):
    return alg.LayeredGradientOracle.random(sizes, seed=seed, compute_time=compute)


def start_point(rank, sizes=(3, 2, 4)):
    rng = np.random.default_rng(rank)
    return [rng.standard_normal(s) for s in sizes]


def test_atc_single_layer_matches_blocking_combine():
    orc = oracle_for(0, (5,))

    def body(ctx):
        ctx.set_topology(ring_graph(4))
        x = start_point(ctx.rank, (5,))
        atc = alg.atc_step(ctx, x, orc, 0.1)[0]
        ref = ctx.neighbor_allreduce(x[0] - 0.1 * orc.gradient(x)[0], "ref")
        return atc, ref
    for a, b in run_sim(4, body):
        assert a.tobytes() == b.tobytes()


def test_awc_zero_step_is_pure_combine():
    orc = oracle_for(1)

    def body(ctx):
        ctx.set_topology(exponential_two_graph(4))
        x = start_point(ctx.rank)
        out = alg.awc_step(ctx, x, orc, 0.0)
        ref = [ctx.neighbor_allreduce(v, f"ref{l}") for l, v in enumerate(x)]
        return out, ref
    for out, ref in run_sim(4, body):
        assert all(a.tobytes() == b.tobytes() for a, b in zip(out, ref))


@pytest.mark.parametrize("step", [alg.atc_step, alg.awc_step])
def test_overlap_equals_blocking(step):
    orc = oracle_for(2, compute=1e-3)
    net = SimNetwork(latency=2e-3)

    def run(blocking):
        def body(ctx):
            ctx.set_topology(ring_graph(5))
            x = start_point(ctx.rank)
            for k in range(5):
                x = step(ctx, x, orc, 0.05, blocking=blocking, name=f"s{k}")
            return np.concatenate(x)
        return np.stack(run_sim(5, body, network=net))
    assert run(True).tobytes() == run(False).tobytes()


def test_periodic_global_allreduce():
    orc = oracle_for(3)

    def body(ctx):
        ctx.set_topology(ring_graph(6))
        x = start_point(ctx.rank)
        outs = []
        for k in range(41):
            comm = "allreduce" if k % 20 == 0 else "neighbor_allreduce"
            prev = x
            x = alg.atc_step(ctx, x, orc, 0.02, comm_type=comm, name=f"p{k}")
            if k % 20 == 0:
                outs.append((prev, x))
        return outs
    res = run_sim(6, body)
    for idx in range(3):
        pre = [res[r][idx][0] for r in range(6)]
        post = [res[r][idx][1] for r in range(6)]
        for l in range(3):
            adapted = np.stack([pre[r][l] - 0.02 * orc.gradient(pre[r])[l] for r in range(6)])
            for r in range(6):
                assert np.allclose(post[r][l], adapted.mean(axis=0), atol=1e-12)


def test_unknown_comm_type():
    orc = oracle_for(0, (2,))
    with pytest.raises(ConfigurationError, match="valid"):
        run_sim(1, lambda ctx: alg.atc_step(ctx, [np.ones(2)], orc, 0.1, comm_type="gossip"))


def test_awc_overlap_shortens_step():
    p, c = 1e-3, 2.5e-3
    orc = oracle_for(4, compute=p)
    net = SimNetwork(latency=c)

    def timed(step, blocking):
        def body(ctx):
            ctx.set_topology(ring_graph(4))
            x = start_point(ctx.rank)
            ctx.barrier()
            t0 = ctx.now()
            step(ctx, x, orc, 0.1, blocking=blocking)
            return ctx.now() - t0
        return max(run_sim(4, body, network=net))
    awc = timed(alg.awc_step, False)
    assert awc < timed(alg.awc_step, True) == pytest.approx(3 * (c + p))
    assert awc == pytest.approx(max(3 * p, c))
    assert timed(alg.atc_step, False) == pytest.approx(3 * p + c)
