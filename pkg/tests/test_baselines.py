import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dean.baselines import diging_run, extra_run, metropolis_weights, step_grid, sweep
from dean.errors import ParameterError, StructuralError
from dean.objectives import ProblemInstance, QuadraticObjective, make_quadratic_instance
from dean.topology import Graph, random_connected_graph

from .oracles import diging_lifted, empirical_rate, extra_lifted, rate_without_unit


def test_metropolis_degree_two_three_edge():
    # node 1 has degree 2, node 2 has degree 3
    g = Graph(5, ((0, 1), (1, 2), (2, 3), (2, 4)))
    W = metropolis_weights(g)
    assert W[1, 2] == pytest.approx(0.2, abs=1e-16)
    assert W[0, 1] == pytest.approx(0.25, abs=1e-16)


def test_metropolis_k2():
    W = metropolis_weights(Graph.path(2))
    np.testing.assert_allclose(W, [[2 / 3, 1 / 3], [1 / 3, 2 / 3]], atol=1e-16)


@given(seed=st.integers(0, 100_000), N=st.integers(2, 25))
def test_metropolis_is_symmetric_doubly_stochastic(seed, N):
    g = random_connected_graph(N, min(4.0, N - 1), seed)
    W = metropolis_weights(g)
    assert np.array_equal(W, W.T)
    np.testing.assert_allclose(W.sum(axis=0), 1.0, atol=1e-12)
    np.testing.assert_allclose(W.sum(axis=1), 1.0, atol=1e-12)
    for i in range(N):
        for j in range(N):
            assert (W[i, j] > 0) == (i == j or g.has_edge(i, j))
    J = np.full((N, N), 1.0 / N)
    assert np.max(np.abs(np.linalg.eigvalsh(W - J))) < 1 - 1e-12


def test_extra_two_step_map_fixes_optimum():
    inst = make_quadratic_instance(5, 2, 3)
    W = metropolis_weights(inst.graph)
    xs = np.tile(inst.x_star, (5, 1))
    g = inst.grads(xs)
    Wb = 0.5 * (np.eye(5) + W)
    np.testing.assert_allclose(xs + W @ xs - Wb @ xs - 0.05 * (g - g), xs, atol=1e-14)


@pytest.mark.parametrize("runner", [extra_run, diging_run])
def test_start_at_optimum_returns_to_optimum(runner):
    # the first step uses individual gradients, which are nonzero at x*
    inst = make_quadratic_instance(5, 2, 3)
    x0 = np.tile(inst.x_star, (5, 1))
    t = runner(inst, metropolis_weights(inst.graph), 0.05, 800, x0=x0)
    d = t.column("dist_to_opt")
    assert d[0] < 1e-12
    assert d[-1] < 1e-8


def test_diging_moves_off_optimum_then_returns():
    inst = make_quadratic_instance(5, 2, 3)
    x0 = np.tile(inst.x_star, (5, 1))
    t = diging_run(inst, metropolis_weights(inst.graph), 0.05, 800, x0=x0)
    d = t.column("dist_to_opt")
    assert d.max() > 1e-3
    assert d[-1] < 1e-8


@pytest.mark.parametrize("runner", [extra_run, diging_run])
def test_rejects_bad_configuration(runner):
    inst = make_quadratic_instance(3, 2, 1)
    W = metropolis_weights(inst.graph)
    with pytest.raises(ParameterError):
        runner(inst, W, 0.0 if runner is extra_run else -1.0, 5)
    with pytest.raises(StructuralError):
        runner(inst, np.eye(4), 0.1, 5)


def test_single_node_graph_rejected():
    with pytest.raises(StructuralError):
        Graph(1, ())


def test_diging_tracking_invariant():
    inst = make_quadratic_instance(6, 3, 2)
    W = metropolis_weights(inst.graph)
    t = diging_run(inst, W, 0.1, 200)
    track = np.array(t.metadata["tracking_error"])
    assert len(track) == len(t)
    assert track.max() <= 1e-10


def test_diging_zero_step_is_averaging():
    inst = make_quadratic_instance(5, 2, 4)
    W = metropolis_weights(inst.graph)
    t = diging_run(inst, W, 0.0, 600)
    mean0 = inst.local_minimizers.mean(axis=0)
    np.testing.assert_allclose(t.states[-1], np.tile(mean0, (5, 1)), atol=1e-10)


@pytest.mark.parametrize("runner", [extra_run, diging_run])
def test_k2_small_step_converges(runner):
    g = Graph.path(2)
    inst = ProblemInstance(g, [QuadraticObjective([[1.0]], [0.0]), QuadraticObjective([[1.0]], [2.0])])
    t = runner(inst, metropolis_weights(g), 0.1, 2000)
    e = t.column("e")
    assert e[-1] / e[0] < 1e-10


@pytest.mark.parametrize("runner", [extra_run, diging_run])
def test_divergence_is_reported(runner):
    inst = make_quadratic_instance(4, 2, 1)
    t = runner(inst, metropolis_weights(inst.graph), 50.0, 500)
    assert t.status == "diverged"


@pytest.mark.parametrize("seed", [0, 1, 2])
@pytest.mark.parametrize("which", ["extra", "diging"])
def test_rate_matches_lifted_spectral_radius(seed, which):
    inst = make_quadratic_instance(4, 2, seed)
    W = metropolis_weights(inst.graph)
    Bs = [f.B for f in inst.objectives]
    alpha = 0.1
    if which == "extra":
        M, t = extra_lifted(Bs, W, alpha), extra_run(inst, W, alpha, 3000)
    else:
        M, t = diging_lifted(Bs, W, alpha), diging_run(inst, W, alpha, 3000)
    rho = rate_without_unit(M, inst.dim)
    assert rho < 1
    measured = empirical_rate(t.column("dist_to_opt"), lo=1e-12, hi=1e-4)
    assert measured == pytest.approx(rho, rel=0.02)


def test_step_grid_and_sweep():
    inst = make_quadratic_instance(5, 2, 0)
    grid = step_grid(inst, "extra", points=9)
    assert len(grid) == 9 and np.all(np.diff(grid) > 0)
    W = metropolis_weights(inst.graph)
    best, trace, results = sweep(lambda a: extra_run(inst, W, a, 50, keep_states=False), grid)
    scores = [t.column("e")[-1] / t.column("e")[0] for a, t, err in results if t is not None and t.status != "diverged"]
    assert trace.column("e")[-1] / trace.column("e")[0] == pytest.approx(min(scores))
    with pytest.raises(ParameterError):
        step_grid(inst, "newton")


def test_baseline_trace_columns_match_dean():
    from dean.core import StopRule, SurrogateFamily, run, uniform_alpha

    inst = make_quadratic_instance(4, 2, 0)
    a = extra_run(inst, metropolis_weights(inst.graph), 0.1, 3)
    b = run(inst, SurrogateFamily.identity(inst.graph), uniform_alpha(inst.graph, 0.1), 3, StopRule.never())
    assert a.records[0].keys() == b.records[0].keys()
    assert a.algo == "extra"
    np.testing.assert_array_equal(a.states[0], b.states[0])


def test_dean_step_grid_scales_with_surrogate_curvature():
    from dean.core import SurrogateFamily

    inst = make_quadratic_instance(5, 2, 0)
    plain = step_grid(inst, "dean", points=5)
    np.testing.assert_allclose(step_grid(inst, "dean", points=5, surrogates=SurrogateFamily.identity(inst.graph)), plain)
    es = step_grid(inst, "dean", points=5, surrogates=SurrogateFamily.endpoint_sum(inst))
    top = max(np.linalg.eigvalsh(inst.objectives[i].B + inst.objectives[j].B)[-1] for i, j in inst.graph.edges)
    np.testing.assert_allclose(es, plain / top, rtol=1e-12)
