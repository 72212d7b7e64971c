import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dean.core import (
    NetworkState,
    RunTrace,
    StopRule,
    SurrogateFamily,
    centralized_newton_step,
    consensus_error,
    dean_init,
    dean_step,
    linear_consensus_step,
    lyapunov_value,
    run,
    run_reference,
    uniform_alpha,
)
from dean.errors import DivergenceError, DomainError, ParameterError, SingularHessianError, StructuralError
from dean.objectives import (
    LogisticObjective,
    ProblemInstance,
    QuadraticObjective,
    make_overlapping_logistic_instance,
    make_quadratic_instance,
)
from dean.topology import EdgeWeights, Graph, laplacian, random_connected_graph

from .oracles import dense_laplacian


def test_init_is_local_minimizers(k2_instance):
    s = dean_init(k2_instance)
    np.testing.assert_array_equal(s.x, [[0.0], [2.0]])
    assert s.k == 0


def test_quadratic_init_gradient_sum_is_exactly_zero():
    inst = make_quadratic_instance(7, 3, 2)
    s = dean_init(inst)
    assert np.all(inst.grads(s.x) == 0.0)


def test_logistic_init_gradient_sum_small():
    inst = make_overlapping_logistic_instance(20, 10, 1)
    s = dean_init(inst, tol=1e-10)
    assert np.linalg.norm(inst.grads(s.x).sum(axis=0)) <= 1e-8


def test_dean_step_k2_example(k2_instance):
    g = SurrogateFamily.identity(k2_instance.graph)
    s = dean_step(dean_init(k2_instance), k2_instance, g, uniform_alpha(k2_instance.graph, 0.5))
    np.testing.assert_array_equal(s.x, [[1.0], [1.0]])
    assert s.k == 1


@pytest.mark.parametrize("surrogate", ["identity", "spd", "endpoint-sum"])
def test_consensus_state_is_fixed_point(surrogate):
    inst = make_overlapping_logistic_instance(5, 3, 4, samples_factor=5)
    g = SurrogateFamily.from_name(surrogate, inst, seed=1)
    c = np.array([0.3, -0.2, 0.1])
    s = NetworkState(np.tile(c, (5, 1)), 3)
    out = dean_step(s, inst, g, uniform_alpha(inst.graph, 0.7))
    np.testing.assert_array_equal(out.x, s.x)
    assert out.k == 4


def test_identity_surrogate_on_unit_quadratics_is_linear_consensus():
    rng = np.random.default_rng(0)
    graph = random_connected_graph(8, 3, 2)
    inst = ProblemInstance(graph, [QuadraticObjective(np.eye(3), rng.normal(size=3)) for _ in range(8)])
    g = SurrogateFamily.identity(graph)
    L = laplacian(graph)
    s = NetworkState(rng.normal(size=(8, 3)))
    for _ in range(20):
        a = dean_step(s, inst, g, uniform_alpha(graph, 0.2))
        b = linear_consensus_step(s, L, 0.2)
        assert np.array_equal(a.x, b.x)
        s = a


def test_dean_step_matches_dense_formula():
    rng = np.random.default_rng(3)
    inst = make_quadratic_instance(5, 2, 8)
    g = SurrogateFamily.from_name("spd", inst, seed=2)
    alpha = EdgeWeights.from_array(inst.graph, rng.uniform(0.05, 0.2, inst.graph.n_edges))
    x = rng.normal(size=(5, 2))
    out = dean_step(NetworkState(x), inst, g, alpha).x
    for i in range(5):
        acc = np.zeros(2)
        for j in inst.graph.neighbors[i]:
            A = g[(i, j)].A
            acc += alpha.get(i, j) * (A @ x[j] - A @ x[i])
        np.testing.assert_allclose(out[i], x[i] + np.linalg.solve(inst.objectives[i].B, acc), rtol=1e-12, atol=1e-14)


def test_linear_consensus_examples():
    L = laplacian(Graph.path(2))
    s = linear_consensus_step(NetworkState(np.array([[0.0], [2.0]])), L, 0.5)
    np.testing.assert_array_equal(s.x, [[1.0], [1.0]])
    c = NetworkState(np.full((2, 1), 4.0))
    np.testing.assert_array_equal(linear_consensus_step(c, L, 0.5).x, c.x)


def test_linear_consensus_rejects_large_step():
    L = laplacian(Graph.path(3))
    with pytest.raises(ParameterError):
        linear_consensus_step(NetworkState(np.zeros((3, 1))), L, 0.6)
    with pytest.warns(UserWarning):
        linear_consensus_step(NetworkState(np.zeros((3, 1))), L, 0.6, warn_only=True)


@given(seed=st.integers(0, 10_000), N=st.integers(2, 10))
def test_linear_consensus_preserves_mean(seed, N):
    rng = np.random.default_rng(seed)
    g = random_connected_graph(N, min(3.0, N - 1), seed)
    L = laplacian(g)
    x = rng.normal(size=(N, 2))
    a = 0.99 / L.diagonal().max()
    out = linear_consensus_step(NetworkState(x), L, a).x
    assert np.max(np.abs(out.mean(axis=0) - x.mean(axis=0))) <= 1e-12
    np.testing.assert_allclose(out, x - a * dense_laplacian(N, g.edges) @ x, atol=1e-13)


def test_newton_step_examples():
    inst = make_quadratic_instance(4, 2, 1)
    s0 = dean_init(inst)
    np.testing.assert_array_equal(centralized_newton_step(s0, inst, 1.0).x, s0.x)
    x = np.random.default_rng(1).normal(size=(4, 2))
    out = centralized_newton_step(NetworkState(x), inst, 1.0).x
    np.testing.assert_allclose(out, inst.local_minimizers, atol=1e-12)
    tr = run_reference(inst, "newton", 0.5, 30)
    assert tr.column("consensus_err")[-1] > 1e-3


def test_singular_hessian_names_node():
    # node 1 has a single sample: its Hessian has rank one in 2-D
    g = Graph.path(2)
    f0 = QuadraticObjective(np.eye(2), np.zeros(2))
    f1 = LogisticObjective([[1.0, 1.0]], [1])
    inst = ProblemInstance(g, [f0, f1])
    s = NetworkState(np.zeros((2, 2)))
    with pytest.raises(SingularHessianError) as exc:
        dean_step(s, inst, SurrogateFamily.identity(g), uniform_alpha(g, 0.1))
    assert exc.value.node == 1
    assert "node 1" in str(exc.value)


def test_state_rejects_non_finite_and_wrong_shape(k2_instance):
    with pytest.raises(DivergenceError):
        NetworkState(np.array([[np.nan], [0.0]]))
    g = SurrogateFamily.identity(k2_instance.graph)
    with pytest.raises((DomainError, StructuralError)):
        dean_step(NetworkState(np.zeros((3, 1))), k2_instance, g, uniform_alpha(k2_instance.graph, 0.1))


def test_surrogate_family_must_cover_every_edge():
    g = Graph.path(3)
    with pytest.raises(StructuralError):
        SurrogateFamily(g, {(0, 1): SurrogateFamily.identity(g)[(0, 1)]})


def test_run_k2_stops_after_one_step(k2_instance):
    t = run(k2_instance, SurrogateFamily.identity(k2_instance.graph), uniform_alpha(k2_instance.graph, 0.5), 50)
    assert len(t) == 2
    assert t.records[-1]["k"] == 1
    assert t.records[-1]["consensus_err"] == 0.0
    assert t.status == "converged"


def test_run_max_iters_zero_gives_single_record(k2_instance):
    t = run(k2_instance, SurrogateFamily.identity(k2_instance.graph), uniform_alpha(k2_instance.graph, 0.5), 0)
    assert len(t) == 1
    assert t.records[0]["k"] == 0


def test_run_records_messages_and_hash():
    inst = make_quadratic_instance(6, 2, 3)
    g = SurrogateFamily.identity(inst.graph)
    t = run(inst, g, uniform_alpha(inst.graph, 0.1), 5, StopRule.never())
    assert t.messages_per_iter == 2 * inst.graph.n_edges
    assert len(t) == 6 and len(t.states) == 6
    t2 = run(inst, g, uniform_alpha(inst.graph, 0.1), 5, StopRule.never())
    assert t.config_hash == t2.config_hash
    assert t.config_hash != run(inst, g, uniform_alpha(inst.graph, 0.2), 1).config_hash


def test_lyapunov_and_error_examples(k2_instance):
    x = np.array([[0.0], [2.0]])
    assert lyapunov_value(k2_instance, x) == pytest.approx(1.0, abs=1e-15)
    assert lyapunov_value(k2_instance, np.ones((2, 1))) == 0.0
    assert consensus_error(x) == pytest.approx(np.sqrt(2), abs=1e-15)


@given(seed=st.integers(0, 10_000))
def test_lyapunov_nonnegative(seed):
    rng = np.random.default_rng(seed)
    inst = make_quadratic_instance(4, 3, seed) if seed % 2 else make_overlapping_logistic_instance(4, 3, seed % 40, samples_factor=3)
    x = rng.normal(0.0, 2.0, size=(4, 3))
    assert lyapunov_value(inst, x) >= -1e-12


def test_permutation_equivariance():
    inst = make_overlapping_logistic_instance(6, 3, 2, samples_factor=5)
    perm = np.array([3, 0, 5, 1, 4, 2])  # new label of old node i is perm[i]
    inv = np.argsort(perm)
    graph2 = inst.graph.relabel(perm)
    inst2 = ProblemInstance(graph2, [inst.objectives[k] for k in inv])
    a_vals = np.linspace(0.01, 0.05, inst.graph.n_edges)
    alpha = EdgeWeights.from_array(inst.graph, a_vals)
    alpha2 = EdgeWeights(graph2, {(int(perm[i]), int(perm[j])): alpha.get(i, j) for i, j in inst.graph.edges})
    t1 = run(inst, SurrogateFamily.endpoint_sum(inst), alpha, 15, StopRule.never())
    t2 = run(inst2, SurrogateFamily.endpoint_sum(inst2), alpha2, 15, StopRule.never())
    for x1, x2 in zip(t1.states, t2.states):
        np.testing.assert_allclose(x2, x1[inv], rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(t1.column("V"), t2.column("V"), rtol=1e-9)


def test_quadratic_identity_conserves_weighted_gradient_sum():
    inst = make_quadratic_instance(8, 3, 6)
    t = run(inst, SurrogateFamily.identity(inst.graph), uniform_alpha(inst.graph, 0.2), 60, StopRule.never())
    for x in t.states:
        assert np.linalg.norm(inst.grads(x).sum(axis=0)) <= 1e-12 * max(1.0, inst.scale)


def test_trace_csv_round_trip(tmp_path):
    inst = make_quadratic_instance(4, 2, 1)
    t = run(inst, SurrogateFamily.identity(inst.graph), uniform_alpha(inst.graph, 0.2), 10, StopRule.never())
    p = tmp_path / "t.csv"
    t.write_csv(p, with_algo=True)
    back = RunTrace.read_csv(p)
    assert back.algo == "dean"
    for c in ("V", "e", "consensus_err", "grad_sum_norm", "dist_to_opt"):
        np.testing.assert_array_equal(back.column(c), t.column(c))


def test_run_rejects_foreign_step_sizes():
    inst = make_quadratic_instance(4, 2, 1)
    other = Graph.path(4)
    if other.edges == inst.graph.edges:
        other = Graph.complete(4)
    with pytest.raises(StructuralError):
        run(inst, SurrogateFamily.identity(inst.graph), uniform_alpha(other, 0.1), 3)
