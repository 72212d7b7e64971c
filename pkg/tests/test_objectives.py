import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dean.errors import ConvergenceError, DomainError, ParameterError
from dean.objectives import (
    LogisticObjective,
    ProblemInstance,
    QuadraticObjective,
    centralized_optimum,
    local_minimizer,
    make_logistic_instance,
    make_overlapping_logistic_instance,
    make_quadratic_instance,
    random_spd,
)
from dean.topology import Graph

from .oracles import bisect, fd_grad, fd_hess


def _logistic_1d(pairs):
    return LogisticObjective([[u] for u, _ in pairs], [v for _, v in pairs])


def test_quadratic_value_grad_hess_example():
    f = QuadraticObjective(np.eye(2), [0.0, 0.0])
    x = np.array([3.0, 4.0])
    assert f.value(x) == 12.5
    np.testing.assert_array_equal(f.grad(x), [3.0, 4.0])
    np.testing.assert_array_equal(f.hess(x), np.eye(2))


def test_logistic_single_sample_at_origin():
    n = 4
    u = np.zeros(n)
    u[-1] = 1.0
    f = LogisticObjective([u], [1])
    assert f.value(np.zeros(n)) == pytest.approx(math.log(2), abs=1e-15)
    np.testing.assert_allclose(f.grad(np.zeros(n)), -u / 2, atol=1e-15)


def test_logistic_value_is_overflow_safe():
    f = _logistic_1d([(1.0, 1)])
    assert f.value(np.array([-800.0])) == pytest.approx(800.0)
    assert f.value(np.array([800.0])) == pytest.approx(0.0, abs=1e-300)
    assert np.all(np.isfinite(f.grad(np.array([-800.0]))))


def test_logistic_last_feature_must_be_one_for_generated_data():
    inst = make_logistic_instance(20, 10, 1)
    assert len(inst.objectives) == 20
    for f in inst.objectives:
        assert f.n_samples == 20
        assert np.all(f.U[:, -1] == 1.0)
        assert np.sum(f.v == 1) == np.sum(f.v == -1) == 10
    inst30 = make_logistic_instance(20, 30, 1)
    assert all(f.n_samples == 60 for f in inst30.objectives)


def test_logistic_generation_is_seeded():
    a = make_logistic_instance(5, 3, 9)
    b = make_logistic_instance(5, 3, 9)
    assert a.fingerprint() == b.fingerprint()
    assert a.fingerprint() != make_logistic_instance(5, 3, 10).fingerprint()


def test_logistic_generation_rejects_bad_dims():
    with pytest.raises(ParameterError):
        make_logistic_instance(1, 3, 0)
    with pytest.raises(ParameterError):
        make_logistic_instance(3, 1, 0)


def test_non_finite_input_is_domain_error():
    f = QuadraticObjective(np.eye(2), [0.0, 0.0])
    with pytest.raises(DomainError):
        f.value(np.array([np.nan, 0.0]))
    g = _logistic_1d([(1.0, 1), (1.0, -1)])
    with pytest.raises(DomainError):
        g.grad(np.array([np.inf]))
    with pytest.raises(DomainError):
        g.hess(np.zeros(2))


def test_quadratic_minimizer_is_exact():
    f = QuadraticObjective(np.eye(2), [2.0, -1.0])
    np.testing.assert_array_equal(local_minimizer(f), [2.0, -1.0])


def test_one_sample_logistic_has_no_minimizer():
    f = _logistic_1d([(1.0, 1)])
    # oracle: the scalar gradient -1/(1+e^x) is negative everywhere
    xs = np.linspace(-50, 50, 101)
    assert all(f.grad(np.array([x]))[0] < 0 for x in xs)
    with pytest.raises(ConvergenceError) as exc:
        local_minimizer(f)
    assert exc.value.grad_norm >= 0


def test_balanced_logistic_minimizer_is_zero():
    f = _logistic_1d([(1.0, 1), (1.0, -1)])
    x = local_minimizer(f)
    root = bisect(lambda t: f.grad(np.array([t]))[0], -5.0, 5.0)
    assert abs(root) < 1e-12
    assert x[0] == pytest.approx(root, abs=1e-10)


def test_centralized_optimum_examples():
    a = QuadraticObjective([[1.0]], [0.0])
    b = QuadraticObjective([[1.0]], [2.0])
    assert centralized_optimum([a, b])[0] == pytest.approx(1.0, abs=1e-14)
    c = QuadraticObjective([[1.0]], [0.0])
    d = QuadraticObjective([[3.0]], [4.0])
    root = bisect(lambda t: 1.0 * t + 3.0 * (t - 4.0), -10.0, 10.0)
    assert root == pytest.approx(3.0, abs=1e-12)
    assert centralized_optimum([c, d])[0] == pytest.approx(root, abs=1e-12)


def test_logistic_instance_optimum_stationary():
    inst = make_overlapping_logistic_instance(5, 3, 2)
    gsum = inst.grads(np.tile(inst.x_star, (5, 1))).sum(axis=0)
    assert np.linalg.norm(gsum) <= 1e-10
    for i, f in enumerate(inst.objectives):
        assert np.linalg.norm(f.grad(inst.local_minimizers[i])) <= 1e-10


def test_overlapping_instances_are_non_separable():
    inst = make_overlapping_logistic_instance(4, 2, 5)
    assert not any(f.separable for f in inst.objectives)
    assert inst.params["draw_seed"] >= 5


@pytest.mark.xfail(strict=True, raises=ConvergenceError, reason="mean-10 data are linearly separable, no minimiser exists")
def test_paper_recipe_logistic_has_strongly_convex_optimum():
    inst = make_logistic_instance(20, 10, 1)
    assert any(f.separable for f in inst.objectives)
    H = sum(f.hess(inst.x_star) for f in inst.objectives)
    assert np.linalg.eigvalsh(H)[0] > 0


def _random_points(rng, n, k, scale):
    return rng.normal(0.0, scale, size=(k, n))


@pytest.mark.parametrize("family", ["quadratic", "logistic"])
def test_finite_difference_gradient_and_hessian(family):
    rng = np.random.default_rng(7)
    n = 4
    if family == "quadratic":
        f = QuadraticObjective(random_spd(n, rng, (0.5, 3.0)), rng.normal(size=n))
    else:
        f = make_overlapping_logistic_instance(2, n, 3, samples_factor=5).objectives[0]
    for x in _random_points(rng, n, 100, 1.0):
        g = f.grad(x)
        g_fd = fd_grad(f.value, x, h=1e-6)
        assert np.linalg.norm(g - g_fd) <= 1e-6 * max(np.linalg.norm(g), 1.0)
        H = f.hess(x)
        H_fd = fd_hess(f.grad, x, h=1e-5)
        assert np.linalg.norm(H - H_fd) <= 1e-5 * max(np.linalg.norm(H), 1.0)
        assert np.array_equal(H, H.T)


@given(seed=st.integers(0, 10_000), n=st.integers(1, 6))
def test_logistic_hessian_psd_and_capped(seed, n):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(1, 12))
    U = np.hstack([rng.normal(size=(m, n - 1)), np.ones((m, 1))])
    v = rng.choice([-1.0, 1.0], size=m)
    f = LogisticObjective(U, v)
    x = rng.normal(0.0, 3.0, size=n)
    H = f.hess(x)
    lam = np.linalg.eigvalsh(H)
    assert lam[0] >= -1e-10
    assert lam[-1] <= f.hessian_cap() * (1 + 1e-12) + 1e-12
    np.testing.assert_allclose(f.hess_batch(x[None, :])[0], H, rtol=1e-12, atol=1e-14)


@given(seed=st.integers(0, 10_000))
def test_instance_batched_evaluation_matches_objectives(seed):
    rng = np.random.default_rng(seed)
    inst = make_overlapping_logistic_instance(3, 2, seed % 50, samples_factor=3) if seed % 2 else make_quadratic_instance(3, 2, seed)
    X = rng.normal(size=(3, 2))
    for i, f in enumerate(inst.objectives):
        np.testing.assert_allclose(inst.grads(X)[i], f.grad(X[i]), rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(inst.hessians(X)[i], f.hess(X[i]), rtol=1e-12, atol=1e-12)
        assert inst.values(X)[i] == pytest.approx(f.value(X[i]), rel=1e-12, abs=1e-12)


def test_quadratic_instance_invariants():
    inst = make_quadratic_instance(6, 3, 4)
    np.testing.assert_array_equal(inst.local_minimizers, np.stack([f.b for f in inst.objectives]))
    gsum = inst.grads(np.tile(inst.x_star, (6, 1))).sum(axis=0)
    assert np.linalg.norm(gsum) <= 1e-12 * inst.scale
    for f in inst.objectives:
        lam = np.linalg.eigvalsh(f.B)
        assert 1.0 <= lam[0] and lam[-1] <= 2.0


@pytest.mark.parametrize("maker", [make_quadratic_instance, make_logistic_instance])
def test_instance_json_round_trip(tmp_path, maker):
    inst = maker(4, 3, 11)
    p = tmp_path / "inst.json"
    inst.save(p)
    back = ProblemInstance.load(p, inst.graph)
    assert back.fingerprint() == inst.fingerprint()
    assert back.family == inst.family
    assert back.seed == 11
    X = np.random.default_rng(0).normal(size=(4, 3))
    np.testing.assert_array_equal(back.grads(X), inst.grads(X))


def test_instance_rejects_mismatched_graph():
    from dean.errors import StructuralError

    objs = [QuadraticObjective(np.eye(2), np.zeros(2)) for _ in range(3)]
    with pytest.raises(StructuralError):
        ProblemInstance(Graph.path(2), objs)
