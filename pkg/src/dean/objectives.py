"""Node objective functions and problem instances.

Two families are provided: positive-definite quadratics
``f(x) = (x - b)^T B (x - b) / 2`` and unregularised logistic losses
``f(x) = sum_j log(1 + exp(-v_j u_j^T x))``.  Both expose value, gradient and
Hessian, plus batched Hessians used by the constant estimators.
"""

from __future__ import annotations

import json
import logging
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import linalg as sla
from scipy.optimize import linprog
from scipy.special import expit

from .errors import ConvergenceError, DomainError, ParameterError, StructuralError
from .topology import Graph, random_connected_graph

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-10


def _check_point(x, n):
    x = np.asarray(x, dtype=float)
    if x.shape != (n,):
        raise DomainError(f"expected a point of shape ({n},), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise DomainError("query point has non-finite entries")
    return x


class Objective:
    """Interface shared by both families."""

    dim: int
    family: str

    def value(self, x) -> float:
        raise NotImplementedError

    def grad(self, x) -> np.ndarray:
        raise NotImplementedError

    def hess(self, x) -> np.ndarray:
        raise NotImplementedError

    def hess_batch(self, X) -> np.ndarray:
        return np.stack([self.hess(x) for x in X])

    def to_payload(self) -> dict:
        raise NotImplementedError


class QuadraticObjective(Objective):
    family = "quadratic"

    def __init__(self, B, b):
        B = np.array(B, dtype=float, ndmin=2)
        b = np.array(b, dtype=float, ndmin=1)
        n = b.shape[0]
        if B.shape != (n, n):
            raise StructuralError(f"B has shape {B.shape}, expected ({n}, {n})")
        if not np.array_equal(B, B.T):
            raise StructuralError("B must be symmetric")
        eig = np.linalg.eigvalsh(B)
        if eig[0] <= 0:
            raise StructuralError(f"B must be positive definite (lambda_min = {eig[0]:.3g})")
        self.B, self.b, self.dim = B, b, n
        self.B.setflags(write=False)
        self.b.setflags(write=False)
        self.eig_min, self.eig_max = float(eig[0]), float(eig[-1])

    def value(self, x):
        d = _check_point(x, self.dim) - self.b
        return 0.5 * float(d @ self.B @ d)

    def grad(self, x):
        return self.B @ (_check_point(x, self.dim) - self.b)

    def hess(self, x):
        _check_point(x, self.dim)
        return self.B.copy()

    def hess_batch(self, X):
        return np.broadcast_to(self.B, (len(X), self.dim, self.dim)).copy()

    def minimizer(self):
        return self.b.copy()

    def to_payload(self):
        return {"B": self.B.tolist(), "b": self.b.tolist()}

    def __repr__(self):
        return f"QuadraticObjective(dim={self.dim}, eig=[{self.eig_min:.3g}, {self.eig_max:.3g}])"


class LogisticObjective(Objective):
    family = "logistic"

    def __init__(self, U, v):
        U = np.array(U, dtype=float, ndmin=2)
        v = np.array(v, dtype=float, ndmin=1)
        if U.shape[0] != v.shape[0]:
            raise StructuralError(f"{U.shape[0]} feature rows but {v.shape[0]} labels")
        if not np.all(np.isin(v, (-1.0, 1.0))):
            raise StructuralError("labels must be -1 or +1")
        self.U, self.v = U, v
        self.U.setflags(write=False)
        self.v.setflags(write=False)
        self.dim = U.shape[1]
        # rows scaled by label: margin_j = V_j . x
        self._VU = v[:, None] * U

    @property
    def n_samples(self):
        return self.U.shape[0]

    def value(self, x):
        z = self._VU @ _check_point(x, self.dim)
        # log(1 + e^{-z}) = max(-z, 0) + log(1 + e^{-|z|})
        return float(np.sum(np.logaddexp(0.0, -z)))

    def grad(self, x):
        z = self._VU @ _check_point(x, self.dim)
        return -self._VU.T @ expit(-z)

    def hess(self, x):
        z = self._VU @ _check_point(x, self.dim)
        w = expit(z) * expit(-z)
        H = (self.U.T * w) @ self.U
        return 0.5 * (H + H.T)

    def hess_batch(self, X):
        X = np.asarray(X, dtype=float)
        e = np.exp(-np.abs(X @ self._VU.T))
        w = e / (1.0 + e) ** 2
        H = (self.U.T * w[:, None, :]) @ self.U
        return 0.5 * (H + np.swapaxes(H, 1, 2))

    def hessian_cap(self) -> float:
        """Global bound on the Hessian norm, ``lambda_max(sum u u^T) / 4``."""
        return 0.25 * float(np.linalg.eigvalsh(self.U.T @ self.U)[-1])

    @cached_property
    def separable(self) -> bool:
        """True when some x gives every sample a strictly positive margin.

        Separable data has no minimiser: the loss decreases to zero along the
        separating direction.
        """
        m = self.n_samples
        res = linprog(
            c=np.zeros(self.dim),
            A_ub=-self._VU,
            b_ub=-np.ones(m),
            bounds=[(None, None)] * self.dim,
            method="highs",
        )
        return res.status == 0

    def to_payload(self):
        return {"u": self.U.tolist(), "v": self.v.astype(int).tolist()}

    def __repr__(self):
        return f"LogisticObjective(dim={self.dim}, samples={self.n_samples})"


def objective_from_payload(family: str, payload: dict) -> Objective:
    if family == "quadratic":
        return QuadraticObjective(payload["B"], payload["b"])
    if family == "logistic":
        return LogisticObjective(payload["u"], payload["v"])
    raise StructuralError(f"unknown objective family {family!r}")


def _spd_solve(H, g):
    c = sla.cho_factor(H, lower=True, check_finite=False)
    return sla.cho_solve(c, g, check_finite=False)


def damped_newton(value, grad, hess, x0, tol=DEFAULT_TOL, max_iter=100, step_tol=1e-6, what="objective"):
    """Newton's method with Armijo backtracking.

    Converged means ``||grad|| <= tol`` *and* a Newton step shorter than
    ``step_tol * (1 + ||x||)``.  The second test rejects functions without a
    minimiser (e.g. separable logistic data), where the gradient decays to
    zero but the Newton step never shrinks.
    """
    if tol <= 0:
        raise ParameterError(f"tol must be positive, got {tol}")
    x = np.array(x0, dtype=float)
    fx = value(x)
    gnorm = float("inf")
    for it in range(max_iter + 1):
        g = grad(x)
        gnorm = float(np.linalg.norm(g))
        if not np.isfinite(gnorm):
            raise ConvergenceError(f"{what}: non-finite gradient", gnorm, it)
        try:
            d = -_spd_solve(hess(x), g)
        except np.linalg.LinAlgError:
            raise ConvergenceError(f"{what}: Hessian lost positive definiteness at iteration {it}", gnorm, it) from None
        dnorm = float(np.linalg.norm(d))
        if gnorm <= tol and dnorm <= step_tol * (1.0 + float(np.linalg.norm(x))):
            return x
        if it == max_iter:
            break
        slope = float(g @ d)
        t = 1.0
        noise = 16 * np.finfo(float).eps * max(1.0, abs(fx))
        while True:
            xn = x + t * d
            fn = value(xn)
            if fn <= fx + 1e-4 * t * slope + noise:
                break
            t *= 0.5
            if t < 1e-12:
                raise ConvergenceError(f"{what}: line search stalled at ||grad||={gnorm:.3e}", gnorm, it)
        x, fx = xn, fn
    raise ConvergenceError(
        f"{what}: no convergence after {max_iter} Newton iterations (||grad||={gnorm:.3e})", gnorm, max_iter
    )


def local_minimizer(f: Objective, tol: float = DEFAULT_TOL, max_iter: int = 100, x0=None) -> np.ndarray:
    """Minimiser of one node objective (closed form for quadratics)."""
    if tol <= 0:
        raise ParameterError(f"tol must be positive, got {tol}")
    if isinstance(f, QuadraticObjective):
        return f.minimizer()
    start = np.zeros(f.dim) if x0 is None else x0
    return damped_newton(f.value, f.grad, f.hess, start, tol=tol, max_iter=max_iter, what=repr(f))


def centralized_optimum(objs, tol: float = DEFAULT_TOL, max_iter: int = 200, x0=None) -> np.ndarray:
    """Minimiser of ``sum_i f_i`` by damped Newton on the sum."""
    objs = list(objs)
    if all(isinstance(f, QuadraticObjective) for f in objs):
        B = sum(f.B for f in objs)
        return _spd_solve(B, sum(f.B @ f.b for f in objs))
    n = objs[0].dim
    start = np.zeros(n) if x0 is None else x0
    return damped_newton(
        lambda x: sum(f.value(x) for f in objs),
        lambda x: sum(f.grad(x) for f in objs),
        lambda x: sum(f.hess(x) for f in objs),
        start,
        tol=tol,
        max_iter=max_iter,
        what="sum of objectives",
    )


class ProblemInstance:
    """A graph plus one objective per node; optimum and local minimisers are cached."""

    def __init__(self, graph: Graph, objectives, seed=None, params=None, tol: float = DEFAULT_TOL):
        objectives = list(objectives)
        if len(objectives) != graph.n_nodes:
            raise StructuralError(f"{len(objectives)} objectives for {graph.n_nodes} nodes")
        dims = {f.dim for f in objectives}
        if len(dims) != 1:
            raise StructuralError(f"objectives disagree on dimension: {sorted(dims)}")
        self.graph = graph
        self.objectives = tuple(objectives)
        self.dim = dims.pop()
        self.seed = seed
        self.params = dict(params or {})
        self.tol = tol
        self._margin_cache = None

    @property
    def n_nodes(self):
        return self.graph.n_nodes

    @property
    def family(self) -> str:
        fams = {f.family for f in self.objectives}
        return fams.pop() if len(fams) == 1 else "mixed"

    @property
    def is_quadratic(self) -> bool:
        return all(isinstance(f, QuadraticObjective) for f in self.objectives)

    @cached_property
    def x_star(self) -> np.ndarray:
        x = centralized_optimum(self.objectives, tol=self.tol, x0=self.local_minimizers.mean(axis=0))
        x.setflags(write=False)
        return x

    @cached_property
    def local_minimizers(self) -> np.ndarray:
        X = np.stack([local_minimizer(f, tol=self.tol) for f in self.objectives])
        X.setflags(write=False)
        return X

    @cached_property
    def scale(self) -> float:
        """Typical gradient magnitude: ``max(1, max_i ||grad f_i(x*)||)``."""
        return max(1.0, max(float(np.linalg.norm(f.grad(self.x_star))) for f in self.objectives))

    @cached_property
    def _stacked(self):
        # dense per-node arrays for the vectorised paths; None when nodes differ in shape
        objs = self.objectives
        if self.is_quadratic:
            return "quadratic", np.stack([f.B for f in objs]), np.stack([f.b for f in objs])
        if all(isinstance(f, LogisticObjective) for f in objs) and len({f.n_samples for f in objs}) == 1:
            return "logistic", np.stack([f._VU for f in objs]), np.stack([f.U for f in objs])
        return None

    def _margins(self, X):
        """``(z, exp(-|z|))`` with ``z[k, m] = v_km u_km^T X[k]`` for stacked logistic nodes.

        Loss, sigmoid and Hessian weights are all cheap, stable functions of
        these two arrays.  The last result is cached since a DEAN round asks
        for values, gradients and Hessians at the same point.
        """
        key = X.tobytes()
        hit = self._margin_cache
        if hit is not None and hit[0] == key:
            return hit[1], hit[2]
        z = (self._stacked[1] @ X[:, :, None])[:, :, 0]
        e = np.exp(-np.abs(z))
        self._margin_cache = (key, z, e)  # single assignment keeps concurrent readers consistent
        return z, e

    def _check_stack(self, X):
        X = np.asarray(X, dtype=float)
        if X.shape != (self.n_nodes, self.dim):
            raise DomainError(f"expected points of shape ({self.n_nodes}, {self.dim}), got {X.shape}")
        if not np.all(np.isfinite(X)):
            raise DomainError("query points have non-finite entries")
        return X

    def grads(self, X) -> np.ndarray:
        """Row ``i`` is ``grad f_i(X[i])``."""
        st = self._stacked
        if st is None:
            return np.stack([f.grad(x) for f, x in zip(self.objectives, X)])
        X = self._check_stack(X)
        if st[0] == "quadratic":
            return np.einsum("kij,kj->ki", st[1], X - st[2])
        z, e = self._margins(X)
        s = np.where(z >= 0, e, 1.0) / (1.0 + e)  # sigmoid(-z)
        return -(np.swapaxes(st[1], 1, 2) @ s[:, :, None])[:, :, 0]

    def hessians(self, X) -> np.ndarray:
        st = self._stacked
        if st is None:
            return np.stack([f.hess(x) for f, x in zip(self.objectives, X)])
        X = self._check_stack(X)
        if st[0] == "quadratic":
            return st[1].copy()
        U = st[2]
        _, e = self._margins(X)
        w = e / (1.0 + e) ** 2  # sigmoid(z) sigmoid(-z)
        H = np.swapaxes(U * w[:, :, None], 1, 2) @ U
        return 0.5 * (H + np.swapaxes(H, 1, 2))

    def values(self, X) -> np.ndarray:
        st = self._stacked
        if st is None:
            return np.array([f.value(x) for f, x in zip(self.objectives, X)])
        X = self._check_stack(X)
        if st[0] == "quadratic":
            d = X - st[2]
            return 0.5 * np.einsum("ki,kij,kj->k", d, st[1], d)
        z, e = self._margins(X)
        return (np.maximum(-z, 0.0) + np.log1p(e)).sum(axis=1)

    @cached_property
    def values_at_optimum(self) -> np.ndarray:
        """``f_i(x*)`` for every node."""
        v = np.array([f.value(self.x_star) for f in self.objectives])
        v.setflags(write=False)
        return v

    def fingerprint(self) -> str:
        return self._fingerprint

    @cached_property
    def _fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        h.update(json.dumps(self.to_json_dict(), sort_keys=True).encode())
        h.update(json.dumps(self.graph.edges).encode())
        return h.hexdigest()[:16]

    def to_json_dict(self) -> dict:
        return {
            "n": self.dim,
            "N": self.n_nodes,
            "family": self.family,
            "seed": self.seed,
            "params": self.params,
            "nodes": [f.to_payload() for f in self.objectives],
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=1) + "\n")

    @classmethod
    def from_json_dict(cls, data: dict, graph: Graph) -> "ProblemInstance":
        fam = data["family"]
        objs = [objective_from_payload(p.get("family", fam), p) for p in data["nodes"]]
        inst = cls(graph, objs, seed=data.get("seed"), params=data.get("params"))
        if inst.dim != data["n"]:
            raise StructuralError(f"instance declares n={data['n']} but payload has dimension {inst.dim}")
        return inst

    @classmethod
    def load(cls, path, graph: Graph) -> "ProblemInstance":
        return cls.from_json_dict(json.loads(Path(path).read_text()), graph)

    def __repr__(self):
        return f"ProblemInstance(N={self.n_nodes}, n={self.dim}, family={self.family!r}, seed={self.seed})"


def _default_graph(N, seed):
    return random_connected_graph(N, min(4, N - 1), seed)


def make_logistic_instance(
    N: int,
    n: int,
    seed: int,
    *,
    graph: Graph | None = None,
    mean: float = 10.0,
    std: float = 1.0,
    samples_per_class: int | None = None,
) -> ProblemInstance:
    """Synthetic logistic-regression instance.

    Each node gets ``samples_per_class`` samples of each label (default ``n``,
    i.e. ``m = 2n`` samples).  The first ``n-1`` features are drawn from
    ``N(+mean, std^2)`` for label +1 and ``N(-mean, std^2)`` for label -1; the
    last feature is the constant 1.

    With the default ``mean=10`` almost every draw is linearly separable, so
    node minimisers do not exist; check ``LogisticObjective.separable``.
    """
    if N < 2:
        raise ParameterError(f"need N >= 2, got {N}")
    if n < 2:
        raise ParameterError(f"need n >= 2, got {n}")
    if std <= 0:
        raise ParameterError(f"std must be positive, got {std}")
    k = n if samples_per_class is None else int(samples_per_class)
    if k < 1:
        raise ParameterError(f"samples_per_class must be positive, got {k}")
    if graph is None:
        graph = _default_graph(N, seed)
    elif graph.n_nodes != N:
        raise StructuralError(f"graph has {graph.n_nodes} nodes, expected {N}")
    rng = np.random.default_rng([seed, 1])
    objs = []
    for _ in range(N):
        pos = rng.normal(mean, std, size=(k, n - 1))
        neg = rng.normal(-mean, std, size=(k, n - 1))
        U = np.hstack([np.vstack([pos, neg]), np.ones((2 * k, 1))])
        v = np.concatenate([np.ones(k), -np.ones(k)])
        objs.append(LogisticObjective(U, v))
    params = {"mean": mean, "std": std, "samples_per_class": k}
    return ProblemInstance(graph, objs, seed=seed, params=params)


def random_spd(n: int, rng: np.random.Generator, eig_range=(1.0, 2.0)) -> np.ndarray:
    """Random symmetric matrix with eigenvalues uniform in ``eig_range``."""
    lo, hi = eig_range
    Q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    eig = rng.uniform(lo, hi, size=n)
    A = (Q * eig) @ Q.T
    return 0.5 * (A + A.T)


def make_quadratic_instance(
    N: int,
    n: int,
    seed: int,
    *,
    graph: Graph | None = None,
    eig_range=(1.0, 2.0),
    b_scale: float = 1.0,
) -> ProblemInstance:
    """Random quadratic instance: ``B_i`` with spectrum in ``eig_range``, ``b_i ~ N(0, b_scale^2)``."""
    if N < 2 or n < 1:
        raise ParameterError(f"need N >= 2 and n >= 1, got N={N}, n={n}")
    if not 0 < eig_range[0] <= eig_range[1]:
        raise ParameterError(f"bad eigenvalue range {eig_range}")
    if graph is None:
        graph = _default_graph(N, seed)
    elif graph.n_nodes != N:
        raise StructuralError(f"graph has {graph.n_nodes} nodes, expected {N}")
    rng = np.random.default_rng([seed, 2])
    objs = [QuadraticObjective(random_spd(n, rng, eig_range), rng.normal(0.0, b_scale, size=n)) for _ in range(N)]
    params = {"eig_range": list(eig_range), "b_scale": b_scale}
    return ProblemInstance(graph, objs, seed=seed, params=params)


OVERLAP_MEAN = 0.2
OVERLAP_SAMPLES_FACTOR = 100


def make_overlapping_logistic_instance(
    N: int,
    n: int,
    seed: int,
    *,
    graph: Graph | None = None,
    samples_factor: int = OVERLAP_SAMPLES_FACTOR,
    max_redraws: int = 50,
) -> ProblemInstance:
    """Logistic instance whose node data are guaranteed non-separable.

    Class means are ``+-0.2`` and each node holds ``samples_factor * n`` samples
    per class.  Plenty of samples keeps every node minimiser close to the
    global one, so the curvature constants on the analysis sets stay positive.
    A draw with a separable node is replaced by the next sub-seed; the
    sub-seed used is stored in ``params['draw_seed']``.
    """
    if samples_factor < 1:
        raise ParameterError(f"samples_factor must be positive, got {samples_factor}")
    if graph is None:
        graph = _default_graph(N, seed)
    for redraw in range(max_redraws):
        sub = seed if redraw == 0 else seed * 1000 + redraw
        inst = make_logistic_instance(N, n, sub, graph=graph, mean=OVERLAP_MEAN, samples_per_class=samples_factor * n)
        if not any(f.separable for f in inst.objectives):
            inst.seed = seed
            inst.params["draw_seed"] = sub
            return inst
    raise ParameterError(f"no non-separable draw found in {max_redraws} attempts")
