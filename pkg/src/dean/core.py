"""The DEAN iteration and its reference special cases.

Each node ``i`` updates

    x_i <- x_i + H_i(x_i)^{-1} sum_{j in N_i} a_ij (grad g_ij(x_j) - grad g_ij(x_i))

where ``H_i`` is the Hessian of its own objective, ``g_ij`` a convex surrogate
attached to link ``{i, j}`` and ``a_ij`` a per-link step size.  All nodes read
their neighbours' round-``k`` iterates before anyone writes (synchronous rounds).
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import linalg as sla

from .errors import DivergenceError, ParameterError, SingularHessianError, StructuralError
from .objectives import Objective, ProblemInstance, local_minimizer
from .topology import EdgeWeights, Graph, edge_key

log = logging.getLogger(__name__)

SINGULAR_RTOL = 1e-12
DIVERGENCE_NORM = 1e12
CSV_COLUMNS = ("k", "V", "e", "consensus_err", "grad_sum_norm", "dist_to_opt", "wall_ms")


# -- surrogates ---------------------------------------------------------------


class IdentityQuadratic:
    """``g(x) = x^T x / 2``."""

    kind = "identity"

    def grad(self, x):
        return x

    def hess(self, x):
        return np.eye(len(x))

    def describe(self):
        return {"kind": self.kind}


class SpdQuadratic:
    """``g(x) = x^T A x / 2`` with ``A`` symmetric positive definite."""

    kind = "spd"

    def __init__(self, A):
        A = np.array(A, dtype=float, ndmin=2)
        if A.shape[0] != A.shape[1] or not np.array_equal(A, A.T):
            raise StructuralError("surrogate matrix must be square and symmetric")
        eig = np.linalg.eigvalsh(A)
        if eig[0] <= 0:
            raise StructuralError(f"surrogate matrix must be positive definite (lambda_min = {eig[0]:.3g})")
        self.A = A
        self.eig_min, self.eig_max = float(eig[0]), float(eig[-1])

    def grad(self, x):
        return self.A @ x

    def hess(self, x):
        return self.A.copy()

    def describe(self):
        return {"kind": self.kind, "A": self.A.tolist()}


class EndpointSum:
    """``g(x) = f_i(x) + f_j(x)`` for the two endpoint objectives."""

    kind = "endpoint-sum"

    def __init__(self, fi: Objective, fj: Objective):
        self.fi, self.fj = fi, fj

    def grad(self, x):
        return self.fi.grad(x) + self.fj.grad(x)

    def hess(self, x):
        return self.fi.hess(x) + self.fj.hess(x)

    def hess_batch(self, X):
        return self.fi.hess_batch(X) + self.fj.hess_batch(X)

    def describe(self):
        return {"kind": self.kind}


class SurrogateFamily:
    """One surrogate per link, shared by both endpoints."""

    def __init__(self, graph: Graph, per_edge: dict):
        canon = {}
        for (i, j), g in per_edge.items():
            key = edge_key(i, j)
            if not graph.has_edge(*key):
                raise StructuralError(f"surrogate given for non-edge {key}")
            canon[key] = g
        missing = [e for e in graph.edges if e not in canon]
        if missing:
            raise StructuralError(f"no surrogate for edge(s) {missing[:5]}")
        self.graph = graph
        self.per_edge = dict(sorted(canon.items()))

    def __getitem__(self, edge):
        return self.per_edge[edge_key(*edge)]

    @cached_property
    def directed(self):
        """``(src, dst, edge_index)`` over ordered pairs, sorted by ``src`` then ``dst``."""
        index = {e: k for k, e in enumerate(self.graph.edges)}
        pairs = [(i, j) for i, nbrs in enumerate(self.graph.neighbors) for j in nbrs]
        src = np.array([p[0] for p in pairs], dtype=int)
        dst = np.array([p[1] for p in pairs], dtype=int)
        eidx = np.array([index[edge_key(*p)] for p in pairs], dtype=int)
        return src, dst, eidx

    @cached_property
    def _spd_stack(self):
        _, _, eidx = self.directed
        mats = [self.per_edge[e].A for e in self.graph.edges]
        return np.stack(mats)[eidx]

    def grad_differences(self, x) -> np.ndarray:
        """Row ``p`` is ``grad g_ij(x_j) - grad g_ij(x_i)`` for the p-th ordered pair ``(i, j)``."""
        src, dst, _ = self.directed
        kinds = self.kinds
        if kinds == {"identity"}:
            return x[dst] - x[src]
        if kinds == {"spd"}:
            A = self._spd_stack
            return np.einsum("pij,pj->pi", A, x[dst]) - np.einsum("pij,pj->pi", A, x[src])
        out = np.empty((len(src), x.shape[1]))
        for p, (i, j) in enumerate(zip(src.tolist(), dst.tolist())):
            gij = self.per_edge[edge_key(i, j)]
            out[p] = gij.grad(x[j]) - gij.grad(x[i])
        return out

    @property
    def kinds(self) -> set[str]:
        return {g.kind for g in self.per_edge.values()}

    @property
    def all_identity(self) -> bool:
        return self.kinds == {"identity"}

    def describe(self) -> dict:
        return {f"{i}-{j}": g.describe() for (i, j), g in self.per_edge.items()}

    @classmethod
    def identity(cls, graph: Graph) -> "SurrogateFamily":
        g = IdentityQuadratic()
        return cls(graph, {e: g for e in graph.edges})

    @classmethod
    def spd(cls, graph: Graph, matrices) -> "SurrogateFamily":
        """``matrices`` is one SPD matrix for every edge or a dict edge -> matrix."""
        if isinstance(matrices, dict):
            return cls(graph, {e: SpdQuadratic(A) for e, A in matrices.items()})
        g = SpdQuadratic(matrices)
        return cls(graph, {e: g for e in graph.edges})

    @classmethod
    def endpoint_sum(cls, inst: ProblemInstance) -> "SurrogateFamily":
        f = inst.objectives
        return cls(inst.graph, {(i, j): EndpointSum(f[i], f[j]) for i, j in inst.graph.edges})

    @classmethod
    def from_name(cls, name: str, inst: ProblemInstance, seed: int = 0) -> "SurrogateFamily":
        if name == "identity":
            return cls.identity(inst.graph)
        if name == "endpoint-sum":
            return cls.endpoint_sum(inst)
        if name == "spd":
            from .objectives import random_spd

            rng = np.random.default_rng([seed, 3])
            return cls.spd(inst.graph, {e: random_spd(inst.dim, rng, (0.5, 2.0)) for e in inst.graph.edges})
        raise ParameterError(f"unknown surrogate {name!r} (choose identity, spd, endpoint-sum)")


# -- state --------------------------------------------------------------------


@dataclass(frozen=True)
class NetworkState:
    """Stacked iterate: row ``i`` is node ``i``'s vector."""

    x: np.ndarray
    k: int = 0

    def __post_init__(self):
        x = np.array(self.x, dtype=float, ndmin=2)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"non-finite iterate at k={self.k}")
        x.setflags(write=False)
        object.__setattr__(self, "x", x)

    @property
    def n_nodes(self):
        return self.x.shape[0]

    def stacked(self) -> np.ndarray:
        return self.x.reshape(-1)


def consensus_error(x) -> float:
    x = np.asarray(x)
    return float(np.sqrt(np.sum((x - x.mean(axis=0)) ** 2)))


def gradient_sum(inst: ProblemInstance, x) -> np.ndarray:
    return inst.grads(x).sum(axis=0)


def _check_state(s: NetworkState, inst: ProblemInstance):
    if s.x.shape != (inst.n_nodes, inst.dim):
        raise StructuralError(f"state has shape {s.x.shape}, instance needs ({inst.n_nodes}, {inst.dim})")


def _factor_all(H, first_node: int = 0) -> list:
    """Guarded Cholesky factors of a stack of node Hessians.

    A node fails when its smallest eigenvalue is below ``SINGULAR_RTOL`` times
    its largest (or the largest is not positive).
    """
    eig = np.linalg.eigvalsh(H)
    lo, hi = eig[:, 0], eig[:, -1]
    bad = np.flatnonzero(~(hi > 0) | (lo < SINGULAR_RTOL * hi))
    if bad.size:
        k = int(bad[0])
        node = first_node + k
        raise SingularHessianError(
            f"Hessian at node {node} is singular or indefinite (eigenvalues in [{lo[k]:.3g}, {hi[k]:.3g}])",
            node=node,
        )
    out = []
    for k, Hk in enumerate(H):
        try:
            out.append(sla.cho_factor(Hk, lower=True, check_finite=False))
        except np.linalg.LinAlgError:
            node = first_node + k
            raise SingularHessianError(f"Cholesky factorisation failed at node {node}", node=node) from None
    return out


def hessian_factors(inst: ProblemInstance, x) -> list:
    """Guarded Cholesky factors of every node Hessian at the stacked point ``x``."""
    return _factor_all(inst.hessians(x))


# -- updates ------------------------------------------------------------------


def dean_init(inst: ProblemInstance, tol: float | None = None) -> NetworkState:
    """Every node starts at its own minimiser."""
    if tol is None or tol == inst.tol:
        x0 = np.array(inst.local_minimizers)
    else:
        x0 = np.stack([local_minimizer(f, tol=tol) for f in inst.objectives])
    gs = float(np.linalg.norm(gradient_sum(inst, x0)))
    log.debug("dean_init: ||sum grad f_i(x0)|| = %.3e", gs)
    return NetworkState(x0, 0)


def _scatter_sum(n_rows: int, rows, vals) -> np.ndarray:
    # np.add.at accumulates sequentially, so each row is 0 + v_1 + v_2 + ... in pair order
    out = np.zeros((n_rows, vals.shape[1]))
    np.add.at(out, rows, vals)
    return out


def consensus_term(s: NetworkState, g: SurrogateFamily, alpha: EdgeWeights) -> np.ndarray:
    """``sum_j a_ij (grad g_ij(x_j) - grad g_ij(x_i))`` for every node, neighbours in ascending order."""
    src, _, eidx = g.directed
    a = alpha.as_array()[eidx]
    return _scatter_sum(s.x.shape[0], src, a[:, None] * g.grad_differences(s.x))


def dean_step(
    s: NetworkState, inst: ProblemInstance, g: SurrogateFamily, alpha: EdgeWeights, *, factors=None
) -> NetworkState:
    """One synchronous DEAN round.

    ``factors`` may carry precomputed Hessian factors (valid when Hessians do
    not depend on the iterate, i.e. quadratic objectives).
    """
    _check_state(s, inst)
    r = consensus_term(s, g, alpha)
    if factors is None:
        factors = hessian_factors(inst, s.x)
    x_new = np.empty_like(s.x)
    for i, c in enumerate(factors):
        x_new[i] = s.x[i] + sla.cho_solve(c, r[i], check_finite=False)
    return NetworkState(x_new, s.k + 1)


def linear_consensus_step(s: NetworkState, L: np.ndarray, alpha: float, *, warn_only: bool = False) -> NetworkState:
    """``x <- x - alpha (L kron I) x`` evaluated edge-wise so row sums cancel exactly."""
    L = np.asarray(L, dtype=float)
    N = s.x.shape[0]
    if L.shape != (N, N):
        raise StructuralError(f"Laplacian shape {L.shape} does not match {N} nodes")
    limit = 1.0 / float(np.max(np.diag(L)))
    if not 0 < alpha < limit:
        msg = f"alpha={alpha} outside (0, {limit:.6g}) for this Laplacian"
        if not warn_only:
            raise ParameterError(msg)
        import warnings

        warnings.warn(msg, stacklevel=2)
    x = s.x
    rows, cols = np.nonzero(L)
    off = rows != cols
    rows, cols = rows[off], cols[off]
    coef = alpha * -L[rows, cols]
    return NetworkState(x + _scatter_sum(N, rows, coef[:, None] * (x[cols] - x[rows])), s.k + 1)


def centralized_newton_step(s: NetworkState, inst: ProblemInstance, alpha: float) -> NetworkState:
    """Block-diagonal Newton step on ``F(x) = sum_i f_i(x_i)``; ignores consensus."""
    _check_state(s, inst)
    grads = inst.grads(s.x)
    x_new = np.empty_like(s.x)
    for i, c in enumerate(hessian_factors(inst, s.x)):
        x_new[i] = s.x[i] - alpha * sla.cho_solve(c, grads[i], check_finite=False)
    return NetworkState(x_new, s.k + 1)


# -- traces -------------------------------------------------------------------


@dataclass
class StopRule:
    """Stop once consensus error and gradient-sum norm are both below thresholds."""

    consensus_tol: float = 1e-10
    grad_sum_tol: float = 1e-8
    enabled: bool = True

    @classmethod
    def never(cls) -> "StopRule":
        return cls(enabled=False)

    def __call__(self, rec: dict) -> bool:
        return self.enabled and rec["consensus_err"] <= self.consensus_tol and rec["grad_sum_norm"] <= self.grad_sum_tol


@dataclass
class RunTrace:
    algo: str
    records: list = field(default_factory=list)
    states: list = field(default_factory=list)
    status: str = "running"
    config_hash: str = ""
    messages_per_iter: int = 0
    metadata: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.records], dtype=float)

    @property
    def final_state(self):
        return self.states[-1] if self.states else None

    def write_csv(self, path, *, with_algo: bool = False) -> None:
        cols = list(CSV_COLUMNS) + (["algo"] if with_algo else [])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r in self.records:
                row = [str(r["k"])] + [f"{r[c]:.17g}" for c in CSV_COLUMNS[1:]]
                if with_algo:
                    row.append(self.algo)
                w.writerow(row)

    @classmethod
    def read_csv(cls, path) -> "RunTrace":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        algo = rows[0].get("algo", "unknown") if rows else "unknown"
        recs = [{"k": int(r["k"]), **{c: float(r[c]) for c in CSV_COLUMNS[1:]}} for r in rows]
        return cls(algo=algo or "unknown", records=recs, status="loaded")


def config_hash(inst: ProblemInstance, algo: str, params: dict) -> str:
    h = hashlib.sha256()
    h.update(inst.fingerprint().encode())
    h.update(algo.encode())
    h.update(json.dumps(params, sort_keys=True, default=str).encode())
    return h.hexdigest()[:16]


def dean_config_hash(inst: ProblemInstance, g: SurrogateFamily, alpha: EdgeWeights) -> str:
    return config_hash(inst, "dean", {"surrogates": g.describe(), "alpha": [repr(a) for a in alpha.as_array()]})


def lyapunov_value(inst: ProblemInstance, x, grads=None) -> float:
    """``sum_i f_i(x*) - f_i(x_i) - grad f_i(x_i)^T (x* - x_i)``."""
    x = np.asarray(x, dtype=float)
    grads = inst.grads(x) if grads is None else grads
    terms = inst.values_at_optimum - inst.values(x) - np.einsum("ki,ki->k", grads, inst.x_star - x)
    return float(terms.sum())


def make_record(inst: ProblemInstance, x, k: int, wall_ms: float) -> dict:
    grads = inst.grads(x)
    gsum = float(np.linalg.norm(grads.sum(axis=0)))
    cons = consensus_error(x)
    return {
        "k": k,
        "V": lyapunov_value(inst, x, grads),
        "e": gsum + cons,
        "consensus_err": cons,
        "grad_sum_norm": gsum,
        "dist_to_opt": float(np.linalg.norm(np.asarray(x) - inst.x_star)),
        "wall_ms": wall_ms,
    }


def run(
    inst: ProblemInstance,
    g: SurrogateFamily,
    alpha: EdgeWeights,
    max_iters: int = 1000,
    stop: StopRule | None = None,
    *,
    keep_states: bool = True,
    tol: float | None = None,
) -> RunTrace:
    """Initialise at local minimisers and iterate DEAN.

    Step failures propagate; the partial trace is attached to the exception
    as ``err.trace``.
    """
    if max_iters < 0:
        raise ParameterError(f"max_iters must be >= 0, got {max_iters}")
    if alpha.graph.edges != inst.graph.edges or g.graph.edges != inst.graph.edges:
        raise StructuralError("step sizes / surrogates were built for a different graph")
    stop = StopRule() if stop is None else stop
    trace = RunTrace(
        algo="dean",
        config_hash=dean_config_hash(inst, g, alpha),
        messages_per_iter=2 * inst.graph.n_edges,
        metadata={"surrogates": sorted(g.kinds), "alpha_max": alpha.max(), "alpha_min": alpha.min()},
    )
    t0 = time.perf_counter()
    s = dean_init(inst, tol)
    trace.records.append(make_record(inst, s.x, 0, (time.perf_counter() - t0) * 1e3))
    if keep_states:
        trace.states.append(s.x)
    if stop(trace.records[-1]):
        trace.status = "converged"
        return trace
    try:
        factors = hessian_factors(inst, s.x) if inst.is_quadratic else None
        for _ in range(max_iters):
            s = dean_step(s, inst, g, alpha, factors=factors)
            if float(np.max(np.abs(s.x))) > DIVERGENCE_NORM:
                raise DivergenceError(f"iterate norm exceeded {DIVERGENCE_NORM:g} at k={s.k}")
            trace.records.append(make_record(inst, s.x, s.k, (time.perf_counter() - t0) * 1e3))
            if keep_states:
                trace.states.append(s.x)
            if stop(trace.records[-1]):
                trace.status = "converged"
                return trace
    except SingularHessianError as err:
        trace.status = "singular"
        err.trace = trace
        raise
    except DivergenceError as err:
        trace.status = "diverged"
        err.trace = trace
        raise
    trace.status = "max_iters"
    return trace


def run_reference(inst: ProblemInstance, algo: str, alpha: float, max_iters: int, stop: StopRule | None = None) -> RunTrace:
    """Trace of the linear-consensus or block-Newton reference recursion from the DEAN start."""
    stop = StopRule.never() if stop is None else stop
    from .topology import laplacian

    trace = RunTrace(algo=algo, config_hash=config_hash(inst, algo, {"alpha": repr(alpha)}))
    trace.messages_per_iter = 2 * inst.graph.n_edges if algo == "consensus" else 0
    L = laplacian(inst.graph)
    t0 = time.perf_counter()
    s = NetworkState(np.array(inst.local_minimizers), 0)
    trace.records.append(make_record(inst, s.x, 0, 0.0))
    trace.states.append(s.x)
    for _ in range(max_iters):
        if algo == "consensus":
            s = linear_consensus_step(s, L, alpha)
        elif algo == "newton":
            s = centralized_newton_step(s, inst, alpha)
        else:
            raise ParameterError(f"unknown reference algorithm {algo!r}")
        trace.records.append(make_record(inst, s.x, s.k, (time.perf_counter() - t0) * 1e3))
        trace.states.append(s.x)
        if stop(trace.records[-1]):
            trace.status = "converged"
            return trace
    trace.status = "max_iters"
    return trace


def uniform_alpha(graph: Graph, value: float) -> EdgeWeights:
    return EdgeWeights.uniform(graph, value)
