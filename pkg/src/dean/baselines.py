"""First-order comparison methods (EXTRA, DIGing) and Metropolis mixing weights."""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .core import DIVERGENCE_NORM, RunTrace, config_hash, make_record
from .errors import ParameterError, StructuralError
from .objectives import ProblemInstance
from .topology import Graph


def metropolis_weights(graph: Graph) -> np.ndarray:
    """``W_ij = 1 / (max(d_i, d_j) + 2)`` on links, diagonal completes each row to 1."""
    N = graph.n_nodes
    deg = graph.degrees
    W = np.zeros((N, N))
    for i, j in graph.edges:
        W[i, j] = W[j, i] = 1.0 / (max(deg[i], deg[j]) + 2)
    W[np.diag_indices(N)] = 1.0 - W.sum(axis=1)
    return W


def _check_mixing(W, inst):
    W = np.asarray(W, dtype=float)
    N = inst.n_nodes
    if N < 2:
        raise ParameterError("baselines need at least 2 nodes")
    if W.shape != (N, N):
        raise StructuralError(f"mixing matrix shape {W.shape} does not match {N} nodes")
    return W


def _start(inst, x0):
    x = np.array(inst.local_minimizers if x0 is None else x0, dtype=float)
    if x.shape != (inst.n_nodes, inst.dim):
        raise StructuralError(f"initial state has shape {x.shape}")
    return x


def _diverged(x) -> bool:
    return not np.all(np.isfinite(x)) or float(np.max(np.abs(x))) > DIVERGENCE_NORM


def extra_run(inst: ProblemInstance, W, alpha: float, max_iters: int, *, x0=None, keep_states: bool = True) -> RunTrace:
    """EXTRA from the DEAN starting point (node minimisers) unless ``x0`` is given."""
    if not alpha > 0:
        raise ParameterError(f"EXTRA step size must be positive, got {alpha}")
    W = _check_mixing(W, inst)
    W_half = 0.5 * (np.eye(inst.n_nodes) + W)
    trace = RunTrace(
        algo="extra",
        config_hash=config_hash(inst, "extra", {"alpha": repr(alpha)}),
        messages_per_iter=2 * inst.graph.n_edges,
        metadata={"alpha": alpha},
    )
    t0 = time.perf_counter()
    x_prev = _start(inst, x0)
    g_prev = inst.grads(x_prev)
    trace.records.append(make_record(inst, x_prev, 0, 0.0))
    if keep_states:
        trace.states.append(x_prev)
    x = None
    for k in range(1, max_iters + 1):
        if x is None:
            x_new = W @ x_prev - alpha * g_prev
        else:
            g = inst.grads(x)
            x_new = x + W @ x - W_half @ x_prev - alpha * (g - g_prev)
            x_prev, g_prev = x, g
        x = x_new
        if _diverged(x):
            trace.status = "diverged"
            return trace
        trace.records.append(make_record(inst, x, k, (time.perf_counter() - t0) * 1e3))
        if keep_states:
            trace.states.append(x)
    trace.status = "max_iters"
    return trace


def diging_run(inst: ProblemInstance, W, alpha: float, max_iters: int, *, x0=None, keep_states: bool = True) -> RunTrace:
    """DIGing (gradient tracking); ``metadata['tracking_error']`` logs ``||mean(y) - mean(grad)||`` per iteration."""
    if alpha < 0:
        raise ParameterError(f"DIGing step size must be non-negative, got {alpha}")
    W = _check_mixing(W, inst)
    trace = RunTrace(
        algo="diging",
        config_hash=config_hash(inst, "diging", {"alpha": repr(alpha)}),
        messages_per_iter=4 * inst.graph.n_edges,
        metadata={"alpha": alpha},
    )
    track = []
    t0 = time.perf_counter()
    x = _start(inst, x0)
    g = inst.grads(x)
    y = g.copy()
    track.append(float(np.linalg.norm(y.mean(axis=0) - g.mean(axis=0))))
    trace.records.append(make_record(inst, x, 0, 0.0))
    if keep_states:
        trace.states.append(x)
    trace.metadata["tracking_error"] = track
    for k in range(1, max_iters + 1):
        x_new = W @ x - alpha * y
        if _diverged(x_new):
            trace.status = "diverged"
            return trace
        g_new = inst.grads(x_new)
        y = W @ y + g_new - g
        x, g = x_new, g_new
        track.append(float(np.linalg.norm(y.mean(axis=0) - g.mean(axis=0))))
        trace.records.append(make_record(inst, x, k, (time.perf_counter() - t0) * 1e3))
        if keep_states:
            trace.states.append(x)
    trace.status = "max_iters"
    return trace


def max_workers() -> int:
    env = os.environ.get("DEAN_THREADS")
    if env:
        return max(1, int(env))
    return max(1, min(8, os.cpu_count() or 1))


def sweep(run_fn, alphas, *, metric="e_ratio"):
    """Run ``run_fn(alpha)`` over a grid and return ``(best_alpha, best_trace, results)``.

    ``metric='e_ratio'`` ranks by final ``e(T)/e(0)``; diverged or failed runs are
    skipped.  Ties go to the smaller step.
    """
    alphas = list(alphas)

    def one(a):
        try:
            t = run_fn(a)
        except Exception as exc:  # noqa: BLE001 - a failed grid point is data, not an error
            return a, None, repr(exc)
        return a, t, None

    with ThreadPoolExecutor(max_workers=max_workers()) as pool:
        results = list(pool.map(one, alphas))
    best = (None, None, np.inf)
    for a, t, err in results:
        if t is None or t.status == "diverged":
            continue
        e = t.column("e")
        score = e[-1] / e[0] if e[0] > 0 else e[-1]
        if np.isfinite(score) and score < best[2]:
            best = (a, t, score)
    if best[1] is None:
        raise RuntimeError("every grid point diverged or failed")
    return best[0], best[1], results


def step_grid(inst: ProblemInstance, algo: str, points: int = 41, surrogates=None) -> np.ndarray:
    """Log-spaced step-size grid scaled to the curvature at the starting point.

    DEAN steps are scaled by the smallest node Hessian eigenvalue over the largest
    surrogate curvature at either endpoint of a link (the identity surrogate
    contributes 1); first-order steps by the inverse of the largest Hessian eigenvalue.
    """
    x0 = inst.local_minimizers
    eig = np.linalg.eigvalsh(inst.hessians(x0))
    base = np.logspace(-4, 1, points)
    if algo == "dean":
        top = 1.0
        if surrogates is not None:
            top = max(
                float(np.linalg.eigvalsh(surrogates[e].hess(x0[v]))[-1]) for e in inst.graph.edges for v in e
            )
        return base * float(eig[:, 0].min()) / top
    if algo in ("extra", "diging"):
        return base / float(eig[:, -1].max())
    raise ParameterError(f"no step grid for algorithm {algo!r}")
