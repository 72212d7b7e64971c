"""Lyapunov function, curvature constants and the DEAN step-size / rate certificates.

The constants live on the sets ``C_i = {x : V_i-gap(x) <= V(x0)}`` which are
contained in the balls ``B(x*, sqrt(2 V(x0) / theta_i))``.  For quadratic
objectives everything is exact.  Otherwise the Hessian extremes and Hessian
Lipschitz quotients are sampled on those balls; sampled ``Theta`` and ``L`` are
lower estimates and sampled ``theta`` and ``gamma`` upper estimates, so the
resulting bounds are not certified.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .baselines import max_workers
from .core import RunTrace, SurrogateFamily, dean_config_hash, dean_init, lyapunov_value
from .errors import EstimationError, ParameterError, VerificationError
from .objectives import ProblemInstance
from .topology import EdgeWeights, Graph, laplacian, spectrum

log = logging.getLogger(__name__)

FIXED_POINT_ROUNDS = 20
FIXED_POINT_RTOL = 1e-3
MIN_BUDGET = 10


def lyapunov(x, inst: ProblemInstance) -> float:
    """``V(x) = sum_i f_i(x*) - f_i(x_i) - grad f_i(x_i)^T (x* - x_i)``; accepts a state or an array."""
    return lyapunov_value(inst, getattr(x, "x", x))


def optimality_error(x, inst: ProblemInstance) -> float:
    """``||sum_i grad f_i(x_i)|| + sqrt(sum_i ||x_i - mean||^2)``."""
    x = np.asarray(getattr(x, "x", x), dtype=float)
    gsum = float(np.linalg.norm(inst.grads(x).sum(axis=0)))
    return gsum + float(np.sqrt(np.sum((x - x.mean(axis=0)) ** 2)))


# -- constants ----------------------------------------------------------------


@dataclass(frozen=True)
class ConstantsEstimate:
    """Per-node curvature constants, per-edge surrogate constants and globals.

    Edge arrays follow ``graph.edges`` order.
    """

    graph: Graph
    theta: np.ndarray
    Theta: np.ndarray
    L: np.ndarray
    theta_p: np.ndarray
    Theta_p: np.ndarray
    L_p: np.ndarray
    theta_bar: np.ndarray
    Theta_bar: np.ndarray
    delta: np.ndarray
    gamma: np.ndarray
    Gamma: np.ndarray
    V0: float
    alpha_bar: float
    exact: bool
    metadata: dict = field(default_factory=dict)

    @property
    def theta_min(self) -> float:
        return float(self.theta.min())

    @property
    def Theta_max(self) -> float:
        return float(self.Theta.max())

    @property
    def radius(self) -> np.ndarray:
        """``sqrt(2 V(x0) / theta_i)``, the ball radius enclosing ``C_i``."""
        return np.sqrt(2.0 * self.V0 / self.theta)

    def edge_index(self, i: int, j: int) -> int:
        return self.graph.edges.index((min(i, j), max(i, j)))

    def to_json_dict(self) -> dict:
        return {
            "theta_i": self.theta.tolist(),
            "Theta_i": self.Theta.tolist(),
            "L_i": self.L.tolist(),
            "theta_prime_i": self.theta_p.tolist(),
            "Theta_prime_i": self.Theta_p.tolist(),
            "L_prime_i": self.L_p.tolist(),
            "theta_bar_i": self.theta_bar.tolist(),
            "Theta_bar_i": self.Theta_bar.tolist(),
            "delta_i": self.delta.tolist(),
            "gamma_ij": self.gamma.tolist(),
            "Gamma_ij": self.Gamma.tolist(),
            "theta": self.theta_min,
            "Theta": self.Theta_max,
            "V0": self.V0,
            "alpha_bar": self.alpha_bar,
            "exact": self.exact,
            "metadata": self.metadata,
        }


def _delta(graph: Graph, theta, Gamma, V0, alpha_bar) -> np.ndarray:
    r = np.sqrt(2.0 * V0 / theta)
    out = np.zeros(graph.n_nodes)
    for k, (i, j) in enumerate(graph.edges):
        out[i] += Gamma[k] * (r[i] + r[j])
        out[j] += Gamma[k] * (r[i] + r[j])
    return alpha_bar / theta * out


def _surrogate_extremes_exact(g: SurrogateFamily, inst: ProblemInstance):
    gam, Gam = [], []
    for i, j in g.graph.edges:
        s = g[(i, j)]
        if s.kind == "identity":
            lo = hi = 1.0
        elif s.kind == "spd":
            lo, hi = s.eig_min, s.eig_max
        else:
            eig = np.linalg.eigvalsh(inst.objectives[i].B + inst.objectives[j].B)
            lo, hi = float(eig[0]), float(eig[-1])
        gam.append(lo)
        Gam.append(hi)
    return np.array(gam), np.array(Gam)


def _exact_constants(inst: ProblemInstance, g: SurrogateFamily, V0: float, alpha_bar: float) -> ConstantsEstimate:
    theta = np.array([f.eig_min for f in inst.objectives])
    Theta = np.array([f.eig_max for f in inst.objectives])
    zero = np.zeros(inst.n_nodes)
    gamma, Gamma = _surrogate_extremes_exact(g, inst)
    delta = _delta(inst.graph, theta, Gamma, V0, alpha_bar)
    return ConstantsEstimate(
        graph=inst.graph,
        theta=theta,
        Theta=Theta,
        L=zero,
        theta_p=theta.copy(),
        Theta_p=Theta.copy(),
        L_p=zero.copy(),
        theta_bar=theta.copy(),
        Theta_bar=Theta.copy(),
        delta=delta,
        gamma=gamma,
        Gamma=Gamma,
        V0=V0,
        alpha_bar=alpha_bar,
        exact=True,
        metadata={"method": "exact", "certified": True},
    )


def _unit_ball(rng: np.random.Generator, count: int, n: int) -> np.ndarray:
    # half the points on the sphere (curvature extremes tend to sit on the boundary), half inside
    d = rng.normal(size=(count, n))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    radii = np.ones(count)
    inner = count // 2
    radii[inner:] = rng.uniform(size=count - inner) ** (1.0 / n)
    return d * radii[:, None]


class _BallSampler:
    """Hessian statistics of one objective over balls around a fixed centre."""

    def __init__(self, hess_batch, center, unit, short_dirs, short_step=1e-4):
        self.hess_batch = hess_batch
        self.center = center
        self.unit = unit
        self.short_dirs = short_dirs
        self.short_step = short_step

    def points(self, radius):
        return np.vstack([self.center[None], self.center + radius * self.unit])

    def extremes(self, radius, extra=None):
        P = self.points(radius)
        if extra is not None:
            P = np.vstack([P, extra])
        eig = np.linalg.eigvalsh(self.hess_batch(P))
        return float(eig[:, 0].min()), float(eig[:, -1].max())

    def lipschitz(self, radius):
        """Largest ``||H(x) - H(y)|| / ||x - y||`` over long and short sampled pairs."""
        P = self.points(radius)
        H = self.hess_batch(P)
        best = 0.0
        # long pairs: consecutive sample points
        dX = np.linalg.norm(P[1:] - P[:-1], axis=1)
        dH = np.abs(np.linalg.eigvalsh(H[1:] - H[:-1])).max(axis=1)
        ok = dX > 0
        if ok.any():
            best = max(best, float((dH[ok] / dX[ok]).max()))
        # short pairs: local quotient at every sample point
        h = self.short_step * max(radius, 1e-12)
        Q = P + h * self.short_dirs[: len(P)]
        dHs = np.abs(np.linalg.eigvalsh(self.hess_batch(Q) - H)).max(axis=1)
        return max(best, float(dHs.max()) / h)


def _sampled_constants(
    inst: ProblemInstance, g: SurrogateFamily, V0: float, alpha_bar: float, budget: int, seed: int
) -> ConstantsEstimate:
    N, n = inst.n_nodes, inst.dim
    rng = np.random.default_rng([seed, 7])
    unit = _unit_ball(rng, budget, n)
    short = rng.normal(size=(budget + 1, n))
    short /= np.linalg.norm(short, axis=1, keepdims=True)
    xs = np.asarray(inst.x_star)
    x0 = np.asarray(inst.local_minimizers)
    samplers = [_BallSampler(f.hess_batch, xs, unit, short) for f in inst.objectives]

    def fixed_point(i):
        s = samplers[i]
        theta = float(np.linalg.eigvalsh(s.hess_batch(xs[None]))[0, 0])
        history = [theta]
        converged = False
        for _ in range(FIXED_POINT_ROUNDS):
            if not theta > 0:
                break
            r = math.sqrt(2.0 * V0 / theta)
            new, _ = s.extremes(r, extra=x0[i][None])
            history.append(new)
            done = abs(new - theta) <= FIXED_POINT_RTOL * abs(theta)
            theta = new
            if done:
                converged = True
                break
        if not theta > 0:
            raise EstimationError(f"sampled convexity constant at node {i} is not positive ({theta:.3g})")
        r = math.sqrt(2.0 * V0 / theta)
        lo, hi = s.extremes(r, extra=x0[i][None])
        return min(lo, theta), hi, s.lipschitz(r), converged, len(history) - 1

    with ThreadPoolExecutor(max_workers=max_workers()) as pool:
        per_node = list(pool.map(fixed_point, range(N)))
    theta = np.array([p[0] for p in per_node])
    Theta = np.array([p[1] for p in per_node])
    L = np.array([p[2] for p in per_node])
    r = np.sqrt(2.0 * V0 / theta)

    gamma, Gamma = [], []
    for i, j in g.graph.edges:
        s = g[(i, j)]
        if s.kind == "identity":
            lo = hi = 1.0
        elif s.kind == "spd":
            lo, hi = s.eig_min, s.eig_max
        else:
            # conv(C_i u C_j) lies in the larger of the two balls around x*
            sampler = _BallSampler(s.hess_batch, xs, unit, short)
            lo, hi = sampler.extremes(max(r[i], r[j]), extra=x0[[i, j]])
        gamma.append(lo)
        Gamma.append(hi)
    gamma, Gamma = np.array(gamma), np.array(Gamma)
    if not np.all(gamma > 0):
        raise EstimationError("sampled surrogate convexity constant is not positive")
    delta = _delta(inst.graph, theta, Gamma, V0, alpha_bar)

    def primed(i):
        s = samplers[i]
        rp = r[i] + delta[i]
        lo, hi = s.extremes(rp, extra=x0[i][None])
        return min(lo, theta[i]), max(hi, Theta[i]), max(s.lipschitz(rp), L[i])

    def barred(i):
        lo, hi = samplers[i].extremes(float(r.max()), extra=x0)
        return min(lo, theta[i]), max(hi, Theta[i])

    with ThreadPoolExecutor(max_workers=max_workers()) as pool:
        pr = list(pool.map(primed, range(N)))
        br = list(pool.map(barred, range(N)))
    theta_bar = np.array([b[0] for b in br])
    if not np.all(theta_bar > 0) or not np.all(np.array([p[0] for p in pr]) > 0):
        raise EstimationError("sampled convexity constant on an enlarged set is not positive")
    return ConstantsEstimate(
        graph=inst.graph,
        theta=theta,
        Theta=Theta,
        L=L,
        theta_p=np.array([p[0] for p in pr]),
        Theta_p=np.array([p[1] for p in pr]),
        L_p=np.array([p[2] for p in pr]),
        theta_bar=theta_bar,
        Theta_bar=np.array([b[1] for b in br]),
        delta=delta,
        gamma=gamma,
        Gamma=Gamma,
        V0=V0,
        alpha_bar=alpha_bar,
        exact=False,
        metadata={
            "method": "sampled",
            "certified": False,
            "note": "sampled Theta, L are lower estimates; sampled theta, gamma are upper estimates",
            "budget": budget,
            "seed": seed,
            "radius_i": r.tolist(),
            "fixed_point_converged": [bool(p[3]) for p in per_node],
            "fixed_point_rounds": [int(p[4]) for p in per_node],
        },
    )


def estimate_constants(
    inst: ProblemInstance, g: SurrogateFamily, alpha_bar: float = 1.0, budget: int = 200, seed: int = 0
) -> ConstantsEstimate:
    """Constants on the sets the DEAN analysis works with.

    Exact for quadratic objectives; otherwise sampled with ``budget`` points per
    ball and a fixed-point iteration for the radius/convexity circularity.
    """
    if not alpha_bar > 0:
        raise ParameterError(f"alpha_bar must be positive, got {alpha_bar}")
    if budget < MIN_BUDGET:
        raise ParameterError(f"sample budget must be at least {MIN_BUDGET}, got {budget}")
    if g.graph.edges != inst.graph.edges:
        raise ParameterError("surrogates were built for a different graph")
    V0 = lyapunov_value(inst, dean_init(inst).x)
    if inst.is_quadratic:
        return _exact_constants(inst, g, V0, alpha_bar)
    return _sampled_constants(inst, g, V0, alpha_bar, budget, seed)


# -- certificates -------------------------------------------------------------


def _degrees(graph: Graph) -> np.ndarray:
    return graph.degrees.astype(float)


def eta_tilde(c: ConstantsEstimate) -> np.ndarray:
    """``2 |N_i| (Theta'_i - theta'_i/2 + L'_i/2 sqrt(2 V0/theta_i)) / theta_i^2``."""
    d = _degrees(c.graph)
    inner = c.Theta_p - c.theta_p / 2 + c.L_p / 2 * np.sqrt(2 * c.V0 / c.theta)
    return 2 * d * inner / c.theta**2


def eta(c: ConstantsEstimate) -> np.ndarray:
    """``|N_i| L_i sqrt(N) V0 / (theta_i^2 sum_l theta_bar_l)``."""
    d = _degrees(c.graph)
    return d * c.L * math.sqrt(c.graph.n_nodes) * c.V0 / (c.theta**2 * c.theta_bar.sum())


def lemma1_stepsize_bound(c: ConstantsEstimate, graph: Graph | None = None) -> EdgeWeights:
    """Per-edge step size below which ``V`` provably decreases every round.

    ``1/(2 Gamma_ij) * min_{i,j} theta^2 / (|N| (Theta' - theta'/2 + L'/2 sqrt(2 V0 / theta)))``.
    """
    graph = c.graph if graph is None else graph
    inv = 2.0 / eta_tilde(c)  # theta^2 / (|N| (...)) per node
    vals = [min(inv[i], inv[j]) / (2 * c.Gamma[k]) for k, (i, j) in enumerate(graph.edges)]
    return EdgeWeights.from_array(graph, vals)


def theorem2_stepsize_bound(c: ConstantsEstimate, graph: Graph | None = None, epsilon: float = 1e-2) -> EdgeWeights:
    """Per-edge step size guaranteeing a limit within ``epsilon`` of the optimum."""
    if not epsilon > 0:
        raise ParameterError(f"epsilon must be positive, got {epsilon}")
    graph = c.graph if graph is None else graph
    node = 1.0 / (eta(c) + eta_tilde(c) * epsilon)
    vals = [epsilon / c.Gamma[k] * min(node[i], node[j]) for k, (i, j) in enumerate(graph.edges)]
    return EdgeWeights.from_array(graph, vals)


def _max_alpha_per_node(graph: Graph, alpha: EdgeWeights, scale=None) -> np.ndarray:
    out = np.zeros(graph.n_nodes)
    for k, (i, j) in enumerate(graph.edges):
        a = alpha.get(i, j) * (1.0 if scale is None else scale[k])
        out[i] = max(out[i], a)
        out[j] = max(out[j], a)
    return out


def rho(c: ConstantsEstimate, alpha: EdgeWeights) -> tuple[np.ndarray, np.ndarray]:
    """``(rho_i, rho_tilde_i)``: the per-node decrease coefficients with and without ``Gamma``."""
    d = _degrees(c.graph)
    tail = c.theta / 2 - c.Theta - c.L / 2 * np.sqrt(2 * c.V0 / c.theta)
    a_tilde = _max_alpha_per_node(c.graph, alpha)
    a_gamma = _max_alpha_per_node(c.graph, alpha, scale=c.Gamma)
    return c.theta**2 / (2 * d * a_gamma) + tail, c.theta**2 / (2 * d * a_tilde) + tail


@dataclass
class RateCertificate:
    applicable: bool
    reason: str = ""
    q: float | None = None
    trajectory_constant: float | None = None
    suboptimality_bound: float | None = None
    lambda_2: float | None = None
    lambda_max: float | None = None


def theorem3_rate(
    c: ConstantsEstimate,
    graph: Graph | None,
    alpha: EdgeWeights,
    surrogates: SurrogateFamily | None = None,
    x0=None,
) -> RateCertificate:
    """Linear rate ``q`` and envelope constant for identity surrogates.

    Returns ``applicable=False`` with a reason instead of raising when the
    preconditions fail.
    """
    graph = c.graph if graph is None else graph
    if surrogates is not None and not surrogates.all_identity:
        return RateCertificate(False, "rate certificate needs identity surrogates on every edge")
    a = alpha.as_array()
    bound = lemma1_stepsize_bound(c, graph).as_array()
    if not np.all(a < bound):
        return RateCertificate(False, "step sizes violate the monotonicity bound")
    if not np.all(a <= c.alpha_bar):
        return RateCertificate(False, f"step sizes exceed alpha_bar={c.alpha_bar}")
    limit = c.theta_min / graph.degrees.max()
    if not np.all(a < limit):
        return RateCertificate(False, f"step sizes must be below theta / max degree = {limit:.6g}")
    lam2, lmax = spectrum(laplacian(graph))
    q = max(a.max() * lmax / c.theta_min - 1.0, 1.0 - a.min() * lam2 / c.Theta_max)
    if not 0 < q < 1:
        return RateCertificate(False, f"rate q={q:.6g} outside (0, 1)", q=q, lambda_2=lam2, lambda_max=lmax)
    norm_x0 = float(np.linalg.norm(x0)) if x0 is not None else float("nan")
    C = a.max() * lmax * norm_x0 / (c.theta_min * (1 - q))
    _, rho_tilde = rho(c, alpha)
    N = graph.n_nodes
    if np.all(c.L == 0):
        sub = 0.0
    else:
        sub = float(np.max(c.L / rho_tilde)) * math.sqrt(N) * c.V0 / (2 * c.theta_bar.sum())
    return RateCertificate(True, "", q, C, sub, lam2, lmax)


def drop_bound(c: ConstantsEstimate, alpha: EdgeWeights, x) -> float:
    """Certified lower bound on ``V(x^k) - V(x^{k+1})`` at state ``x`` (non-negative under Lemma 1)."""
    x = np.asarray(x, dtype=float)
    d = _degrees(c.graph)
    tail = c.theta / 2 - c.Theta - c.L / 2 * np.sqrt(2 * c.V0 / c.theta)
    total = 0.0
    for k, (i, j) in enumerate(c.graph.edges):
        a = alpha.get(i, j)
        sq = float(np.sum((x[j] - x[i]) ** 2))
        for u in (i, j):
            bracket = tail[u] * d[u] / c.theta[u] ** 2 * a + 1.0 / (2 * c.Gamma[k])
            total += a * c.gamma[k] ** 2 * sq * bracket
    return total


# -- report -------------------------------------------------------------------


@dataclass
class CertificateReport:
    constants: ConstantsEstimate
    lemma1_bound: EdgeWeights
    eta: np.ndarray
    eta_tilde: np.ndarray
    alpha: EdgeWeights | None = None
    epsilon: float | None = None
    theorem2_bound: EdgeWeights | None = None
    rate: RateCertificate | None = None
    rho: np.ndarray | None = None
    rho_tilde: np.ndarray | None = None
    lemma1_holds: bool = False
    theorem2_holds: bool = False
    config_hash: str | None = None
    config: dict = field(default_factory=dict)

    @property
    def theorem3_applicable(self) -> bool:
        return bool(self.rate is not None and self.rate.applicable)

    def to_json_dict(self) -> dict:
        c = self.constants
        out = {
            "edges": [list(e) for e in c.graph.edges],
            **c.to_json_dict(),
            "eta_i": self.eta.tolist(),
            "eta_tilde_i": self.eta_tilde.tolist(),
            "lemma1_bound_ij": self.lemma1_bound.as_array().tolist(),
            "alpha_ij": None if self.alpha is None else self.alpha.as_array().tolist(),
            "epsilon": self.epsilon,
            "theorem2_bound_ij": None if self.theorem2_bound is None else self.theorem2_bound.as_array().tolist(),
            "rho_i": None if self.rho is None else self.rho.tolist(),
            "rho_tilde_i": None if self.rho_tilde is None else self.rho_tilde.tolist(),
            "q": None if self.rate is None else self.rate.q,
            "trajectory_constant": None if self.rate is None else self.rate.trajectory_constant,
            "suboptimality_bound": None if self.rate is None else self.rate.suboptimality_bound,
            "rate_note": None if self.rate is None else self.rate.reason,
            "lemma1_holds": self.lemma1_holds,
            "theorem2_holds": self.theorem2_holds,
            "theorem3_applicable": self.theorem3_applicable,
            "config_hash": self.config_hash,
            "config": self.config,
        }
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=1, allow_nan=True)


def certify(
    inst: ProblemInstance,
    g: SurrogateFamily,
    alpha: EdgeWeights | None = None,
    *,
    constants: ConstantsEstimate | None = None,
    alpha_bar: float = 1.0,
    epsilon: float | None = None,
    budget: int = 200,
    seed: int = 0,
    config: dict | None = None,
) -> CertificateReport:
    """All applicable bounds for one instance, surrogate family and (optionally) step sizes."""
    c = constants if constants is not None else estimate_constants(inst, g, alpha_bar, budget, seed)
    rep = CertificateReport(
        constants=c,
        lemma1_bound=lemma1_stepsize_bound(c),
        eta=eta(c),
        eta_tilde=eta_tilde(c),
        alpha=alpha,
        epsilon=epsilon,
        config=dict(config or {}),
    )
    if epsilon is not None:
        rep.theorem2_bound = theorem2_stepsize_bound(c, epsilon=epsilon)
    if alpha is not None:
        a = alpha.as_array()
        in_range = bool(np.all(a <= c.alpha_bar))
        rep.lemma1_holds = in_range and bool(np.all(a < rep.lemma1_bound.as_array()))
        if rep.theorem2_bound is not None:
            rep.theorem2_holds = in_range and bool(np.all(a < rep.theorem2_bound.as_array()))
        rep.rho, rep.rho_tilde = rho(c, alpha)
        rep.rate = theorem3_rate(c, None, alpha, g, x0=dean_init(inst).x)
        rep.config_hash = dean_config_hash(inst, g, alpha)
    return rep


# -- verification -------------------------------------------------------------


@dataclass
class Verdict:
    passed: bool
    checks: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    @property
    def label(self) -> str:
        return "pass" if self.passed else "fail"

    def to_json_dict(self) -> dict:
        return {"verdict": self.label, "checks": self.checks, "warnings": self.warnings}


def verify_trace(t: RunTrace, report: CertificateReport, c: ConstantsEstimate | None = None) -> Verdict:
    """Audit a DEAN trace against the certificates computed for its configuration.

    (a) ``V`` non-increasing; (b) per-step drop at least the certified bound
    (needs stored states); (c) linear-rate envelope when applicable (needs
    states); (d) final distance within ``epsilon`` when that bound was met.
    """
    c = report.constants if c is None else c
    if len(t.records) == 0:
        msg = "empty trace: nothing to verify"
        warnings.warn(msg, stacklevel=2)
        return Verdict(True, {}, [msg])
    if report.config_hash is None or report.alpha is None:
        raise VerificationError("report carries no step sizes, so it cannot be matched to a run")
    if t.config_hash != report.config_hash:
        raise VerificationError(f"configuration hash mismatch: trace {t.config_hash!r}, report {report.config_hash!r}")
    V = t.column("V")
    V0 = V[0]
    checks = {}
    warn = []

    tol = 1e-12 * abs(V0)
    rises = np.flatnonzero(np.diff(V) > tol)
    checks["monotone_V"] = {
        "status": "pass" if rises.size == 0 else "fail",
        "first_violation": None if rises.size == 0 else int(rises[0] + 1),
        "certified": report.lemma1_holds,
    }

    states = t.states
    if len(states) == len(t.records) and len(states) > 1:
        tol = 1e-9 * abs(V0)
        bad = None
        for k in range(len(states) - 1):
            need = drop_bound(c, report.alpha, states[k])
            if V[k] - V[k + 1] < need - tol:
                bad = k + 1
                break
        checks["drop_bound"] = {"status": "pass" if bad is None else "fail", "first_violation": bad}
    else:
        checks["drop_bound"] = {"status": "skipped", "reason": "trace has no stored states"}

    if report.theorem3_applicable:
        if len(states) == len(t.records) and len(states) > 1:
            X = np.stack([np.asarray(s).reshape(-1) for s in states])
            n = np.asarray(states[-1]).shape[1]
            x_tilde = np.tile(np.asarray(states[-1]).mean(axis=0), len(X[0]) // n)
            q, C = report.rate.q, report.rate.trajectory_constant
            K = len(X) - 1
            ks = np.arange(len(X))
            dist = np.linalg.norm(X - x_tilde, axis=1)
            # x~ is approximated by the final iterate, which is itself within C q^K of x~
            env = (1 + 1e-6) * C * q**ks + C * q**K + 1e-12 * max(1.0, float(np.abs(X).max()))
            over = np.flatnonzero(dist > env)
            checks["rate_envelope"] = {
                "status": "pass" if over.size == 0 else "fail",
                "first_violation": None if over.size == 0 else int(over[0]),
                "q": q,
                "C": C,
            }
        else:
            checks["rate_envelope"] = {"status": "skipped", "reason": "trace has no stored states"}

    if report.epsilon is not None and report.theorem2_holds:
        d = float(t.records[-1]["dist_to_opt"])
        checks["epsilon_accuracy"] = {"status": "pass" if d < report.epsilon else "fail", "final_dist": d}

    if not report.constants.exact:
        warn.append("constants are sampled estimates, not certified bounds")
    passed = all(v["status"] != "fail" for v in checks.values())
    return Verdict(passed, checks, warn)
