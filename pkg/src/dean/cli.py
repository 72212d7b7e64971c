"""Command-line front end: ``dean gen | run | compare | certify``.

Exit codes: 0 success, 2 invalid parameters or inputs, 3 divergence,
4 singular Hessian, 5 constant-estimation failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import baselines, certificates, core
from .errors import (
    ConvergenceError,
    DivergenceError,
    EstimationError,
    ParameterError,
    SingularHessianError,
    StructuralError,
    VerificationError,
)
from .objectives import ProblemInstance, make_logistic_instance, make_overlapping_logistic_instance, make_quadratic_instance
from .topology import EdgeWeights, random_connected_graph, read_edge_list, write_edge_list

log = logging.getLogger("dean")

EXIT_OK, EXIT_PARAM, EXIT_DIVERGED, EXIT_SINGULAR, EXIT_ESTIMATION = 0, 2, 3, 4, 5
ALGOS = ("dean", "extra", "diging", "consensus", "newton")
COMPARE_COLUMNS = ("algo", "k", "e_normalized", "V", "consensus_err")


class CliError(Exception):
    def __init__(self, message, code=EXIT_PARAM):
        super().__init__(message)
        self.code = code


# -- files --------------------------------------------------------------------


def atomic_write(path, write_fn, suffix="") -> None:
    """Call ``write_fn(tmp_path)`` and rename the result onto ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=suffix, dir=path.parent)
    os.close(fd)
    try:
        write_fn(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write(path, lambda tmp: Path(tmp).write_text(text))


def sidecar_path(trace_path) -> Path:
    return Path(str(trace_path) + ".status.json")


def states_path(trace_path) -> Path:
    return Path(str(trace_path) + ".states.npy")


def _json(obj) -> str:
    def default(o):
        if isinstance(o, np.generic):
            return o.item()
        if isinstance(o, np.ndarray):
            return o.tolist()
        return str(o)

    return json.dumps(obj, indent=1, sort_keys=True, default=default) + "\n"


# -- configuration ------------------------------------------------------------


@dataclass
class ExperimentConfig:
    """One run: problem files, algorithm, step sizes, stopping and outputs."""

    graph: str | None = None
    instance: str | None = None
    algo: str = "dean"
    surrogate: str = "identity"
    alpha_mode: str | None = None
    alpha: float | None = None
    max_iters: int = 1000
    consensus_tol: float = 1e-10
    grad_sum_tol: float = 1e-8
    stop: bool = True
    alpha_bar: float = 1.0
    budget: int = 200
    est_seed: int = 0
    surrogate_seed: int = 0
    epsilon: float | None = None
    out: str | None = None
    report: str | None = None
    save_states: bool = False
    deterministic: bool = False

    @classmethod
    def merged(cls, file_cfg: dict | None, overrides: dict) -> "ExperimentConfig":
        names = {f.name for f in fields(cls)}
        data = {}
        for src in (file_cfg or {}, overrides):
            for k, v in src.items():
                key = k.replace("-", "_")
                if key not in names:
                    raise CliError(f"unknown configuration key {k!r}")
                if v is not None:
                    data[key] = v
        cfg = cls(**data)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.algo not in ALGOS:
            raise CliError(f"unknown algorithm {self.algo!r} (choose {', '.join(ALGOS)})")
        if self.graph is None or self.instance is None:
            raise CliError("both a graph file and an instance file are required")
        for p in (self.graph, self.instance):
            if not Path(p).exists():
                raise CliError(f"file not found: {p}")
        if self.max_iters < 0:
            raise CliError(f"max_iters must be >= 0, got {self.max_iters}")
        if not self.alpha_bar > 0:
            raise CliError(f"alpha_bar must be positive, got {self.alpha_bar}")
        if self.epsilon is not None and not self.epsilon > 0:
            raise CliError(f"epsilon must be positive, got {self.epsilon}")
        if self.alpha is not None and self.alpha_mode is not None:
            raise CliError("give either --alpha or --alpha-mode, not both")


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CliError(f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid JSON ({exc})") from None


def load_problem(cfg: ExperimentConfig) -> ProblemInstance:
    graph, _ = read_edge_list(cfg.graph)
    return ProblemInstance.load(cfg.instance, graph)


def resolve_alpha(cfg: ExperimentConfig, inst: ProblemInstance, g, constants=None):
    """DEAN step sizes from ``--alpha`` or ``--alpha-mode``; returns ``(EdgeWeights, constants)``."""
    graph = inst.graph
    mode = cfg.alpha_mode if cfg.alpha_mode is not None else (None if cfg.alpha is None else f"uniform:{cfg.alpha}")
    if mode is None:
        raise CliError("DEAN needs --alpha VALUE or --alpha-mode uniform:X | lemma1-frac:F | file:PATH")
    kind, _, arg = mode.partition(":")
    if kind == "uniform":
        return EdgeWeights.uniform(graph, _positive(arg, "uniform step size")), constants
    if kind == "lemma1-frac":
        frac = _positive(arg, "lemma1 fraction")
        if constants is None:
            constants = certificates.estimate_constants(inst, g, cfg.alpha_bar, cfg.budget, cfg.est_seed)
        return certificates.lemma1_stepsize_bound(constants).scaled(frac), constants
    if kind == "file":
        fg, w = read_edge_list(arg)
        if fg.edges != graph.edges:
            raise CliError(f"{arg}: step-size file does not list the instance's edges")
        return w, constants
    raise CliError(f"unknown alpha mode {mode!r}")


def _positive(text, what) -> float:
    try:
        v = float(text)
    except ValueError:
        raise CliError(f"{what} must be a number, got {text!r}") from None
    if not v > 0:
        raise CliError(f"{what} must be positive, got {v}")
    return v


def _stop(cfg: ExperimentConfig) -> core.StopRule:
    if not cfg.stop:
        return core.StopRule.never()
    return core.StopRule(cfg.consensus_tol, cfg.grad_sum_tol)


# -- execution ----------------------------------------------------------------


@dataclass
class Outcome:
    trace: core.RunTrace
    code: int
    message: str = ""
    report: dict | None = None
    alpha: EdgeWeights | None = None


def execute(cfg: ExperimentConfig, inst: ProblemInstance) -> Outcome:
    """Run one configured algorithm; step failures become exit codes with the partial trace kept."""
    keep = cfg.save_states or cfg.algo == "dean"
    if cfg.algo == "dean":
        g = core.SurrogateFamily.from_name(cfg.surrogate, inst, cfg.surrogate_seed)
        alpha, constants = resolve_alpha(cfg, inst, g)
        report = _dean_report(cfg, inst, g, alpha, constants)
        try:
            t = core.run(inst, g, alpha, cfg.max_iters, _stop(cfg), keep_states=keep)
        except DivergenceError as err:
            return Outcome(err.trace, EXIT_DIVERGED, str(err), report, alpha)
        except SingularHessianError as err:
            return Outcome(err.trace, EXIT_SINGULAR, str(err), report, alpha)
        return Outcome(t, EXIT_OK, "", report, alpha)
    alpha = cfg.alpha
    if alpha is None and cfg.alpha_mode is not None:
        kind, _, arg = cfg.alpha_mode.partition(":")
        if kind != "uniform":
            raise CliError(f"{cfg.algo} takes a scalar step size (--alpha or uniform:X)")
        alpha = _positive(arg, "step size")
    if cfg.algo in ("extra", "diging"):
        if alpha is None:
            raise CliError(f"{cfg.algo} needs --alpha")
        W = baselines.metropolis_weights(inst.graph)
        fn = baselines.extra_run if cfg.algo == "extra" else baselines.diging_run
        t = fn(inst, W, alpha, cfg.max_iters, keep_states=keep)
        t.metadata["x0"] = "local minimizers"
        code = EXIT_DIVERGED if t.status == "diverged" else EXIT_OK
        return Outcome(t, code, "iterates diverged" if code else "")
    if cfg.algo == "consensus" and alpha is None:
        raise CliError("consensus needs --alpha")
    try:
        t = core.run_reference(inst, cfg.algo, 1.0 if alpha is None else alpha, cfg.max_iters, _stop(cfg))
    except SingularHessianError as err:
        return Outcome(core.RunTrace(algo=cfg.algo, status="singular"), EXIT_SINGULAR, str(err))
    return Outcome(t, EXIT_OK)


def _dean_report(cfg, inst, g, alpha, constants):
    try:
        rep = certificates.certify(
            inst,
            g,
            alpha,
            constants=constants,
            alpha_bar=cfg.alpha_bar,
            epsilon=cfg.epsilon,
            budget=cfg.budget,
            seed=cfg.est_seed,
            config=asdict(cfg),
        )
    except EstimationError as exc:
        if cfg.alpha_mode and cfg.alpha_mode.startswith("lemma1-frac"):
            raise
        log.warning("certificate estimation failed: %s", exc)
        return {"error": str(exc), "config": asdict(cfg)}
    return rep.to_json_dict()


def write_outputs(cfg: ExperimentConfig, inst: ProblemInstance, outcome: Outcome) -> None:
    t = outcome.trace
    if cfg.deterministic:
        for r in t.records:
            r["wall_ms"] = 0.0
    if cfg.out:
        atomic_write(cfg.out, lambda tmp: t.write_csv(tmp, with_algo=True))
        if cfg.save_states and t.states:
            atomic_write(states_path(cfg.out), lambda tmp: np.save(tmp, np.stack(t.states)), suffix=".npy")
        status = {
            "status": t.status,
            "exit_code": outcome.code,
            "message": outcome.message,
            "algo": t.algo,
            "config_hash": t.config_hash,
            "instance_fingerprint": inst.fingerprint(),
            "iterations": len(t.records) - 1 if t.records else 0,
            "messages_per_iter": t.messages_per_iter,
            "alpha_ij": None if outcome.alpha is None else outcome.alpha.as_array().tolist(),
            "metadata": {k: v for k, v in t.metadata.items() if k != "tracking_error"},
            "config": asdict(cfg),
        }
        atomic_write_text(sidecar_path(cfg.out), _json(status))
    if outcome.report is not None:
        dest = cfg.report or (str(Path(cfg.out).with_suffix("")) + ".report.json" if cfg.out else None)
        if dest:
            atomic_write_text(dest, _json(outcome.report))


# -- subcommands --------------------------------------------------------------


def cmd_gen(a) -> int:
    if a.n_nodes < 2:
        raise CliError(f"--n-nodes must be >= 2, got {a.n_nodes}")
    if a.dim < 1 or (a.family != "quadratic" and a.dim < 2):
        raise CliError(f"--dim too small for family {a.family}: {a.dim}")
    graph = random_connected_graph(a.n_nodes, a.avg_degree, a.seed)
    if a.family == "quadratic":
        inst = make_quadratic_instance(a.n_nodes, a.dim, a.seed, graph=graph)
    elif a.family == "logistic":
        inst = make_logistic_instance(
            a.n_nodes, a.dim, a.seed, graph=graph, mean=a.mean, samples_per_class=a.samples_per_class
        )
    else:
        inst = make_overlapping_logistic_instance(a.n_nodes, a.dim, a.seed, graph=graph)
    out = Path(a.out_dir)
    gpath = Path(a.graph) if a.graph else out / "graph.txt"
    ipath = Path(a.instance) if a.instance else out / "instance.json"
    atomic_write(gpath, lambda tmp: write_edge_list(tmp, graph))
    atomic_write(ipath, inst.save)
    print(f"wrote {gpath} and {ipath}")
    return EXIT_OK


def _overrides(a, keys) -> dict:
    return {k: getattr(a, k) for k in keys if getattr(a, k, None) is not None}


RUN_KEYS = (
    "graph",
    "instance",
    "algo",
    "surrogate",
    "alpha_mode",
    "alpha",
    "max_iters",
    "consensus_tol",
    "grad_sum_tol",
    "stop",
    "alpha_bar",
    "budget",
    "est_seed",
    "epsilon",
    "out",
    "report",
    "save_states",
    "deterministic",
)


def cmd_run(a) -> int:
    cfg = ExperimentConfig.merged(_load_json(a.config) if a.config else None, _overrides(a, RUN_KEYS))
    inst = load_problem(cfg)
    outcome = execute(cfg, inst)
    write_outputs(cfg, inst, outcome)
    t = outcome.trace
    last = t.records[-1] if t.records else {}
    print(f"{t.algo}: status={t.status} iterations={max(len(t.records) - 1, 0)} e={last.get('e', float('nan')):.6g}")
    if outcome.message:
        print(outcome.message, file=sys.stderr)
    return outcome.code


def _shorthand_configs(a) -> list[dict]:
    alphas = {}
    for item in a.alpha or []:
        algo, _, val = item.partition("=")
        alphas[algo] = val
    out = []
    for algo in a.algos.split(","):
        algo = algo.strip()
        d = {"algo": algo, "surrogate": a.surrogate}
        if algo in alphas:
            val = alphas[algo]
            if ":" in val:
                d["alpha_mode"] = val
            else:
                d["alpha"] = _positive(val, f"{algo} step size")
        out.append(d)
    return out


def cmd_compare(a) -> int:
    common = _overrides(a, ("graph", "instance", "max_iters"))
    common["stop"] = False
    raw = [_load_json(p) for p in a.configs or []]
    if a.algos:
        raw.extend(_shorthand_configs(a))
    if not raw:
        raise CliError("compare needs --configs FILE... or --algos LIST")
    cfgs = []
    for d in raw:
        d = {k: v for k, v in d.items() if k not in ("out", "report")}
        cfgs.append(ExperimentConfig.merged(d, {**common, "deterministic": a.deterministic or None}))
    insts = [load_problem(c) for c in cfgs]
    prints = {i.fingerprint() for i in insts}
    if len(prints) != 1:
        raise CliError("configurations refer to different problem instances")
    inst = insts[0]

    def one(cfg):
        if a.sweep and cfg.alpha is None and cfg.alpha_mode is None and cfg.algo in ("dean", "extra", "diging"):
            return _swept(cfg, inst)
        return execute(cfg, inst)

    with ThreadPoolExecutor(max_workers=baselines.max_workers()) as pool:
        outcomes = list(pool.map(one, cfgs))
    rows = []
    codes = []
    for cfg, oc in zip(cfgs, outcomes):
        t = oc.trace
        codes.append(oc.code)
        e = t.column("e")
        e0 = e[0] if len(e) else 0.0
        norm = e / e0 if e0 > 0 else np.where(e == 0, 1.0, np.inf)
        for r, en in zip(t.records, norm):
            rows.append((t.algo, r["k"], en, r["V"], r["consensus_err"]))
        print(f"{t.algo}: status={t.status} e(T)/e(0)={norm[-1] if len(norm) else float('nan'):.6g} {oc.message}")

    def write(tmp):
        with open(tmp, "w") as fh:
            fh.write(",".join(COMPARE_COLUMNS) + "\n")
            for algo, k, en, V, ce in rows:
                fh.write(f"{algo},{k},{en:.17g},{V:.17g},{ce:.17g}\n")

    atomic_write(a.out, write)
    summary = {
        "status": "complete",
        "instance_fingerprint": inst.fingerprint(),
        "runs": [
            {"algo": oc.trace.algo, "status": oc.trace.status, "config_hash": oc.trace.config_hash,
             "exit_code": oc.code, "alpha": oc.trace.metadata.get("alpha", oc.trace.metadata.get("alpha_max"))}
            for oc in outcomes
        ],
    }
    atomic_write_text(sidecar_path(a.out), _json(summary))
    bad = [c for c in codes if c != EXIT_OK]
    return bad[0] if bad else EXIT_OK


def _swept(cfg: ExperimentConfig, inst: ProblemInstance) -> Outcome:
    if cfg.algo == "dean":
        g = core.SurrogateFamily.from_name(cfg.surrogate, inst, cfg.surrogate_seed)
        grid = baselines.step_grid(inst, cfg.algo, surrogates=g)

        def fn(x):
            return core.run(inst, g, EdgeWeights.uniform(inst.graph, x), cfg.max_iters, core.StopRule.never(), keep_states=False)
    else:
        grid = baselines.step_grid(inst, cfg.algo)
        W = baselines.metropolis_weights(inst.graph)
        base = baselines.extra_run if cfg.algo == "extra" else baselines.diging_run

        def fn(x):
            return base(inst, W, x, cfg.max_iters, keep_states=False)

    best, trace, _ = baselines.sweep(fn, grid)
    trace.metadata["alpha"] = best
    trace.metadata["swept"] = True
    if cfg.deterministic:
        for r in trace.records:
            r["wall_ms"] = 0.0
    return Outcome(trace, EXIT_OK)


def cmd_certify(a) -> int:
    overrides = _overrides(a, ("graph", "instance", "surrogate", "alpha_mode", "alpha", "alpha_bar", "budget", "est_seed", "epsilon"))
    cfg = ExperimentConfig.merged(_load_json(a.config) if a.config else None, {**overrides, "algo": "dean"})
    inst = load_problem(cfg)
    g = core.SurrogateFamily.from_name(cfg.surrogate, inst, cfg.surrogate_seed)
    status = None
    if a.verify:
        sc = sidecar_path(a.verify)
        if not sc.exists():
            raise CliError(f"no status sidecar next to {a.verify}")
        status = _load_json(sc)
    constants = certificates.estimate_constants(inst, g, cfg.alpha_bar, cfg.budget, cfg.est_seed)
    alpha = None
    if cfg.alpha is not None or cfg.alpha_mode is not None:
        alpha, _ = resolve_alpha(cfg, inst, g, constants)
    elif status is not None and status.get("alpha_ij"):
        alpha = EdgeWeights.from_array(inst.graph, status["alpha_ij"])
    rep = certificates.certify(inst, g, alpha, constants=constants, epsilon=cfg.epsilon, config=asdict(cfg))
    out = rep.to_json_dict()
    code = EXIT_OK
    if a.verify:
        t = core.RunTrace.read_csv(a.verify)
        t.config_hash = status.get("config_hash", "")
        sp = states_path(a.verify)
        if sp.exists():
            t.states = list(np.load(sp))
        verdict = certificates.verify_trace(t, rep)
        out["verification"] = verdict.to_json_dict()
        print(f"verification: {verdict.label}")
        if not verdict.passed:
            code = 1
    text = _json(out)
    if a.out:
        atomic_write_text(a.out, text)
    else:
        sys.stdout.write(text)
    if rep.lemma1_bound is not None:
        b = rep.lemma1_bound.as_array()
        print(f"lemma1 bound: min={b.min():.6g} max={b.max():.6g}", file=sys.stderr)
    return code


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dean", description="Decentralized approximate Newton experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen", help="generate a graph and a problem instance")
    g.add_argument("--n-nodes", type=int, required=True)
    g.add_argument("--avg-degree", type=float, required=True)
    g.add_argument("--dim", type=int, required=True)
    g.add_argument("--family", choices=("quadratic", "logistic", "logistic-overlap"), required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--mean", type=float, default=10.0, help="logistic class mean (default 10)")
    g.add_argument("--samples-per-class", type=int, default=None)
    g.add_argument("--out-dir", default=".")
    g.add_argument("--graph", help="edge-list path (default OUT_DIR/graph.txt)")
    g.add_argument("--instance", help="instance path (default OUT_DIR/instance.json)")
    g.set_defaults(func=cmd_gen)

    def problem_args(sp):
        sp.add_argument("--config", help="JSON configuration; flags override its values")
        sp.add_argument("--graph")
        sp.add_argument("--instance")
        sp.add_argument("--surrogate", choices=("identity", "spd", "endpoint-sum"))
        sp.add_argument("--alpha-mode", help="uniform:X | lemma1-frac:F | file:PATH")
        sp.add_argument("--alpha-bar", type=float)
        sp.add_argument("--budget", type=int, help="sample points per ball for non-quadratic constants")
        sp.add_argument("--est-seed", type=int)
        sp.add_argument("--epsilon", type=float)

    r = sub.add_parser("run", help="run one algorithm and write its trace")
    problem_args(r)
    r.add_argument("--algo", choices=ALGOS)
    r.add_argument("--alpha", type=float)
    r.add_argument("--max-iters", type=int)
    r.add_argument("--consensus-tol", type=float)
    r.add_argument("--grad-sum-tol", type=float)
    r.add_argument("--no-stop", dest="stop", action="store_const", const=False)
    r.add_argument("--out", help="trace CSV path")
    r.add_argument("--report", help="certificate report path (DEAN only)")
    r.add_argument("--save-states", action="store_const", const=True)
    r.add_argument("--deterministic", action="store_const", const=True, help="write wall_ms as 0")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="run several algorithms on one instance")
    c.add_argument("--configs", nargs="+")
    c.add_argument("--graph")
    c.add_argument("--instance")
    c.add_argument("--algos", help="comma-separated algorithm list")
    c.add_argument("--alpha", action="append", help="ALGO=VALUE or ALGO=MODE:ARG, repeatable")
    c.add_argument("--surrogate", default="identity", choices=("identity", "spd", "endpoint-sum"))
    c.add_argument("--sweep", action="store_true", help="grid-search step sizes not given explicitly")
    c.add_argument("--max-iters", type=int)
    c.add_argument("--deterministic", action="store_true")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_compare)

    s = sub.add_parser("certify", help="compute constants and step-size / rate certificates")
    problem_args(s)
    s.add_argument("--alpha", type=float)
    s.add_argument("--verify", help="trace CSV written by `run` to check against the certificates")
    s.add_argument("--out", help="report path (default stdout)")
    s.set_defaults(func=cmd_certify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ParameterError, StructuralError, VerificationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARAM
    except ConvergenceError as exc:
        print(f"error: node minimiser unavailable ({exc}); is the node data separable?", file=sys.stderr)
        return EXIT_PARAM
    except EstimationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    except SingularHessianError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SINGULAR
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
