"""Decentralized approximate Newton (DEAN) simulation, certificates and baselines."""

from .baselines import diging_run, extra_run, metropolis_weights, sweep
from .certificates import (
    CertificateReport,
    ConstantsEstimate,
    certify,
    estimate_constants,
    lemma1_stepsize_bound,
    lyapunov,
    optimality_error,
    theorem2_stepsize_bound,
    theorem3_rate,
    verify_trace,
)
from .core import (
    NetworkState,
    RunTrace,
    StopRule,
    SurrogateFamily,
    centralized_newton_step,
    dean_init,
    dean_step,
    linear_consensus_step,
    run,
)
from .errors import (
    ConvergenceError,
    DeanError,
    DivergenceError,
    DomainError,
    EstimationError,
    ParameterError,
    SingularHessianError,
    StructuralError,
    VerificationError,
)
from .objectives import (
    LogisticObjective,
    ProblemInstance,
    QuadraticObjective,
    make_logistic_instance,
    make_overlapping_logistic_instance,
    make_quadratic_instance,
)
from .topology import EdgeWeights, Graph, laplacian, random_connected_graph, spectrum

__version__ = "0.1.0"
