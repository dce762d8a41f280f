"""Deterministic Local SGD simulator and convergence-bound verification
toolkit for convex finite-sum problems."""

from .dataio import (
    Dataset,
    ManifestEntry,
    Partition,
    Regime,
    generate_synthetic,
    load_dataset,
    parse_libsvm,
    parse_manifest,
    partition,
    to_libsvm,
)
from .numkit import DenseVector, RngStream, SparseVector, axpy, dot, draw_index
from .objective import (
    Problem,
    ReferenceSolution,
    VarianceReport,
    build_problem,
    estimate_L,
    full_grad,
    full_grad_global,
    loss,
    measure_variances,
    solve_reference,
    stochastic_grad,
)
from .simulator import (
    AggregateTrace,
    DivergenceError,
    GradientMode,
    RunConfig,
    SyncSchedule,
    Trace,
    compute_Vt,
    run_local_sgd,
    run_minibatch_sgd,
    run_replicated,
)
from .theory import (
    BoundCurve,
    BoundInputs,
    PreconditionError,
    Verdict,
    bound_sc_identical_fs,
    bound_sc_identical_ubv,
    bound_wc_heterogeneous,
    bound_wc_identical_fs,
    bound_wc_identical_ubv,
    check_bound,
    check_grad_norm_bound,
    check_vt_bound,
    plan_H,
    plan_gamma,
)

__version__ = "0.1.0"
