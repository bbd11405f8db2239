"""Numerical laboratory for the conformally prescribed scalar curvature
problem on flat tori of negative Yamabe type.

Core objects: periodic lattice fields (``torus``), the spectral conformal
operator and Dirichlet eigenvalues (``operators``), the energies J and I
with their defects (``functionals``), the two curvature flows and the
restart minimizer (``flows``), solvability diagnostics (``admissibility``),
the bubble calculus (``bubbles``), and a CLI for reproducible experiments
(``cli``).
"""

from .torus import (
    CriticalExponents,
    GridSpec,
    ScalarField,
    TorusError,
    bump_field,
    critical_norm,
    integrate,
    lp_norm,
    normalize_critical,
    read_snapshot,
    torus_distance,
    write_snapshot,
)
from .operators import (
    DirichletMask,
    GreensSample,
    OperatorError,
    SpectralOperator,
    ball_mask,
    cube_mask,
    dirichlet_nu1,
    greens_function,
    h1_norm_sq,
    punctured_mask,
    sobolev_constant_estimate,
    superlevel_mask,
)
from .functionals import (
    EnergyReport,
    FunctionalError,
    delta_i_sq,
    delta_j_sq,
    el_residual,
    energy_report,
    grad_i,
    grad_j,
    i_energy,
    i_value,
    j_energy,
    j_value,
    k_of,
    r_of,
    scalar_curvature,
    scaled_solution,
)
from .flows import (
    CompactnessReport,
    FlowConfig,
    FlowError,
    FlowTrace,
    MinimizeResult,
    compactness_monitor,
    minimize,
    run_flow,
    step_i,
    step_j,
)
from .admissibility import (
    ABCertificate,
    CertificateNotFound,
    DomainPair,
    KWReport,
    SamplerConfig,
    certify_ab,
    check_rauzy_smallness,
    counterexample_K,
    kazdan_warner,
    nested_domains,
    replay_certificate,
    subsolution_check,
)
from .bubbles import (
    BubbleConstants,
    BubbleError,
    BubbleParams,
    Decomposition,
    blowup_threshold,
    bubble_constants,
    bubble_field,
    decompose,
    epsilon_ij,
    interaction_integrals,
    interaction_matrix,
    seed_test_function,
)

__version__ = "0.1.0"
