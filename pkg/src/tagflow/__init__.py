"""Dense 3D incompressible motion estimation from tagged-image sequences.

Harmonic-phase extraction feeds a log-domain demons registration engine;
three sequence strategies (direct, incremental, velocity-sum warm start)
estimate the frame-1 -> frame-n deformations, and a synthetic phantom with
closed-form ground truth quantifies tag jumping and accuracy.
"""

__version__ = "0.1.0"

from .volume import (  # noqa: F401
    Grid3,
    GridMismatchError,
    ScalarVolume,
    VectorVolume,
    compose_displacements,
    divergence,
    gaussian_smooth,
    gradient_central,
    jacobian_determinant,
    trilinear_sample,
    warp_phase,
    warp_scalar,
    wrap,
    wrapped_gradient,
)
from .tmv import read_volume, write_volume  # noqa: F401
from .phantom import (  # noqa: F401
    MotionModel,
    ShearStep,
    TagPattern,
    analytic_forward,
    analytic_inverse,
    ground_truth_displacement,
    jump_onset_frame,
    make_default_sequence,
    render_tagged_frame,
)
from .harp import (  # noqa: F401
    HarpFilterSpec,
    PhaseSet,
    default_filter_specs,
    extract_phase,
    extract_phase_set,
)
from .demons import (  # noqa: F401
    NumericalDivergenceError,
    RegistrationParams,
    RegistrationResult,
    demons_update,
    exp_velocity,
    project_divergence_free,
    register,
)
from .strategies import (  # noqa: F401
    SequenceEstimate,
    accumulate_velocities,
    run_direct,
    run_incremental,
    run_new_start,
)
from .metrics import (  # noqa: F401
    MetricRow,
    corr,
    deformed_phase,
    detect_tag_jump,
    endpoint_error,
    evaluate_sequence,
    ssim,
)
