"""Keypoint-based rigid registration with bandlimited diffeomorphic refinement."""
from .config import RunConfig, set_threads, thread_count
from .errors import (
    BandExceedsGrid,
    ConfigError,
    ConstantVolume,
    DegenerateConfiguration,
    EmptyMask,
    FormatError,
    GridMismatch,
    MissingCase,
    MocoError,
    NonFinite,
    TooFewChannels,
    TooFewFrames,
)
from .evaluation import (
    REGIMES,
    CaseResult,
    MetricReport,
    MotionRegime,
    dice,
    evaluate_run,
    sample_motion,
    simulate_motion,
    transform_error,
    tsnr,
    tsnr_median,
)
from .geometry import (
    KabschReport,
    PointCorrespondence,
    Quaternion,
    RigidTransform,
    kabsch_solve,
    rotation_geodesic_angle,
    slerp_fuse,
)
from .phantom import blobs_phantom, make_phantom, sphere_phantom
from .pipeline import (
    JointConfig,
    RegistrationResult,
    SequenceResult,
    ShootingConfig,
    joint_register,
    track_sequence,
)
from .rigid_solver import (
    FusionWeight,
    ModalityPair,
    RigidSettings,
    RigidSolveReport,
    alignment_loss,
    estimate_rigid_single,
    fuse_modalities,
    refine_rigid,
    rigid_register,
)
from .spectral import (
    BandlimitedTransform,
    BandlimitedVelocity,
    DeformationField,
    SpectralOperators,
    epdiff_rhs,
    integrate_geodesic,
    integrate_transform,
)
from .deform_solver import OptimizerSettings, ShootingProblem, ShootingSolution, optimize_v0
from .volume import (
    Grid,
    KeypointBankConfig,
    KeypointSet,
    Mask3,
    Volume3,
    distance_transform,
    extract_keypoints,
    normalize_intensity,
    resample_rigid,
    shape_channel,
)

__version__ = "0.1.0"
