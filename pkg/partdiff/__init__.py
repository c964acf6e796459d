"""Part-discretized diffusion for truncated signed distance field shapes"""
from .autodiff import Tensor, backward, grad_check
from .condition_pipeline import ConditionSpec, FractionBox, ShapeSampler, start_step
from .config import (
    CodecConfig,
    DenoiserConfig,
    EvalConfig,
    GeometryConfig,
    RunConfig,
    SamplingConfig,
    ScheduleConfig,
    TrainingConfig,
)
from .denoiser import Denoiser, MfmState, load_denoiser, save_denoiser
from .discrete_diffusion import (
    DiffusionSchedule,
    apply_cfg,
    build_schedule,
    elbo,
    exact_nll,
    forward_marginal,
    posterior,
    reverse_step,
    schedule_from_config,
    training_loss,
)
from .errors import (
    CodebookError,
    ConfigError,
    DataError,
    EmptySurfaceError,
    FormatError,
    InconsistentStateError,
    MissingArtifactError,
    NonFiniteError,
    PartDiffError,
    ScheduleError,
    ShapeError,
    SpecError,
    TrainingDivergedError,
    UnresolvedMaskError,
)
from .events import Events
from .metrics import (
    MetricReport,
    chamfer,
    dct_psd,
    emd,
    evaluate_completion,
    evaluate_generation,
    mmd_amd,
    one_nna,
    tmd,
    uhd,
)
from .optim import AdamW, StepDecay
from .patch_codec import (
    Codebook,
    CodecTrainer,
    PatchCodec,
    PatchSpec,
    TokenMap,
    init_codebook_kmeans,
    quantize,
    vqvae_loss,
)
from .shape_corpus import (
    ShapeSpec,
    SurfacePointSet,
    TsdfGrid,
    add_noise,
    generate_shape,
    make_corpus,
    sample_surface_points,
)
from .trainer import DenoiserTrainer

__version__ = "0.1.0"

__all__ = [
    "AdamW",
    "add_noise",
    "apply_cfg",
    "backward",
    "build_schedule",
    "chamfer",
    "Codebook",
    "CodebookError",
    "CodecConfig",
    "CodecTrainer",
    "ConditionSpec",
    "ConfigError",
    "DataError",
    "dct_psd",
    "Denoiser",
    "DenoiserConfig",
    "DenoiserTrainer",
    "DiffusionSchedule",
    "elbo",
    "emd",
    "EmptySurfaceError",
    "EvalConfig",
    "evaluate_completion",
    "evaluate_generation",
    "Events",
    "exact_nll",
    "FormatError",
    "forward_marginal",
    "FractionBox",
    "generate_shape",
    "GeometryConfig",
    "grad_check",
    "InconsistentStateError",
    "init_codebook_kmeans",
    "load_denoiser",
    "make_corpus",
    "MetricReport",
    "MfmState",
    "MissingArtifactError",
    "mmd_amd",
    "NonFiniteError",
    "one_nna",
    "PartDiffError",
    "PatchCodec",
    "PatchSpec",
    "posterior",
    "quantize",
    "reverse_step",
    "RunConfig",
    "sample_surface_points",
    "SamplingConfig",
    "save_denoiser",
    "schedule_from_config",
    "ScheduleConfig",
    "ScheduleError",
    "ShapeError",
    "ShapeSampler",
    "ShapeSpec",
    "SpecError",
    "start_step",
    "StepDecay",
    "SurfacePointSet",
    "Tensor",
    "tmd",
    "TokenMap",
    "TrainingConfig",
    "training_loss",
    "TrainingDivergedError",
    "TsdfGrid",
    "uhd",
    "UnresolvedMaskError",
    "vqvae_loss",
]
