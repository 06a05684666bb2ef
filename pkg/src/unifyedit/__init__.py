"""Tuning-free text-guided image editing by attention-constrained diffusion latent optimization."""

from .backend import (
    AlphaSchedule,
    AttentionBundle,
    AttentionMap,
    CaptureConfig,
    ConstraintDescriptor,
    DiffusionBackend,
    LatentGrid,
    PromptEncoding,
    ToyBackend,
    ToyBackendConfig,
    compute_attention,
    make_toy_backend,
)
from .constraints import (
    FlattenedMask,
    SAMaskOuter,
    ca_alignment,
    ca_ratio,
    mask_outer,
    region_sa_preservation,
    sa_preservation,
)
from .masks import BinaryMask, resample_mask
from .pipeline import (
    EditConfig,
    EditResult,
    EditSpec,
    EditState,
    GradientTrace,
    capture_reference_maps,
    preset_for_edit_type,
    run_edit,
    unifyedit_step,
)
from .sampler import (
    DDIMInversion,
    Trajectory,
    blend_latents,
    cfg_noise,
    ddim_invert_step,
    ddim_sample_step,
    invert_trajectory,
)
from .scheduler import (
    CombinedGradient,
    SchedulerParams,
    apply_noise_guidance,
    apply_update,
    combine_balanced,
    combine_naive,
    combine_normalized,
    lambda_weights,
)

__version__ = "0.1.0"
