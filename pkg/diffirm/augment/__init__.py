"""
Environment augmentation: diffusion sampler, causal mask, AdvAug perturbation.
"""
from diffirm.augment.diffusion import (
    AugmentBatch,
    DenoiserNet,
    NoiseSchedule,
    denoise_step,
    denoising_loss,
    forward_diffuse,
    forward_diffuse_stepwise,
    make_schedule,
    sample_environment,
    sample_environments,
    schedule_from_config,
    step_embedding,
)
from diffirm.augment.mask import (
    CausalMaskNet,
    causal_gap,
    combine,
    constant_mask,
    generate_mask,
    mask_report,
    ratio_regularizer,
    window_masks,
)
from diffirm.augment.perturb import PerturbationNet, perturb

__all__ = [
    "AugmentBatch", "DenoiserNet", "NoiseSchedule", "denoise_step", "denoising_loss",
    "forward_diffuse", "forward_diffuse_stepwise", "make_schedule", "sample_environment",
    "sample_environments", "schedule_from_config", "step_embedding",
    "CausalMaskNet", "causal_gap", "combine", "constant_mask", "generate_mask",
    "mask_report", "ratio_regularizer", "window_masks",
    "PerturbationNet", "perturb",
]
