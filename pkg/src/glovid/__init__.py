"""Global-feature video synthesis.

A video auto-encoder compresses a clip into one 2D global feature and decodes
any frame from (global feature, frame index) with a conditional diffusion
model; a second diffusion model samples new global features. Training pairs
a denoising objective with a KL term on the global features and a pairwise
coherence/realism adversarial loss.
"""

from .config import RunConfig, parse_config_file
from .decoder import DenoiserConditioning, FrameDenoiser, SamplerConfig, synth_frames
from .diffusion import (NoiseSchedule, PosteriorStats, cfg_combine, ddim_step,
                        make_linear_schedule, posterior_mean_variance,
                        predict_x0_from_noise, q_sample)
from .encoder import (GlobalFeaturePosterior, VideoEncoder, keyframe_indexes,
                      kl_loss, sample_global, select_keyframes)
from .generator import (TokenDenoiser, flatten_global, generator_train_step,
                        sample_global_feature, unflatten_global)

__all__ = [
    "RunConfig", "parse_config_file",
    "NoiseSchedule", "PosteriorStats", "make_linear_schedule", "q_sample",
    "predict_x0_from_noise", "posterior_mean_variance", "ddim_step",
    "cfg_combine",
    "GlobalFeaturePosterior", "VideoEncoder", "keyframe_indexes", "kl_loss",
    "sample_global", "select_keyframes",
    "DenoiserConditioning", "FrameDenoiser", "SamplerConfig", "synth_frames",
    "TokenDenoiser", "flatten_global", "unflatten_global",
    "generator_train_step", "sample_global_feature",
]

__version__ = "0.1.0"
