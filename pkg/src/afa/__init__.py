"""Ensembling frozen diffusion denoisers by adaptive, spatially resolved feature aggregation."""

from .diffusion import (CfgConfig, NoiseSchedule, NoisyState, PerfectEpsOracle, cfg_combine,
                        ddim_step, denoising_loss, make_schedule, q_sample, sample)
from .ensemble import EnsembleBundle, afa_block, afa_forward
from .sabw import sabw_aggregate, sabw_attention, sabw_init, sabw_logits
from .unet import (Condition, DenoiserSpec, block_forward, build_denoiser, denoiser_forward,
                   time_embedding)

__version__ = "0.1.0"
