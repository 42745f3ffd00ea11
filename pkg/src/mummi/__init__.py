"""Multi-modal state-space world models trained with contrastive or reconstruction objectives."""
import os as _os

# cap BLAS worker threads before numpy loads, if the caller asked for it
if _os.environ.get("MUMMI_THREADS"):
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["MUMMI_THREADS"])

from .diffmath import Tape, Tensor, check_gradients, grad_check
from .distributions import DiagGaussian, kl_divergence, poe_fuse
from .envs import ToyWorld, ToyWorldConfig, collect_episode, generate_masks
from .losses import mummi_total, multimodal_elbo, world_model_loss
from .mssm import MSSM, ModalitySpec, ModelConfig

__version__ = "0.1.0"

__all__ = [
    "MSSM", "DiagGaussian", "ModalitySpec", "ModelConfig", "Tape", "Tensor", "ToyWorld", "ToyWorldConfig",
    "check_gradients", "collect_episode", "generate_masks", "grad_check", "kl_divergence", "mummi_total",
    "multimodal_elbo", "poe_fuse", "world_model_loss",
]
