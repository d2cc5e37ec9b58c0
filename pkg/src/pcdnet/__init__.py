"""Unsupervised layered image decomposition via phase correlation.

Images are explained as depth-ordered stacks of translated, recolored
learned prototypes. Localization runs in the frequency domain (normalized
cross-power spectra); composition follows a dead-leaves layering; training
is plain reconstruction with hand-written reverse-mode gradients.
"""

from .compositor import Decomposition, composite, greedy_select, recon_error
from .errors import InvalidArgumentError, NumericFailureError, UndefinedMetricError
from .fourier import SpectralImage, cross_power_spectrum, fft2, ifft2, phase_shift
from .model import Background, ModelState, Prototype, init_model, load_checkpoint, save_checkpoint
from .pc_cell import Candidate, Displacement, localize, make_candidates
from .trainer import LossBreakdown, TrainConfig, decompose, train

__version__ = "0.1.0"

__all__ = [
    "Background",
    "Candidate",
    "Decomposition",
    "Displacement",
    "InvalidArgumentError",
    "LossBreakdown",
    "ModelState",
    "NumericFailureError",
    "Prototype",
    "SpectralImage",
    "TrainConfig",
    "UndefinedMetricError",
    "composite",
    "cross_power_spectrum",
    "decompose",
    "fft2",
    "greedy_select",
    "ifft2",
    "init_model",
    "load_checkpoint",
    "localize",
    "make_candidates",
    "phase_shift",
    "recon_error",
    "save_checkpoint",
    "train",
]
