"""Modular blended-attention networks for toy video question answering.

Subpackages:

- ``autodiff``: numpy arrays with reverse-mode differentiation.
- ``module``: the generic neural network module (GNNM).
- ``hierarchy``: clip-level / video-level assembly and parameter sharing.
- ``decoders``: open-ended, count and multiple-choice answer heads and losses.
- ``training``: optimizers, schedules, two-stage training, checkpoints.
- ``complexity``: closed-form parameter counts and their audit.
- ``synth``: synthetic video QA data and its file format.
"""

__version__ = "0.1.0"

from .autodiff import Tensor, backward, tensor
from .module import GNNM, GnnmConfig, GnnmOutput, GnnmParameters, gnnm_forward, init_parameters
from .hierarchy import HierarchyConfig, Network, build_network, network_forward
from .sample import Batch, VideoSample
from .complexity import count_gnnm_params, space_lower_bound, audit_network

__all__ = [
    "Tensor", "tensor", "backward",
    "GNNM", "GnnmConfig", "GnnmOutput", "GnnmParameters", "gnnm_forward", "init_parameters",
    "HierarchyConfig", "Network", "build_network", "network_forward",
    "Batch", "VideoSample",
    "count_gnnm_params", "space_lower_bound", "audit_network",
]
