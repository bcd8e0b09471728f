"""Reverse-mode engine, primal-dual network and training losses."""

from .engine import Tensor, no_grad
from .losses import LossKind, LossSpec, evaluate_loss, loss_forward_backward, output_mass, wasserstein_terms
from .network import (ConvBlockParams, NetConfig, PrimalDualNet, conv_block_forward, init_network,
                      load_checkpoint, primal_dual_forward, reconstruct, save_checkpoint)

__all__ = [
    "Tensor", "no_grad", "LossKind", "LossSpec", "evaluate_loss", "loss_forward_backward",
    "wasserstein_terms", "output_mass", "ConvBlockParams", "NetConfig", "PrimalDualNet", "conv_block_forward",
    "init_network", "load_checkpoint", "primal_dual_forward", "reconstruct", "save_checkpoint",
]
