"""Learned primal-dual reconstruction network.

Stage ``i`` updates the dual iterate ``h`` (sinogram space) from
``[h, A f[1], g]`` and then the primal iterate ``f`` (image space) from
``[f, A* h[0]]``; both updates are residual three-layer 3x3 conv blocks with
PReLU after the first two layers. Iterates start at zero and the
reconstruction is channel 0 of the final primal iterate.

The ray transform inside the network is divided by its operator norm (and the
data with it) so that activations stay O(1) from stage to stage.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from ..errors import ContractError, NumericalBreakdownError
from ..grid import DiscreteMeasure, PixelGrid, SeededRng
from ..tomography import ParallelBeamGeometry, Sinogram, adjoint_array, forward_array, operator_norm
from . import engine as E

CHECKPOINT_MAGIC = b"OTPD"
CHECKPOINT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sIIIIIIIdIIdQ")
INIT_STREAM = (1 << 64) - 1  # never used by per-step data streams


@dataclass(frozen=True)
class NetConfig:
    grid: PixelGrid
    geometry: ParallelBeamGeometry
    stages: int = 5
    n_primal: int = 5
    n_dual: int = 5
    filters: int = 16
    prelu_init: float = 0.25

    def __post_init__(self):
        if self.stages < 0 or self.filters < 1:
            raise ContractError("stages must be >= 0 and filters >= 1")
        if self.n_primal < 2 or self.n_dual < 1:
            raise ContractError("need at least 2 primal and 1 dual channels")


@dataclass
class ConvBlockParams:
    """Three 3x3 conv layers; ``slopes[k]`` is None for the last layer."""

    weights: list
    biases: list
    slopes: list

    @property
    def in_channels(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_channels(self) -> int:
        return self.weights[-1].shape[0]

    def tensors(self):
        out = []
        for w, b, a in zip(self.weights, self.biases, self.slopes):
            out += [w, b] + ([a] if a is not None else [])
        return out


def _xavier(gen, c_out, c_in, dtype):
    fan_in, fan_out = c_in * 9, c_out * 9
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return gen.uniform(-limit, limit, size=(c_out, c_in, 3, 3)).astype(dtype)


def init_block(gen, c_in, c_out, filters, prelu_init, dtype) -> ConvBlockParams:
    sizes = [(filters, c_in), (filters, filters), (c_out, filters)]
    weights, biases, slopes = [], [], []
    for k, (o, i) in enumerate(sizes):
        weights.append(E.parameter(_xavier(gen, o, i, dtype)))
        biases.append(E.parameter(np.zeros(o, dtype=dtype)))
        slopes.append(E.parameter(np.full(o, prelu_init, dtype=dtype)) if k < 2 else None)
    return ConvBlockParams(weights, biases, slopes)


def conv_block_forward(params: ConvBlockParams, inp: E.Tensor, iterate: E.Tensor | None = None) -> E.Tensor:
    """Conv-PReLU, conv-PReLU, conv; added onto ``iterate`` (the leading input channels by default)."""
    if inp.shape[0] != params.in_channels:
        raise ContractError(f"block expects {params.in_channels} input channels, got {inp.shape[0]}")
    x = inp
    for w, b, a in zip(params.weights, params.biases, params.slopes):
        x = E.conv2d(x, w, b)
        if a is not None:
            x = E.prelu(x, a)
    if iterate is None:
        iterate = E.channels(inp, 0, params.out_channels)
    return E.add(iterate, x)


@lru_cache(maxsize=8)
def _opnorm(grid, geom):
    return operator_norm(grid, geom)


@dataclass
class PrimalDualNet:
    config: NetConfig
    dual_blocks: list
    primal_blocks: list
    dtype: type = np.float32
    opnorm: float = field(init=False)

    def __post_init__(self):
        self.opnorm = _opnorm(self.config.grid, self.config.geometry)

    def parameters(self) -> list:
        """Trainable tensors in canonical (checkpoint) order."""
        out = []
        for d, p in zip(self.dual_blocks, self.primal_blocks):
            out += d.tensors() + p.tensors()
        return out

    def parameter_count(self) -> int:
        return sum(t.data.size for t in self.parameters())

    def zero_grad(self):
        for t in self.parameters():
            t.zero_grad()

    def copy(self, dtype=None) -> "PrimalDualNet":
        clone = init_network(self.config, seed=0, dtype=dtype or self.dtype)
        for dst, src in zip(clone.parameters(), self.parameters()):
            dst.data = src.data.astype(clone.dtype, copy=True)
        return clone


def init_network(config: NetConfig, seed: int = 0, dtype=np.float32) -> PrimalDualNet:
    """Xavier-uniform weights, zero biases, constant PReLU slopes."""
    gen = SeededRng(seed, INIT_STREAM).generator()
    dual, primal = [], []
    for _ in range(config.stages):
        dual.append(init_block(gen, config.n_dual + 2, config.n_dual, config.filters,
                               config.prelu_init, dtype))
        primal.append(init_block(gen, config.n_primal + 1, config.n_primal, config.filters,
                                 config.prelu_init, dtype))
    return PrimalDualNet(config, dual, primal, dtype)


def primal_dual_forward(net: PrimalDualNet, g: Sinogram) -> E.Tensor:
    """Run every stage and return the ``(1, H, W)`` reconstruction tensor."""
    cfg = net.config
    if g.geometry != cfg.geometry:
        raise ContractError("sinogram geometry does not match the network")
    grid, geom, dtype = cfg.grid, cfg.geometry, net.dtype
    scale = 1.0 / net.opnorm

    def fwd(x):
        return forward_array(x, grid, geom) * dtype(scale)

    def adj(y):
        return adjoint_array(y, grid, geom) * dtype(scale)

    data = E.constant((g.values * scale).astype(dtype)[None])
    h = E.constant(np.zeros((cfg.n_dual,) + geom.shape, dtype=dtype))
    f = E.constant(np.zeros((cfg.n_primal,) + grid.shape, dtype=dtype))
    for stage, (dual, primal) in enumerate(zip(net.dual_blocks, net.primal_blocks)):
        af = E.linear_operator(E.channels(f, 1, 2), fwd, adj, geom.shape, "ray")
        h = conv_block_forward(dual, E.concat([h, af, data]), h)
        ath = E.linear_operator(E.channels(h, 0, 1), adj, fwd, grid.shape, "backprojection")
        f = conv_block_forward(primal, E.concat([f, ath]), f)
        if not (np.all(np.isfinite(h.data)) and np.all(np.isfinite(f.data))):
            raise NumericalBreakdownError(f"non-finite activation in stage {stage}", where=stage)
    return E.channels(f, 0, 1)


def reconstruct(net: PrimalDualNet, g: Sinogram) -> DiscreteMeasure:
    with E.no_grad():
        out = primal_dual_forward(net, g)
    return DiscreteMeasure(net.config.grid, out.data[0].astype(np.float64))


# -- checkpoints --------------------------------------------------------------

def checkpoint_bytes(net: PrimalDualNet) -> bytes:
    """``OTPD`` checkpoint: header, then parameters as float32 LE in canonical order."""
    cfg = net.config
    params = np.concatenate([t.data.astype("<f4").ravel() for t in net.parameters()]) \
        if net.parameters() else np.zeros(0, "<f4")
    header = _CKPT_HEADER.pack(
        CHECKPOINT_MAGIC, CHECKPOINT_VERSION, cfg.stages, cfg.n_primal, cfg.n_dual, cfg.filters,
        cfg.grid.width, cfg.grid.height, cfg.grid.spacing,
        cfg.geometry.angles, cfg.geometry.detectors, cfg.geometry.detector_spacing, params.size)
    return header + params.tobytes()


def save_checkpoint(net: PrimalDualNet, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(net))


def load_checkpoint(path, dtype=np.float32, prelu_init: float = 0.25) -> PrimalDualNet:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ContractError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(data) < _CKPT_HEADER.size:
        raise ContractError(f"{path}: truncated checkpoint")
    (magic, version, stages, n_primal, n_dual, filters, width, height, spacing,
     angles, detectors, det_spacing, count) = _CKPT_HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise ContractError(f"{path}: bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {version}")
    payload = data[_CKPT_HEADER.size:]
    if len(payload) != 4 * count:
        raise ContractError(f"{path}: parameter payload has wrong length")
    cfg = NetConfig(PixelGrid(width, height, spacing), ParallelBeamGeometry(angles, detectors, det_spacing),
                    stages, n_primal, n_dual, filters, prelu_init)
    net = init_network(cfg, dtype=dtype)
    flat = np.frombuffer(payload, dtype="<f4")
    if flat.size != net.parameter_count():
        raise ContractError(f"{path}: parameter count {flat.size} does not match configuration")
    offset = 0
    for t in net.parameters():
        t.data = flat[offset: offset + t.data.size].reshape(t.data.shape).astype(dtype)
        offset += t.data.size
    return net
