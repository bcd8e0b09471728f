"""Flat ``key = value`` experiment configuration.

One key per line, ``#`` starts a comment, blank lines are ignored. Unknown or
repeated keys are errors. Lengths are in pixels unless the key says
otherwise. Booleans are ``true``/``false``; lists are comma-separated.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .datagen import MisalignmentSpec, NoiseSpec, PhantomSpec
from .diffnet import LossKind, LossSpec, NetConfig
from .errors import ConfigError
from .grid import PixelGrid
from .tomography import ParallelBeamGeometry
from .training import DataStream, TrainConfig
from .transport import EntropicOTConfig


@dataclass(frozen=True)
class ExperimentConfig:
    # random streams
    seed: int = 0
    # image grid and acquisition
    grid_size: int = 64                 # pixels per side
    pixel_spacing: float = 1.0          # length units per pixel
    angles: int = 30                    # views over [0, pi)
    detectors: int = 0                  # 0 selects ceil(sqrt(2) * grid_size)
    detector_spacing: float = 1.0       # length units
    # phantoms and misalignment
    circles_min: int = 2
    circles_max: int = 6
    radius_min: float = 4.0             # pixels
    radius_max: float = 12.0            # pixels
    intensity_min: float = 0.5
    intensity_max: float = 1.0
    margin: float = -1.0                # pixels; negative selects radius_max + shift_bound
    shift_bound: float = 5.0            # pixels, per component
    per_circle_shift: bool = True
    noise_level: float = 0.05           # std relative to mean clean sinogram value
    # dataset
    num_pairs: int = 16
    dataset_dir: str = ""               # train from stored pairs instead of on-the-fly
    # network
    stages: int = 5
    n_primal: int = 5
    n_dual: int = 5
    filters: int = 16
    prelu_init: float = 0.25
    # loss
    loss: str = "l2"                    # l2 | ot
    ot_epsilon: float = 1e-3
    ot_iterations: int = 10
    ot_background: float = 1e-6
    cost_sigma: float = 10.0            # pixels
    mass_penalty: float = 1.0
    kernel_method: str = "direct"       # direct | fft | dense
    rectifier_scale: float = 0.1        # softplus temperature over output RMS; 0 = positive part
    # optimization
    steps: int = 2000
    learning_rate: float = 1e-3
    lr_floor: float = 0.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    checkpoint_every: int = 500         # steps
    validate_every: int = 250           # steps
    validation_size: int = 16           # pairs
    # smearing check (1-D)
    prop1_cells: int = 256
    prop1_bound: int = 8                # cells
    prop1_samples: int = 10000
    prop1_width: float = 10.0           # cells, std of the Gaussian bump
    # barycenter check (1-D)
    prop2_points: int = 401             # grid points on [-2, 2]
    prop2_distributions: int = 10
    prop2_cells: int = 41               # transport grid for the brute-force search
    prop2_sinkhorn_iterations: int = 200
    prop2_sigma: float = 1.0            # bounded-cost scale, same units as x
    prop2_eps_fraction: float = 1e-2    # entropic eps over the largest grid cost
    # metric check
    metric_exponents: tuple = (1.0, 2.0, 4.0)
    metric_triples: int = 1000000
    metric_box: float = 100.0           # coordinates uniform in [-box, box]

    def __post_init__(self):
        if self.loss not in ("l2", "ot"):
            raise ConfigError(f"loss must be 'l2' or 'ot', got {self.loss!r}")
        if self.kernel_method not in ("direct", "fft", "dense"):
            raise ConfigError(f"kernel_method must be 'direct', 'fft' or 'dense', got {self.kernel_method!r}")
        if self.grid_size < 1 or self.angles < 1 or self.detectors < 0:
            raise ConfigError("grid_size and angles must be >= 1, detectors >= 0")

    # -- derived objects --------------------------------------------------

    def grid(self) -> PixelGrid:
        return PixelGrid(self.grid_size, self.grid_size, self.pixel_spacing)

    def geometry(self) -> ParallelBeamGeometry:
        det = self.detectors or int(math.ceil(math.sqrt(2) * self.grid_size))
        return ParallelBeamGeometry(self.angles, det, self.detector_spacing)

    def phantom(self) -> PhantomSpec:
        return PhantomSpec(self.grid(), (self.circles_min, self.circles_max),
                           (self.radius_min, self.radius_max), (self.intensity_min, self.intensity_max),
                           None if self.margin < 0 else self.margin)

    def misalignment(self) -> MisalignmentSpec:
        return MisalignmentSpec(self.shift_bound, self.per_circle_shift)

    def noise(self) -> NoiseSpec:
        return NoiseSpec(self.noise_level)

    def stream(self) -> DataStream:
        return DataStream(self.phantom(), self.misalignment(), self.noise(), self.geometry(), self.seed)

    def net_config(self) -> NetConfig:
        return NetConfig(self.grid(), self.geometry(), self.stages, self.n_primal, self.n_dual,
                         self.filters, self.prelu_init)

    def loss_spec(self) -> LossSpec:
        return LossSpec(LossKind(self.loss),
                        EntropicOTConfig(self.ot_epsilon, self.ot_iterations, self.ot_background),
                        self.cost_sigma, self.mass_penalty, self.kernel_method,
                        self.rectifier_scale)

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.loss_spec(), self.steps, self.learning_rate, self.lr_floor,
                           self.adam_beta1, self.adam_beta2, self.adam_eps, self.clip_norm, self.seed,
                           self.checkpoint_every, self.validate_every, self.validation_size)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    # -- text form --------------------------------------------------------

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    return str(value)


def _parse_value(name, kind, text):
    try:
        if kind is bool:
            low = text.lower()
            if low not in ("true", "false"):
                raise ValueError(text)
            return low == "true"
        if kind is int:
            return int(text, 0)
        if kind is float:
            value = float(text)
            if not np.isfinite(value):
                raise ValueError(text)
            return value
        if kind is tuple:
            return tuple(float(x) for x in text.split(",") if x.strip())
        return text
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse {text!r} as {kind.__name__}") from exc


_TYPES = {"int": int, "float": float, "bool": bool, "str": str, "tuple": tuple}


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    known = {f.name: _TYPES[f.type] for f in fields(ExperimentConfig)}
    values, seen = {}, set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        values[key] = _parse_value(key, known[key], value)
    try:
        return dataclasses.replace(base or ExperimentConfig(), **values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)
