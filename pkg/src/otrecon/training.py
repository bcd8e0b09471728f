"""Optimization loop: Adam, cosine-annealed step size, global-norm clipping."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datagen import MisalignmentSpec, NoiseSpec, PhantomSpec, TrainingPair, make_pair
from .diffnet import LossSpec, PrimalDualNet, evaluate_loss, loss_forward_backward, save_checkpoint
from .diffnet.losses import output_mass
from .diffnet.network import load_checkpoint
from .errors import ContractError, DegenerateInputError, NumericalBreakdownError
from .grid import SeededRng
from .tomography import ParallelBeamGeometry

log = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "loss", "grad_norm", "lr", "mass_err", "skipped")
VALIDATION_STREAM_BASE = 1 << 63
MAX_SKIP_FRACTION = 0.01


class TrainingAborted(NumericalBreakdownError):
    pass


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params, **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kw)

    def save(self, path, step: int | None = None) -> None:
        """Moments plus the training step they belong to (``-1`` if unknown)."""
        arrays = {f"m{i}": m for i, m in enumerate(self.m)}
        arrays.update({f"v{i}": v for i, v in enumerate(self.v)})
        with open(path, "wb") as fh:
            np.savez(fh, t=np.int64(self.t), step=np.int64(-1 if step is None else step),
                     hyper=np.array([self.beta1, self.beta2, self.eps]), **arrays)

    @classmethod
    def load(cls, path) -> "AdamState":
        with np.load(path) as z:
            count = sum(1 for k in z.files if k.startswith("m"))
            b1, b2, eps = z["hyper"]
            return cls([z[f"m{i}"] for i in range(count)], [z[f"v{i}"] for i in range(count)],
                       int(z["t"]), float(b1), float(b2), float(eps))


def adam_step(state: AdamState, params, grads, lr: float):
    """One bias-corrected Adam update. Mutates ``state``; returns new parameter arrays."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ContractError("parameter, gradient and moment lists differ in length")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or p.shape != state.m[i].shape:
            raise ContractError(f"shape mismatch for parameter {i}")
        dtype = p.dtype.type
        state.m[i] = dtype(b1) * state.m[i] + dtype(1 - b1) * g
        state.v[i] = dtype(b2) * state.v[i] + dtype(1 - b2) * g * g
        m_hat = state.m[i] / dtype(c1)
        v_hat = state.v[i] / dtype(c2)
        out.append(p - dtype(lr) * m_hat / (np.sqrt(v_hat) + dtype(state.eps)))
    return out


def global_norm(grads) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))


def clip_global_norm(grads, max_norm: float):
    """Scale all gradients jointly so their Euclidean norm is at most ``max_norm``.

    Returns ``(grads, norm_before_clipping)``.
    """
    if not max_norm > 0:
        raise ContractError("max_norm must be > 0")
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise NumericalBreakdownError(f"non-finite gradient in parameter {i}", where=i)
    norm = global_norm(grads)
    if norm <= max_norm:
        return list(grads), norm
    factor = max_norm / norm
    return [g * g.dtype.type(factor) for g in grads], norm


@dataclass(frozen=True)
class CosineSchedule:
    initial: float = 1e-3
    total_steps: int = 2000
    floor: float = 0.0

    def __call__(self, t: int) -> float:
        if self.total_steps <= 0:
            return self.initial
        t = min(max(t, 0), self.total_steps)
        return self.floor + 0.5 * (self.initial - self.floor) * (1 + math.cos(math.pi * t / self.total_steps))


@dataclass(frozen=True)
class DataStream:
    """Deterministic pair source: training pair ``k`` uses stream ``k`` of ``seed``."""

    phantom: PhantomSpec
    misalignment: MisalignmentSpec
    noise: NoiseSpec
    geometry: ParallelBeamGeometry
    seed: int = 0

    def pair(self, k: int) -> TrainingPair:
        return make_pair(self.phantom, self.misalignment, self.noise, self.geometry, SeededRng(self.seed, k))

    def validation_pair(self, k: int) -> TrainingPair:
        return make_pair(self.phantom, self.misalignment, self.noise, self.geometry,
                         SeededRng(self.seed, VALIDATION_STREAM_BASE + k))

    def validation_set(self, size: int) -> list:
        return [self.validation_pair(k) for k in range(size)]


@dataclass(frozen=True)
class TrainConfig:
    loss: LossSpec = field(default_factory=LossSpec)
    steps: int = 2000
    learning_rate: float = 1e-3
    lr_floor: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    seed: int = 0
    checkpoint_every: int = 500
    validate_every: int = 250
    validation_size: int = 16

    def __post_init__(self):
        if not self.clip_norm > 0:
            raise ContractError("clip norm must be > 0")
        if self.steps < 0:
            raise ContractError("steps must be >= 0")

    def schedule(self) -> CosineSchedule:
        return CosineSchedule(self.learning_rate, self.steps, self.lr_floor)


@dataclass
class TrainResult:
    net: PrimalDualNet
    adam: AdamState
    metrics: list
    validation: list
    skipped: int


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def validation_loss(net, pairs, spec: LossSpec) -> float:
    return float(np.mean([evaluate_loss(net, p, spec) for p in pairs])) if pairs else float("nan")


def checkpoint_paths(out_dir, step: int):
    base = Path(out_dir) / "checkpoints" / f"step_{step:06d}"
    return base.with_suffix(".otpd"), base.with_suffix(".adam.npz")


def load_training_state(path):
    """Load ``(net, adam_state, step)`` from a checkpoint written by :func:`train`."""
    path = Path(path)
    net = load_checkpoint(path)
    adam_path = path.with_suffix(".adam.npz")
    if not adam_path.exists():
        raise ContractError(f"missing optimizer state {adam_path}")
    adam = AdamState.load(adam_path)
    with np.load(adam_path) as z:
        step = int(z["step"])
    return net, adam, (adam.t if step < 0 else step)


def train(config: TrainConfig, net: PrimalDualNet, stream: DataStream, out_dir=None,
          start_step: int = 0, adam: AdamState | None = None) -> TrainResult:
    """Train ``net`` in place for steps ``start_step .. config.steps - 1``.

    Step ``k`` draws pair ``k`` from ``stream``, so a resumed run replays the
    same data as an uninterrupted one. Steps whose loss is undefined (zero
    output mass under the transport loss, numerical breakdown) are skipped and
    counted; more than 1% skipped steps aborts the run.
    """
    params = net.parameters()
    if adam is None:
        adam = AdamState.zeros_like([p.data for p in params], beta1=config.beta1,
                                    beta2=config.beta2, eps=config.adam_eps)
    schedule = config.schedule()
    val_pairs = stream.validation_set(config.validation_size)
    out_dir = Path(out_dir) if out_dir is not None else None
    metrics_fh = val_fh = None
    if out_dir is not None:
        (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out_dir / "metrics.csv", "w", newline="")
        val_fh = open(out_dir / "validation.csv", "w", newline="")
        metrics_fh.write(",".join(METRIC_FIELDS) + "\n")
        val_fh.write("step,val_loss\n")

    metrics, validation, skipped = [], [], 0
    limit = MAX_SKIP_FRACTION * max(config.steps, 1)

    def record_validation(step):
        value = validation_loss(net, val_pairs, config.loss)
        validation.append((step, value))
        if val_fh:
            val_fh.write(f"{step},{_fmt(value)}\n")
            val_fh.flush()
        log.info("step %d validation loss %.6g", step, value)

    def write_checkpoint(step):
        if out_dir is None:
            return
        ckpt, adam_path = checkpoint_paths(out_dir, step)
        save_checkpoint(net, ckpt)
        adam.save(adam_path, step)

    try:
        if config.validate_every > 0:
            record_validation(start_step)
        for step in range(start_step, config.steps):
            lr = schedule(step)
            pair = stream.pair(step)
            try:
                loss, grads, out = loss_forward_backward(net, pair, config.loss)
                grads, norm = clip_global_norm(grads, config.clip_norm)
            except (DegenerateInputError, NumericalBreakdownError) as exc:
                skipped += 1
                log.warning("step %d skipped: %s", step, exc)
                row = (step, float("nan"), float("nan"), lr, float("nan"), 1)
                if skipped > limit:
                    raise TrainingAborted(f"{skipped} skipped steps exceed 1% of {config.steps}: {exc}",
                                          where=step) from exc
            else:
                new = adam_step(adam, [p.data for p in params], grads, lr)
                for p, value in zip(params, new):
                    p.data = value
                m_f = float(pair.truth.values.sum())
                mass_err = (output_mass(out, config.loss) - m_f) / m_f if m_f > 0 else float("nan")
                row = (step, loss, norm, lr, mass_err, 0)
            metrics.append(row)
            if metrics_fh:
                metrics_fh.write(",".join(_fmt(x) for x in row) + "\n")
            done = step + 1
            if config.validate_every > 0 and (done % config.validate_every == 0 or done == config.steps):
                record_validation(done)
            if config.checkpoint_every > 0 and done % config.checkpoint_every == 0:
                write_checkpoint(done)
        if out_dir is not None:
            write_checkpoint(max(config.steps, start_step))
            save_checkpoint(net, out_dir / "final.otpd")
    finally:
        for fh in (metrics_fh, val_fh):
            if fh:
                fh.close()
    return TrainResult(net, adam, metrics, validation, skipped)


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
