"""Training losses: mean squared error and mass-normalized entropic Wasserstein."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.special import expit

from ..errors import DegenerateInputError
from ..grid import DiscreteMeasure, PixelGrid, mass
from ..transport import (EntropicOTConfig, KernelStencil, TransportCost, build_stencil,
                         sinkhorn, sinkhorn_grad)
from . import engine as E
from .network import PrimalDualNet, primal_dual_forward


class LossKind(enum.Enum):
    MSE = "l2"
    WASSERSTEIN = "ot"


@dataclass(frozen=True)
class LossSpec:
    kind: LossKind = LossKind.MSE
    ot: EntropicOTConfig = field(default_factory=lambda: EntropicOTConfig(1e-3, 10, 1e-6))
    cost_sigma: float = 10.0  # pixels
    mass_penalty: float = 1.0
    kernel_method: str = "direct"
    rectifier_scale: float = 0.1  # softplus temperature over the output RMS; 0 is the hard positive part

    def cost(self) -> TransportCost:
        return TransportCost.bounded_quartic(self.cost_sigma)


@lru_cache(maxsize=8)
def _stencil(grid: PixelGrid, sigma: float, epsilon: float, method: str) -> KernelStencil:
    # sigma is given in pixels, the cost sees physical lengths
    return build_stencil(grid, TransportCost.bounded_quartic(sigma * grid.spacing), epsilon, method)


def rectify(r: np.ndarray, scale: float):
    """Nonnegative, positively homogeneous surrogate of ``r`` and its vector-Jacobian product.

    ``p = tau * softplus(r / tau)`` with ``tau = scale * rms(r)``, so
    ``p(alpha r) = alpha p(r)`` for ``alpha > 0`` and every pixel keeps a
    nonzero gradient. ``scale = 0`` gives the plain positive part.
    Returns ``(p, vjp)`` where ``vjp(g) = (dp/dr)^T g``.
    """
    r = np.asarray(r, dtype=np.float64)
    if scale == 0:
        pos = r > 0
        return np.where(pos, r, 0.0), lambda g: np.where(pos, g, 0.0)
    n = r.size
    rms = float(np.sqrt(np.dot(r, r) / n))
    if not rms > 0:
        return np.zeros_like(r), lambda g: np.zeros_like(g)
    tau = scale * rms
    z = r / tau
    soft = np.logaddexp(0.0, z)
    sig = expit(z)

    def vjp(g):
        # d tau / d r_j = scale * r_j / (n * rms)
        return g * sig + float(np.dot(g, soft - z * sig)) * scale * r / (n * rms)

    return tau * soft, vjp


@dataclass(frozen=True)
class WassersteinTerms:
    transport: float
    penalty: float
    output_mass: float
    grad: np.ndarray  # d(total)/d(output), flat float64


def wasserstein_terms(output: np.ndarray, truth: DiscreteMeasure, spec: LossSpec) -> WassersteinTerms:
    """Loss value and its gradient with respect to the raw network output.

    The output is rectified (see :func:`rectify`), rescaled to the truth's
    mass and compared with the truth by the unrolled Sinkhorn value, with the
    background floor on both marginals. The penalty is ``spec.mass_penalty``
    times the squared relative error of the rectified mass. Gradients flow
    through every one of these steps.
    """
    r = np.asarray(output, dtype=np.float64).ravel()
    p, vjp = rectify(r, spec.rectifier_scale)
    m_out = float(p.sum())
    m_f = mass(truth)
    if not m_out > 0:
        raise DegenerateInputError(f"reconstruction has no positive mass (signed mass {float(r.sum())!r})")
    if not m_f > 0:
        raise DegenerateInputError("ground truth has zero mass")
    grid = truth.grid
    mu0 = p * (m_f / m_out)
    stencil = _stencil(grid, spec.cost_sigma, spec.ot.epsilon, spec.kernel_method)
    run = sinkhorn(DiscreteMeasure(grid, mu0), truth, stencil, spec.ot)
    g0, _ = sinkhorn_grad(run, stencil)
    # through mu0 = p * m_f / sum(p)
    g_p = (m_f / m_out) * (g0 - np.dot(g0, p) / m_out)
    rel = (m_out - m_f) / m_f
    penalty = spec.mass_penalty * rel**2
    g_p = g_p + 2.0 * spec.mass_penalty * rel / m_f
    return WassersteinTerms(run.value, penalty, m_out, vjp(g_p))


def output_mass(output: np.ndarray, spec: LossSpec) -> float:
    """Mass the loss constrains: signed sum under MSE, rectified sum under transport."""
    r = np.asarray(output, dtype=np.float64).ravel()
    if spec.kind is LossKind.MSE:
        return float(r.sum())
    return float(rectify(r, spec.rectifier_scale)[0].sum())


def loss_node(out: E.Tensor, truth: DiscreteMeasure, spec: LossSpec) -> E.Tensor:
    if spec.kind is LossKind.MSE:
        return E.mean_squared_error(out, truth.image[None])
    terms = wasserstein_terms(out.data, truth, spec)
    return E.custom_scalar(out, terms.transport + terms.penalty, terms.grad, "wasserstein")


def loss_forward_backward(net: PrimalDualNet, pair, spec: LossSpec):
    """Forward the network on ``pair.data``, backpropagate the loss.

    Returns ``(loss, grads, output)`` where ``grads`` follows the order of
    ``net.parameters()``.
    """
    net.zero_grad()
    out = primal_dual_forward(net, pair.data)
    loss = loss_node(out, pair.truth, spec)
    loss.backward()
    grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in net.parameters()]
    return float(loss.data), grads, out.data[0]


def evaluate_loss(net: PrimalDualNet, pair, spec: LossSpec) -> float:
    with E.no_grad():
        out = primal_dual_forward(net, pair.data)
        return float(loss_node(out, pair.truth, spec).data)
