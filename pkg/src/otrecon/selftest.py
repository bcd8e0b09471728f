"""Fixed-seed verification suites shared by ``otrecon selftest`` and the test suite.

Each check compares a fast path against a slow, independent one: spectral
against dense kernel products, Sinkhorn against the transport LP, the ray
transform against its backprojection, and reverse-mode gradients against
central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datagen import MisalignmentSpec, NoiseSpec, PhantomSpec, make_pair
from .diffnet import LossKind, LossSpec, NetConfig, init_network, loss_forward_backward
from .diffnet import engine as E
from .diffnet.losses import evaluate_loss
from .grid import DiscreteMeasure, PixelGrid, SeededRng
from .tomography import ParallelBeamGeometry, adjoint_array, desk_geometry, forward_array
from .transport import (EntropicOTConfig, TransportCost, apply_kernel, apply_kernel_cost, build_stencil,
                        default_epsilon, exact_transport, sinkhorn, sinkhorn_grad)

SELFTEST_SEED = 20240101
FFT_STREAM = 1 << 40
LP_STREAM = 2 << 40
ADJOINT_STREAM = 3 << 40
GRAD_STREAM = 4 << 40


@dataclass(frozen=True)
class SuiteResult:
    name: str
    worst: float          # largest observed error statistic
    tolerance: float
    cases: int

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.worst)) and self.worst <= self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: worst={self.worst:.3e} tol={self.tolerance:.1e} cases={self.cases}"


# -- dense oracles ------------------------------------------------------------

def dense_cost(grid: PixelGrid, cost: TransportCost) -> np.ndarray:
    """``C[i, j] = c(|x_i - x_j|)`` built from pixel centers."""
    x, y = grid.centers()
    dist = np.hypot(x[:, None] - x[None, :], y[:, None] - y[None, :])
    return cost.of_distance(dist)


def dense_kernel(grid: PixelGrid, cost: TransportCost, eps: float):
    c = dense_cost(grid, cost)
    with np.errstate(under="ignore"):
        k = np.exp(-c / eps)
    return k, k * c


def fft_dense_error(size: int, gen: np.random.Generator, cost=None) -> float:
    """Largest relative error of the spectral kernel products on one seeded input."""
    cost = cost or TransportCost.squared()
    grid = PixelGrid(size, size)
    # moderate eps keeps the kernel far from underflow, so the comparison is meaningful
    eps = 0.05 * size
    stencil = build_stencil(grid, cost, eps, method="fft")
    k, kc = dense_kernel(grid, cost, eps)
    x = gen.uniform(0.0, 1.0, grid.size)
    worst = 0.0
    for fast, slow in ((apply_kernel(stencil, x), k @ x),
                       (apply_kernel(stencil, x, transpose=True), k.T @ x),
                       (apply_kernel_cost(stencil, x), kc @ x)):
        worst = max(worst, float(np.linalg.norm(fast - slow) / np.linalg.norm(slow)))
    return worst


# -- Sinkhorn against the LP --------------------------------------------------

def lp_instance(seed: int, index: int, size: int = 6):
    """Seeded pair of strictly positive, equal-mass marginals on a ``size``-square grid."""
    gen = SeededRng(seed, LP_STREAM + index).generator()
    grid = PixelGrid(size, size)
    a = gen.uniform(0.05, 1.0, grid.size)
    b = gen.uniform(0.05, 1.0, grid.size)
    a /= a.sum()
    b /= b.sum()
    return DiscreteMeasure(grid, a), DiscreteMeasure(grid, b)


def sinkhorn_lp_gap(seed: int, index: int, iterations: int = 5000):
    """``(entropic value, exact value)`` for one seeded 6x6 squared-distance instance."""
    mu0, mu1 = lp_instance(seed, index)
    cost = TransportCost.squared()
    eps = default_epsilon(mu0.grid, cost)
    # 36 pixels: the explicit matrix is cheapest, and like "direct" it stays exact under underflow
    stencil = build_stencil(mu0.grid, cost, eps, method="dense")
    run = sinkhorn(mu0, mu1, stencil, EntropicOTConfig(eps, iterations))
    return run.value, exact_transport(mu0, mu1, cost)


# -- ray transform adjoint ----------------------------------------------------

def adjoint_gap(grid: PixelGrid, geom: ParallelBeamGeometry, gen: np.random.Generator) -> float:
    """``|<Af, g> - <f, A*g>| / (|Af| |g|)`` for one random pair."""
    f = gen.standard_normal(grid.shape)
    g = gen.standard_normal(geom.shape)
    af = forward_array(f, grid, geom)
    lhs = float(np.sum(af * g))
    rhs = float(np.sum(f * adjoint_array(g, grid, geom)))
    return abs(lhs - rhs) / (np.linalg.norm(af) * np.linalg.norm(g))


# -- finite differences -------------------------------------------------------

def sinkhorn_fd_error(gen: np.random.Generator, size: int = 4, iterations: int = 20,
                      h: float = 1e-6) -> float:
    """Relative error of the Sinkhorn marginal gradient along a random direction."""
    grid = PixelGrid(size, size)
    cost = TransportCost.squared()
    eps = 0.5
    stencil = build_stencil(grid, cost, eps, method="direct")
    cfg = EntropicOTConfig(eps, iterations, 1e-3)
    a = gen.uniform(0.2, 1.0, grid.size)
    b = gen.uniform(0.2, 1.0, grid.size)
    b *= a.sum() / b.sum()
    run = sinkhorn(DiscreteMeasure(grid, a), DiscreteMeasure(grid, b), stencil, cfg)
    ga, gb = sinkhorn_grad(run, stencil)
    # mass-preserving directions keep both marginals balanced
    da = gen.standard_normal(grid.size)
    da -= da.mean()
    db = gen.standard_normal(grid.size)
    db -= db.mean()

    def value(t):
        return sinkhorn(DiscreteMeasure(grid, a + t * da), DiscreteMeasure(grid, b + t * db),
                        stencil, cfg).value

    fd = (value(h) - value(-h)) / (2 * h)
    exact = float(ga @ da + gb @ db)
    return abs(fd - exact) / max(abs(exact), 1e-12)


def tiny_problem(seed: int, kind: LossKind, dtype=np.float64):
    """A small network and training pair for end-to-end gradient checks."""
    grid = PixelGrid(8, 8)
    geom = ParallelBeamGeometry(4, 12)
    cfg = NetConfig(grid, geom, stages=2, n_primal=3, n_dual=2, filters=4)
    net = init_network(cfg, seed=seed, dtype=dtype)
    phantom = PhantomSpec(grid, (1, 2), (1.5, 2.5), (0.5, 1.0))
    pair = make_pair(phantom, MisalignmentSpec(1.0), NoiseSpec(0.05), geom, SeededRng(seed, GRAD_STREAM))
    spec = LossSpec(kind, EntropicOTConfig(0.05, 10, 1e-3), cost_sigma=3.0)
    return net, pair, spec


def network_fd_error(seed: int, kind: LossKind, gen: np.random.Generator, h: float = 1e-6) -> float:
    """Relative error of the end-to-end parameter gradient along a random direction (64-bit)."""
    net, pair, spec = tiny_problem(seed, kind)
    _, grads, out = loss_forward_backward(net, pair, spec)
    params = net.parameters()
    base = [p.data.copy() for p in params]
    dirs = [gen.standard_normal(p.shape) for p in base]
    # unit direction: a short step is less likely to cross a PReLU or positive-part kink
    norm = np.sqrt(sum(float(np.sum(d * d)) for d in dirs))
    dirs = [d / norm for d in dirs]
    exact = sum(float(np.sum(g * d)) for g, d in zip(grads, dirs))

    def value(t):
        for p, b0, d in zip(params, base, dirs):
            p.data = b0 + t * d
        return evaluate_loss(net, pair, spec)

    fd = (value(h) - value(-h)) / (2 * h)
    value(0.0)
    return abs(fd - exact) / max(abs(exact), 1e-12)


def _away_from_zero(gen, shape):
    # |x| >= 0.1, so short steps never cross a PReLU kink
    return gen.uniform(0.1, 1.0, shape) * gen.choice([-1.0, 1.0], shape)


def _primitive_cases():
    grid, geom = PixelGrid(6, 6), ParallelBeamGeometry(3, 9)

    def fwd(ch):
        return forward_array(ch, grid, geom)

    def adj(ch):
        return adjoint_array(ch, grid, geom)

    def mse(gen):
        target = gen.standard_normal((1, 4, 4))
        return [gen.standard_normal((1, 4, 4))], lambda x: E.mean_squared_error(x, target)

    return {
        "conv2d": lambda gen: ([gen.standard_normal((2, 5, 4)), gen.standard_normal((3, 2, 3, 3)),
                                gen.standard_normal(3)], E.conv2d),
        "prelu": lambda gen: ([_away_from_zero(gen, (3, 4, 4)), gen.uniform(0, 0.5, 3)], E.prelu),
        "add": lambda gen: ([gen.standard_normal((2, 3, 3)), gen.standard_normal((2, 3, 3))], E.add),
        "concat": lambda gen: ([gen.standard_normal((1, 3, 3)), gen.standard_normal((2, 3, 3))],
                               lambda a, b: E.concat([a, b])),
        "channels": lambda gen: ([gen.standard_normal((4, 3, 3))], lambda x: E.channels(x, 1, 3)),
        "scale": lambda gen: ([gen.standard_normal((2, 3, 3))], lambda x: E.scale(x, -1.7)),
        "linear_operator": lambda gen: ([gen.standard_normal((2,) + grid.shape)],
                                        lambda x: E.linear_operator(x, fwd, adj, geom.shape)),
        "mse": mse,
    }


PRIMITIVES = _primitive_cases()


def primitive_fd_error(name: str, seed: int, dtype=np.float64, h: float = 1e-4) -> float:
    """Worst relative error of one engine primitive's input gradients.

    The reverse pass runs in ``dtype``; the reference is a 64-bit central
    difference of ``<probe, op(inputs)>`` along a random direction per input.
    Each case is at most quadratic per input (PReLU stays clear of its kink
    for steps below 0.1 / max|direction|), so the central difference has no
    truncation error and a longer step only cuts cancellation.
    """
    gen = SeededRng(seed, GRAD_STREAM + 1).generator()
    arrays, op = PRIMITIVES[name](gen)
    probe = gen.standard_normal(op(*[E.constant(a) for a in arrays]).shape)
    tensors = [E.parameter(a.astype(dtype)) for a in arrays]
    out = op(*tensors)
    E.custom_scalar(out, float(np.sum(probe * out.data)), probe).backward()
    worst = 0.0
    for k, t in enumerate(tensors):
        direction = gen.standard_normal(arrays[k].shape)
        exact = float(np.sum(t.grad.astype(np.float64) * direction))

        def value(step):
            moved = list(arrays)
            moved[k] = arrays[k] + step * direction
            return float(np.sum(probe * op(*[E.constant(a) for a in moved]).data))

        fd = (value(h) - value(-h)) / (2 * h)
        worst = max(worst, abs(fd - exact) / max(abs(exact), 1e-12))
    return worst


def network_fd_error_32(seed: int, kind: LossKind, h: float = 1e-6) -> float:
    """32-bit end-to-end parameter gradient against a 64-bit central difference."""
    net64, pair, spec = tiny_problem(seed, kind)
    net32 = net64.copy(np.float32)
    net64 = net32.copy(np.float64)  # identical weights in both precisions
    _, grads, _ = loss_forward_backward(net32, pair, spec)
    gen = SeededRng(seed, GRAD_STREAM + 2).generator()
    dirs = [gen.standard_normal(p.shape) for p in net64.parameters()]
    norm = np.sqrt(sum(float(np.sum(d * d)) for d in dirs))
    dirs = [d / norm for d in dirs]
    exact = sum(float(np.sum(g.astype(np.float64) * d)) for g, d in zip(grads, dirs))
    base = [p.data.copy() for p in net64.parameters()]

    def value(t):
        for p, b0, d in zip(net64.parameters(), base, dirs):
            p.data = b0 + t * d
        return evaluate_loss(net64, pair, spec)

    fd = (value(h) - value(-h)) / (2 * h)
    return abs(fd - exact) / max(abs(exact), 1e-12)


# -- the suite ----------------------------------------------------------------

def run_selftest(seed: int = SELFTEST_SEED) -> list[SuiteResult]:
    """Reduced-size versions of the verification suites; deterministic in ``seed``."""
    results = []
    gen = SeededRng(seed, FFT_STREAM).generator()
    sizes = (8, 16, 32)
    results.append(SuiteResult("fft_vs_dense", max(fft_dense_error(s, gen) for s in sizes), 1e-10, len(sizes)))

    count = 10
    gaps = []
    for k in range(count):
        approx, exact = sinkhorn_lp_gap(seed, k)
        gaps.append(abs(approx - exact) / (1e-2 * exact + 1e-6))
    results.append(SuiteResult("sinkhorn_vs_lp", max(gaps), 1.0, count))

    gen = SeededRng(seed, ADJOINT_STREAM).generator()
    grid = PixelGrid(64, 64)
    geom = desk_geometry(64)
    results.append(SuiteResult("adjoint", max(adjoint_gap(grid, geom, gen) for _ in range(10)), 1e-12, 10))

    gen = SeededRng(seed, GRAD_STREAM).generator()
    results.append(SuiteResult("sinkhorn_grad_fd", max(sinkhorn_fd_error(gen) for _ in range(5)), 1e-6, 5))
    worst = max(network_fd_error(seed + k, kind, gen) for k in range(2) for kind in LossKind)
    results.append(SuiteResult("network_grad_fd", worst, 1e-5, 2 * len(LossKind)))
    return results
