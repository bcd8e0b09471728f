"""Entropy-regularized optimal transport on pixel grids.

The cost is translation invariant, so ``K = exp(-C / eps)`` is a
Toeplitz-block-Toeplitz matrix indexed by the displacement between pixels.
:class:`KernelStencil` stores it once per displacement and applies it either
by zero-padded FFT convolution (``method="fft"``, O(n log n)) or by direct
convolution over the kernel's nonzero support (``method="direct"``).

The FFT has an absolute error floor of roughly ``1e-16 * max|x| * sum(K)``.
When the Sinkhorn scalings span many decades (small eps, many iterations)
that floor swamps the small entries of ``Kv`` and they can come out negative.
The direct method only ever sums nonnegative terms, so every output entry is
accurate to a few ulps in the relative sense; use it for long converged runs.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import fft as sfft
from scipy import signal

from .errors import CapacityError, ContractError, NumericalBreakdownError
from .grid import DiscreteMeasure, PixelGrid, add_background, mass

MASS_RTOL = 1e-9
MAX_EXACT_ATOMS = 256


class CostForm(enum.Enum):
    SQUARED_DISTANCE = "squared"
    BOUNDED_QUARTIC = "quartic"


@dataclass(frozen=True)
class TransportCost:
    """Translation-invariant ground cost as a function of Euclidean distance.

    ``SQUARED_DISTANCE``: ``d**2``.  ``BOUNDED_QUARTIC``: ``1 - exp(-d**4 / sigma**4)``,
    which stays below 1 however far mass moves.
    """

    form: CostForm = CostForm.SQUARED_DISTANCE
    sigma: float | None = None

    def __post_init__(self):
        if self.form is CostForm.BOUNDED_QUARTIC and not (self.sigma and self.sigma > 0):
            raise ContractError("bounded quartic cost needs sigma > 0")

    @classmethod
    def squared(cls) -> "TransportCost":
        return cls(CostForm.SQUARED_DISTANCE)

    @classmethod
    def bounded_quartic(cls, sigma: float) -> "TransportCost":
        return cls(CostForm.BOUNDED_QUARTIC, float(sigma))

    @property
    def p(self) -> float:
        return 2.0 if self.form is CostForm.SQUARED_DISTANCE else 4.0

    def of_distance(self, dist):
        dist = np.asarray(dist, dtype=np.float64)
        if self.form is CostForm.SQUARED_DISTANCE:
            return dist**2
        return -np.expm1(-((dist / self.sigma) ** 4))

    def matrix(self, xa, ya, xb, yb) -> np.ndarray:
        """Dense cost matrix between two point sets."""
        dx = np.subtract.outer(np.asarray(xa, float), np.asarray(xb, float))
        dy = np.subtract.outer(np.asarray(ya, float), np.asarray(yb, float))
        return self.of_distance(np.hypot(dx, dy))


@dataclass(frozen=True)
class EntropicOTConfig:
    epsilon: float
    iterations: int
    rho: float = 0.0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ContractError(f"epsilon must be > 0, got {self.epsilon}")
        if int(self.iterations) < 1:
            raise ContractError(f"iterations must be >= 1, got {self.iterations}")
        if self.rho < 0:
            raise ContractError(f"rho must be >= 0, got {self.rho}")


def max_cost(grid: PixelGrid, cost: TransportCost) -> float:
    """Largest cost between two pixel centers of ``grid``."""
    diag = np.hypot(grid.width - 1, grid.height - 1) * grid.spacing
    return float(cost.of_distance(diag))


def default_epsilon(grid: PixelGrid, cost: TransportCost) -> float:
    if cost.form is CostForm.BOUNDED_QUARTIC:
        return 1e-3
    return 1e-3 * max_cost(grid, cost)


# -- stencil ------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class KernelStencil:
    """``K(Δ) = exp(-c(Δ)/eps)`` and ``c(Δ)`` for every displacement on ``grid``.

    Arrays have shape ``(2H-1, 2W-1)``; entry ``[dj + H-1, di + W-1]`` holds the
    value for a displacement of ``di`` columns and ``dj`` rows.
    """

    grid: PixelGrid
    cost: TransportCost
    epsilon: float
    kernel: np.ndarray = field(repr=False)
    cost_values: np.ndarray = field(repr=False)
    method: str = "fft"
    underflow: bool = False
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def kernel_cost(self) -> np.ndarray:
        return self.kernel * self.cost_values


def build_stencil(grid: PixelGrid, cost: TransportCost, epsilon: float,
                  method: str = "fft") -> KernelStencil:
    """Tabulate the kernel for every displacement on ``grid``.

    ``method`` picks how products are applied: ``"fft"`` (zero-padded spectral
    convolution), ``"direct"`` (spatial convolution over the nonzero support,
    exact where the kernel underflows) or ``"dense"`` (explicit matrix, fastest
    for a few dozen pixels).
    """
    if not epsilon > 0:
        raise ContractError(f"epsilon must be > 0, got {epsilon}")
    if method not in ("fft", "direct", "dense"):
        raise ContractError(f"unknown kernel method {method!r}")
    h, w = grid.height, grid.width
    dj = np.arange(-(h - 1), h)[:, None]
    di = np.arange(-(w - 1), w)[None, :]
    dist = np.hypot(di, dj) * grid.spacing
    cvals = cost.of_distance(dist)
    with np.errstate(under="ignore"):
        kvals = np.exp(-cvals / epsilon)
    off_center = kvals.copy()
    off_center[h - 1, w - 1] = 0.0
    underflow = grid.size > 1 and not np.any(off_center > 0)
    if underflow:
        warnings.warn(f"all off-center kernel entries underflow at eps={epsilon}; "
                      "gradients will be degenerate", RuntimeWarning, stacklevel=2)
    for arr in (kvals, cvals):
        arr.flags.writeable = False
    return KernelStencil(grid, cost, float(epsilon), kvals, cvals, method, underflow)


def _fft_plan(stencil: KernelStencil, which: str):
    key = ("fft", which)
    if key not in stencil._cache:
        h, w = stencil.grid.height, stencil.grid.width
        ph, pw = sfft.next_fast_len(2 * h - 1, real=True), sfft.next_fast_len(2 * w - 1, real=True)
        values = stencil.kernel if which == "k" else stencil.kernel_cost
        padded = np.zeros((ph, pw))
        rows = np.arange(-(h - 1), h) % ph
        cols = np.arange(-(w - 1), w) % pw
        padded[np.ix_(rows, cols)] = values
        stencil._cache[key] = ((ph, pw), sfft.rfft2(padded))
    return stencil._cache[key]


def _direct_plan(stencil: KernelStencil, which: str):
    key = ("direct", which)
    if key not in stencil._cache:
        h, w = stencil.grid.height, stencil.grid.width
        values = stencil.kernel if which == "k" else stencil.kernel_cost
        nz_rows = np.flatnonzero(np.any(values != 0, axis=1))
        nz_cols = np.flatnonzero(np.any(values != 0, axis=0))
        rj = int(np.max(np.abs(nz_rows - (h - 1)))) if nz_rows.size else 0
        ri = int(np.max(np.abs(nz_cols - (w - 1)))) if nz_cols.size else 0
        cropped = np.ascontiguousarray(values[h - 1 - rj: h + rj, w - 1 - ri: w + ri])
        stencil._cache[key] = cropped
    return stencil._cache[key]


def _dense_plan(stencil: KernelStencil, which: str):
    key = ("dense", which)
    if key not in stencil._cache:
        h, w = stencil.grid.height, stencil.grid.width
        values = stencil.kernel if which == "k" else stencil.kernel_cost
        j, i = np.divmod(np.arange(h * w), w)
        # K[a, b] is the stencil entry for displacement (i_a - i_b, j_a - j_b)
        stencil._cache[key] = np.ascontiguousarray(
            values[(j[:, None] - j[None, :]) + h - 1, (i[:, None] - i[None, :]) + w - 1])
    return stencil._cache[key]


def _apply(stencil: KernelStencil, x, which: str) -> np.ndarray:
    grid = stencil.grid
    x = np.asarray(x, dtype=np.float64)
    if x.size != grid.size:
        raise ContractError(f"vector of length {x.size} does not match grid of {grid.size} pixels")
    if stencil.method == "dense":
        return _dense_plan(stencil, which) @ x
    img = x.reshape(grid.shape)
    if stencil.method == "direct":
        out = signal.convolve2d(img, _direct_plan(stencil, which), mode="same")
    else:
        (ph, pw), spectrum = _fft_plan(stencil, which)
        out = sfft.irfft2(sfft.rfft2(img, s=(ph, pw)) * spectrum, s=(ph, pw))[: grid.height, : grid.width]
    return np.ascontiguousarray(out).ravel()


def apply_kernel(stencil: KernelStencil, x, transpose: bool = False) -> np.ndarray:
    """Return ``K @ x``. ``K`` is symmetric, so ``transpose`` only labels the call site."""
    return _apply(stencil, x, "k")


def apply_kernel_cost(stencil: KernelStencil, x) -> np.ndarray:
    """Return ``(K ⊙ C) @ x``."""
    return _apply(stencil, x, "kc")


# -- Sinkhorn -----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SinkhornRun:
    """Trajectories of one fixed-depth Sinkhorn run.

    ``u[i]``, ``v[i]`` for ``i = 0..N`` (``u[0]`` is unused and set to ones);
    ``kv[i] = K v[i-1]`` and ``ku[i] = K u[i]`` are the denominators, kept for
    the reverse pass. ``mu0``/``mu1`` are the marginals actually iterated on
    (after the background floor ``rho``).
    """

    u: np.ndarray = field(repr=False)
    v: np.ndarray = field(repr=False)
    kv: np.ndarray = field(repr=False)
    ku: np.ndarray = field(repr=False)
    mu0: np.ndarray = field(repr=False)
    mu1: np.ndarray = field(repr=False)
    rho: float
    value: float
    marginal_residual: float

    @property
    def iterations(self) -> int:
        return self.u.shape[0] - 1


def _check_balanced(m0: float, m1: float):
    if abs(m0 - m1) > MASS_RTOL * max(abs(m0), abs(m1)):
        raise ContractError(f"marginal masses differ: {m0!r} vs {m1!r}")


def sinkhorn(mu0: DiscreteMeasure, mu1: DiscreteMeasure, stencil: KernelStencil,
             config: EntropicOTConfig) -> SinkhornRun:
    """Run exactly ``config.iterations`` Sinkhorn sweeps starting from ``v = 1``.

    Returns the transport part ``u_N^T (K ⊙ C) v_N`` of the entropic problem.
    """
    if mu0.grid != stencil.grid or mu1.grid != stencil.grid:
        raise ContractError("marginals and stencil live on different grids")
    if not (mu0.is_nonnegative() and mu1.is_nonnegative()):
        raise ContractError("transport marginals must be nonnegative")
    _check_balanced(mass(mu0), mass(mu1))
    a = add_background(mu0, config.rho).values
    b = add_background(mu1, config.rho).values

    n, steps = stencil.grid.size, int(config.iterations)
    u = np.ones((steps + 1, n))
    v = np.ones((steps + 1, n))
    kv = np.ones((steps + 1, n))
    ku = np.ones((steps + 1, n))
    with np.errstate(divide="ignore", invalid="ignore", over="ignore", under="ignore"):
        for i in range(1, steps + 1):
            kv[i] = apply_kernel(stencil, v[i - 1])
            if not np.all(kv[i] > 0) or not np.all(np.isfinite(kv[i])):
                raise NumericalBreakdownError(f"K v has a zero or non-finite entry at iteration {i}", where=i)
            u[i] = a / kv[i]
            ku[i] = apply_kernel(stencil, u[i], transpose=True)
            if not np.all(ku[i] > 0) or not np.all(np.isfinite(ku[i])):
                raise NumericalBreakdownError(f"K^T u has a zero or non-finite entry at iteration {i}", where=i)
            v[i] = b / ku[i]
            if not (np.all(np.isfinite(u[i])) and np.all(np.isfinite(v[i]))):
                raise NumericalBreakdownError(f"scaling overflow at iteration {i}", where=i)
        value = float(u[-1] @ apply_kernel_cost(stencil, v[-1]))
        rows = u[-1] * apply_kernel(stencil, v[-1])
        cols = v[-1] * ku[-1]
    if not np.isfinite(value):
        raise NumericalBreakdownError("non-finite transport value", where=steps)
    residual = float(max(np.max(np.abs(rows - a)), np.max(np.abs(cols - b))))
    for arr in (u, v, kv, ku):
        arr.flags.writeable = False
    return SinkhornRun(u, v, kv, ku, a, b, float(config.rho), value, residual)


def sinkhorn_grad(run: SinkhornRun, stencil: KernelStencil,
                  mu0: DiscreteMeasure | None = None, mu1: DiscreteMeasure | None = None):
    """Gradient of the unrolled ``run.value`` with respect to both input marginals.

    Reverse-mode sweep through the recorded recurrences; each reverse step
    costs two kernel applications. The background floor applied inside
    :func:`sinkhorn` is differentiated as well, so the result is with respect
    to the marginals exactly as passed to it. ``mu0``/``mu1`` are accepted for
    call-site symmetry but the run already holds everything needed.
    """
    if run is None or run.u.shape[0] < 2:
        raise ContractError("sinkhorn_grad needs a run with recorded trajectories")
    steps = run.iterations
    a, b = run.mu0, run.mu1
    grad_a = np.zeros_like(a)
    grad_b = np.zeros_like(b)
    with np.errstate(under="ignore"):
        u_bar = apply_kernel_cost(stencil, run.v[steps])
        v_bar = apply_kernel_cost(stencil, run.u[steps])
        for i in range(steps, 0, -1):
            # v_i = b / ku_i, ku_i = K u_i
            grad_b += v_bar / run.ku[i]
            u_bar = u_bar + apply_kernel(stencil, -v_bar * run.v[i] / run.ku[i], transpose=True)
            # u_i = a / kv_i, kv_i = K v_{i-1}
            grad_a += u_bar / run.kv[i]
            v_bar = apply_kernel(stencil, -u_bar * run.u[i] / run.kv[i])
            u_bar = np.zeros_like(u_bar)
    if run.rho > 0:
        n = a.size
        grad_a = grad_a + run.rho / n * grad_a.sum()
        grad_b = grad_b + run.rho / n * grad_b.sum()
    return grad_a, grad_b


# -- exact oracle -------------------------------------------------------------

def transport_lp(a, b, cost_matrix) -> float:
    """Optimal value of the discrete Kantorovich linear program."""
    from scipy.optimize import linprog
    from scipy.sparse import csr_matrix, hstack, identity, kron, vstack

    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    cost_matrix = np.asarray(cost_matrix, dtype=np.float64)
    na, nb = a.size, b.size
    _check_balanced(a.sum(), b.sum())
    b = b * (a.sum() / b.sum())
    rows = kron(identity(na), csr_matrix(np.ones((1, nb))))
    cols = kron(csr_matrix(np.ones((1, na))), identity(nb))
    # one equality is redundant; drop the last column constraint
    a_eq = vstack([rows, cols.tocsr()[:-1]])
    res = linprog(cost_matrix.ravel(), A_eq=a_eq, b_eq=np.concatenate([a, b[:-1]]),
                  bounds=(0, None), method="highs",
                  options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10})
    if res.status != 0:
        raise NumericalBreakdownError(f"transport LP failed: {res.message}")
    return float(res.fun)


def exact_transport(mu0: DiscreteMeasure, mu1: DiscreteMeasure, cost: TransportCost) -> float:
    """Exact optimal transport value between two grid measures (test oracle)."""
    if mu0.grid != mu1.grid:
        raise ContractError("measures live on different grids")
    if not (mu0.is_nonnegative() and mu1.is_nonnegative()):
        raise ContractError("transport marginals must be nonnegative")
    _check_balanced(mass(mu0), mass(mu1))
    ia = np.flatnonzero(mu0.values > 0)
    ib = np.flatnonzero(mu1.values > 0)
    if ia.size > MAX_EXACT_ATOMS or ib.size > MAX_EXACT_ATOMS:
        raise CapacityError(f"exact transport supports at most {MAX_EXACT_ATOMS} atoms per measure")
    if ia.size == 0:
        return 0.0
    x, y = mu0.grid.centers()
    cmat = cost.matrix(x[ia], y[ia], x[ib], y[ib])
    return transport_lp(mu0.values[ia], mu1.values[ib], cmat)


def wasserstein_p(value: float, p: float) -> float:
    if value < 0:
        raise ContractError(f"transport value must be >= 0, got {value}")
    if p < 1:
        raise ContractError(f"p must be >= 1, got {p}")
    return float(value) ** (1.0 / p)


def metric_cost(x1, x2, n: float):
    """``(1 - exp(-|x1 - x2|**n)) ** (1/n)``, vectorized over leading axes."""
    if n < 1:
        raise ContractError(f"exponent must be >= 1, got {n}")
    diff = np.asarray(x1, dtype=np.float64) - np.asarray(x2, dtype=np.float64)
    r = np.sqrt(np.sum(diff * diff, axis=-1)) if diff.ndim else np.abs(diff)
    return (-np.expm1(-(r**n))) ** (1.0 / n)
