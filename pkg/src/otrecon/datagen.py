"""Random-circle phantoms with per-circle misalignment and noisy sinograms.

All lengths here are in pixels. Circle centers are measured from the domain
corner, matching :meth:`PixelGrid.centers` divided by the spacing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .grid import DiscreteMeasure, PixelGrid, SeededRng
from .tomography import ParallelBeamGeometry, Sinogram, ray_transform

SUPERSAMPLE = 4
MAX_REDRAWS = 1000


@dataclass(frozen=True)
class Circle:
    cx: float
    cy: float
    radius: float
    intensity: float

    def moved(self, dx: float, dy: float) -> "Circle":
        return Circle(self.cx + dx, self.cy + dy, self.radius, self.intensity)


@dataclass(frozen=True)
class PhantomSpec:
    grid: PixelGrid = PixelGrid(64, 64)
    count_range: tuple[int, int] = (2, 6)
    radius_range: tuple[float, float] = (4.0, 12.0)
    intensity_range: tuple[float, float] = (0.5, 1.0)
    margin: float | None = None  # defaults to max radius + shift bound

    def __post_init__(self):
        for name in ("count_range", "radius_range", "intensity_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ContractError(f"{name} is empty: {lo} > {hi}")
        if self.count_range[0] < 0 or self.radius_range[0] <= 0:
            raise ContractError("circle count must be >= 0 and radii > 0")

    def effective_margin(self, shift_bound: float = 0.0) -> float:
        if self.margin is not None:
            return float(self.margin)
        return self.radius_range[1] + shift_bound


@dataclass(frozen=True)
class MisalignmentSpec:
    shift_bound: float = 5.0
    per_circle: bool = True

    def __post_init__(self):
        if self.shift_bound < 0:
            raise ContractError("shift bound must be >= 0")


@dataclass(frozen=True)
class NoiseSpec:
    level: float = 0.05

    def __post_init__(self):
        if self.level < 0:
            raise ContractError("noise level must be >= 0")


@dataclass(frozen=True, eq=False)
class TrainingPair:
    truth: DiscreteMeasure
    data: Sinogram
    shifts: list = field(default_factory=list)
    circles: list = field(default_factory=list)
    rejected: int = 0


def render(circles, grid: PixelGrid) -> DiscreteMeasure:
    """Sum of anti-aliased disk indicators (4x4 supersampled pixel coverage)."""
    sub = (np.arange(SUPERSAMPLE) + 0.5) / SUPERSAMPLE
    xs = (np.arange(grid.width)[:, None] + sub[None, :]).ravel()
    ys = (np.arange(grid.height)[:, None] + sub[None, :]).ravel()
    image = np.zeros(grid.shape)
    for c in circles:
        # only touch the bounding box of the disk
        x_lo = max(int(np.floor(c.cx - c.radius)), 0)
        x_hi = min(int(np.ceil(c.cx + c.radius)) + 1, grid.width)
        y_lo = max(int(np.floor(c.cy - c.radius)), 0)
        y_hi = min(int(np.ceil(c.cy + c.radius)) + 1, grid.height)
        if x_lo >= x_hi or y_lo >= y_hi:
            continue
        sx = xs[x_lo * SUPERSAMPLE: x_hi * SUPERSAMPLE]
        sy = ys[y_lo * SUPERSAMPLE: y_hi * SUPERSAMPLE]
        inside = ((sx[None, :] - c.cx) ** 2 + (sy[:, None] - c.cy) ** 2) <= c.radius**2
        cover = inside.reshape(y_hi - y_lo, SUPERSAMPLE, x_hi - x_lo, SUPERSAMPLE).mean(axis=(1, 3))
        image[y_lo:y_hi, x_lo:x_hi] += c.intensity * cover
    return DiscreteMeasure(grid, image)


def sample_circles(spec: PhantomSpec, gen: np.random.Generator, shift_bound: float = 0.0) -> list[Circle]:
    grid = spec.grid
    margin = spec.effective_margin(shift_bound)
    lo_x, hi_x = margin, grid.width - margin
    lo_y, hi_y = margin, grid.height - margin
    if lo_x > hi_x or lo_y > hi_y:
        raise ContractError(f"margin {margin} leaves no room on a {grid.width}x{grid.height} grid")
    count = int(gen.integers(spec.count_range[0], spec.count_range[1], endpoint=True))
    circles = []
    for _ in range(count):
        cx = gen.uniform(lo_x, hi_x)
        cy = gen.uniform(lo_y, hi_y)
        radius = gen.uniform(*spec.radius_range)
        intensity = gen.uniform(*spec.intensity_range)
        circles.append(Circle(float(cx), float(cy), float(radius), float(intensity)))
    return circles


def sample_phantom(spec: PhantomSpec, rng: SeededRng | np.random.Generator, shift_bound: float = 0.0):
    """Draw circles and render them; returns ``(image, circles)``."""
    gen = rng.generator() if isinstance(rng, SeededRng) else rng
    circles = sample_circles(spec, gen, shift_bound)
    return render(circles, spec.grid), circles


def _inside(c: Circle, grid: PixelGrid) -> bool:
    return (c.cx - c.radius >= 0 and c.cx + c.radius <= grid.width
            and c.cy - c.radius >= 0 and c.cy + c.radius <= grid.height)


def draw_shifts(circles, mis: MisalignmentSpec, gen: np.random.Generator, grid: PixelGrid):
    """Uniform per-circle (or global) shifts; out-of-domain draws are redrawn.

    Returns ``(shifts, rejected)``.
    """
    s = mis.shift_bound
    rejected = 0
    if mis.per_circle:
        shifts = []
        for c in circles:
            for _ in range(MAX_REDRAWS):
                dx, dy = gen.uniform(-s, s, size=2)
                if _inside(c.moved(dx, dy), grid):
                    break
                rejected += 1
            else:
                raise ContractError("could not place a shifted circle inside the domain")
            shifts.append((float(dx), float(dy)))
        return shifts, rejected
    for _ in range(MAX_REDRAWS):
        dx, dy = gen.uniform(-s, s, size=2)
        if all(_inside(c.moved(dx, dy), grid) for c in circles):
            return [(float(dx), float(dy))] * len(circles), rejected
        rejected += 1
    raise ContractError("could not place the shifted phantom inside the domain")


def shift_phantom(circles, mis: MisalignmentSpec, rng: SeededRng | np.random.Generator,
                  grid: PixelGrid, shifts=None):
    """Re-render ``circles`` at randomly shifted centers.

    Returns ``(image, shifts, rejected)``. Pass ``shifts`` to force them.
    """
    rejected = 0
    if shifts is None:
        gen = rng.generator() if isinstance(rng, SeededRng) else rng
        shifts, rejected = draw_shifts(circles, mis, gen, grid)
    moved = [c.moved(dx, dy) for c, (dx, dy) in zip(circles, shifts)]
    return render(moved, grid), list(shifts), rejected


def noise_sigma(clean: np.ndarray, noise: NoiseSpec) -> float:
    """Standard deviation of the additive noise: level times the mean clean value."""
    return noise.level * float(np.mean(clean))


def make_pair(spec: PhantomSpec, mis: MisalignmentSpec, noise: NoiseSpec,
              geom: ParallelBeamGeometry, rng: SeededRng) -> TrainingPair:
    """Unshifted phantom as truth, noisy sinogram of the shifted phantom as data."""
    gen = rng.generator() if isinstance(rng, SeededRng) else rng
    circles = sample_circles(spec, gen, mis.shift_bound)
    truth = render(circles, spec.grid)
    shifts, rejected = draw_shifts(circles, mis, gen, spec.grid)
    moved, _, _ = shift_phantom(circles, mis, None, spec.grid, shifts=shifts)
    clean = ray_transform(moved, geom).values
    sigma = noise_sigma(clean, noise)
    values = clean + sigma * gen.standard_normal(clean.shape) if sigma > 0 else clean.copy()
    return TrainingPair(truth, Sinogram(geom, values), shifts, circles, rejected)


def translated_truth(pair: TrainingPair) -> DiscreteMeasure:
    """Phantom the data was simulated from, rebuilt from the recorded shifts."""
    moved = [c.moved(dx, dy) for c, (dx, dy) in zip(pair.circles, pair.shifts)]
    return render(moved, pair.truth.grid)
