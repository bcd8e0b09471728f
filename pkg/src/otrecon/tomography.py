"""Parallel-beam ray transform and its exact (matched) adjoint.

The image domain is centered on the rotation axis. For view angle ``theta``
the detector axis is ``n = (cos theta, sin theta)`` and rays run along
``d = (-sin theta, cos theta)``. Each ray is sampled at steps of half a pixel;
samples are bilinearly interpolated from pixel centers (zero outside the grid)
and weighted by the step length. The whole discretization is assembled once
into a sparse matrix, so backprojection is its transpose.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import sparse

from .errors import ContractError
from .grid import DiscreteMeasure, PixelGrid

SINO_MAGIC = b"OTS1"
_SINO_HEADER = struct.Struct("<4sIId")


@dataclass(frozen=True)
class ParallelBeamGeometry:
    angles: int
    detectors: int
    detector_spacing: float = 1.0

    def __post_init__(self):
        if int(self.angles) < 1 or int(self.detectors) < 1:
            raise ContractError("angle and detector counts must be >= 1")
        if not self.detector_spacing > 0:
            raise ContractError("detector spacing must be > 0")
        object.__setattr__(self, "angles", int(self.angles))
        object.__setattr__(self, "detectors", int(self.detectors))
        object.__setattr__(self, "detector_spacing", float(self.detector_spacing))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.angles, self.detectors)

    def thetas(self) -> np.ndarray:
        return np.arange(self.angles) * np.pi / self.angles

    def offsets(self) -> np.ndarray:
        """Signed detector-cell centers, symmetric about the rotation axis."""
        return (np.arange(self.detectors) - (self.detectors - 1) / 2) * self.detector_spacing


def desk_geometry(size: int = 64) -> ParallelBeamGeometry:
    """30 views with ``ceil(sqrt(2) * size)`` unit-spaced detector cells."""
    return ParallelBeamGeometry(30, int(np.ceil(np.sqrt(2) * size)), 1.0)


@dataclass(frozen=True, eq=False)
class Sinogram:
    geometry: ParallelBeamGeometry
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = np.array(self.values, dtype=np.float64).reshape(self.geometry.shape)
        if not np.all(np.isfinite(arr)):
            raise ContractError("sinogram values must be finite")
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)

    def __eq__(self, other):
        if not isinstance(other, Sinogram):
            return NotImplemented
        return self.geometry == other.geometry and np.array_equal(self.values, other.values)

    __hash__ = None


def _sample_points(grid: PixelGrid, geom: ParallelBeamGeometry):
    """Sample positions in fractional pixel-index coordinates, per ray."""
    s = grid.spacing
    step = s / 2
    half_diag = 0.5 * s * np.hypot(grid.width, grid.height)
    m = int(np.ceil(half_diag / step))
    lam = np.arange(-m, m + 1) * step
    theta = geom.thetas()[:, None, None]
    t = geom.offsets()[None, :, None]
    lam = lam[None, None, :]
    px = t * np.cos(theta) - lam * np.sin(theta)
    py = t * np.sin(theta) + lam * np.cos(theta)
    # to fractional index space, where pixel (i, j) has its center at (i, j)
    fx = (px + 0.5 * grid.width * s) / s - 0.5
    fy = (py + 0.5 * grid.height * s) / s - 0.5
    return fx, fy, step


@lru_cache(maxsize=8)
def system_matrix(grid: PixelGrid, geom: ParallelBeamGeometry) -> sparse.csr_matrix:
    """Sparse matrix of shape ``(angles * detectors, width * height)``."""
    if grid.width != grid.height:
        raise ContractError("ray transform expects a square grid")
    fx, fy, step = _sample_points(grid, geom)
    ray = np.broadcast_to(np.arange(geom.angles * geom.detectors).reshape(geom.shape)[..., None],
                          fx.shape)
    i0 = np.floor(fx).astype(np.int64)
    j0 = np.floor(fy).astype(np.int64)
    wx = fx - i0
    wy = fy - j0
    rows, cols, vals = [], [], []
    for di, dj, w in ((0, 0, (1 - wx) * (1 - wy)), (1, 0, wx * (1 - wy)),
                      (0, 1, (1 - wx) * wy), (1, 1, wx * wy)):
        ii, jj = i0 + di, j0 + dj
        ok = (ii >= 0) & (ii < grid.width) & (jj >= 0) & (jj < grid.height) & (w > 0)
        rows.append(ray[ok])
        cols.append(jj[ok] * grid.width + ii[ok])
        vals.append(w[ok] * step)
    mat = sparse.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                            shape=(geom.angles * geom.detectors, grid.size))
    mat = mat.tocsr()
    mat.sum_duplicates()
    mat.sort_indices()
    return mat


@lru_cache(maxsize=8)
def _transpose(grid: PixelGrid, geom: ParallelBeamGeometry) -> sparse.csr_matrix:
    return system_matrix(grid, geom).T.tocsr()


def ray_transform(f: DiscreteMeasure, geom: ParallelBeamGeometry) -> Sinogram:
    return Sinogram(geom, system_matrix(f.grid, geom) @ f.values)


def backprojection(s: Sinogram, grid: PixelGrid) -> DiscreteMeasure:
    """Exact transpose of :func:`ray_transform` on ``grid``."""
    return DiscreteMeasure(grid, _transpose(grid, s.geometry) @ s.values.ravel())


def forward_array(x: np.ndarray, grid: PixelGrid, geom: ParallelBeamGeometry) -> np.ndarray:
    """Array-level forward projection, ``(H, W) -> (angles, detectors)``; keeps dtype."""
    mat = system_matrix(grid, geom)
    if x.dtype == np.float32:
        mat = _as32(grid, geom, False)
    return (mat @ x.ravel()).reshape(geom.shape)


def adjoint_array(y: np.ndarray, grid: PixelGrid, geom: ParallelBeamGeometry) -> np.ndarray:
    """Array-level backprojection, ``(angles, detectors) -> (H, W)``; keeps dtype."""
    mat = _transpose(grid, geom)
    if y.dtype == np.float32:
        mat = _as32(grid, geom, True)
    return (mat @ y.ravel()).reshape(grid.shape)


@lru_cache(maxsize=8)
def _as32(grid, geom, transposed):
    base = _transpose(grid, geom) if transposed else system_matrix(grid, geom)
    return base.astype(np.float32)


def operator_norm(grid: PixelGrid, geom: ParallelBeamGeometry, iterations: int = 100) -> float:
    """Largest singular value of the system matrix (deterministic power iteration)."""
    mat = system_matrix(grid, geom)
    x = np.ones(grid.size) / np.sqrt(grid.size)
    sigma = 0.0
    for _ in range(iterations):
        y = mat.T @ (mat @ x)
        sigma = float(np.sqrt(np.linalg.norm(y)))
        x = y / np.linalg.norm(y)
    return sigma


def write_sinogram(s: Sinogram, path) -> None:
    """Raw format: ``OTS1``, angles, detectors (u32 LE), detector spacing (f64 LE), values (f64 LE)."""
    g = s.geometry
    header = _SINO_HEADER.pack(SINO_MAGIC, g.angles, g.detectors, g.detector_spacing)
    Path(path).write_bytes(header + s.values.astype("<f8").tobytes())


def read_sinogram(path) -> Sinogram:
    data = Path(path).read_bytes()
    if len(data) < _SINO_HEADER.size:
        raise ContractError(f"{path}: truncated sinogram file")
    magic, angles, detectors, spacing = _SINO_HEADER.unpack_from(data)
    if magic != SINO_MAGIC:
        raise ContractError(f"{path}: bad magic {magic!r}")
    payload = data[_SINO_HEADER.size:]
    if len(payload) != 8 * angles * detectors:
        raise ContractError(f"{path}: payload size does not match {angles}x{detectors}")
    geom = ParallelBeamGeometry(angles, detectors, spacing)
    return Sinogram(geom, np.frombuffer(payload, dtype="<f8"))
