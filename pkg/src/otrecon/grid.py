"""Pixel grids, nonnegative measures on them, and seeded random streams.

Layout convention (used everywhere in the package): pixel ``(row j, column i)``
lives at flat index ``j * width + i`` and its center sits at
``((i + 0.5) * spacing, (j + 0.5) * spacing)`` measured from the domain corner.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DegenerateInputError

RAW_MAGIC = b"OTR1"
_RAW_HEADER = struct.Struct("<4sIId")


@dataclass(frozen=True)
class PixelGrid:
    width: int
    height: int
    spacing: float = 1.0

    def __post_init__(self):
        if int(self.width) < 1 or int(self.height) < 1:
            raise ContractError(f"grid dimensions must be >= 1, got {self.width}x{self.height}")
        if not self.spacing > 0:
            raise ContractError(f"grid spacing must be > 0, got {self.spacing}")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        object.__setattr__(self, "spacing", float(self.spacing))

    @property
    def size(self) -> int:
        return self.width * self.height

    @property
    def shape(self) -> tuple[int, int]:
        """Array shape ``(height, width)`` of the row-major image."""
        return (self.height, self.width)

    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Flat arrays ``(x, y)`` of pixel-center coordinates, row-major."""
        xs = (np.arange(self.width) + 0.5) * self.spacing
        ys = (np.arange(self.height) + 0.5) * self.spacing
        x, y = np.meshgrid(xs, ys)
        return x.ravel(), y.ravel()


def _frozen_array(values, n):
    arr = np.array(values, dtype=np.float64).ravel()
    if arr.size != n:
        raise ContractError(f"expected {n} values, got {arr.size}")
    if not np.all(np.isfinite(arr)):
        raise ContractError("measure values must be finite")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    """Finite real values on a pixel grid (row-major, float64, read-only)."""

    grid: PixelGrid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen_array(self.values, self.grid.size))

    @classmethod
    def zeros(cls, grid: PixelGrid) -> "DiscreteMeasure":
        return cls(grid, np.zeros(grid.size))

    @classmethod
    def from_image(cls, image, spacing: float = 1.0) -> "DiscreteMeasure":
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 2:
            raise ContractError("image must be 2-D")
        return cls(PixelGrid(image.shape[1], image.shape[0], spacing), image)

    @property
    def image(self) -> np.ndarray:
        return self.values.reshape(self.grid.shape)

    def is_nonnegative(self) -> bool:
        return bool(np.all(self.values >= 0))

    def __eq__(self, other):
        if not isinstance(other, DiscreteMeasure):
            return NotImplemented
        return self.grid == other.grid and np.array_equal(self.values, other.values)

    __hash__ = None


def mass(m: DiscreteMeasure) -> float:
    return float(np.sum(m.values))


def normalize_mass(m: DiscreteMeasure, target: float) -> DiscreteMeasure:
    """Rescale ``m`` so its total mass equals ``target``."""
    total = mass(m)
    if not total > 0:
        raise DegenerateInputError(f"cannot normalize a measure of mass {total}")
    if not target > 0:
        raise ContractError(f"target mass must be > 0, got {target}")
    return DiscreteMeasure(m.grid, m.values * (target / total))


def add_background(m: DiscreteMeasure, rho: float) -> DiscreteMeasure:
    """Add the uniform floor ``rho * mass(m) / n`` to every pixel."""
    if rho < 0:
        raise ContractError(f"background rho must be >= 0, got {rho}")
    if rho == 0:
        return m
    return DiscreteMeasure(m.grid, m.values + rho * mass(m) / m.grid.size)


# -- random streams -----------------------------------------------------------

_U64 = (1 << 64) - 1


@dataclass(frozen=True)
class SeededRng:
    """Counter-based random stream keyed by ``(seed, stream)``.

    Backed by the Philox-4x64 counter-based generator with its 128-bit key set
    to ``stream << 64 | seed`` and the counter starting at zero. Every draw is
    a pure function of the key and the number of draws made so far, so streams
    are reproducible across runs and platforms and independent workers simply
    use distinct stream ids.
    """

    seed: int
    stream: int = 0

    def __post_init__(self):
        for name in ("seed", "stream"):
            value = int(getattr(self, name))
            if not 0 <= value <= _U64:
                raise ContractError(f"{name} must fit in an unsigned 64-bit integer")
            object.__setattr__(self, name, value)

    def generator(self) -> np.random.Generator:
        """Fresh generator positioned at the start of this stream."""
        key = (self.stream << 64) | self.seed
        return np.random.Generator(np.random.Philox(key=key, counter=0))

    def substream(self, stream: int) -> "SeededRng":
        return SeededRng(self.seed, stream)


# -- serialization ------------------------------------------------------------

def write_raw(m: DiscreteMeasure, path) -> None:
    """Lossless binary format: ``OTR1``, width, height (u32 LE), spacing (f64 LE), values (f64 LE)."""
    header = _RAW_HEADER.pack(RAW_MAGIC, m.grid.width, m.grid.height, m.grid.spacing)
    Path(path).write_bytes(header + m.values.astype("<f8").tobytes())


def read_raw(path) -> DiscreteMeasure:
    data = Path(path).read_bytes()
    if len(data) < _RAW_HEADER.size:
        raise ContractError(f"{path}: truncated measure file")
    magic, width, height, spacing = _RAW_HEADER.unpack_from(data)
    if magic != RAW_MAGIC:
        raise ContractError(f"{path}: bad magic {magic!r}")
    payload = data[_RAW_HEADER.size:]
    if len(payload) != 8 * width * height:
        raise ContractError(f"{path}: payload size does not match {width}x{height}")
    grid = PixelGrid(width, height, spacing)
    return DiscreteMeasure(grid, np.frombuffer(payload, dtype="<f8"))


def to_pgm_bytes(image: np.ndarray) -> bytes:
    """16-bit binary PGM (P5) after affine rescaling to [0, 65535]."""
    image = np.asarray(image, dtype=np.float64)
    lo, hi = float(image.min()), float(image.max())
    scaled = np.zeros_like(image) if hi <= lo else (image - lo) / (hi - lo)
    pixels = np.round(scaled * 65535).astype(">u2")
    h, w = image.shape
    return b"P5\n%d %d\n65535\n" % (w, h) + pixels.tobytes()


def write_pgm(image, path) -> None:
    Path(path).write_bytes(to_pgm_bytes(image))


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ContractError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 65535:
        raise ContractError(f"{path}: expected 16-bit PGM")
    return np.frombuffer(parts[4][: 2 * w * h], dtype=">u2").reshape(h, w)


def contact_sheet(images, gap: int = 2) -> np.ndarray:
    """Place individually [0, 1]-rescaled images side by side on one canvas."""
    panels = []
    for img in images:
        img = np.asarray(img, dtype=np.float64)
        lo, hi = img.min(), img.max()
        panels.append(np.zeros_like(img) if hi <= lo else (img - lo) / (hi - lo))
    height = max(p.shape[0] for p in panels)
    width = sum(p.shape[1] for p in panels) + gap * (len(panels) - 1)
    sheet = np.zeros((height, width))
    col = 0
    for p in panels:
        sheet[: p.shape[0], col: col + p.shape[1]] = p
        col += p.shape[1] + gap
    return sheet
