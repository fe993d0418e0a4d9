"""Patch coordinate generation and continuous-coordinate patch extraction.

Coordinates live in patch space: one unit equals one patch stride, so a
token at (z0, z1) covers the pixel window [z0*P, z0*P + P) x [z1*P, z1*P + P).
Grid tokenization enumerates the integer lattice row-major; random
tokenization draws real-valued coordinates uniformly over the largest
rectangle that keeps the whole window inside the image, so patches may
overlap and may straddle pixel boundaries.  Fractional coordinates are
resolved by bilinear interpolation, which degenerates to exact pixel reads
at integer coordinates.

Randomness is counter-based: every consumer derives a private generator
from (run seed, purpose, epoch, batch, image), so results never depend on
how work is ordered or split across workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import EmptySample, NonDivisibleImage, OutOfBounds

GRID = "grid"
RANDOM = "random"
SAMPLERS = (GRID, RANDOM)

# purpose tags for derived RNG streams; part of the reproducibility contract
_PURPOSE_INIT = 0
_PURPOSE_SHUFFLE = 1
_PURPOSE_SAMPLER = 2
_PURPOSE_MIXUP = 3
_PURPOSE_EVAL = 4
_PURPOSE_DATA = 5
_PURPOSE_AUGMENT = 6


def round_half_away(x: float) -> int:
    """Round to the nearest integer, halves away from zero.

    Python's round() ties to even (2.5 -> 2); token budgets want 2.5 -> 3.
    """
    if x >= 0:
        return int(math.floor(x + 0.5))
    return -int(math.floor(-x + 0.5))


def stream(seed: int, *path: int) -> np.random.Generator:
    """Derive a named generator from a root seed and an integer path.

    Built on Philox keyed through SeedSequence spawn keys: the same
    (seed, path) always yields the same stream, distinct paths yield
    statistically independent streams, and no global state is involved.
    """
    if seed < 0:
        raise ValueError("seed must be non-negative")
    seq = np.random.SeedSequence(entropy=int(seed),
                                 spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(seq))


@dataclass(frozen=True)
class RunStreams:
    """All generators a training/evaluation run may consume, by name."""

    seed: int

    def init(self) -> np.random.Generator:
        return stream(self.seed, _PURPOSE_INIT)

    def shuffle(self, epoch: int) -> np.random.Generator:
        return stream(self.seed, _PURPOSE_SHUFFLE, epoch)

    def sampler(self, epoch: int, batch: int, image: int) -> np.random.Generator:
        return stream(self.seed, _PURPOSE_SAMPLER, epoch, batch, image)

    def mixup(self, epoch: int, batch: int) -> np.random.Generator:
        return stream(self.seed, _PURPOSE_MIXUP, epoch, batch)

    def augment(self, epoch: int, batch: int) -> np.random.Generator:
        return stream(self.seed, _PURPOSE_AUGMENT, epoch, batch)

    def eval_sampler(self, draw: int, batch: int, image: int) -> np.random.Generator:
        return stream(self.seed, _PURPOSE_EVAL, draw, batch, image)


def _largest_safe_coord(extent: int, patch: int) -> float:
    # Largest float g with float(g * patch) <= extent - patch, so that a
    # window anchored at g stays inside the image even after rounding.
    g = (extent - patch) / patch
    while g * patch > extent - patch:
        g = np.nextafter(g, 0.0)
    return g


@dataclass(frozen=True)
class PatchGeometry:
    """Image extent plus patch size; derives coordinate bounds and budgets."""

    height: int
    width: int
    patch: int

    def __post_init__(self):
        if self.patch < 1:
            raise ValueError(f"patch size must be >= 1, got {self.patch}")
        if self.height < self.patch or self.width < self.patch:
            raise ValueError(
                f"image {self.height}x{self.width} smaller than patch {self.patch}")

    @property
    def rows_max(self) -> float:
        """Largest admissible z0 (equals H/P - 1 up to float safety)."""
        return _largest_safe_coord(self.height, self.patch)

    @property
    def cols_max(self) -> float:
        return _largest_safe_coord(self.width, self.patch)

    @property
    def tokens(self) -> float:
        """Nominal grid budget L = H*W / P**2 (fractional if P does not tile)."""
        return (self.height * self.width) / float(self.patch ** 2)

    @property
    def grid_shape(self) -> tuple[int, int]:
        if self.height % self.patch or self.width % self.patch:
            raise NonDivisibleImage(
                f"patch {self.patch} does not tile {self.height}x{self.width}")
        return self.height // self.patch, self.width // self.patch


def token_count(r: float, tokens: float) -> int:
    """Token budget for sampling factor r: round(r * L), halves away from zero."""
    if r <= 0:
        raise EmptySample(f"sampling factor must be positive, got {r}")
    n = round_half_away(r * tokens)
    if n < 1:
        raise EmptySample(
            f"r={r} with L={tokens} rounds to zero tokens")
    return n


@dataclass(frozen=True)
class PatchCoords:
    """A sequence of patch-space coordinates with their provenance."""

    coords: np.ndarray  # (n, 2) float64, columns (z0, z1) = (row, col)
    origin: str         # "grid" or "random"

    def __post_init__(self):
        if self.coords.ndim != 2 or self.coords.shape[1] != 2:
            raise ValueError(f"coords must be (n, 2), got {self.coords.shape}")
        if self.origin not in SAMPLERS:
            raise ValueError(f"unknown origin {self.origin!r}")

    @property
    def n_tokens(self) -> int:
        return self.coords.shape[0]


@dataclass
class TokenBatch:
    """Extracted patch pixels plus the coordinates they came from.

    ``pos`` stays None until a positional encoding is attached.
    """

    pixels: np.ndarray  # (n, C, P, P)
    coords: PatchCoords
    pos: Optional[np.ndarray] = None  # (n, D) once attached


def grid_coords(geom: PatchGeometry) -> PatchCoords:
    """Row-major integer lattice covering the image exactly once."""
    rows, cols = geom.grid_shape  # raises NonDivisibleImage
    z0, z1 = np.meshgrid(np.arange(rows, dtype=np.float64),
                         np.arange(cols, dtype=np.float64), indexing="ij")
    coords = np.stack([z0.ravel(), z1.ravel()], axis=1)
    return PatchCoords(coords=coords, origin=GRID)


def random_coords(geom: PatchGeometry, r: float,
                  rng: np.random.Generator) -> PatchCoords:
    """Draw round(r * L) i.i.d. uniform coordinates over the valid rectangle.

    Both axes are continuous-uniform; nothing snaps to the lattice, so two
    tokens may overlap arbitrarily.  Raises EmptySample when the budget
    rounds to zero.
    """
    n = token_count(r, geom.tokens)
    high = np.array([geom.rows_max, geom.cols_max], dtype=np.float64)
    coords = rng.uniform(0.0, 1.0, size=(n, 2)) * high
    return PatchCoords(coords=coords, origin=RANDOM)


def _gather_bilinear(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Bilinear reads of img (C, H, W) at broadcast index arrays ys, xs.

    Exact at integer coordinates: the off-pixel weights are exactly zero,
    so no rounding enters.  Callers must have bounds-checked already.
    """
    _, h, w = img.shape
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy = ys - y0
    fx = xs - x0
    # the +1 neighbor only matters when the fraction is non-zero, and then
    # floor+1 is in range; clipping covers the exact-edge case at weight 0
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    w00 = (1.0 - fy) * (1.0 - fx)
    w01 = (1.0 - fy) * fx
    w10 = fy * (1.0 - fx)
    w11 = fy * fx
    return (w00 * img[:, y0, x0] + w01 * img[:, y0, x1]
            + w10 * img[:, y1, x0] + w11 * img[:, y1, x1])


def bilinear_sample(img: np.ndarray, y: float, x: float, c: int = 0) -> float:
    """Interpolate one channel of img (C, H, W) at real pixel position (y, x)."""
    if img.ndim != 3:
        raise ValueError(f"expected (C, H, W) image, got shape {img.shape}")
    _, h, w = img.shape
    if not (0.0 <= y <= h - 1 and 0.0 <= x <= w - 1):
        raise OutOfBounds(
            f"sample point ({y}, {x}) outside [0, {h - 1}] x [0, {w - 1}]")
    ys = np.asarray([y], dtype=np.float64)
    xs = np.asarray([x], dtype=np.float64)
    return _gather_bilinear(img[c:c + 1].astype(np.float64), ys, xs).item()


def _sample_positions(coords: np.ndarray, patch: int) -> tuple[np.ndarray, np.ndarray]:
    # (n, P) per-axis pixel positions: z * P + offset for offset in [0, P)
    offs = np.arange(patch, dtype=np.float64)
    ys = coords[:, 0:1] * patch + offs
    xs = coords[:, 1:2] * patch + offs
    return ys, xs


def extract_batch(images: np.ndarray, coords: np.ndarray, patch: int) -> np.ndarray:
    """Extract patches for a whole batch at once.

    images: (B, C, H, W); coords: (B, n, 2) patch-space. Returns (B, n, C, P, P).
    """
    b, c, h, w = images.shape
    n = coords.shape[1]
    offs = np.arange(patch, dtype=np.float64)
    ys = coords[:, :, 0, None] * patch + offs  # (B, n, P)
    xs = coords[:, :, 1, None] * patch + offs
    if ys.size and (ys.min() < 0 or ys.max() > h - 1 or xs.min() < 0 or xs.max() > w - 1):
        raise OutOfBounds("patch window leaves the image support")
    y = ys[:, :, :, None]  # (B, n, P, 1)
    x = xs[:, :, None, :]  # (B, n, 1, P)
    y0 = np.floor(y).astype(np.int64)
    x0 = np.floor(x).astype(np.int64)
    fy = (y - y0).astype(images.dtype, copy=False)
    fx = (x - x0).astype(images.dtype, copy=False)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    bidx = np.arange(b).reshape(b, 1, 1, 1)
    # advanced indexing ahead of the channel slice puts (B, n, P, P) first
    p00 = images[bidx, :, y0, x0]
    p01 = images[bidx, :, y0, x1]
    p10 = images[bidx, :, y1, x0]
    p11 = images[bidx, :, y1, x1]
    w00 = ((1.0 - fy) * (1.0 - fx))[..., None]
    w01 = ((1.0 - fy) * fx)[..., None]
    w10 = (fy * (1.0 - fx))[..., None]
    w11 = (fy * fx)[..., None]
    out = w00 * p00 + w01 * p01 + w10 * p10 + w11 * p11  # (B, n, P, P, C)
    return np.ascontiguousarray(np.moveaxis(out, -1, 2))


def extract_patches(img: np.ndarray, coords: PatchCoords, patch: int) -> TokenBatch:
    """Cut one P x P window per coordinate out of img (C, H, W).

    Integer coordinates reproduce direct array slicing bit-for-bit; fractional
    ones blend the four neighboring pixels.  Raises OutOfBounds if any sample
    position would leave the image (never happens for coordinates produced by
    grid_coords/random_coords on the same geometry).
    """
    if img.ndim != 3:
        raise ValueError(f"expected (C, H, W) image, got shape {img.shape}")
    pixels = extract_batch(img[None], coords.coords[None], patch)[0]
    return TokenBatch(pixels=pixels, coords=coords)
