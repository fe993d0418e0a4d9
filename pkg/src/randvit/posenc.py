"""Fixed 2D sin/cos positional encodings for continuous patch coordinates.

The encoding is a pure function of position, so tokens sampled at arbitrary
real-valued coordinates carry exactly as much location information as grid
tokens, and on integer grid coordinates the table coincides with the
conventional fixed ViT encoding.

Layout per row, with K = D/4 geometric frequencies w_k = tau**(-k/K):

    [sin(w_k * z0)]_k  ||  [cos(w_k * z0)]_k  ||  [sin(w_k * z1)]_k  ||  [cos(w_k * z1)]_k
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BadDim
from .sampling import PatchCoords


@dataclass(frozen=True)
class PosEncConfig:
    dim: int
    temperature: float = 10000.0

    def __post_init__(self):
        if self.dim < 4 or self.dim % 4 != 0:
            raise BadDim(f"embed dim must be a positive multiple of 4, "
                         f"got {self.dim}")
        if not self.temperature > 1:
            raise ValueError(f"temperature must exceed 1, got {self.temperature}")


def frequencies(cfg: PosEncConfig) -> np.ndarray:
    """The K = D/4 geometric frequencies, descending from 1."""
    k = cfg.dim // 4
    return cfg.temperature ** (-np.arange(k, dtype=np.float64) / k)


def encode(coords: PatchCoords | np.ndarray, cfg: PosEncConfig) -> np.ndarray:
    """Encode patch-space coordinates into an (n, D) float64 matrix."""
    z = coords.coords if isinstance(coords, PatchCoords) else np.asarray(coords)
    if z.ndim != 2 or z.shape[1] != 2:
        raise ValueError(f"coords must be (n, 2), got {z.shape}")
    omega = frequencies(cfg)
    a0 = z[:, 0:1] * omega  # (n, K)
    a1 = z[:, 1:2] * omega
    return np.concatenate([np.sin(a0), np.cos(a0), np.sin(a1), np.cos(a1)], axis=1)
