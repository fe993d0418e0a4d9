"""Compute accounting, work efficiency, and attention-rollout heatmaps.

FLOPs are counted as one per multiply-accumulate over the big matrix
multiplies (embedding, attention projections, score/apply products, MLP,
head); softmax, norms, GELU and the pooling are lower-order and counted as
zero.  This is the convention under which a 196-token ViT-S/16 comes out at
the commonly quoted 4.6 GFLOPs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DivisionByZeroGuard, NonStochasticInput, ShapeMismatch
from .model import ForwardTrace, VitConfig
from .sampling import GRID, PatchCoords, PatchGeometry

ROLLOUT_REDUCES = ("col-mean", "row-of-mean")


@dataclass(frozen=True)
class FlopsReport:
    n_tokens: int
    depth: int
    embed: int            # n * D * C * P^2
    attn_per_block: int   # 4 n D^2 (projections) + 2 n^2 D (scores + apply)
    mlp_per_block: int    # 2 n D H
    head: int             # D * classes

    @property
    def total(self) -> int:
        return self.embed + self.depth * (self.attn_per_block
                                          + self.mlp_per_block) + self.head

    @property
    def gflops(self) -> float:
        return self.total / 1e9

    def as_dict(self) -> dict:
        return {"n_tokens": self.n_tokens, "depth": self.depth,
                "embed": self.embed, "attn_per_block": self.attn_per_block,
                "mlp_per_block": self.mlp_per_block, "head": self.head,
                "total": self.total, "gflops": self.gflops}


def count_flops(cfg: VitConfig, n_tokens: int) -> FlopsReport:
    """Leading-order inference cost for a sequence of n_tokens patches."""
    n = int(n_tokens)
    if n < 0:
        raise ValueError(f"token count must be >= 0, got {n_tokens}")
    d = cfg.dim
    return FlopsReport(
        n_tokens=n,
        depth=cfg.depth,
        embed=n * d * cfg.channels * cfg.patch ** 2,
        attn_per_block=4 * n * d * d + 2 * n * n * d,
        mlp_per_block=2 * n * d * cfg.hidden,
        head=d * cfg.n_classes,
    )


def work_efficiency(top1: float, gflops: float) -> float:
    """Accuracy (percent) per inference GFLOP."""
    if gflops <= 0:
        raise DivisionByZeroGuard(f"gflops must be positive, got {gflops}")
    return top1 / gflops


def _minmax(x: np.ndarray) -> np.ndarray:
    lo, hi = float(x.min()), float(x.max())
    if hi == lo:
        # constant input: a positive constant is "everything equally hot"
        return np.ones_like(x) if hi > 0 else np.zeros_like(x)
    return (x - lo) / (hi - lo)


def _blended(attn: np.ndarray) -> np.ndarray:
    # head-average, mix with identity, renormalize rows
    n = attn.shape[-1]
    a = 0.5 * attn.mean(axis=1) + 0.5 * np.eye(n)
    return a / a.sum(axis=-1, keepdims=True)


def attention_rollout(trace: ForwardTrace | np.ndarray,
                      reduce: str = "col-mean") -> np.ndarray:
    """Per-token influence scores in [0, 1] from a stack of attention maps.

    "col-mean" (default) multiplies the identity-blended, head-averaged
    matrices through the depth and takes the column mean of the product:
    attention received, averaged over query tokens.  "row-of-mean" skips the
    product and reads the same uniform-readout reduction off the
    layer-averaged matrix instead (single-hop baseline); with average
    pooling there is no class-token row, so both reductions are estimates.
    """
    attn = trace.attn if isinstance(trace, ForwardTrace) else np.asarray(trace)
    if attn.ndim != 4 or attn.shape[-1] != attn.shape[-2]:
        raise ShapeMismatch(f"expected (depth, heads, n, n), got {attn.shape}")
    if reduce not in ROLLOUT_REDUCES:
        raise ValueError(f"reduce must be one of {ROLLOUT_REDUCES}, got {reduce!r}")
    row_sums = attn.sum(axis=-1)
    worst = float(np.abs(row_sums - 1.0).max())
    if worst > 1e-3:
        raise NonStochasticInput(
            f"attention rows deviate from sum 1 by {worst:.3g}")
    layers = attn.astype(np.float64)
    if reduce == "row-of-mean":
        mean_layer = np.mean([_blended(a[None])[0] for a in layers], axis=0)
        return _minmax(mean_layer.mean(axis=0))
    rollout: Optional[np.ndarray] = None
    for a in layers:
        tilde = _blended(a[None])[0]
        rollout = tilde if rollout is None else tilde @ rollout
    return _minmax(rollout.mean(axis=0))


@dataclass
class Heatmap:
    values: np.ndarray            # (H, W) in [0, 1]
    mode: str = ""
    r: Optional[float] = None
    seed: Optional[int] = None


def render_heatmap(scores: np.ndarray, coords: PatchCoords,
                   geom: PatchGeometry, mode: str = "",
                   r: Optional[float] = None, seed: Optional[int] = None,
                   normalize: bool = True) -> Heatmap:
    """Paint per-token scores back onto the image plane.

    Grid coordinates tile exactly: each score fills its cell
    (nearest-neighbor upscaling by the patch size).  Random coordinates
    accumulate each token's score uniformly over its P x P pixel footprint
    and divide by per-pixel coverage, leaving uncovered pixels at zero.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1 or scores.shape[0] != coords.n_tokens:
        raise ShapeMismatch(
            f"{scores.shape} scores for {coords.n_tokens} tokens")
    p = geom.patch
    if coords.origin == GRID:
        rows, cols = geom.grid_shape
        heat = np.repeat(np.repeat(scores.reshape(rows, cols), p, axis=0),
                         p, axis=1)
    else:
        heat = np.zeros((geom.height, geom.width))
        coverage = np.zeros((geom.height, geom.width))
        tops = np.floor(coords.coords[:, 0] * p).astype(np.int64)
        lefts = np.floor(coords.coords[:, 1] * p).astype(np.int64)
        for score, top, left in zip(scores, tops, lefts):
            heat[top:top + p, left:left + p] += score
            coverage[top:top + p, left:left + p] += 1.0
        covered = coverage > 0
        heat[covered] /= coverage[covered]
    if normalize:
        heat = _minmax(heat)
    return Heatmap(values=heat, mode=mode, r=r, seed=seed)
