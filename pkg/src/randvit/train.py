"""Training loop: Adam with decoupled weight decay, cosine learning-rate
schedule with linear warmup, cross-entropy, optional MixUp.

Everything downstream of the dataset is a pure function of (configs, seed):
batch order, patch coordinates, MixUp draws and initialization all come
from named counter-based streams, so a rerun reproduces losses, metrics and
checkpoints bit for bit.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .data import Dataset
from .errors import EmptySplit, NonFiniteGradient
from .model import VitConfig, backward_batch, forward_batch, init_params, \
    save_checkpoint
from .posenc import encode
from .sampling import GRID, PatchGeometry, RunStreams, extract_batch, \
    grid_coords, random_coords, round_half_away

METRICS_COLUMNS = ("epoch", "train_loss", "val_loss", "val_top1", "lr")

# hook signature: (images, labels, rng) -> (images, labels).  Placeholder for
# policy augmentations (RandAugment and friends); the default is a no-op.
AugmentHook = Callable[[np.ndarray, np.ndarray, np.random.Generator],
                       tuple[np.ndarray, np.ndarray]]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 90
    batch_size: int = 64
    lr: float = 0.0007
    weight_decay: float = 0.0001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_frac: float = 0.0444
    mixup_alpha: float = 0.0     # 0 disables; 0.2 is the usual setting
    seed: int = 0
    decoupled_decay: bool = True
    eval_draws: int = 1

    def __post_init__(self):
        if not 0.0 < self.warmup_frac < 1.0:
            raise ValueError(f"warmup_frac must be in (0, 1), got {self.warmup_frac}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.eval_draws < 1:
            raise ValueError("eval_draws must be >= 1")


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    val_loss: float
    val_top1: float
    lr: float
    wall_time: float


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup to the base lr, then cosine decay to zero."""
    warmup = round_half_away(cfg.warmup_frac * total_steps)
    if step < warmup:
        return cfg.lr * step / warmup
    tail = max(total_steps - warmup, 1)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * (step - warmup) / tail))


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0


def adam_init(params: dict[str, np.ndarray]) -> AdamState:
    return AdamState(m={k: np.zeros_like(p) for k, p in params.items()},
                     v={k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float, cfg: TrainConfig) -> AdamState:
    """One bias-corrected Adam update, in place on params.

    With decoupled_decay the weight-decay term lr*wd*theta bypasses the
    moment estimates; otherwise wd*theta is folded into the gradient first.
    """
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient in {k}")
    state.t += 1
    c1 = 1.0 - cfg.beta1 ** state.t
    c2 = 1.0 - cfg.beta2 ** state.t
    wd = cfg.weight_decay
    for k, theta in params.items():
        g = grads[k]
        if wd and not cfg.decoupled_decay:
            g = g + wd * theta
        m, v = state.m[k], state.v[k]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        if wd and cfg.decoupled_decay:
            update = update + wd * theta
        theta -= lr * update
    return state


def cross_entropy(logits: np.ndarray, target: np.ndarray):
    """Loss and d(loss)/d(logits) against a probability-vector target.

    1-D inputs give the per-sample loss with gradient softmax - target;
    2-D (B, K) inputs give the batch mean with the gradient scaled by 1/B.
    Computed in float64 with a max shift.
    """
    lg = np.asarray(logits, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if lg.shape != t.shape:
        raise ValueError(f"logits {lg.shape} vs target {t.shape}")
    z = lg - lg.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    p = np.exp(logp)
    if lg.ndim == 1:
        return float(-(t * logp).sum()), p - t
    loss = float(-(t * logp).sum(axis=-1).mean())
    return loss, (p - t) / lg.shape[0]


def mixup_blend(images: np.ndarray, labels: np.ndarray, partner: np.ndarray,
                m: np.ndarray):
    """Deterministic part of MixUp: blend each sample with its partner."""
    mi = m.reshape(-1, 1, 1, 1).astype(images.dtype)
    ml = m.reshape(-1, 1)
    images = mi * images + (1.0 - mi) * images[partner]
    labels = ml * labels + (1.0 - ml) * labels[partner]
    return images, labels


def mixup(images: np.ndarray, labels: np.ndarray, rng: np.random.Generator,
          alpha: float):
    """Blend a batch with a permuted partner batch, m ~ Beta(alpha, alpha) per pair."""
    if alpha <= 0:
        raise ValueError("mixup needs alpha > 0")
    partner = rng.permutation(images.shape[0])
    m = rng.beta(alpha, alpha, size=images.shape[0])
    return mixup_blend(images, labels, partner, m)


def _batch_tokens(images: np.ndarray, coords: np.ndarray, cfg: VitConfig):
    # images (B, C, H, W) float, coords (B, n, 2) -> tokens (B, n, C*P*P), pos (B, n, D)
    dt = cfg.np_dtype
    pix = extract_batch(images.astype(dt, copy=False), coords, cfg.patch)
    b, n = pix.shape[:2]
    pos = encode(coords.reshape(-1, 2), cfg.posenc).astype(dt).reshape(b, n, -1)
    return pix.reshape(b, n, -1), pos


def _onehot(labels: np.ndarray, k: int) -> np.ndarray:
    return np.eye(k, dtype=np.float64)[labels]


def evaluate(cfg: VitConfig, params: dict, ds: Dataset, eval_seed: int,
             draws: int = 1, batch_size: int = 256):
    """Top-1 accuracy and mean loss over a split.

    The eval-phase sampler comes from cfg: grid is deterministic; random
    uses counter-based streams keyed by (eval_seed, draw, batch, image).
    With draws > 1 the softmax probabilities of the draws are averaged
    before the argmax and the per-draw losses are averaged.
    """
    if len(ds) == 0:
        raise EmptySplit(f"split {ds.split!r} has no samples")
    if not np.issubdtype(ds.images.dtype, np.floating):
        raise ValueError("evaluate expects normalized float images")
    n_samples = len(ds)
    geom = PatchGeometry(ds.images.shape[2], ds.images.shape[3], cfg.patch)
    grid = grid_coords(geom).coords if cfg.sampler_eval == GRID else None
    streams = RunStreams(eval_seed)
    onehot = _onehot(ds.labels, cfg.n_classes)
    prob_sum = np.zeros((n_samples, cfg.n_classes), dtype=np.float64)
    loss_sum = 0.0
    for draw in range(draws):
        for bi, start in enumerate(range(0, n_samples, batch_size)):
            sl = slice(start, min(start + batch_size, n_samples))
            images = ds.images[sl]
            if grid is not None:
                coords = np.broadcast_to(grid, (images.shape[0],) + grid.shape)
            else:
                coords = np.stack([
                    random_coords(geom, cfg.r, streams.eval_sampler(draw, bi, j)).coords
                    for j in range(images.shape[0])])
            tokens, pos = _batch_tokens(images, coords, cfg)
            logits, _, _ = forward_batch(tokens, pos, params, cfg)
            z = logits.astype(np.float64) - logits.max(axis=-1, keepdims=True)
            logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
            prob_sum[sl] += np.exp(logp)
            loss_sum += float(-(onehot[sl] * logp).sum())
    top1 = float((prob_sum.argmax(axis=1) == ds.labels).mean())
    return top1, loss_sum / (n_samples * draws)


def write_metrics_csv(path: str | Path, rows: list[EpochMetrics]) -> None:
    """Deterministic metrics table; wall time goes to a sidecar so reruns
    of the same manifest produce byte-identical files."""
    lines = [",".join(METRICS_COLUMNS)]
    for r in rows:
        lines.append(f"{r.epoch},{r.train_loss:.10g},{r.val_loss:.10g},"
                     f"{r.val_top1:.10g},{r.lr:.10g}")
    Path(path).write_text("\n".join(lines) + "\n")


def write_timing_csv(path: str | Path, rows: list[EpochMetrics]) -> None:
    lines = ["epoch,wall_time"] + [f"{r.epoch},{r.wall_time:.6f}" for r in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def train_run(model_cfg: VitConfig, train_cfg: TrainConfig, train_ds: Dataset,
              val_ds: Dataset, out_dir: Optional[str | Path] = None,
              augment_hook: Optional[AugmentHook] = None,
              log: Optional[Callable[[str], None]] = None):
    """Run the full recipe; returns (params, metrics rows).

    When out_dir is given, writes metrics.csv, timing.csv and a final
    checkpoint there.
    """
    if len(train_ds) == 0:
        raise EmptySplit("training split has no samples")
    if not np.issubdtype(train_ds.images.dtype, np.floating):
        raise ValueError("train_run expects normalized float images")
    streams = RunStreams(train_cfg.seed)
    params = init_params(model_cfg, streams.init())
    state = adam_init(params)
    n_train = len(train_ds)
    bs = train_cfg.batch_size
    batches = math.ceil(n_train / bs)
    total_steps = train_cfg.epochs * batches
    geom = PatchGeometry(train_ds.images.shape[2], train_ds.images.shape[3],
                         model_cfg.patch)
    grid = grid_coords(geom).coords if model_cfg.sampler_train == GRID else None
    onehot = _onehot(train_ds.labels, model_cfg.n_classes)
    metrics: list[EpochMetrics] = []
    step = 0
    lr = 0.0
    for epoch in range(1, train_cfg.epochs + 1):
        t0 = time.monotonic()
        order = streams.shuffle(epoch).permutation(n_train)
        losses = []
        for bi in range(batches):
            idx = order[bi * bs:(bi + 1) * bs]
            images = train_ds.images[idx]
            labels = onehot[idx]
            if augment_hook is not None:
                images, labels = augment_hook(images, labels,
                                              streams.augment(epoch, bi))
            if train_cfg.mixup_alpha > 0:
                images, labels = mixup(images, labels,
                                       streams.mixup(epoch, bi),
                                       train_cfg.mixup_alpha)
            if grid is not None:
                coords = np.broadcast_to(grid, (images.shape[0],) + grid.shape)
            else:
                coords = np.stack([
                    random_coords(geom, model_cfg.r,
                                  streams.sampler(epoch, bi, j)).coords
                    for j in range(images.shape[0])])
            tokens, pos = _batch_tokens(images, coords, model_cfg)
            logits, _, cache = forward_batch(tokens, pos, params, model_cfg,
                                             want_cache=True)
            loss, dlogits = cross_entropy(logits, labels)
            grads = backward_batch(dlogits, cache, params, model_cfg)
            lr = lr_at(step, total_steps, train_cfg)
            try:
                adam_step(params, grads, state, lr, train_cfg)
            except NonFiniteGradient as e:
                raise NonFiniteGradient(
                    f"epoch {epoch} step {step}: {e}") from e
            losses.append(loss)
            step += 1
        val_top1, val_loss = evaluate(model_cfg, params, val_ds,
                                      eval_seed=train_cfg.seed,
                                      draws=train_cfg.eval_draws)
        row = EpochMetrics(epoch=epoch, train_loss=float(np.mean(losses)),
                           val_loss=val_loss, val_top1=val_top1, lr=lr,
                           wall_time=time.monotonic() - t0)
        metrics.append(row)
        if log is not None:
            log(f"epoch {epoch:3d}/{train_cfg.epochs}  "
                f"train_loss {row.train_loss:.4f}  val_loss {val_loss:.4f}  "
                f"val_top1 {100 * val_top1:.2f}%  lr {lr:.2e}  "
                f"({row.wall_time:.1f}s)")
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(out / "metrics.csv", metrics)
        write_timing_csv(out / "timing.csv", metrics)
        extra = {"train": asdict(train_cfg),
                 "weight_decay_mode": "decoupled" if train_cfg.decoupled_decay
                 else "l2-in-gradient",
                 "rng": {"seed": train_cfg.seed,
                         "epochs_completed": train_cfg.epochs,
                         "steps_completed": step}}
        save_checkpoint(out / "checkpoint", params, model_cfg, extra)
    return params, metrics
