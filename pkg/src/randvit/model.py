"""A small vision transformer with a pluggable tokenizer front-end.

Pipeline: coordinates -> patch extraction -> sin/cos position encoding ->
linear embedding -> pre-norm transformer blocks -> global average pool ->
linear head.  There is no class token; positions live entirely in the
encoding, which is what makes unordered, overlapping random tokens legal
inputs.

The forward pass is written against plain numpy with an explicit cache so
the backward pass (used by the trainer and the finite-difference gradient
checks) is exact rather than approximate.  Everything is batched over
(B, n, D); the public single-sequence operations wrap the batched kernels.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import erf

from .errors import BadCheckpoint, BadConfig, ShapeMismatch
from .posenc import PosEncConfig, encode
from .sampling import (GRID, RANDOM, SAMPLERS, PatchCoords, PatchGeometry,
                       TokenBatch, extract_batch, grid_coords, random_coords)

MODES = ("grid", "A", "B")
_MODE_SAMPLERS = {"grid": (GRID, GRID), "A": (RANDOM, RANDOM), "B": (RANDOM, GRID)}
_LN_EPS = 1e-6

PRESETS = {
    # desk-scale default, trainable in minutes on a CPU
    "tiny": dict(patch=8, dim=128, depth=6, heads=4),
    # the reference shape used for compute accounting
    "vit-s16": dict(patch=16, dim=384, depth=12, heads=6, channels=3, n_classes=1000),
}


@dataclass(frozen=True)
class VitConfig:
    patch: int = 8
    dim: int = 128
    depth: int = 6
    heads: int = 4
    mlp_ratio: float = 4.0
    n_classes: int = 10
    channels: int = 3
    sampler_train: str = GRID
    sampler_eval: str = GRID
    r: float = 1.0
    temperature: float = 10000.0
    dtype: str = "float32"

    def __post_init__(self):
        if min(self.patch, self.dim, self.depth, self.heads,
               self.n_classes, self.channels) < 1:
            raise BadConfig("model dimensions must all be >= 1")
        if self.dim % self.heads:
            raise BadConfig(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.sampler_train not in SAMPLERS or self.sampler_eval not in SAMPLERS:
            raise BadConfig(f"samplers must be in {SAMPLERS}")
        if (self.sampler_train, self.sampler_eval) not in _MODE_SAMPLERS.values():
            raise BadConfig("grid training with random evaluation is not a mode")
        if self.r <= 0:
            raise BadConfig(f"sampling factor must be positive, got {self.r}")
        if self.hidden * 1.0 != self.mlp_ratio * self.dim:
            raise BadConfig(f"mlp_ratio {self.mlp_ratio} * dim {self.dim} not integral")
        if self.dtype not in ("float32", "float64"):
            raise BadConfig(f"dtype must be float32 or float64, got {self.dtype}")
        self.posenc  # validates dim % 4 == 0 (raises BadDim)

    @property
    def posenc(self) -> PosEncConfig:
        return PosEncConfig(dim=self.dim, temperature=self.temperature)

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def hidden(self) -> int:
        return int(round(self.mlp_ratio * self.dim))

    @property
    def mode(self) -> str:
        for name, pair in _MODE_SAMPLERS.items():
            if pair == (self.sampler_train, self.sampler_eval):
                return name
        raise BadConfig("sampler pair matches no mode")  # unreachable post-init

    @property
    def np_dtype(self) -> np.dtype:
        return np.dtype(self.dtype)

    @classmethod
    def from_mode(cls, mode: str, **kwargs) -> "VitConfig":
        if mode not in _MODE_SAMPLERS:
            raise BadConfig(f"mode must be one of {MODES}, got {mode!r}")
        train, evl = _MODE_SAMPLERS[mode]
        return cls(sampler_train=train, sampler_eval=evl, **kwargs)


@dataclass
class ForwardTrace:
    logits: np.ndarray        # (n_classes,)
    attn: np.ndarray          # (depth, heads, n, n), post-softmax
    coords: PatchCoords


def init_params(cfg: VitConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Truncated-normal (std 0.02, cut at 2 std) projections, zero biases,
    unit layer-norm gains.  Parameter order is fixed, so a given stream
    always produces the same initialization."""
    dt = cfg.np_dtype

    def trunc(shape):
        x = rng.standard_normal(shape)
        bad = np.abs(x) > 2.0
        while bad.any():
            x[bad] = rng.standard_normal(int(bad.sum()))
            bad = np.abs(x) > 2.0
        return (0.02 * x).astype(dt)

    d, hid = cfg.dim, cfg.hidden
    p: dict[str, np.ndarray] = {}
    p["embed.w"] = trunc((d, cfg.channels * cfg.patch ** 2))
    p["embed.b"] = np.zeros(d, dtype=dt)
    for i in range(cfg.depth):
        k = f"blocks.{i}."
        p[k + "ln1.g"] = np.ones(d, dtype=dt)
        p[k + "ln1.b"] = np.zeros(d, dtype=dt)
        for proj in ("q", "k", "v", "o"):
            p[k + f"attn.w{proj}"] = trunc((d, d))
            p[k + f"attn.b{proj}"] = np.zeros(d, dtype=dt)
        p[k + "ln2.g"] = np.ones(d, dtype=dt)
        p[k + "ln2.b"] = np.zeros(d, dtype=dt)
        p[k + "mlp.w1"] = trunc((hid, d))
        p[k + "mlp.b1"] = np.zeros(hid, dtype=dt)
        p[k + "mlp.w2"] = trunc((d, hid))
        p[k + "mlp.b2"] = np.zeros(d, dtype=dt)
    p["norm.g"] = np.ones(d, dtype=dt)
    p["norm.b"] = np.zeros(d, dtype=dt)
    p["head.w"] = trunc((cfg.n_classes, d))
    p["head.b"] = np.zeros(cfg.n_classes, dtype=dt)
    return p


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

def _ln_fwd(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    iv = 1.0 / np.sqrt(var + np.asarray(_LN_EPS, dtype=x.dtype))
    xhat = xc * iv
    return xhat * g + b, (xhat, iv)

def _ln_bwd(dy, g, cache):
    xhat, iv = cache
    axes = tuple(range(dy.ndim - 1))
    dg = (dy * xhat).sum(axis=axes)
    db = dy.sum(axis=axes)
    dxhat = dy * g
    dx = iv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
               - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db

def _gelu(x):
    return 0.5 * x * (1.0 + erf(x * np.asarray(np.sqrt(0.5), dtype=x.dtype)))

def _gelu_grad(x):
    phi = 0.5 * (1.0 + erf(x * np.asarray(np.sqrt(0.5), dtype=x.dtype)))
    dens = np.exp(-0.5 * x * x) * np.asarray(1.0 / np.sqrt(2 * np.pi), dtype=x.dtype)
    return phi + x * dens

def _softmax_last(s):
    s = s - s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)
    return s

def _split_heads(x, heads):           # (B, n, D) -> (B, h, n, dh)
    b, n, d = x.shape
    return np.ascontiguousarray(x.reshape(b, n, heads, d // heads).transpose(0, 2, 1, 3))

def _merge_heads(x):                  # (B, h, n, dh) -> (B, n, D)
    b, h, n, dh = x.shape
    return np.ascontiguousarray(x.transpose(0, 2, 1, 3)).reshape(b, n, h * dh)

def _mm_grad(dout, inp):
    # weight gradient of out = inp @ W.T for (B, n, *) activations
    do = dout.reshape(-1, dout.shape[-1])
    xi = inp.reshape(-1, inp.shape[-1])
    return do.T @ xi


def _block_fwd(x, p, prefix, cfg, want_cache):
    g1, b1 = p[prefix + "ln1.g"], p[prefix + "ln1.b"]
    y1, ln1c = _ln_fwd(x, g1, b1)
    q = y1 @ p[prefix + "attn.wq"].T + p[prefix + "attn.bq"]
    k = y1 @ p[prefix + "attn.wk"].T + p[prefix + "attn.bk"]
    v = y1 @ p[prefix + "attn.wv"].T + p[prefix + "attn.bv"]
    qh, kh, vh = (_split_heads(t, cfg.heads) for t in (q, k, v))
    scale = np.asarray(cfg.head_dim ** -0.5, dtype=x.dtype)
    att = _softmax_last(qh @ kh.transpose(0, 1, 3, 2) * scale)
    oc = _merge_heads(att @ vh)
    x1 = x + (oc @ p[prefix + "attn.wo"].T + p[prefix + "attn.bo"])
    y2, ln2c = _ln_fwd(x1, p[prefix + "ln2.g"], p[prefix + "ln2.b"])
    u = y2 @ p[prefix + "mlp.w1"].T + p[prefix + "mlp.b1"]
    a = _gelu(u)
    x2 = x1 + (a @ p[prefix + "mlp.w2"].T + p[prefix + "mlp.b2"])
    cache = (ln1c, y1, qh, kh, vh, att, oc, ln2c, y2, u, a) if want_cache else None
    return x2, att, cache


def _block_bwd(dx2, cache, p, prefix, cfg, grads):
    ln1c, y1, qh, kh, vh, att, oc, ln2c, y2, u, a = cache
    scale = np.asarray(cfg.head_dim ** -0.5, dtype=dx2.dtype)
    # mlp branch
    grads[prefix + "mlp.w2"] = _mm_grad(dx2, a)
    grads[prefix + "mlp.b2"] = dx2.sum(axis=(0, 1))
    da = dx2 @ p[prefix + "mlp.w2"]
    du = da * _gelu_grad(u)
    grads[prefix + "mlp.w1"] = _mm_grad(du, y2)
    grads[prefix + "mlp.b1"] = du.sum(axis=(0, 1))
    dy2 = du @ p[prefix + "mlp.w1"]
    dx1_ln, dg2, db2 = _ln_bwd(dy2, p[prefix + "ln2.g"], ln2c)
    grads[prefix + "ln2.g"] = dg2
    grads[prefix + "ln2.b"] = db2
    dx1 = dx2 + dx1_ln
    # attention branch
    grads[prefix + "attn.wo"] = _mm_grad(dx1, oc)
    grads[prefix + "attn.bo"] = dx1.sum(axis=(0, 1))
    do = _split_heads(dx1 @ p[prefix + "attn.wo"], cfg.heads)
    datt = do @ vh.transpose(0, 1, 3, 2)
    dvh = att.transpose(0, 1, 3, 2) @ do
    ds = att * (datt - (datt * att).sum(axis=-1, keepdims=True))
    dqh = ds @ kh * scale
    dkh = ds.transpose(0, 1, 3, 2) @ qh * scale
    dq, dk, dv = (_merge_heads(t) for t in (dqh, dkh, dvh))
    dy1 = dq @ p[prefix + "attn.wq"] + dk @ p[prefix + "attn.wk"] \
        + dv @ p[prefix + "attn.wv"]
    for name, dt_ in (("q", dq), ("k", dk), ("v", dv)):
        grads[prefix + f"attn.w{name}"] = _mm_grad(dt_, y1)
        grads[prefix + f"attn.b{name}"] = dt_.sum(axis=(0, 1))
    dx_ln, dg1, db1 = _ln_bwd(dy1, p[prefix + "ln1.g"], ln1c)
    grads[prefix + "ln1.g"] = dg1
    grads[prefix + "ln1.b"] = db1
    return dx1 + dx_ln


def forward_batch(tokens: np.ndarray, pos: np.ndarray, params: dict,
                  cfg: VitConfig, want_cache: bool = False,
                  want_attn: bool = False):
    """Run the network on flattened tokens (B, n, C*P*P) with encodings pos.

    Returns (logits (B, K), attns (depth, B, h, n, n) or None, cache or None).
    """
    if tokens.ndim != 3 or tokens.shape[-1] != params["embed.w"].shape[1]:
        raise ShapeMismatch(
            f"tokens {tokens.shape} vs embedder {params['embed.w'].shape}")
    x = tokens @ params["embed.w"].T + params["embed.b"] + pos
    attns = [] if want_attn else None
    caches = [] if want_cache else None
    for i in range(cfg.depth):
        x, att, cache = _block_fwd(x, params, f"blocks.{i}.", cfg, want_cache)
        if want_attn:
            attns.append(att)
        if want_cache:
            caches.append(cache)
    yf, lnfc = _ln_fwd(x, params["norm.g"], params["norm.b"])
    pooled = yf.mean(axis=1)
    logits = pooled @ params["head.w"].T + params["head.b"]
    cache = None
    if want_cache:
        cache = {"tokens": tokens, "blocks": caches, "final": lnfc,
                 "pooled": pooled, "n": tokens.shape[1]}
    return logits, (np.stack(attns) if want_attn else None), cache


def backward_batch(dlogits: np.ndarray, cache: dict, params: dict,
                   cfg: VitConfig) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every parameter, given d(loss)/d(logits)."""
    dlogits = dlogits.astype(cfg.np_dtype, copy=False)
    n = cache["n"]
    grads: dict[str, np.ndarray] = {}
    grads["head.w"] = dlogits.T @ cache["pooled"]
    grads["head.b"] = dlogits.sum(axis=0)
    dpooled = dlogits @ params["head.w"]
    dyf = np.broadcast_to(dpooled[:, None, :] / n,
                          (dpooled.shape[0], n, dpooled.shape[1]))
    dx, dgf, dbf = _ln_bwd(dyf, params["norm.g"], cache["final"])
    grads["norm.g"] = dgf
    grads["norm.b"] = dbf
    for i in reversed(range(cfg.depth)):
        dx = _block_bwd(dx, cache["blocks"][i], params, f"blocks.{i}.", cfg, grads)
    grads["embed.w"] = _mm_grad(dx, cache["tokens"])
    grads["embed.b"] = dx.sum(axis=(0, 1))
    return grads


# ---------------------------------------------------------------------------
# public single-sequence operations
# ---------------------------------------------------------------------------

def embed(tokens: TokenBatch, params: dict) -> np.ndarray:
    """Linear patch embedding: W @ flatten(pixels) + b + position encoding.

    On a grid this equals a stride-P convolution; the flattened form is used
    because random patches are not aligned to any stride grid.
    """
    if tokens.pos is None:
        raise ShapeMismatch("tokens carry no positional encoding")
    n = tokens.pixels.shape[0]
    flat = tokens.pixels.reshape(n, -1)
    w, b = params["embed.w"], params["embed.b"]
    if flat.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"patch vector {flat.shape[1]} vs embedder {w.shape}")
    if tokens.pos.shape != (n, w.shape[0]):
        raise ShapeMismatch(
            f"pos encoding {tokens.pos.shape}, expected {(n, w.shape[0])}")
    return flat @ w.T + b + tokens.pos


def transformer_block(x: np.ndarray, params: dict, index: int,
                      cfg: VitConfig) -> tuple[np.ndarray, np.ndarray]:
    """One pre-norm block on a single sequence (n, D); returns (out, attn)."""
    if x.ndim != 2 or x.shape[1] != cfg.dim:
        raise ShapeMismatch(f"expected (n, {cfg.dim}), got {x.shape}")
    out, att, _ = _block_fwd(x[None], params, f"blocks.{index}.", cfg, False)
    return out[0], att[0]


def sample_coords(geom: PatchGeometry, cfg: VitConfig, phase: str,
                  rng: Optional[np.random.Generator]) -> PatchCoords:
    """Pick the sampler the configured mode prescribes for this phase."""
    if phase not in ("train", "eval"):
        raise BadConfig(f"phase must be train or eval, got {phase!r}")
    sampler = cfg.sampler_train if phase == "train" else cfg.sampler_eval
    if sampler == GRID:
        return grid_coords(geom)
    if rng is None:
        raise BadConfig("random sampler needs a generator")
    return random_coords(geom, cfg.r, rng)


def tokenize(img: np.ndarray, coords: PatchCoords, cfg: VitConfig):
    """Extract + encode one image; returns (flat tokens (n, C*P*P), pos (n, D))."""
    dt = cfg.np_dtype
    pixels = extract_batch(img[None].astype(dt, copy=False),
                           coords.coords[None], cfg.patch)[0]
    pos = encode(coords, cfg.posenc).astype(dt)
    return pixels.reshape(coords.n_tokens, -1), pos


def forward(img: np.ndarray, cfg: VitConfig, params: dict, phase: str,
            rng: Optional[np.random.Generator] = None) -> ForwardTrace:
    """Full pipeline on one normalized image (C, H, W)."""
    if img.ndim != 3 or img.shape[0] != cfg.channels:
        raise ShapeMismatch(
            f"expected ({cfg.channels}, H, W) image, got {img.shape}")
    geom = PatchGeometry(img.shape[1], img.shape[2], cfg.patch)
    coords = sample_coords(geom, cfg, phase, rng)
    flat, pos = tokenize(img, coords, cfg)
    logits, attns, _ = forward_batch(flat[None], pos[None], params, cfg,
                                     want_attn=True)
    return ForwardTrace(logits=logits[0], attn=attns[:, 0], coords=coords)


# ---------------------------------------------------------------------------
# checkpoint container
#
# Deterministic layout (no timestamps, fixed key order):
#   bytes 0..3   magic b"RVT1"
#   bytes 4..7   container version, u32 LE (currently 1)
#   bytes 8..15  header length, u64 LE
#   header       UTF-8 JSON: {"model": config dict, "extra": caller dict,
#                "tensors": [{"name", "dtype", "shape"}, ...]}
#   payload      raw little-endian C-order tensor bytes, in header order
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"RVT1"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: str | Path, params: dict[str, np.ndarray],
                    cfg: VitConfig, extra: Optional[dict] = None) -> None:
    tensors = [{"name": k, "dtype": str(v.dtype), "shape": list(v.shape)}
               for k, v in params.items()]
    header = json.dumps({"model": asdict(cfg), "extra": extra or {},
                         "tensors": tensors}, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(header)))
    buf.write(header)
    for k in params:
        buf.write(np.ascontiguousarray(params[k]).tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path):
    """Read a checkpoint; returns (params, VitConfig, extra dict)."""
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise BadCheckpoint(f"cannot read {path}: {e}") from e
    if len(raw) < 16 or raw[:4] != CHECKPOINT_MAGIC:
        raise BadCheckpoint(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", raw[4:16])
    if version != CHECKPOINT_VERSION:
        raise BadCheckpoint(f"{path}: unsupported container version {version}")
    try:
        header = json.loads(raw[16:16 + hlen].decode())
        cfg = VitConfig(**header["model"])
    except (ValueError, KeyError, TypeError, BadConfig) as e:
        raise BadCheckpoint(f"{path}: corrupt header ({e})") from e
    params: dict[str, np.ndarray] = {}
    off = 16 + hlen
    for desc in header["tensors"]:
        dt = np.dtype(desc["dtype"])
        shape = tuple(desc["shape"])
        nbytes = dt.itemsize * int(np.prod(shape, dtype=np.int64)) if shape else dt.itemsize
        chunk = raw[off:off + nbytes]
        if len(chunk) != nbytes:
            raise BadCheckpoint(f"{path}: tensor {desc['name']} truncated")
        params[desc["name"]] = np.frombuffer(chunk, dtype=dt).reshape(shape).copy()
        off += nbytes
    if off != len(raw):
        raise BadCheckpoint(f"{path}: {len(raw) - off} trailing bytes")
    return params, cfg, header["extra"]
